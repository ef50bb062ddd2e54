#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "meta/eval.hpp"

using namespace meta;

namespace {

// Full sort of (distance, gallery index) pairs and the textbook formulas.
RetrievalMetrics brute_metrics(const std::vector<double>& dist, const std::vector<std::size_t>& q,
                               const std::vector<std::size_t>& g, std::size_t max_rank) {
  RetrievalMetrics m;
  const std::size_t R = std::min(max_rank, g.size());
  m.cmc.assign(R, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t j = 0; j < g.size(); ++j) order.emplace_back(dist[i * g.size() + j], j);
    std::sort(order.begin(), order.end());
    double precision_sum = 0.0;
    std::size_t hits = 0, first = g.size();
    for (std::size_t r = 0; r < order.size(); ++r)
      if (g[order[r].second] == q[i]) {
        if (hits == 0) first = r;
        ++hits;
        precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
      }
    m.ap.push_back(precision_sum / static_cast<double>(hits));
    total += m.ap.back();
    for (std::size_t r = first; r < R; ++r) m.cmc[r] += 1.0;
  }
  for (double& c : m.cmc) c /= static_cast<double>(q.size());
  m.mAP = total / static_cast<double>(q.size());
  return m;
}

struct Instance {
  std::vector<double> dist;
  std::vector<std::size_t> q, g;
};

Instance random_instance(std::mt19937_64& rng, bool integer_distances) {
  std::uniform_int_distribution<std::size_t> nq(1, 10), ng(1, 20), id(0, 4);
  Instance in;
  const std::size_t G = ng(rng), Q = nq(rng);
  for (std::size_t j = 0; j < G; ++j) in.g.push_back(id(rng));
  std::uniform_int_distribution<std::size_t> pick(0, G - 1);
  for (std::size_t i = 0; i < Q; ++i) in.q.push_back(in.g[pick(rng)]);
  std::uniform_real_distribution<double> d(0, 10);
  std::uniform_int_distribution<int> di(0, 3);
  for (std::size_t k = 0; k < Q * G; ++k) in.dist.push_back(integer_distances ? di(rng) : d(rng));
  return in;
}

GenConfig tiny_gen(double sep, double noise, std::uint64_t seed = 4) {
  GenConfig g;
  g.seed = seed;
  g.domains = 3;
  g.ids_per_domain = 4;
  g.samples_per_id = 4;
  g.query_per_id = 2;
  g.gallery_per_id = 2;
  g.height = g.width = 4;
  g.separation = sep;
  g.noise_sigma = noise;
  return g;
}

ModelConfig tiny_model(std::size_t K) {
  ModelConfig c;
  c.num_experts = K;
  c.stem_width = 4;
  c.backbone_widths = {4, 4};
  c.global_width = 5;
  c.expert_width = 6;
  c.identity_count = 12;
  c.bn_momentum = 1.0;
  c.seed = 3;
  return c;
}

// Momentum-one pass: every expert's running statistics become those of its
// own domain's full train split.
void copy_domain_stats(MetaModel& m, const std::vector<SyntheticDataset>& train) {
  for (std::size_t k = 0; k < train.size(); ++k) {
    Tape tape;
    m.forward_train(tape, train[k].all_images(), k);
  }
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.iters_per_epoch = 3;
  t.warmup_iters = 2;
  t.decay_epochs = {1};
  t.P = 2;
  t.Q = 2;
  return t;
}

}  // namespace

TEST_CASE("retrieval metric examples") {
  SECTION("unique match ranked first") {
    const std::vector<double> d{0.1, 0.9, 0.5};
    const std::vector<std::size_t> q{7}, g{7, 1, 2};
    auto m = retrieval_metrics(d, q, g);
    CHECK(m.mAP == 1.0);
    CHECK(m.cmc == std::vector<double>{1, 1, 1});
  }
  SECTION("match ranked second") {
    const std::vector<double> d{0.2, 0.8};
    const std::vector<std::size_t> q{3}, g{5, 3};
    auto m = retrieval_metrics(d, q, g);
    CHECK(m.mAP == 0.5);
    CHECK(m.cmc == std::vector<double>{0, 1});
  }
  SECTION("ties break by gallery index") {
    const std::vector<double> d{1.0, 1.0};
    const std::vector<std::size_t> q{3}, g{5, 3};
    CHECK(retrieval_metrics(d, q, g).mAP == 0.5);
    const std::vector<std::size_t> g2{3, 5};
    CHECK(retrieval_metrics(d, q, g2).mAP == 1.0);
  }
}

TEST_CASE("metrics match a brute-force reference") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Instance in = random_instance(rng, trial % 2 == 1);
    auto m = retrieval_metrics(in.dist, in.q, in.g);
    auto b = brute_metrics(in.dist, in.q, in.g, 20);
    CHECK(m.mAP == b.mAP);
    CHECK(m.cmc == b.cmc);
    CHECK(m.ap == b.ap);
    for (std::size_t r = 1; r < m.cmc.size(); ++r) CHECK(m.cmc[r] >= m.cmc[r - 1]);
    CHECK(m.mAP >= 0.0);
    CHECK(m.mAP <= 1.0);
  }
}

TEST_CASE("metrics ignore gallery order and feature scale") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    Tensor qf({4, 3}), gf({9, 3});
    std::normal_distribution<double> n(0, 1);
    for (double& v : qf.data) v = n(rng);
    for (double& v : gf.data) v = n(rng);
    std::vector<std::size_t> qid{0, 1, 2, 0}, gid{0, 1, 2, 0, 1, 2, 3, 3, 1};
    auto base = retrieval_metrics(euclidean_distances(qf, gf), qid, gid);

    std::vector<std::size_t> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor gp({9, 3});
    std::vector<std::size_t> gidp(9);
    for (std::size_t i = 0; i < 9; ++i) {
      gidp[i] = gid[perm[i]];
      std::copy_n(gf.data.begin() + static_cast<std::ptrdiff_t>(perm[i] * 3), 3, gp.data.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    auto permuted = retrieval_metrics(euclidean_distances(qf, gp), qid, gidp);
    CHECK(std::abs(permuted.mAP - base.mAP) < 1e-12);
    CHECK(permuted.cmc == base.cmc);

    Tensor qs = qf, gs = gf;
    for (double& v : qs.data) v *= 3.5;
    for (double& v : gs.data) v *= 3.5;
    auto scaled = retrieval_metrics(euclidean_distances(qs, gs), qid, gid);
    CHECK(scaled.ap == base.ap);
    CHECK(scaled.cmc == base.cmc);
  }
}

TEST_CASE("query identity missing from the gallery is named") {
  const std::vector<double> d{0.1, 0.2};
  const std::vector<std::size_t> q{4, 11}, g{4};
  try {
    retrieval_metrics(d, q, g);
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
    CHECK(std::string(e.what()).find("11") != std::string::npos);
  }
}

TEST_CASE("euclidean distances") {
  Tensor a({1, 2}, std::vector<double>{0, 0}), b({2, 2}, std::vector<double>{3, 4, 0, 1});
  CHECK(euclidean_distances(a, b) == std::vector<double>{5, 1});
}

TEST_CASE("relevance accuracy with statistics copied from each domain") {
  const auto data = generate(tiny_gen(4.0, 1.0));
  std::vector<SyntheticDataset> train;
  for (const auto& d : data) train.push_back(d.train);
  MetaModel m(tiny_model(3));
  copy_domain_stats(m, train);
  const std::vector<std::size_t> domains{0, 1, 2};
  CHECK(relevance_accuracy(m, train, domains) >= 0.9);
}

TEST_CASE("relevance accuracy tie rules") {
  SECTION("identical experts pick the first") {
    const auto data = generate(tiny_gen(2.0, 1.0));
    std::vector<SyntheticDataset> train;
    for (const auto& d : data) train.push_back(d.train);
    MetaModel m(tiny_model(3));
    for (std::size_t k = 0; k < 3; ++k) {
      Tape tape;
      m.forward_train(tape, train[0].all_images(), k);
    }
    const std::vector<std::size_t> domains{0, 1, 2};
    CHECK(relevance_accuracy(m, train, domains) == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SECTION("degenerate styles") {
    const auto data = generate(tiny_gen(0.0, 0.0));
    std::vector<SyntheticDataset> train;
    for (const auto& d : data) train.push_back(d.train);
    MetaModel m(tiny_model(3));
    // Every domain's statistics come from the same union batch.
    SyntheticDataset all = train[0];
    for (std::size_t k = 1; k < 3; ++k) all.samples.insert(all.samples.end(), train[k].samples.begin(), train[k].samples.end());
    for (std::size_t k = 0; k < 3; ++k) {
      Tape tape;
      m.forward_train(tape, all.all_images(), k);
    }
    const std::vector<std::size_t> domains{0, 1, 2};
    CHECK(relevance_accuracy(m, train, domains) == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
  }
}

TEST_CASE("evaluate reports consistent features and weights") {
  const auto data = generate(tiny_gen(2.0, 1.0));
  Benchmark b = make_benchmark(data, 2);
  CHECK(b.source_domains == std::vector<std::size_t>{0, 1});
  MetaModel m(tiny_model(2));
  copy_domain_stats(m, b.sources);
  RetrievalReport fin = evaluate(m, b.query, b.gallery, FeatureMode::final);
  CHECK(fin.per_query_weights.size() == b.query.samples.size());
  for (const auto& row : fin.per_query_weights) CHECK(std::abs(row[0] + row[1] - 1.0) < 1e-9);
  CHECK(fin.cmc.size() == std::min<std::size_t>(20, b.gallery.samples.size()));
  auto j = to_json(fin);
  CHECK(j["feature_mode"] == "final");
  CHECK(j.contains("mAP"));
  CHECK(cmc_csv(fin).rfind("rank,accuracy", 0) == 0);

  ModelConfig no_exp = tiny_model(2);
  no_exp.expert_branch = false;
  MetaModel ne(no_exp);
  copy_domain_stats(ne, b.sources);
  RetrievalReport a = evaluate(ne, b.query, b.gallery, FeatureMode::final);
  RetrievalReport g = evaluate(ne, b.query, b.gallery, FeatureMode::f_global);
  CHECK(a.mAP == g.mAP);
  CHECK(a.cmc == g.cmc);
  CHECK_THROWS_AS(evaluate(ne, b.query, b.gallery, FeatureMode::f_exp), Error);
  CHECK(parse_feature_mode("f_global") == FeatureMode::f_global);
  CHECK_THROWS_AS(parse_feature_mode("both"), Error);
}

TEST_CASE("ablation suite shape") {
  const auto data = generate(tiny_gen(2.0, 1.0));
  Benchmark b = make_benchmark(data, 0);
  const auto variants = standard_ablation_variants(tiny_model(3), tiny_train());
  REQUIRE(variants.size() == 11);
  const auto rows = run_ablation(variants, b);
  REQUIRE(rows.size() == variants.size());
  std::map<std::string, AblationRow> by_name;
  for (const auto& r : rows) {
    by_name[r.name] = r;
    CHECK(r.report.mAP >= 0.0);
    CHECK(r.report.mAP <= 1.0);
    CHECK_FALSE(r.report.cmc.empty());
  }
  CHECK(by_name.size() == rows.size());
  CHECK(by_name["w/o expert branch"].final_dim == 5);
  CHECK(by_name["w/o global branch"].final_dim == 6);
  CHECK(by_name["META"].final_dim == 11);
  CHECK(by_name["w/o aggregation module"].mixing_parameter_count == 0);
  CHECK(by_name["META"].mixing_parameter_count > 0);
  CHECK(by_name["META"].report.mAP == by_name["L_base+L_consis"].report.mAP);
  const std::string table = render_ablation_table(rows);
  for (const auto& v : variants) CHECK(table.find(v.name) != std::string::npos);
  CHECK(to_json(rows).size() == rows.size());
}
