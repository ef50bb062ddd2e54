#include <catch_amalgamated.hpp>

#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "meta/losses.hpp"

using namespace meta;
using testutil::gradcheck;
using testutil::random_tensor;

namespace {

struct BruteHard {
  std::vector<double> pos, neg;
};

BruteHard brute_hard(const Tensor& f, const std::vector<std::size_t>& labels) {
  const std::size_t N = f.shape[0], D = f.shape[1];
  BruteHard out{std::vector<double>(N, -1.0), std::vector<double>(N, 1e300)};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      if (i == j) continue;
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += (f.data[i * D + d] - f.data[j * D + d]) * (f.data[i * D + d] - f.data[j * D + d]);
      const double dist = std::sqrt(s);
      if (labels[i] == labels[j])
        out.pos[i] = std::max(out.pos[i], dist);
      else
        out.neg[i] = std::min(out.neg[i], dist);
    }
  return out;
}

std::vector<std::size_t> pk_labels(std::size_t P, std::size_t Q) {
  std::vector<std::size_t> l;
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t q = 0; q < Q; ++q) l.push_back(p * 7 + 3);
  return l;
}

}  // namespace

TEST_CASE("cross entropy examples") {
  Tape tape;
  Tensor saturated({2, 3}, 0.0);
  saturated.data[1] = 50;
  saturated.data[3 + 2] = 50;
  const std::vector<std::size_t> labels{1, 2};
  CHECK(cross_entropy(tape.constant(saturated), labels).value().data[0] < 1e-20);
  CHECK(cross_entropy(tape.constant(Tensor({1, 4}, 0.3)), std::vector<std::size_t>{2}).value().data[0] ==
        Catch::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy(tape.constant(Tensor({1, 4}, 0.0)), std::vector<std::size_t>{4}), Error);
}

TEST_CASE("hard distances with duplicated features") {
  Tape tape;
  const double d = 2.5;
  Var f = tape.constant(Tensor({4, 2}, std::vector<double>{0, 0, 0, 0, d, 0, d, 0}));
  HardDistances h = hard_distances(f, std::vector<std::size_t>{0, 0, 1, 1});
  CHECK(h.pos.value().data == std::vector<double>{0, 0, 0, 0});
  CHECK(h.neg.value().data == std::vector<double>{d, d, d, d});
}

TEST_CASE("hard distances match brute force and are permutation equivariant") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> ids(2, 4), per(2, 4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto labels = pk_labels(ids(rng), per(rng));
    const std::size_t N = labels.size();
    if (N > 16) continue;
    Tensor f = random_tensor({N, 3}, rng, -2, 2);
    Tape tape;
    HardDistances h = hard_distances(tape.constant(f), labels);
    BruteHard b = brute_hard(f, labels);
    CHECK(h.pos.value().data == b.pos);
    CHECK(h.neg.value().data == b.neg);

    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor fp({N, 3});
    std::vector<std::size_t> lp(N);
    for (std::size_t i = 0; i < N; ++i) {
      lp[i] = labels[perm[i]];
      for (std::size_t d = 0; d < 3; ++d) fp.data[i * 3 + d] = f.data[perm[i] * 3 + d];
    }
    HardDistances hp = hard_distances(tape.constant(fp), lp);
    for (std::size_t i = 0; i < N; ++i) {
      CHECK(hp.pos.value().data[i] == h.pos.value().data[perm[i]]);
      CHECK(hp.neg.value().data[i] == h.neg.value().data[perm[i]]);
    }
  }
}

TEST_CASE("hard distances name the identity lacking a positive") {
  Tape tape;
  try {
    hard_distances(tape.constant(Tensor({3, 2}, 0.0)), std::vector<std::size_t>{5, 5, 9});
    FAIL("expected rejection");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("identity 9") != std::string::npos);
  }
  CHECK_THROWS_AS(hard_distances(tape.constant(Tensor({2, 2}, 0.0)), std::vector<std::size_t>{1, 1}), Error);
}

TEST_CASE("triplet loss examples") {
  Tape tape;
  const auto labels = std::vector<std::size_t>{0, 0, 1, 1};
  CHECK(triplet_loss(tape.constant(Tensor({4, 2}, 1.7)), labels, 0.3).value().data[0] == 0.3);
  Var sep = tape.constant(Tensor({4, 2}, std::vector<double>{0, 0, 0.1, 0, 5, 5, 5, 5.1}));
  CHECK(triplet_loss(sep, labels, 0.3).value().data[0] == 0.0);
}

TEST_CASE("consistency loss examples") {
  std::mt19937_64 rng(2);
  const auto labels = pk_labels(3, 3);
  Tensor f = random_tensor({9, 4}, rng);
  Tape tape;
  for (auto red : {ConsistencyReduction::per_anchor, ConsistencyReduction::batch_hardest})
    CHECK(consistency_loss(tape.constant(f), tape.constant(f), labels, 0.1, 0.1, red).value().data[0] ==
          Catch::Approx(0.2).epsilon(1e-14));

  // A tight, well separated fexp against a loose fi: both hinges inactive.
  Tensor tight({9, 4}, 0.0), loose({9, 4}, 0.0);
  for (std::size_t i = 0; i < 9; ++i) {
    const double c = static_cast<double>(labels[i]);
    tight.data[i * 4] = 10.0 * c + 0.01 * static_cast<double>(i % 3);
    loose.data[i * 4] = 1.0 * c + 0.3 * static_cast<double>(i % 3);
  }
  CHECK(consistency_loss(tape.constant(tight), tape.constant(loose), labels, 0.1, 0.1).value().data[0] == 0.0);
}

TEST_CASE("consistency gradient reaches fexp only") {
  std::mt19937_64 rng(3);
  const auto labels = pk_labels(3, 2);
  Tape tape;
  Var fe = tape.leaf(random_tensor({6, 3}, rng));
  Var fi = tape.leaf(random_tensor({6, 3}, rng));
  tape.backward(consistency_loss(fe, fi, labels, 0.1, 0.1));
  CHECK_FALSE(fe.grad().empty());
  for (double g : fi.grad()) CHECK(g == 0.0);
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(4);
  const auto labels = pk_labels(3, 3);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor f = random_tensor({9, 4}, rng, -2, 2), g = random_tensor({9, 4}, rng, -2, 2);
    CHECK(gradcheck([&](Tape&, const auto& v) { return triplet_loss(v[0], labels, 0.3); }, {f}) < 1e-4);
    CHECK(gradcheck([&](Tape& t, const auto& v) { return consistency_loss(v[0], t.constant(g), labels, 0.1, 0.1); }, {f}) < 1e-4);
    CHECK(gradcheck([&](Tape& t, const auto& v) {
            return consistency_loss(v[0], t.constant(g), labels, 0.1, 0.1, ConsistencyReduction::batch_hardest);
          },
                    {f}) < 1e-4);
  }
}

TEST_CASE("triplet and consistency are translation invariant") {
  std::mt19937_64 rng(5);
  const auto labels = pk_labels(4, 2);
  Tensor f = random_tensor({8, 3}, rng), g = random_tensor({8, 3}, rng);
  Tensor fs = f, gs = g;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t d = 0; d < 3; ++d) {
      fs.data[i * 3 + d] += 3.0 * static_cast<double>(d) - 1.0;
      gs.data[i * 3 + d] += 3.0 * static_cast<double>(d) - 1.0;
    }
  Tape tape;
  auto val = [&](Var v) { return v.value().data[0]; };
  CHECK(std::abs(val(triplet_loss(tape.constant(f), labels, 0.3)) - val(triplet_loss(tape.constant(fs), labels, 0.3))) < 1e-9);
  CHECK(std::abs(val(consistency_loss(tape.constant(f), tape.constant(g), labels, 0.1, 0.1)) -
                 val(consistency_loss(tape.constant(fs), tape.constant(gs), labels, 0.1, 0.1))) < 1e-9);
}

TEST_CASE("total loss sums its parts") {
  CHECK(total_loss(LossValues{}) == 0.0);
  CHECK(total_loss(LossValues{0.5, 1.0, 0.4, 0.9, 0.2}) == Catch::Approx(3.0).epsilon(1e-15));
  Tape tape;
  LossTerms t;
  t.global_triplet = tape.constant(Tensor({1}, 0.5));
  t.expert_cross = tape.constant(Tensor({1}, 0.9));
  CHECK(total_loss(tape, t).value().data[0] == Catch::Approx(1.4));
  CHECK(total_loss(tape, LossTerms{}).value().data[0] == 0.0);
}
