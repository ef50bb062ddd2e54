#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "meta/data.hpp"
#include "meta/model.hpp"
#include "meta/trainer.hpp"

namespace meta {

enum class FeatureMode { final, f_global, f_exp };

inline std::string to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::final: return "final";
    case FeatureMode::f_global: return "f_global";
    case FeatureMode::f_exp: return "f_exp";
  }
  return "?";
}

inline FeatureMode parse_feature_mode(const std::string& s) {
  if (s == "final") return FeatureMode::final;
  if (s == "f_global") return FeatureMode::f_global;
  if (s == "f_exp") return FeatureMode::f_exp;
  fail(ErrorKind::invalid_argument, "unknown feature mode '" + s + "' (expected final, f_global or f_exp)");
}

struct RetrievalMetrics {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[r-1] = fraction of queries matched within top r
  std::vector<double> ap;   // per query
};

/// mAP and CMC from a (queries x gallery) distance matrix. Gallery order
/// ties break by gallery index.
inline RetrievalMetrics retrieval_metrics(std::span<const double> dist, std::span<const std::size_t> query_ids,
                                          std::span<const std::size_t> gallery_ids, std::size_t max_rank = 20) {
  const std::size_t Q = query_ids.size(), G = gallery_ids.size();
  require(Q > 0 && G > 0, ErrorKind::invalid_argument, "retrieval needs at least one query and one gallery sample");
  require(dist.size() == Q * G, ErrorKind::shape, "distance matrix does not match query/gallery sizes");
  std::set<std::size_t> gallery_set(gallery_ids.begin(), gallery_ids.end());
  std::vector<std::size_t> missing;
  for (std::size_t id : query_ids)
    if (!gallery_set.count(id)) missing.push_back(id);
  if (!missing.empty()) {
    std::string msg = "query identities absent from gallery:";
    for (std::size_t id : std::set<std::size_t>(missing.begin(), missing.end())) msg += " " + std::to_string(id);
    fail(ErrorKind::data, msg);
  }
  const std::size_t R = std::min(max_rank, G);
  RetrievalMetrics out;
  out.cmc.assign(R, 0.0);
  out.ap.resize(Q);
  std::vector<std::size_t> order(G);
  for (std::size_t q = 0; q < Q; ++q) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = dist.data() + q * G;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    std::size_t hits = 0, first = G;
    double ap = 0.0;
    for (std::size_t r = 0; r < G; ++r) {
      if (gallery_ids[order[r]] != query_ids[q]) continue;
      ++hits;
      if (first == G) first = r;
      ap += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    out.ap[q] = ap / static_cast<double>(hits);
    for (std::size_t r = first; r < R; ++r) out.cmc[r] += 1.0;
  }
  for (double& c : out.cmc) c /= static_cast<double>(Q);
  out.mAP = std::accumulate(out.ap.begin(), out.ap.end(), 0.0) / static_cast<double>(Q);
  return out;
}

inline std::vector<double> euclidean_distances(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[1], ErrorKind::shape,
          "distance: feature shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) + " are incompatible");
  const std::size_t n = a.shape[0], m = b.shape[0], d = a.shape[1];
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a.data[i * d + k] - b.data[j * d + k];
        s += diff * diff;
      }
      out[i * m + j] = std::sqrt(s);
    }
  return out;
}

/// Eval-mode features of a whole dataset.
struct Embeddings {
  std::optional<Tensor> f_global, f_exp, weights;
  Tensor final;

  const Tensor& get(FeatureMode m) const {
    switch (m) {
      case FeatureMode::final: return final;
      case FeatureMode::f_global:
        require(f_global.has_value(), ErrorKind::invalid_argument, "model has no global branch");
        return *f_global;
      case FeatureMode::f_exp:
        require(f_exp.has_value(), ErrorKind::invalid_argument, "model has no expert branch");
        return *f_exp;
    }
    return final;
  }
};

namespace detail {

inline void append_rows(std::optional<Tensor>& dst, const Tensor& src) {
  if (!dst) {
    dst = Tensor(src.shape, src.data);
    return;
  }
  dst->shape[0] += src.shape[0];
  dst->data.insert(dst->data.end(), src.data.begin(), src.data.end());
}

}  // namespace detail

inline Embeddings extract_embeddings(MetaModel& model, const SyntheticDataset& ds, std::size_t batch_size = 64) {
  require(!ds.samples.empty(), ErrorKind::data, "cannot embed an empty dataset");
  std::optional<Tensor> fg, fe, w, fin;
  for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
    const std::size_t end = std::min(ds.samples.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    Tape::NoGradGuard ng(tape);
    EmbeddingOutput out = model.forward_eval(tape, ds.images(idx));
    if (out.f_global.valid()) detail::append_rows(fg, out.f_global.value());
    if (out.f_exp.valid()) detail::append_rows(fe, out.f_exp.value());
    if (out.mix) detail::append_rows(w, out.mix->weights.value());
    detail::append_rows(fin, out.final.value());
  }
  return Embeddings{fg, fe, w, *fin};
}

struct RetrievalReport {
  std::string feature_mode = "final";
  double mAP = 0.0;
  std::vector<double> cmc;
  std::vector<std::vector<double>> per_query_weights;  // queries x K
  std::optional<double> relevance_accuracy;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

inline nlohmann::json to_json(const RetrievalReport& r) {
  nlohmann::json j{{"feature_mode", r.feature_mode}, {"mAP", r.mAP}, {"rank1", r.rank1()}, {"cmc", r.cmc}};
  j["relevance_accuracy"] = r.relevance_accuracy ? nlohmann::json(*r.relevance_accuracy) : nlohmann::json(nullptr);
  if (!r.per_query_weights.empty()) {
    std::vector<double> mean(r.per_query_weights.front().size(), 0.0);
    for (const auto& row : r.per_query_weights)
      for (std::size_t k = 0; k < row.size(); ++k) mean[k] += row[k] / static_cast<double>(r.per_query_weights.size());
    j["mean_expert_weights"] = mean;
  }
  return j;
}

inline std::string cmc_csv(const RetrievalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "rank,accuracy\n";
  for (std::size_t i = 0; i < r.cmc.size(); ++i) os << i + 1 << ',' << r.cmc[i] << '\n';
  return os.str();
}

inline std::string weights_csv(const RetrievalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "query";
  const std::size_t K = r.per_query_weights.empty() ? 0 : r.per_query_weights.front().size();
  for (std::size_t k = 0; k < K; ++k) os << ",w" << k;
  os << '\n';
  for (std::size_t q = 0; q < r.per_query_weights.size(); ++q) {
    os << q;
    for (double v : r.per_query_weights[q]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

inline std::vector<std::size_t> identities_of(const SyntheticDataset& ds) {
  std::vector<std::size_t> ids;
  for (const auto& s : ds.samples) ids.push_back(s.identity);
  return ids;
}

inline RetrievalReport evaluate(MetaModel& model, const SyntheticDataset& query, const SyntheticDataset& gallery, FeatureMode mode,
                                std::size_t max_rank = 20) {
  Embeddings qe = extract_embeddings(model, query);
  Embeddings ge = extract_embeddings(model, gallery);
  const auto dist = euclidean_distances(qe.get(mode), ge.get(mode));
  const auto m = retrieval_metrics(dist, identities_of(query), identities_of(gallery), max_rank);
  RetrievalReport r;
  r.feature_mode = to_string(mode);
  r.mAP = m.mAP;
  r.cmc = m.cmc;
  if (qe.weights) {
    const std::size_t K = qe.weights->shape[1];
    for (std::size_t q = 0; q < qe.weights->shape[0]; ++q)
      r.per_query_weights.emplace_back(qe.weights->data.begin() + static_cast<std::ptrdiff_t>(q * K),
                                       qe.weights->data.begin() + static_cast<std::ptrdiff_t>((q + 1) * K));
  }
  return r;
}

/// Fraction of samples whose lowest mean relevance belongs to the expert of
/// their own domain. `expert_domains[k]` is the dataset domain of expert k;
/// ties go to the lowest expert index.
inline double relevance_accuracy(MetaModel& model, const std::vector<SyntheticDataset>& samples,
                                 std::span<const std::size_t> expert_domains, std::size_t batch_size = 64) {
  require(expert_domains.size() == model.num_experts(), ErrorKind::invalid_argument, "expert/domain map does not match K");
  std::size_t total = 0, correct = 0;
  for (const auto& ds : samples) {
    for (std::size_t start = 0; start < ds.samples.size(); start += batch_size) {
      const std::size_t end = std::min(ds.samples.size(), start + batch_size);
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      const Tensor x = ds.images(idx);
      std::vector<std::vector<RelevanceVector>> rel;
      for (std::size_t k = 0; k < model.num_experts(); ++k) rel.push_back(model.collect_relevance(x, k));
      for (std::size_t n = 0; n < idx.size(); ++n) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < model.num_experts(); ++k)
          if (rel[k][n].mean() < rel[best][n].mean()) best = k;
        ++total;
        if (expert_domains[best] == ds.samples[idx[n]].domain) ++correct;
      }
    }
  }
  require(total > 0, ErrorKind::data, "relevance accuracy needs at least one sample");
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Consistency loss of the mixture of the other K-1 experts against expert
/// `expert` on fixed PK batches drawn from `ds`, every route in eval mode.
inline double heldout_consistency(MetaModel& model, const SyntheticDataset& ds, std::size_t expert, const TrainConfig& cfg,
                                  std::size_t batches = 4, std::uint64_t seed = 0) {
  require(model.num_experts() >= 2, ErrorKind::invalid_argument, "consistency needs at least two experts");
  require(batches > 0, ErrorKind::invalid_argument, "consistency needs at least one batch");
  double total = 0.0;
  for (std::size_t b = 0; b < batches; ++b) {
    auto rng = detail::keyed_rng(seed, 5, b);
    PKBatch batch = sample_pk_batch(ds, cfg.P, cfg.Q, rng);
    Tape tape;
    Tape::NoGradGuard ng(tape);
    Var fi = model.expert_feature(tape, batch.images, expert);
    std::vector<ExpertInput> inputs;
    for (std::size_t k = 0; k < model.num_experts(); ++k) {
      if (k == expert) continue;
      std::vector<Tensor> trace;
      Var f = model.expert_feature(tape, batch.images, k, &trace);
      inputs.push_back({k, model.expert_weight_var(tape, model.relevance_from_trace(trace, k)), f});
    }
    ExpertMix mix = mix_experts(inputs, expert, model.num_experts());
    Var l = consistency_loss(mix.feature, fi, batch.labels.identity, cfg.alpha1, cfg.alpha2, cfg.consistency_reduction);
    total += l.value().data[0];
  }
  return total / static_cast<double>(batches);
}

// ------------------------------------------------------------------ ablation

struct AblationVariant {
  std::string name;
  ModelConfig model;
  TrainConfig train;
};

struct AblationRow {
  std::string name;
  RetrievalReport report;
  std::size_t parameter_count = 0;
  std::size_t mixing_parameter_count = 0;  // learned parameters used to weight experts
  std::size_t final_dim = 0;
};

/// Source/target split of a generated benchmark for one held-out domain.
struct Benchmark {
  std::vector<SyntheticDataset> sources;
  std::vector<std::size_t> source_domains;
  SyntheticDataset query, gallery;
  std::size_t target_domain = 0;
};

inline Benchmark make_benchmark(const std::vector<DomainData>& data, std::size_t target_domain) {
  require(target_domain < data.size(), ErrorKind::invalid_argument, "target domain out of range");
  Benchmark b;
  b.target_domain = target_domain;
  for (const auto& d : data) {
    if (d.spec.domain_id == target_domain) {
      b.query = d.query;
      b.gallery = d.gallery;
    } else {
      b.sources.push_back(d.train);
      b.source_domains.push_back(d.spec.domain_id);
    }
  }
  require(!b.sources.empty(), ErrorKind::data, "benchmark needs at least one source domain");
  return b;
}

/// The ablation variants: full model, branch/module removals, global-branch
/// normalization layouts, and objective variants.
inline std::vector<AblationVariant> standard_ablation_variants(const ModelConfig& base_model, const TrainConfig& base_train) {
  std::vector<AblationVariant> v;
  auto add = [&](std::string name, auto&& edit) {
    AblationVariant a{std::move(name), base_model, base_train};
    edit(a);
    v.push_back(std::move(a));
  };
  add("META", [](AblationVariant&) {});
  add("w/o global branch", [](AblationVariant& a) { a.model.global_branch = false; });
  add("w/o expert branch", [](AblationVariant& a) { a.model.expert_branch = false; });
  add("w/o aggregation module", [](AblationVariant& a) { a.model.aggregation_module = false; });
  add("BN-BN", [](AblationVariant& a) { a.model.global_variant = GlobalVariant::bn_bn; });
  add("BN-IBN", [](AblationVariant& a) { a.model.global_variant = GlobalVariant::bn_ibn; });
  add("IN-IN", [](AblationVariant& a) { a.model.global_variant = GlobalVariant::in_in; });
  add("L_base", [](AblationVariant& a) { a.train.loss_variant = LossVariant::base; });
  add("L_base+L_cross", [](AblationVariant& a) { a.train.loss_variant = LossVariant::cross; });
  add("L_base+L_tri", [](AblationVariant& a) { a.train.loss_variant = LossVariant::triplet; });
  add("L_base+L_consis", [](AblationVariant& a) { a.train.loss_variant = LossVariant::consistency; });
  return v;
}

/// Trains and evaluates one configuration on the benchmark.
inline AblationRow run_variant(const AblationVariant& v, const Benchmark& bench, FeatureMode mode = FeatureMode::final) {
  ModelConfig mc = v.model;
  mc.num_experts = bench.sources.size();
  MetaModel model(mc);
  TrainState state;
  fit(model, bench.sources, v.train, state);
  AblationRow row;
  row.name = v.name;
  row.report = evaluate(model, bench.query, bench.gallery, mode);
  row.parameter_count = model.parameter_count();
  if (model.has_aggregation())
    for (Parameter* p : model.parameters())
      if (p->name.rfind("aggregation.", 0) == 0) row.mixing_parameter_count += p->size();
  row.final_dim = model.final_dim();
  return row;
}

/// Runs every variant under identical seeds; identical configurations train once.
inline std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const Benchmark& bench) {
  std::vector<AblationRow> rows;
  std::map<std::string, AblationRow> cache;
  for (const auto& v : variants) {
    const std::string key = to_json(v.model).dump() + to_json(v.train).dump();
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, run_variant(v, bench)).first;
    AblationRow row = it->second;
    row.name = v.name;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string render_ablation_table(const std::vector<AblationRow>& rows) {
  std::size_t w = 7;
  for (const auto& r : rows) w = std::max(w, r.name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w)) << "Variant" << "  " << std::right << std::setw(7) << "mAP" << "  "
     << std::setw(7) << "Rank-1" << "  " << std::setw(7) << "dim" << "  " << std::setw(10) << "params" << '\n';
  os << std::string(w + 2 + 7 + 2 + 7 + 2 + 7 + 2 + 10, '-') << '\n';
  os << std::fixed << std::setprecision(1);
  for (const auto& r : rows)
    os << std::left << std::setw(static_cast<int>(w)) << r.name << "  " << std::right << std::setw(7) << 100.0 * r.report.mAP << "  "
       << std::setw(7) << 100.0 * r.report.rank1() << "  " << std::setw(7) << r.final_dim << "  " << std::setw(10)
       << r.parameter_count << '\n';
  return os.str();
}

inline nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows)
    j.push_back({{"variant", r.name},
                 {"mAP", r.report.mAP},
                 {"rank1", r.report.rank1()},
                 {"final_dim", r.final_dim},
                 {"parameter_count", r.parameter_count},
                 {"mixing_parameter_count", r.mixing_parameter_count},
                 {"report", to_json(r.report)}});
  return j;
}

}  // namespace meta
