#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "meta/autograd.hpp"
#include "meta/normalization.hpp"
#include "meta/ops.hpp"

namespace meta {

/// Frechet distance between two diagonal Gaussians:
///   |mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)),  C = Diag(var).
/// With commuting diagonal covariances the trace term is |sqrt(var_a) - sqrt(var_b)|^2.
inline double fid(const NormStats& a, const NormStats& b) {
  require(a.channels() == b.channels(), ErrorKind::shape,
          "fid: channel counts differ (" + std::to_string(a.channels()) + " vs " + std::to_string(b.channels()) + ")");
  a.validate();
  b.validate();
  double d = 0.0;
  for (std::size_t c = 0; c < a.channels(); ++c) {
    const double dm = a.mean[c] - b.mean[c];
    const double ds = std::sqrt(a.var[c]) - std::sqrt(b.var[c]);
    d += dm * dm + ds * ds;
  }
  return d;
}

/// Layer-wise distances between one sample's IN statistics and one expert's
/// BN statistics, one entry per monitored site.
struct RelevanceVector {
  std::vector<double> values;
  std::size_t expert_id = 0;
  std::size_t sample_id = 0;

  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / static_cast<double>(values.size());
  }
};

/// Two fully connected layers L -> H -> 1 with a relu in between; maps a
/// relevance vector to an unnormalized expert weight. One network is shared
/// by all experts.
class AggregationNet {
 public:
  AggregationNet() = default;
  AggregationNet(std::string name, std::size_t inputs, std::size_t hidden, std::mt19937_64& rng)
      : w1(name + ".fc1.weight", Tensor({hidden, inputs})),
        b1(name + ".fc1.bias", Tensor({hidden}, 0.0)),
        w2(name + ".fc2.weight", Tensor({1, hidden})),
        b2(name + ".fc2.bias", Tensor({1}, 0.0)) {
    std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(inputs)));
    for (double& v : w1.value.data) v = n1(rng);
    std::normal_distribution<double> n2(0.0, 0.01);
    for (double& v : w2.value.data) v = n2(rng);
  }

  std::size_t inputs() const { return w1.value.shape.at(1); }
  std::size_t hidden() const { return w1.value.shape.at(0); }

  /// r(N,L) -> w(N,1)
  Var forward(Var r) {
    Tape& t = r.tape();
    require(r.shape().size() == 2 && r.shape()[1] == inputs(), ErrorKind::shape,
            "aggregation net expects relevance of length " + std::to_string(inputs()) + ", got " + shape_str(r.shape()));
    Var h = relu(linear(r, t.param(w1), t.param(b1)));
    return linear(h, t.param(w2), t.param(b2));
  }

  /// Single-vector convenience evaluation.
  double weight(const RelevanceVector& r) {
    require(r.values.size() == inputs(), ErrorKind::shape,
            "aggregation net expects relevance of length " + std::to_string(inputs()) + ", got " +
                std::to_string(r.values.size()));
    Tape t;
    Tape::NoGradGuard ng(t);
    return forward(t.constant(Tensor({1, inputs()}, r.values))).value().data[0];
  }

  void collect_parameters(std::vector<Parameter*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }

  Parameter w1, b1, w2, b2;
};

/// One expert's contribution to a mix: its unnormalized weight w(N,1) and
/// feature f(N,D).
struct ExpertInput {
  std::size_t expert = 0;
  Var weight;
  Var feature;
};

struct ExpertMix {
  Var weights;  // (N, K); excluded expert columns are exactly zero
  Var feature;  // (N, D)
};

/// Softmax-weighted combination of expert features. With `exclude`, that
/// expert is dropped before normalization.
inline ExpertMix mix_experts(std::span<const ExpertInput> experts, std::optional<std::size_t> exclude,
                             std::size_t total_experts) {
  std::vector<const ExpertInput*> part;
  for (const auto& e : experts) {
    require(e.expert < total_experts, ErrorKind::invalid_argument, "mix_experts: expert index out of range");
    if (!exclude || e.expert != *exclude) part.push_back(&e);
  }
  require(!part.empty(), ErrorKind::invalid_argument, "mix_experts: no participating experts after exclusion");
  Tape& t = part.front()->feature.tape();
  const Shape& fs = part.front()->feature.shape();
  require(fs.size() == 2, ErrorKind::shape, "mix_experts: features must be (N,D), got " + shape_str(fs));
  const std::size_t N = fs[0];
  std::vector<Var> cols;
  for (const auto* e : part) {
    require(e->feature.shape() == fs, ErrorKind::shape,
            "mix_experts: feature shape mismatch " + shape_str(fs) + " vs " + shape_str(e->feature.shape()));
    require(e->weight.shape() == Shape{N, 1}, ErrorKind::shape,
            "mix_experts: weight must be (N,1), got " + shape_str(e->weight.shape()));
    cols.push_back(e->weight);
  }
  Var probs = softmax(concat(cols, 1));
  Var feature;
  std::vector<Var> full(total_experts);
  for (std::size_t j = 0; j < part.size(); ++j) {
    Var pj = slice(probs, 1, j, j + 1);
    full[part[j]->expert] = pj;
    Var term = scale_rows(part[j]->feature, pj);
    feature = feature.valid() ? add(feature, term) : term;
  }
  for (auto& c : full)
    if (!c.valid()) c = t.constant(Tensor({N, 1}, 0.0));
  return ExpertMix{concat(full, 1), feature};
}

}  // namespace meta
