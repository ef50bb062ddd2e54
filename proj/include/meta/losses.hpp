#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "meta/autograd.hpp"
#include "meta/ops.hpp"

namespace meta {

/// Identity labels of a single-domain batch in the union label space.
struct BatchLabels {
  std::vector<std::size_t> identity;
  std::size_t domain = 0;
};

/// Batch-hard mining result: per-anchor hardest positive / negative distance
/// and the batch index it came from.
struct HardDistances {
  Var pos;  // (N)
  Var neg;  // (N)
  std::vector<std::size_t> pos_index;
  std::vector<std::size_t> neg_index;
};

inline Var cross_entropy(Var logits, std::span<const std::size_t> labels) { return softmax_cross_entropy(logits, labels); }

/// Euclidean distances; positives exclude the anchor itself. Ties resolve to
/// the lowest batch index.
inline HardDistances hard_distances(Var features, std::span<const std::size_t> labels) {
  require(features.shape().size() == 2, ErrorKind::shape, "hard_distances: features must be (N,D), got " + shape_str(features.shape()));
  const std::size_t N = features.shape()[0];
  require(labels.size() == N, ErrorKind::shape, "hard_distances: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  Var dist = pairwise_distance(features);
  const auto& d = dist.value().data;
  HardDistances out;
  std::vector<std::size_t> pos_flat(N), neg_flat(N);
  out.pos_index.resize(N);
  out.neg_index.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    bool has_pos = false, has_neg = false;
    std::size_t bp = 0, bn = 0;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      const double dij = d[i * N + j];
      if (labels[j] == labels[i]) {
        if (!has_pos || dij > d[i * N + bp]) bp = j;
        has_pos = true;
      } else {
        if (!has_neg || dij < d[i * N + bn]) bn = j;
        has_neg = true;
      }
    }
    require(has_pos, ErrorKind::invalid_argument, "hard_distances: identity " + std::to_string(labels[i]) + " has no positive in batch");
    require(has_neg, ErrorKind::invalid_argument, "hard_distances: identity " + std::to_string(labels[i]) + " has no negative in batch");
    out.pos_index[i] = bp;
    out.neg_index[i] = bn;
    pos_flat[i] = i * N + bp;
    neg_flat[i] = i * N + bn;
  }
  out.pos = gather(dist, std::move(pos_flat));
  out.neg = gather(dist, std::move(neg_flat));
  return out;
}

/// Batch-hard triplet loss: mean over anchors of [margin + d+ - d-]_+.
inline Var triplet_loss(Var features, std::span<const std::size_t> labels, double margin) {
  HardDistances h = hard_distances(features, labels);
  return mean(relu(add_scalar(sub(h.pos, h.neg), margin)));
}

/// How the hardest distances of the consistency loss are reduced.
enum class ConsistencyReduction {
  per_anchor,     // hinge per anchor, then mean
  batch_hardest,  // hardest positive / negative over the whole batch, one hinge each
};

/// [a1 + d+_exp - d+_i]_+ + [a2 + d-_i - d-_exp]_+ with hard distances taken
/// independently on the mixed feature and on the in-domain expert feature.
/// The in-domain feature is treated as a constant target.
inline Var consistency_loss(Var fexp, Var fi, std::span<const std::size_t> labels, double alpha1, double alpha2,
                            ConsistencyReduction reduction = ConsistencyReduction::per_anchor) {
  require(fexp.shape() == fi.shape(), ErrorKind::shape,
          "consistency_loss: feature shapes differ " + shape_str(fexp.shape()) + " vs " + shape_str(fi.shape()));
  HardDistances he = hard_distances(fexp, labels);
  HardDistances hi = hard_distances(detach(fi), labels);
  if (reduction == ConsistencyReduction::per_anchor) {
    Var pos_term = relu(add_scalar(sub(he.pos, hi.pos), alpha1));
    Var neg_term = relu(add_scalar(sub(hi.neg, he.neg), alpha2));
    return add(mean(pos_term), mean(neg_term));
  }
  auto argext = [](const Var& v, bool want_max) {
    const auto& d = v.value().data;
    std::size_t best = 0;
    for (std::size_t i = 1; i < d.size(); ++i)
      if (want_max ? d[i] > d[best] : d[i] < d[best]) best = i;
    return std::vector<std::size_t>{best};
  };
  Var pe = gather(he.pos, argext(he.pos, true));
  Var pi = gather(hi.pos, argext(hi.pos, true));
  Var ne = gather(he.neg, argext(he.neg, false));
  Var ni = gather(hi.neg, argext(hi.neg, false));
  return add(relu(add_scalar(sub(pe, pi), alpha1)), relu(add_scalar(sub(ni, ne), alpha2)));
}

/// The five terms of the training objective; invalid Vars count as zero.
struct LossTerms {
  Var global_triplet;
  Var global_cross;
  Var expert_triplet;
  Var expert_cross;
  Var consistency;
};

inline Var sum_terms(Tape& tape, std::initializer_list<Var> terms) {
  Var acc;
  for (const Var& v : terms) {
    if (!v.valid()) continue;
    acc = acc.valid() ? add(acc, v) : v;
  }
  return acc.valid() ? acc : tape.constant(Tensor({1}, 0.0));
}

/// Base objective plus the episodic consistency term.
inline Var total_loss(Tape& tape, const LossTerms& t) {
  return sum_terms(tape, {t.global_triplet, t.global_cross, t.expert_triplet, t.expert_cross, t.consistency});
}

struct LossValues {
  double global_triplet = 0, global_cross = 0, expert_triplet = 0, expert_cross = 0, consistency = 0;
};

inline double total_loss(const LossValues& v) {
  return (v.global_triplet + v.global_cross + v.expert_triplet + v.expert_cross) + v.consistency;
}

}  // namespace meta
