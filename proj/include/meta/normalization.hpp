#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "meta/autograd.hpp"
#include "meta/ops.hpp"
#include "meta/snapshot.hpp"

namespace meta {

enum class Mode { train, eval };

/// Per-channel Gaussian summary (mean, biased variance).
struct NormStats {
  std::vector<double> mean;
  std::vector<double> var;

  NormStats() = default;
  NormStats(std::vector<double> m, std::vector<double> v) : mean(std::move(m)), var(std::move(v)) { validate(); }

  std::size_t channels() const noexcept { return mean.size(); }

  void validate() const {
    require(mean.size() == var.size(), ErrorKind::shape,
            "NormStats: mean has " + std::to_string(mean.size()) + " channels, var has " + std::to_string(var.size()));
    for (double v : var) require(v >= 0.0, ErrorKind::invalid_argument, "NormStats: negative variance " + std::to_string(v));
  }

  bool operator==(const NormStats&) const = default;
};

/// Per-sample, per-channel statistics of x(N,C,H,W) with divisor H*W. Pure
/// function of the values; never recorded on a tape.
inline std::vector<NormStats> compute_in_stats(const Tensor& x) {
  require(x.rank() == 4, ErrorKind::shape, "compute_in_stats: expected (N,C,H,W), got " + shape_str(x.shape));
  const std::size_t N = x.shape[0], C = x.shape[1], hw = x.shape[2] * x.shape[3];
  std::vector<NormStats> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    out[n].mean.assign(C, 0.0);
    out[n].var.assign(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = x.data.data() + (n * C + c) * hw;
      double mu = 0.0;
      for (std::size_t i = 0; i < hw; ++i) mu += p[i];
      mu /= static_cast<double>(hw);
      double var = 0.0;
      for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
      out[n].mean[c] = mu;
      out[n].var[c] = var / static_cast<double>(hw);
    }
  }
  return out;
}

class BatchNormLayer {
 public:
  static constexpr double kDefaultEps = 1e-5;
  static constexpr double kDefaultMomentum = 0.1;

  BatchNormLayer() = default;

  /// `momentum` of nullopt selects a cumulative average (weight 1/t for the
  /// t-th update).
  BatchNormLayer(std::string name, std::size_t channels, std::optional<double> momentum = kDefaultMomentum,
                 double eps = kDefaultEps)
      : gamma(name + ".gamma", Tensor({channels}, 1.0)),
        beta(name + ".beta", Tensor({channels}, 0.0)),
        running(std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)),
        name_(std::move(name)),
        momentum_(momentum),
        eps_(eps) {
    require(channels > 0, ErrorKind::invalid_argument, "BatchNormLayer needs at least one channel");
    require(eps > 0.0, ErrorKind::invalid_argument, "BatchNormLayer eps must be positive");
    if (momentum) require(*momentum > 0.0 && *momentum <= 1.0, ErrorKind::invalid_argument, "BatchNormLayer momentum must lie in (0,1]");
  }

  const std::string& name() const noexcept { return name_; }
  std::size_t channels() const noexcept { return running.channels(); }
  double eps() const noexcept { return eps_; }
  std::optional<double> momentum() const noexcept { return momentum_; }
  std::uint64_t num_updates() const noexcept { return updates_; }

  /// Train mode normalizes with biased batch statistics and, when
  /// `update_stats` is set, folds them into the running estimate. Eval mode
  /// normalizes with the running estimate.
  Var forward(Var x, Mode mode, bool update_stats = true) {
    Tape& t = x.tape();
    require(x.shape().size() == 4 && x.shape()[1] == channels(), ErrorKind::shape,
            "batch norm '" + name_ + "' expects " + std::to_string(channels()) + " channels, got " + shape_str(x.shape()));
    Var g = t.param(gamma);
    Var b = t.param(beta);
    if (mode == Mode::eval) return batch_norm_fixed(x, g, b, running.mean, running.var, eps_);
    ChannelStats batch;
    Var y = batch_norm_train(x, g, b, eps_, &batch);
    if (update_stats) update_running(batch.mean, batch.var);
    return y;
  }

  void update_running(const std::vector<double>& mean, const std::vector<double>& var) {
    ++updates_;
    const double m = momentum_ ? *momentum_ : 1.0 / static_cast<double>(updates_);
    for (std::size_t c = 0; c < channels(); ++c) {
      running.mean[c] = (1.0 - m) * running.mean[c] + m * mean[c];
      running.var[c] = (1.0 - m) * running.var[c] + m * var[c];
    }
  }

  void collect_parameters(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  void save(Snapshot& snap) const {
    snap.push_back({gamma.name, Tensor(gamma.value.shape, gamma.value.data)});
    snap.push_back({beta.name, Tensor(beta.value.shape, beta.value.data)});
    snap.push_back({name_ + ".running_mean", Tensor({channels()}, running.mean)});
    snap.push_back({name_ + ".running_var", Tensor({channels()}, running.var)});
    snap.push_back({name_ + ".num_updates", Tensor({1}, static_cast<double>(updates_))});
  }

  void load(const Snapshot& snap) {
    auto fetch = [&](const std::string& key) -> const std::vector<double>& {
      const Tensor& t = get_tensor(snap, key);
      require(t.size() == channels(), ErrorKind::data, "snapshot entry '" + key + "' has wrong length");
      return t.data;
    };
    gamma.value.data = fetch(gamma.name);
    beta.value.data = fetch(beta.name);
    running = NormStats(fetch(name_ + ".running_mean"), fetch(name_ + ".running_var"));
    updates_ = static_cast<std::uint64_t>(get_tensor(snap, name_ + ".num_updates").data.at(0));
  }

  Parameter gamma;
  Parameter beta;
  NormStats running;

 private:
  std::string name_;
  std::optional<double> momentum_ = kDefaultMomentum;
  double eps_ = kDefaultEps;
  std::uint64_t updates_ = 0;
};

class InstanceNormLayer {
 public:
  InstanceNormLayer() = default;
  InstanceNormLayer(std::string name, std::size_t channels, double eps = BatchNormLayer::kDefaultEps)
      : gamma(name + ".gamma", Tensor({channels}, 1.0)), beta(name + ".beta", Tensor({channels}, 0.0)), eps_(eps) {
    require(eps > 0.0, ErrorKind::invalid_argument, "InstanceNormLayer eps must be positive");
  }

  std::size_t channels() const noexcept { return gamma.value.size(); }
  double eps() const noexcept { return eps_; }

  Var forward(Var x) {
    Tape& t = x.tape();
    require(x.shape().size() == 4 && x.shape()[1] == channels(), ErrorKind::shape,
            "instance norm '" + gamma.name + "' expects " + std::to_string(channels()) + " channels, got " + shape_str(x.shape()));
    return instance_norm(x, t.param(gamma), t.param(beta), eps_);
  }

  void collect_parameters(std::vector<Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Parameter gamma;
  Parameter beta;

 private:
  double eps_ = BatchNormLayer::kDefaultEps;
};

/// Selects the expert layer `k` (0-based) or the shared global layer.
struct Route {
  enum class Kind { global, expert };
  Kind kind = Kind::global;
  std::size_t expert = 0;

  static Route global() { return {}; }
  static Route to_expert(std::size_t k) { return {Kind::expert, k}; }
  bool is_global() const noexcept { return kind == Kind::global; }
};

/// K domain-specific BN layers plus an optional shared layer at one
/// normalization site. Only the routed layer sees data, so unrouted experts
/// neither update statistics nor receive gradients.
class NormBank {
 public:
  NormBank() = default;
  NormBank(std::string name, std::size_t site_id, std::size_t channels, std::size_t num_experts, bool with_global,
           std::optional<double> momentum = BatchNormLayer::kDefaultMomentum, double eps = BatchNormLayer::kDefaultEps)
      : site_id_(site_id) {
    require(num_experts >= 1, ErrorKind::invalid_argument, "NormBank needs at least one expert");
    for (std::size_t k = 0; k < num_experts; ++k)
      experts_.emplace_back(name + ".expert" + std::to_string(k), channels, momentum, eps);
    if (with_global) global_.emplace(name + ".global", channels, momentum, eps);
  }

  std::size_t site_id() const noexcept { return site_id_; }
  std::size_t num_experts() const noexcept { return experts_.size(); }
  std::size_t channels() const noexcept { return experts_.front().channels(); }
  bool has_global() const noexcept { return global_.has_value(); }

  BatchNormLayer& expert(std::size_t k) {
    check_expert(k);
    return experts_[k];
  }
  const BatchNormLayer& expert(std::size_t k) const {
    check_expert(k);
    return experts_[k];
  }
  BatchNormLayer& global_layer() {
    require(global_.has_value(), ErrorKind::invalid_argument, "norm bank has no global layer");
    return *global_;
  }
  const BatchNormLayer& global_layer() const {
    require(global_.has_value(), ErrorKind::invalid_argument, "norm bank has no global layer");
    return *global_;
  }

  BatchNormLayer& layer(Route r) { return r.is_global() ? global_layer() : expert(r.expert); }

  Var forward(Var x, Route route, Mode mode, bool update_stats = true) {
    return layer(route).forward(x, mode, update_stats);
  }

  void collect_parameters(std::vector<Parameter*>& out) {
    for (auto& e : experts_) e.collect_parameters(out);
    if (global_) global_->collect_parameters(out);
  }

  void save(Snapshot& snap) const {
    for (const auto& e : experts_) e.save(snap);
    if (global_) global_->save(snap);
  }

  void load(const Snapshot& snap) {
    for (auto& e : experts_) e.load(snap);
    if (global_) global_->load(snap);
  }

 private:
  void check_expert(std::size_t k) const {
    require(k < experts_.size(), ErrorKind::invalid_argument,
            "expert route " + std::to_string(k) + " out of range for " + std::to_string(experts_.size()) + " experts");
  }

  std::size_t site_id_ = 0;
  std::vector<BatchNormLayer> experts_;
  std::optional<BatchNormLayer> global_;
};

}  // namespace meta
