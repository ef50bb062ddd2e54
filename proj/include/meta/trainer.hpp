#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "meta/data.hpp"
#include "meta/losses.hpp"
#include "meta/model.hpp"
#include "meta/snapshot.hpp"

namespace meta {

/// What replaces (or keeps) the consistency term of the objective.
enum class LossVariant {
  base,         // no episodic term
  cross,        // cross-entropy on the mixed feature
  triplet,      // triplet loss on the mixed feature
  consistency,  // hardest-distance consistency with the in-domain expert
};

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::base: return "base";
    case LossVariant::cross: return "cross";
    case LossVariant::triplet: return "triplet";
    case LossVariant::consistency: return "consistency";
  }
  return "?";
}

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "base") return LossVariant::base;
  if (s == "cross") return LossVariant::cross;
  if (s == "triplet") return LossVariant::triplet;
  if (s == "consistency") return LossVariant::consistency;
  fail(ErrorKind::invalid_argument, "unknown loss variant '" + s + "' (expected base, cross, triplet or consistency)");
}

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t iters_per_epoch = 60;
  double base_lr = 3e-4;
  std::size_t warmup_iters = 100;
  std::vector<std::size_t> decay_epochs{10, 18};
  double decay_factor = 0.1;
  double alpha1 = 0.1;
  double alpha2 = 0.1;
  double triplet_margin = 0.3;
  std::size_t P = 8;
  std::size_t Q = 4;
  std::uint64_t seed = 0;
  LossVariant loss_variant = LossVariant::consistency;
  ConsistencyReduction consistency_reduction = ConsistencyReduction::per_anchor;
  double aggregation_lr_scale = 1.0;
  bool sequential_updates = false;

  void validate() const {
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      require(decay_epochs[i] < epochs || epochs == 0, ErrorKind::invalid_argument, "decay epochs must be < epochs");
      if (i) require(decay_epochs[i] > decay_epochs[i - 1], ErrorKind::invalid_argument, "decay epochs must be strictly increasing");
    }
    require(base_lr >= 0.0 && decay_factor > 0.0, ErrorKind::invalid_argument, "learning rate settings must be positive");
    require(P >= 2 && Q >= 2, ErrorKind::invalid_argument, "PK batches need P >= 2 and Q >= 2 for triplet mining");
    require(iters_per_epoch >= 1, ErrorKind::invalid_argument, "iters_per_epoch must be >= 1");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return nlohmann::json{{"epochs", c.epochs},
                        {"iters_per_epoch", c.iters_per_epoch},
                        {"base_lr", c.base_lr},
                        {"warmup_iters", c.warmup_iters},
                        {"decay_epochs", c.decay_epochs},
                        {"decay_factor", c.decay_factor},
                        {"alpha1", c.alpha1},
                        {"alpha2", c.alpha2},
                        {"triplet_margin", c.triplet_margin},
                        {"P", c.P},
                        {"Q", c.Q},
                        {"seed", c.seed},
                        {"loss_variant", to_string(c.loss_variant)},
                        {"consistency_reduction",
                         c.consistency_reduction == ConsistencyReduction::per_anchor ? "per_anchor" : "batch_hardest"},
                        {"aggregation_lr_scale", c.aggregation_lr_scale},
                        {"sequential_updates", c.sequential_updates}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.iters_per_epoch = j.value("iters_per_epoch", c.iters_per_epoch);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_iters = j.value("warmup_iters", c.warmup_iters);
  c.decay_epochs = j.value("decay_epochs", c.decay_epochs);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.alpha1 = j.value("alpha1", c.alpha1);
  c.alpha2 = j.value("alpha2", c.alpha2);
  c.triplet_margin = j.value("triplet_margin", c.triplet_margin);
  c.P = j.value("P", c.P);
  c.Q = j.value("Q", c.Q);
  c.seed = j.value("seed", c.seed);
  c.loss_variant = parse_loss_variant(j.value("loss_variant", to_string(c.loss_variant)));
  const std::string red = j.value("consistency_reduction", std::string("per_anchor"));
  require(red == "per_anchor" || red == "batch_hardest", ErrorKind::invalid_argument,
          "unknown consistency reduction '" + red + "' (expected per_anchor or batch_hardest)");
  c.consistency_reduction = red == "per_anchor" ? ConsistencyReduction::per_anchor : ConsistencyReduction::batch_hardest;
  c.aggregation_lr_scale = j.value("aggregation_lr_scale", c.aggregation_lr_scale);
  c.sequential_updates = j.value("sequential_updates", c.sequential_updates);
  return c;
}

/// Linear warmup from base/10 to base over `warmup_iters`, times
/// decay_factor for every decay epoch already reached.
inline double lr_at(std::size_t step, std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.base_lr;
  if (step < cfg.warmup_iters) {
    const double frac = static_cast<double>(step) / static_cast<double>(cfg.warmup_iters);
    lr = cfg.base_lr / 10.0 + (cfg.base_lr - cfg.base_lr / 10.0) * frac;
  }
  for (std::size_t e : cfg.decay_epochs)
    if (epoch >= e) lr *= cfg.decay_factor;
  return lr;
}

/// Adam with per-parameter step counts. Parameters outside `touched` keep
/// their value and moments untouched for the step.
class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  struct Slot {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };

  void step(const std::vector<Parameter*>& params, const std::unordered_set<const Parameter*>& touched, double lr,
            const std::function<double(const Parameter&)>& lr_scale = {}) {
    for (Parameter* p : params) {
      if (!touched.count(p)) continue;
      const double scale = lr_scale ? lr_scale(*p) : 1.0;
      if (scale == 0.0) continue;
      Slot& s = slots_[p->name];
      if (s.m.empty()) {
        s.m.assign(p->size(), 0.0);
        s.v.assign(p->size(), 0.0);
      }
      ++s.t;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
      const double a = lr * scale;
      auto& w = p->value.data;
      const auto& g = p->value.grad;
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g[i];
        s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= a * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
      }
    }
  }

  const std::map<std::string, Slot>& slots() const noexcept { return slots_; }

  void save(Snapshot& snap) const {
    for (const auto& [name, s] : slots_) {
      snap.push_back({"optim.m." + name, Tensor({s.m.size()}, s.m)});
      snap.push_back({"optim.v." + name, Tensor({s.v.size()}, s.v)});
      snap.push_back({"optim.t." + name, Tensor({1}, static_cast<double>(s.t))});
    }
  }

  void load(const Snapshot& snap) {
    slots_.clear();
    const std::string pm = "optim.m.";
    for (const auto& e : snap) {
      if (e.name.rfind(pm, 0) != 0) continue;
      const std::string name = e.name.substr(pm.size());
      Slot s;
      s.m = e.tensor.data;
      s.v = get_tensor(snap, "optim.v." + name).data;
      s.t = static_cast<std::uint64_t>(get_tensor(snap, "optim.t." + name).data.at(0));
      slots_[name] = std::move(s);
    }
  }

 private:
  std::map<std::string, Slot> slots_;
};

struct HistoryRow {
  std::size_t step = 0, epoch = 0;
  double lr = 0.0;
  LossValues loss;
  double total = 0.0;
  std::size_t domain = 0;
};

inline std::string history_csv_header() { return "step,epoch,lr,Lg_tri,Lg_cross,Le_tri,Le_cross,L_consis,L_total"; }

inline std::string to_csv(const HistoryRow& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss.global_triplet << ',' << r.loss.global_cross << ','
     << r.loss.expert_triplet << ',' << r.loss.expert_cross << ',' << r.loss.consistency << ',' << r.total;
  return os.str();
}

struct TrainState {
  static constexpr std::size_t kHistoryCapacity = 1 << 16;

  std::size_t step = 0;
  double lr = 0.0;
  Adam optimizer;
  std::deque<HistoryRow> history;  // bounded; oldest rows drop first

  void push(const HistoryRow& r) {
    history.push_back(r);
    if (history.size() > kHistoryCapacity) history.pop_front();
  }
};

/// Losses of one step, both as tape values and as plain numbers.
struct StepLosses {
  LossTerms terms;
  Var total;
  LossValues values;
};

namespace detail {

inline double scalar(const Var& v) { return v.valid() ? v.value().data[0] : 0.0; }

}  // namespace detail

inline StepLosses compute_losses(MetaModel& model, const TrainForward& fwd, const BatchLabels& labels, const TrainConfig& cfg,
                                 Tape& tape) {
  StepLosses out;
  const auto& y = labels.identity;
  if (fwd.f_global.valid()) {
    out.terms.global_triplet = triplet_loss(fwd.f_global, y, cfg.triplet_margin);
    out.terms.global_cross = cross_entropy(fwd.logits_global, y);
  }
  if (fwd.f_domain.valid()) {
    out.terms.expert_triplet = triplet_loss(fwd.f_domain, y, cfg.triplet_margin);
    out.terms.expert_cross = cross_entropy(fwd.logits_domain, y);
  }
  if (fwd.mix) {
    switch (cfg.loss_variant) {
      case LossVariant::base: break;
      case LossVariant::consistency:
        out.terms.consistency = consistency_loss(fwd.mix->feature, fwd.f_domain, y, cfg.alpha1, cfg.alpha2, cfg.consistency_reduction);
        break;
      case LossVariant::triplet: out.terms.consistency = triplet_loss(fwd.mix->feature, y, cfg.triplet_margin); break;
      case LossVariant::cross:
        out.terms.consistency = cross_entropy(model.expert_logits_frozen(fwd.mix->feature), y);
        break;
    }
  }
  out.total = total_loss(tape, out.terms);
  out.values = LossValues{detail::scalar(out.terms.global_triplet), detail::scalar(out.terms.global_cross),
                          detail::scalar(out.terms.expert_triplet), detail::scalar(out.terms.expert_cross),
                          detail::scalar(out.terms.consistency)};
  return out;
}

/// Parameters that received a non-zero gradient in the last backward pass.
inline std::unordered_set<const Parameter*> touched_parameters(MetaModel& model) {
  std::unordered_set<const Parameter*> out;
  for (Parameter* p : model.parameters()) {
    bool any = false;
    for (double g : p->value.grad)
      if (g != 0.0) {
        any = true;
        break;
      }
    if (any) out.insert(p);
  }
  return out;
}

struct StepMetrics {
  std::size_t expert = 0;
  double lr = 0.0;
  LossValues loss;
  double total = 0.0;
};

/// One iteration of episodic training on a single-domain batch routed to
/// expert `expert`.
inline StepMetrics train_step(MetaModel& model, Adam& optimizer, const PKBatch& batch, std::size_t expert, const TrainConfig& cfg,
                              double lr, std::size_t step_index = 0) {
  Tape tape;
  model.zero_grad();
  TrainForward fwd = model.forward_train(tape, batch.images, expert);
  StepLosses losses = compute_losses(model, fwd, batch.labels, cfg, tape);
  StepMetrics m{expert, lr, losses.values, detail::scalar(losses.total)};
  require(std::isfinite(m.total), ErrorKind::numeric, "non-finite loss at step " + std::to_string(step_index));
  auto params = model.parameters();
  auto scale = [&](const Parameter& p) { return p.name.rfind("aggregation.", 0) == 0 ? cfg.aggregation_lr_scale : 1.0; };
  if (!cfg.sequential_updates) {
    tape.backward(losses.total);
    optimizer.step(params, touched_parameters(model), lr, scale);
    return m;
  }
  const Var groups[3] = {sum_terms(tape, {losses.terms.global_triplet, losses.terms.global_cross}),
                         sum_terms(tape, {losses.terms.expert_triplet, losses.terms.expert_cross}), losses.terms.consistency};
  for (const Var& g : groups) {
    if (!g.valid()) continue;
    model.zero_grad();
    tape.backward(g);
    optimizer.step(params, touched_parameters(model), lr, scale);
  }
  return m;
}

struct FitHooks {
  std::function<void(std::size_t step, std::size_t expert, const MetaModel&)> before_step;
  std::function<void(std::size_t step, const StepMetrics&, const MetaModel&)> after_step;
  std::function<void(std::size_t epoch, const MetaModel&, const TrainState&)> on_epoch_end;
};

/// Episodic training loop. Expert k trains on sources[k]; domains are visited
/// round-robin and every batch is keyed by (seed, step), so resuming from a
/// checkpoint replays the same sequence. Stops at `stop_epoch` when given.
inline void fit(MetaModel& model, const std::vector<SyntheticDataset>& sources, const TrainConfig& cfg, TrainState& state,
                const FitHooks& hooks = {}, std::optional<std::size_t> stop_epoch = std::nullopt) {
  cfg.validate();
  require(!sources.empty(), ErrorKind::data, "training needs at least one source dataset");
  require(sources.size() == model.num_experts(), ErrorKind::data,
          "model has " + std::to_string(model.num_experts()) + " experts but " + std::to_string(sources.size()) + " source datasets were given");
  const std::size_t end_epoch = std::min(cfg.epochs, stop_epoch.value_or(cfg.epochs));
  const std::size_t end_step = end_epoch * cfg.iters_per_epoch;
  while (state.step < end_step) {
    const std::size_t step = state.step;
    const std::size_t epoch = step / cfg.iters_per_epoch;
    const std::size_t expert = step % sources.size();
    auto rng = detail::keyed_rng(cfg.seed, 4, step);
    PKBatch batch = sample_pk_batch(sources[expert], cfg.P, cfg.Q, rng);
    state.lr = lr_at(step, epoch, cfg);
    if (hooks.before_step) hooks.before_step(step, expert, model);
    StepMetrics m = train_step(model, state.optimizer, batch, expert, cfg, state.lr, step);
    state.push(HistoryRow{step, epoch, m.lr, m.loss, m.total, expert});
    ++state.step;
    if (hooks.after_step) hooks.after_step(step, m, model);
    if (state.step % cfg.iters_per_epoch == 0 && hooks.on_epoch_end) hooks.on_epoch_end(epoch, model, state);
  }
}

// ---------------------------------------------------------------- checkpoints

inline Snapshot make_checkpoint(const MetaModel& model, const TrainState& state) {
  Snapshot snap;
  for (auto& e : model.snapshot()) snap.push_back({"model." + e.name, std::move(e.tensor)});
  state.optimizer.save(snap);
  snap.push_back({"state.step", Tensor({1}, static_cast<double>(state.step))});
  snap.push_back({"state.lr", Tensor({1}, state.lr)});
  return snap;
}

inline void restore_checkpoint(const Snapshot& snap, MetaModel& model, TrainState& state) {
  Snapshot m;
  const std::string pre = "model.";
  for (const auto& e : snap)
    if (e.name.rfind(pre, 0) == 0) m.push_back({e.name.substr(pre.size()), e.tensor});
  model.load(m);
  state.optimizer.load(snap);
  state.step = static_cast<std::size_t>(get_tensor(snap, "state.step").data.at(0));
  state.lr = get_tensor(snap, "state.lr").data.at(0);
}

// ------------------------------------------------------------ gradient probes

/// Coarse parameter group used by the gradient-routing probes.
inline std::string parameter_group(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("stem.") || (starts("backbone.") && name.find(".conv.") != std::string::npos)) return "shared_conv";
  if (name.find(".bank.global") != std::string::npos) return "bn_global";
  const auto ex = name.find(".bank.expert");
  if (ex != std::string::npos) {
    const auto b = ex + std::string(".bank.expert").size();
    return "bn_expert" + name.substr(b, name.find('.', b) - b);
  }
  if (starts("global_bn.") || starts("global_in.")) return "global_branch";
  if (starts("exp_block.conv")) return "expert_conv";
  if (starts("global_head.")) return "global_head";
  if (starts("expert_head.")) return "expert_head";
  if (starts("aggregation.")) return "aggregation";
  return "other";
}

/// Gradient L2 norm per parameter group for each objective term taken alone.
inline std::map<std::string, std::map<std::string, double>> gradient_routing(MetaModel& model, const PKBatch& batch, std::size_t expert,
                                                                             const TrainConfig& cfg) {
  std::map<std::string, std::map<std::string, double>> out;
  const char* names[5] = {"Lg_tri", "Lg_cross", "Le_tri", "Le_cross", "L_consis"};
  for (int term = 0; term < 5; ++term) {
    Snapshot before = model.snapshot();
    Tape tape;
    model.zero_grad();
    TrainForward fwd = model.forward_train(tape, batch.images, expert);
    StepLosses l = compute_losses(model, fwd, batch.labels, cfg, tape);
    const Var* terms[5] = {&l.terms.global_triplet, &l.terms.global_cross, &l.terms.expert_triplet, &l.terms.expert_cross,
                           &l.terms.consistency};
    auto& row = out[names[term]];
    for (Parameter* p : model.parameters()) row[parameter_group(p->name)] += 0.0;
    if (terms[term]->valid()) tape.backward(*terms[term]);
    for (Parameter* p : model.parameters()) {
      double s = 0.0;
      for (double g : p->value.grad) s += g * g;
      row[parameter_group(p->name)] += s;
    }
    for (auto& [g, v] : row) v = std::sqrt(v);
    model.load(before);  // forward_train moved running statistics
  }
  model.zero_grad();
  return out;
}

}  // namespace meta
