#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "meta/autograd.hpp"
#include "meta/normalization.hpp"
#include "meta/ops.hpp"
#include "meta/relevance.hpp"
#include "meta/snapshot.hpp"

namespace meta {

/// Normalization layout of the two global-branch blocks.
enum class GlobalVariant { bn_in, bn_bn, bn_ibn, in_in };

inline std::string to_string(GlobalVariant v) {
  switch (v) {
    case GlobalVariant::bn_in: return "BN-IN";
    case GlobalVariant::bn_bn: return "BN-BN";
    case GlobalVariant::bn_ibn: return "BN-IBN";
    case GlobalVariant::in_in: return "IN-IN";
  }
  return "?";
}

inline GlobalVariant parse_global_variant(const std::string& s) {
  if (s == "BN-IN") return GlobalVariant::bn_in;
  if (s == "BN-BN") return GlobalVariant::bn_bn;
  if (s == "BN-IBN") return GlobalVariant::bn_ibn;
  if (s == "IN-IN") return GlobalVariant::in_in;
  fail(ErrorKind::invalid_argument, "unknown global branch variant '" + s + "' (expected BN-IN, BN-BN, BN-IBN or IN-IN)");
}

struct ModelConfig {
  std::size_t num_experts = 3;  // K, one per source domain
  std::size_t in_channels = 3;
  std::size_t stem_width = 16;
  std::vector<std::size_t> backbone_widths{32, 32};
  std::size_t global_width = 64;  // Dg
  std::size_t expert_width = 64;  // De
  std::size_t identity_count = 128;
  std::size_t aggregation_hidden = 0;  // 0 selects 2*L
  GlobalVariant global_variant = GlobalVariant::bn_in;
  bool global_branch = true;
  bool expert_branch = true;
  bool aggregation_module = true;
  bool aux_batch_stats = false;  // auxiliary experts normalize with batch stats (never stored)
  double bn_momentum = BatchNormLayer::kDefaultMomentum;
  double eps = BatchNormLayer::kDefaultEps;
  std::uint64_t seed = 0;

  /// Monitored sites: every expert bank in the backbone plus the Exp-Block.
  std::size_t num_sites() const { return backbone_widths.size() + 1; }

  void validate() const {
    require(num_experts >= 1, ErrorKind::invalid_argument, "model needs K >= 1 experts");
    require(!backbone_widths.empty(), ErrorKind::invalid_argument, "model needs at least one monitored normalization site");
    require(in_channels > 0 && stem_width > 0 && global_width > 0 && expert_width > 0 && identity_count > 0,
            ErrorKind::invalid_argument, "model widths and identity count must be positive");
    for (std::size_t w : backbone_widths) require(w > 0, ErrorKind::invalid_argument, "backbone widths must be positive");
    require(global_branch || expert_branch, ErrorKind::invalid_argument, "at least one branch must be enabled");
    if (global_variant == GlobalVariant::bn_ibn)
      require(global_width >= 2, ErrorKind::invalid_argument, "BN-IBN needs a global width of at least 2");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"K", c.num_experts},
                        {"L", c.num_sites()},
                        {"in_channels", c.in_channels},
                        {"stem_width", c.stem_width},
                        {"widths", c.backbone_widths},
                        {"Dg", c.global_width},
                        {"De", c.expert_width},
                        {"identity_count", c.identity_count},
                        {"aggregation_hidden", c.aggregation_hidden},
                        {"global_branch_variant", to_string(c.global_variant)},
                        {"global_branch", c.global_branch},
                        {"expert_branch", c.expert_branch},
                        {"aggregation_module", c.aggregation_module},
                        {"aux_batch_stats", c.aux_batch_stats},
                        {"bn_momentum", c.bn_momentum},
                        {"eps", c.eps},
                        {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_experts = j.at("K").get<std::size_t>();
  c.in_channels = j.value("in_channels", c.in_channels);
  c.stem_width = j.value("stem_width", c.stem_width);
  c.backbone_widths = j.at("widths").get<std::vector<std::size_t>>();
  c.global_width = j.at("Dg").get<std::size_t>();
  c.expert_width = j.at("De").get<std::size_t>();
  c.identity_count = j.at("identity_count").get<std::size_t>();
  c.aggregation_hidden = j.value("aggregation_hidden", std::size_t{0});
  c.global_variant = parse_global_variant(j.value("global_branch_variant", std::string("BN-IN")));
  c.global_branch = j.value("global_branch", true);
  c.expert_branch = j.value("expert_branch", true);
  c.aggregation_module = j.value("aggregation_module", true);
  c.aux_batch_stats = j.value("aux_batch_stats", false);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.eps = j.value("eps", c.eps);
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("L"))
    require(j.at("L").get<std::size_t>() == c.num_sites(), ErrorKind::data, "model sidecar L disagrees with widths");
  return c;
}

/// Normalization used inside a global-branch block: BN, IN, or IBN (first
/// half of the channels instance-normalized, the rest batch-normalized).
class BranchNorm {
 public:
  enum class Kind { bn, in, ibn };

  BranchNorm() = default;
  BranchNorm(Kind kind, const std::string& name, std::size_t channels, double momentum, double eps)
      : kind_(kind), channels_(channels) {
    const std::size_t half = channels / 2;
    switch (kind) {
      case Kind::bn: bn_.emplace(name + ".bn", channels, momentum, eps); break;
      case Kind::in: in_.emplace(name + ".in", channels, eps); break;
      case Kind::ibn:
        in_.emplace(name + ".in", half, eps);
        bn_.emplace(name + ".bn", channels - half, momentum, eps);
        break;
    }
  }

  Kind kind() const noexcept { return kind_; }

  Var forward(Var x, Mode mode, bool update_stats) {
    switch (kind_) {
      case Kind::bn: return bn_->forward(x, mode, update_stats);
      case Kind::in: return in_->forward(x);
      case Kind::ibn: {
        const std::size_t half = channels_ / 2;
        Var a = in_->forward(slice(x, 1, 0, half));
        Var b = bn_->forward(slice(x, 1, half, channels_), mode, update_stats);
        return concat({a, b}, 1);
      }
    }
    return x;
  }

  void collect_parameters(std::vector<Parameter*>& out) {
    if (in_) in_->collect_parameters(out);
    if (bn_) bn_->collect_parameters(out);
  }
  void save(Snapshot& snap) const {
    if (bn_) bn_->save(snap);
  }
  void load(const Snapshot& snap) {
    if (bn_) bn_->load(snap);
  }
  std::size_t buffer_count() const { return bn_ ? 2 * bn_->channels() : 0; }
  const BatchNormLayer* bn() const { return bn_ ? &*bn_ : nullptr; }

 private:
  Kind kind_ = Kind::bn;
  std::size_t channels_ = 0;
  std::optional<BatchNormLayer> bn_;
  std::optional<InstanceNormLayer> in_;
};

/// Feature-level outputs of one forward call. Unused branches stay invalid.
struct EmbeddingOutput {
  Var f_global;       // (N, Dg)
  Var f_exp;          // (N, De): mixed expert feature, or f(x|i) during training
  Var final;          // (N, Dg + De), or a single branch when the other is disabled
  Var logits_global;  // (N, identities)
  Var logits_expert;
  std::optional<ExpertMix> mix;
};

/// Everything a training step needs from one batch of domain i.
struct TrainForward {
  std::size_t domain = 0;
  Var f_global, logits_global;
  Var f_domain, logits_domain;  // f(x|i) and its logits
  std::optional<ExpertMix> mix;  // mix of the other experts (episodic F-exp)
  std::vector<std::size_t> mixed_experts;
  std::vector<std::vector<RelevanceVector>> relevance;  // [expert][sample]
};

class MetaModel {
 public:
  struct Block {
    Parameter conv;
    NormBank bank;
  };

  explicit MetaModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const double mom = cfg_.bn_momentum, eps = cfg_.eps;
    const std::size_t K = cfg_.num_experts;
    stem_ = conv_param("stem.conv.weight", cfg_.stem_width, cfg_.in_channels, rng);
    std::size_t in = cfg_.stem_width;
    for (std::size_t b = 0; b < cfg_.backbone_widths.size(); ++b) {
      const std::size_t out = cfg_.backbone_widths[b];
      const std::string p = "backbone.b" + std::to_string(b);
      backbone_.push_back(Block{conv_param(p + ".conv.weight", out, in, rng), NormBank(p + ".bank", b, out, K, true, mom, eps)});
      in = out;
    }
    const std::size_t trunk = in;
    using BK = BranchNorm::Kind;
    BK first = BK::bn, second = BK::in;
    switch (cfg_.global_variant) {
      case GlobalVariant::bn_in: break;
      case GlobalVariant::bn_bn: second = BK::bn; break;
      case GlobalVariant::bn_ibn: second = BK::ibn; break;
      case GlobalVariant::in_in: first = BK::in; break;
    }
    const std::size_t Dg = cfg_.global_width, De = cfg_.expert_width;
    global_bn_conv_ = conv_param("global_bn.conv.weight", Dg, trunk, rng);
    global_bn_norm_ = BranchNorm(first, "global_bn.norm", Dg, mom, eps);
    global_in_conv_ = conv_param("global_in.conv.weight", Dg, Dg, rng);
    global_in_norm_ = BranchNorm(second, "global_in.norm", Dg, mom, eps);
    exp_conv_ = conv_param("exp_block.conv.weight", De, trunk, rng);
    exp_bank_ = NormBank("exp_block.bank", cfg_.backbone_widths.size(), De, K, false, mom, eps);
    global_head_w_ = head_param("global_head.weight", cfg_.identity_count, Dg, rng);
    global_head_b_ = Parameter("global_head.bias", Tensor({cfg_.identity_count}, 0.0));
    expert_head_w_ = head_param("expert_head.weight", cfg_.identity_count, De, rng);
    expert_head_b_ = Parameter("expert_head.bias", Tensor({cfg_.identity_count}, 0.0));
    if (cfg_.aggregation_module) {
      const std::size_t L = cfg_.num_sites();
      aggregation_.emplace("aggregation", L, cfg_.aggregation_hidden ? cfg_.aggregation_hidden : 2 * L, rng);
    }
    check_unique_names();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t num_experts() const noexcept { return cfg_.num_experts; }
  std::size_t num_sites() const noexcept { return cfg_.num_sites(); }
  std::size_t global_dim() const noexcept { return cfg_.global_width; }
  std::size_t expert_dim() const noexcept { return cfg_.expert_width; }
  std::size_t final_dim() const noexcept {
    return (cfg_.global_branch ? cfg_.global_width : 0) + (cfg_.expert_branch ? cfg_.expert_width : 0);
  }
  bool has_aggregation() const noexcept { return aggregation_.has_value(); }
  AggregationNet& aggregation() {
    require(aggregation_.has_value(), ErrorKind::state, "model was built without an aggregation module");
    return *aggregation_;
  }

  /// Monitored bank `l` (backbone banks first, Exp-Block last).
  const NormBank& site_bank(std::size_t l) const {
    require(l < num_sites(), ErrorKind::invalid_argument, "site index out of range");
    return l < backbone_.size() ? backbone_[l].bank : exp_bank_;
  }
  NormBank& site_bank(std::size_t l) {
    require(l < num_sites(), ErrorKind::invalid_argument, "site index out of range");
    return l < backbone_.size() ? backbone_[l].bank : exp_bank_;
  }

  bool expert_established(std::size_t k) const {
    for (std::size_t l = 0; l < num_sites(); ++l)
      if (site_bank(l).expert(k).num_updates() == 0) return false;
    return true;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&stem_};
    for (auto& b : backbone_) {
      out.push_back(&b.conv);
      b.bank.collect_parameters(out);
    }
    out.push_back(&global_bn_conv_);
    global_bn_norm_.collect_parameters(out);
    out.push_back(&global_in_conv_);
    global_in_norm_.collect_parameters(out);
    out.push_back(&exp_conv_);
    exp_bank_.collect_parameters(out);
    for (Parameter* p : {&global_head_w_, &global_head_b_, &expert_head_w_, &expert_head_b_}) out.push_back(p);
    if (aggregation_) aggregation_->collect_parameters(out);
    return out;
  }

  /// Learnable scalars plus running mean/var buffers.
  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters()) n += p->size();
    for (std::size_t l = 0; l < num_sites(); ++l) {
      const NormBank& bank = site_bank(l);
      n += 2 * bank.channels() * (bank.num_experts() + (bank.has_global() ? 1 : 0));
    }
    return n + global_bn_norm_.buffer_count() + global_in_norm_.buffer_count();
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  Snapshot snapshot() const {
    auto& self = const_cast<MetaModel&>(*this);
    Snapshot snap;
    std::set<std::string> bn_names;
    for (std::size_t l = 0; l < num_sites(); ++l) site_bank(l).save(snap);
    global_bn_norm_.save(snap);
    global_in_norm_.save(snap);
    for (const auto& e : snap) bn_names.insert(e.name);
    for (Parameter* p : self.parameters())
      if (!bn_names.count(p->name)) snap.push_back({p->name, Tensor(p->value.shape, p->value.data)});
    return snap;
  }

  void load(const Snapshot& snap) {
    for (Parameter* p : parameters()) {
      const Tensor& t = get_tensor(snap, p->name);
      require(t.shape == p->value.shape, ErrorKind::data,
              "snapshot entry '" + p->name + "' has shape " + shape_str(t.shape) + ", model expects " + shape_str(p->value.shape));
      p->value.data = t.data;
    }
    for (std::size_t l = 0; l < num_sites(); ++l) site_bank(l).load(snap);
    global_bn_norm_.load(snap);
    global_in_norm_.load(snap);
  }

  // ------------------------------------------------------------- forwards

  /// Training forward for a single-domain batch of domain i: the global path
  /// through BN-g, the expert path through BN-exp i, and the remaining experts
  /// gradient-free with frozen statistics for episodic mixing.
  TrainForward forward_train(Tape& tape, const Tensor& batch, std::size_t domain) {
    require(domain < num_experts(), ErrorKind::invalid_argument,
            "domain " + std::to_string(domain) + " out of range for K=" + std::to_string(num_experts()));
    check_input(batch);
    TrainForward out;
    out.domain = domain;
    Var x = tape.constant(batch);
    Var z0 = first_conv(x);
    if (cfg_.global_branch) {
      out.f_global = global_path(z0, Mode::train, true);
      out.logits_global = head(out.f_global, global_head_w_, global_head_b_);
    }
    if (!cfg_.expert_branch) return out;
    out.f_domain = expert_path(z0, domain, Mode::train, true, nullptr);
    out.logits_domain = head(out.f_domain, expert_head_w_, expert_head_b_);

    std::vector<std::size_t> others;
    for (std::size_t k = 0; k < num_experts(); ++k)
      if (k != domain && expert_established(k)) others.push_back(k);
    if (others.empty() || others.size() + 1 != num_experts()) return out;

    std::vector<Var> feats;
    std::vector<std::vector<RelevanceVector>> rel;
    {
      Tape::NoGradGuard ng(tape);
      Var z0c = detach(z0);
      for (std::size_t k : others) {
        std::vector<Tensor> trace;
        feats.push_back(expert_path(z0c, k, cfg_.aux_batch_stats ? Mode::train : Mode::eval, false, &trace));
        rel.push_back(relevance_from_trace(trace, k));
      }
    }
    out.mixed_experts = others;
    out.relevance.assign(num_experts(), {});
    std::vector<ExpertInput> inputs;
    for (std::size_t j = 0; j < others.size(); ++j) {
      out.relevance[others[j]] = rel[j];
      inputs.push_back({others[j], expert_weight_var(tape, rel[j]), feats[j]});
    }
    out.mix = mix_experts(inputs, domain, num_experts());
    return out;
  }

  /// Inference: global path and all K experts in eval mode, experts mixed by
  /// relevance-derived weights, final = concat(F-global, F-exp).
  EmbeddingOutput forward_eval(Tape& tape, const Tensor& batch) {
    check_input(batch);
    EmbeddingOutput out;
    Var x = tape.constant(batch);
    Var z0 = first_conv(x);
    if (cfg_.global_branch) {
      out.f_global = global_path(z0, Mode::eval, false);
      out.logits_global = head(out.f_global, global_head_w_, global_head_b_);
    }
    if (cfg_.expert_branch) {
      for (std::size_t k = 0; k < num_experts(); ++k)
        require(expert_established(k), ErrorKind::state, "expert statistics not established for expert " + std::to_string(k));
      std::vector<ExpertInput> inputs;
      for (std::size_t k = 0; k < num_experts(); ++k) {
        std::vector<Tensor> trace;
        Var f = expert_path(z0, k, Mode::eval, false, &trace);
        inputs.push_back({k, expert_weight_var(tape, relevance_from_trace(trace, k)), f});
      }
      out.mix = mix_experts(inputs, std::nullopt, num_experts());
      out.f_exp = out.mix->feature;
      out.logits_expert = head(out.f_exp, expert_head_w_, expert_head_b_);
    }
    if (cfg_.global_branch && cfg_.expert_branch)
      out.final = concat({out.f_global, out.f_exp}, 1);
    else
      out.final = cfg_.global_branch ? out.f_global : out.f_exp;
    return out;
  }

  /// f(x|k) in eval mode, optionally with the pre-normalization activations
  /// at every monitored site.
  Var expert_feature(Tape& tape, const Tensor& batch, std::size_t k, std::vector<Tensor>* trace = nullptr) {
    check_input(batch);
    require(k < num_experts(), ErrorKind::invalid_argument, "expert index out of range");
    return expert_path(first_conv(tape.constant(batch)), k, Mode::eval, false, trace);
  }

  /// Per-sample relevance to expert k: FID between expert k's running
  /// statistics and the sample's IN statistics at each monitored site.
  std::vector<RelevanceVector> collect_relevance(const Tensor& batch, std::size_t k) {
    require(k < num_experts(), ErrorKind::invalid_argument, "expert index out of range");
    require(expert_established(k), ErrorKind::state, "expert statistics not established for expert " + std::to_string(k));
    Tape tape;
    Tape::NoGradGuard ng(tape);
    std::vector<Tensor> trace;
    expert_feature(tape, batch, k, &trace);
    return relevance_from_trace(trace, k);
  }

  std::vector<RelevanceVector> relevance_from_trace(const std::vector<Tensor>& trace, std::size_t k) const {
    require(trace.size() == num_sites(), ErrorKind::state, "trace does not cover every monitored site");
    const std::size_t N = trace.front().shape[0];
    std::vector<RelevanceVector> out(N);
    for (std::size_t n = 0; n < N; ++n) {
      out[n].expert_id = k;
      out[n].sample_id = n;
      out[n].values.resize(num_sites());
    }
    for (std::size_t l = 0; l < num_sites(); ++l) {
      const NormStats& bn = site_bank(l).expert(k).running;
      const auto in = compute_in_stats(trace[l]);
      for (std::size_t n = 0; n < N; ++n) out[n].values[l] = fid(bn, in[n]);
    }
    return out;
  }

  /// Expert weights w_k (N,1): the aggregation net on relevance, or
  /// -mean(relevance) when the model has no aggregation module.
  Var expert_weight_var(Tape& tape, const std::vector<RelevanceVector>& rel) {
    const std::size_t N = rel.size(), L = num_sites();
    if (!aggregation_) {
      Tensor w({N, 1});
      for (std::size_t n = 0; n < N; ++n) w.data[n] = -rel[n].mean();
      return tape.constant(std::move(w));
    }
    Tensor r({N, L});
    for (std::size_t n = 0; n < N; ++n) std::copy(rel[n].values.begin(), rel[n].values.end(), r.data.begin() + static_cast<std::ptrdiff_t>(n * L));
    return aggregation_->forward(tape.constant(std::move(r)));
  }

  Var expert_logits(Var f) { return head(f, expert_head_w_, expert_head_b_); }

  /// Expert-head logits with the head held constant.
  Var expert_logits_frozen(Var f) {
    Tape& t = f.tape();
    return linear(f, t.constant(expert_head_w_.value), t.constant(expert_head_b_.value));
  }

 private:
  static Parameter conv_param(const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng) {
    Tensor w({out, in, 3, 3});
    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / static_cast<double>(in * 9)));
    for (double& v : w.data) v = d(rng);
    return Parameter(name, std::move(w));
  }

  static Parameter head_param(const std::string& name, std::size_t out, std::size_t in, std::mt19937_64& rng) {
    Tensor w({out, in});
    std::normal_distribution<double> d(0.0, 0.01);
    for (double& v : w.data) v = d(rng);
    return Parameter(name, std::move(w));
  }

  void check_unique_names() {
    std::set<std::string> names;
    for (Parameter* p : parameters())
      require(names.insert(p->name).second, ErrorKind::state, "duplicate parameter name " + p->name);
  }

  void check_input(const Tensor& batch) const {
    require(batch.rank() == 4 && batch.shape[1] == cfg_.in_channels, ErrorKind::shape,
            "model expects input (N," + std::to_string(cfg_.in_channels) + ",H,W), got " + shape_str(batch.shape));
  }

  // stem conv + relu + first backbone conv; shared by every route.
  Var first_conv(Var x) {
    Tape& t = x.tape();
    Var h = relu(conv2d(x, t.param(stem_)));
    return conv2d(h, t.param(backbone_.front().conv));
  }

  Var global_path(Var z0, Mode mode, bool update) {
    Tape& t = z0.tape();
    Var z = z0;
    Var h;
    for (std::size_t b = 0; b < backbone_.size(); ++b) {
      if (b > 0) z = conv2d(h, t.param(backbone_[b].conv));
      h = relu(backbone_[b].bank.forward(z, Route::global(), mode, update));
    }
    h = relu(global_bn_norm_.forward(conv2d(h, t.param(global_bn_conv_)), mode, update));
    h = relu(global_in_norm_.forward(conv2d(h, t.param(global_in_conv_)), mode, update));
    return global_average_pool(h);
  }

  Var expert_path(Var z0, std::size_t k, Mode mode, bool update, std::vector<Tensor>* trace) {
    Tape& t = z0.tape();
    Var z = z0;
    Var h;
    for (std::size_t b = 0; b < backbone_.size(); ++b) {
      if (b > 0) z = conv2d(h, t.param(backbone_[b].conv));
      if (trace) trace->push_back(z.value());
      h = relu(backbone_[b].bank.forward(z, Route::to_expert(k), mode, update));
    }
    z = conv2d(h, t.param(exp_conv_));
    if (trace) trace->push_back(z.value());
    h = relu(exp_bank_.forward(z, Route::to_expert(k), mode, update));
    return global_average_pool(h);
  }

  static Var head(Var f, Parameter& w, Parameter& b) {
    Tape& t = f.tape();
    return linear(f, t.param(w), t.param(b));
  }

  ModelConfig cfg_;
  Parameter stem_;
  std::vector<Block> backbone_;
  Parameter global_bn_conv_;
  BranchNorm global_bn_norm_;
  Parameter global_in_conv_;
  BranchNorm global_in_norm_;
  Parameter exp_conv_;
  NormBank exp_bank_;
  Parameter global_head_w_, global_head_b_;
  Parameter expert_head_w_, expert_head_b_;
  std::optional<AggregationNet> aggregation_;
};

inline MetaModel build_model(const ModelConfig& cfg) { return MetaModel(cfg); }

}  // namespace meta
