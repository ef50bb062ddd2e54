#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "meta/trainer.hpp"

using namespace meta;

namespace {

struct Setup {
  std::vector<SyntheticDataset> sources;
  ModelConfig model;
  TrainConfig train;
};

Setup small_setup() {
  GenConfig g;
  g.seed = 5;
  g.domains = 3;
  g.ids_per_domain = 4;
  g.samples_per_id = 4;
  g.height = g.width = 4;
  Setup s;
  for (auto& d : generate(g)) s.sources.push_back(d.train);
  s.model.num_experts = 3;
  s.model.stem_width = 4;
  s.model.backbone_widths = {4, 4};
  s.model.global_width = 6;
  s.model.expert_width = 6;
  s.model.identity_count = 12;
  s.model.seed = 2;
  s.train.epochs = 4;
  s.train.iters_per_epoch = 6;
  s.train.warmup_iters = 5;
  s.train.decay_epochs = {2, 3};
  s.train.P = 3;
  s.train.Q = 2;
  s.train.seed = 9;
  s.train.base_lr = 1e-3;
  return s;
}

bool expert_untouched(const Snapshot& a, const Snapshot& b, std::size_t k) {
  const std::string tag = ".expert" + std::to_string(k) + ".";
  for (const auto& e : a)
    if (e.name.find(tag) != std::string::npos && get_tensor(b, e.name).data != e.tensor.data) return false;
  return true;
}

std::string history_text(const TrainState& s) {
  std::string out;
  for (const auto& r : s.history) out += to_csv(r) + "\n";
  return out;
}

}  // namespace

TEST_CASE("learning-rate schedule examples") {
  TrainConfig c;
  c.base_lr = 3e-4;
  c.warmup_iters = 100;
  c.decay_epochs = {10, 18};
  CHECK(lr_at(0, 0, c) == Catch::Approx(3e-5).epsilon(1e-15));
  CHECK(lr_at(100, 0, c) == 3e-4);
  CHECK(lr_at(50, 0, c) == Catch::Approx(3e-5 + 0.5 * 2.7e-4).epsilon(1e-15));
  CHECK(lr_at(700, 10, c) == Catch::Approx(3e-5).epsilon(1e-15));
  CHECK(lr_at(700, 9, c) == 3e-4);
  CHECK(lr_at(2000, 18, c) == Catch::Approx(3e-6).epsilon(1e-15));
  c.warmup_iters = 0;
  CHECK(lr_at(0, 0, c) == 3e-4);
}

TEST_CASE("learning rate is monotone in warmup and never increases after it") {
  TrainConfig c;
  double prev = 0.0;
  for (std::size_t step = 0; step < c.epochs * c.iters_per_epoch; ++step) {
    const double lr = lr_at(step, step / c.iters_per_epoch, c);
    if (step <= c.warmup_iters)
      CHECK(lr >= prev);
    else
      CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.decay_epochs = {18, 10};
  CHECK_THROWS_AS(c.validate(), Error);
  c.decay_epochs = {30};
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.P = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(parse_loss_variant("cross") == LossVariant::cross);
  CHECK_THROWS_AS(parse_loss_variant("nope"), Error);
}

TEST_CASE("each step leaves the other experts bitwise unchanged") {
  Setup s = small_setup();
  MetaModel model(s.model);
  TrainState state;
  Snapshot before;
  std::size_t checked = 0;
  FitHooks hooks;
  hooks.before_step = [&](std::size_t, std::size_t, const MetaModel& m) { before = m.snapshot(); };
  hooks.after_step = [&](std::size_t, const StepMetrics& sm, const MetaModel& m) {
    const Snapshot after = m.snapshot();
    for (std::size_t k = 0; k < 3; ++k)
      if (k != sm.expert) {
        CHECK(expert_untouched(before, after, k));
        ++checked;
      }
  };
  fit(model, s.sources, s.train, state, hooks);
  CHECK(checked == 2 * s.train.epochs * s.train.iters_per_epoch);
}

TEST_CASE("zero aggregation learning rate freezes the aggregation net") {
  Setup s = small_setup();
  s.train.aggregation_lr_scale = 0.0;
  MetaModel model(s.model);
  std::vector<Parameter*> agg;
  model.aggregation().collect_parameters(agg);
  std::vector<Tensor> initial;
  for (Parameter* p : agg) initial.push_back(p->value);
  TrainState state;
  fit(model, s.sources, s.train, state);
  std::size_t i = 0;
  for (Parameter* p : agg) CHECK(p->value.data == initial[i++].data);
  bool consis_seen = false;
  for (const auto& r : state.history) consis_seen = consis_seen || r.loss.consistency > 0.0;
  CHECK(consis_seen);
}

TEST_CASE("zero epochs leaves the model unchanged") {
  Setup s = small_setup();
  s.train.epochs = 0;
  s.train.decay_epochs = {};
  MetaModel model(s.model);
  const Snapshot before = model.snapshot();
  TrainState state;
  fit(model, s.sources, s.train, state);
  CHECK(model.snapshot() == before);
  CHECK(state.history.empty());
}

TEST_CASE("domains are visited round robin") {
  Setup s = small_setup();
  MetaModel model(s.model);
  TrainState state;
  fit(model, s.sources, s.train, state);
  std::map<std::size_t, std::size_t> counts;
  for (const auto& r : state.history) ++counts[r.domain];
  const std::size_t total = s.train.epochs * s.train.iters_per_epoch;
  for (std::size_t k = 0; k < 3; ++k) CHECK(counts[k] == total / 3);
  for (const auto& r : state.history) CHECK(r.domain == r.step % 3);
}

TEST_CASE("training is deterministic") {
  Setup s = small_setup();
  MetaModel a(s.model), b(s.model);
  TrainState sa, sb;
  fit(a, s.sources, s.train, sa);
  fit(b, s.sources, s.train, sb);
  CHECK(make_checkpoint(a, sa) == make_checkpoint(b, sb));
  CHECK(history_text(sa) == history_text(sb));
}

TEST_CASE("resuming from a checkpoint equals an uninterrupted run") {
  Setup s = small_setup();
  MetaModel full(s.model);
  TrainState full_state;
  fit(full, s.sources, s.train, full_state);

  MetaModel first(s.model);
  TrainState first_state;
  fit(first, s.sources, s.train, first_state, {}, 2);
  CHECK(first_state.step == 2 * s.train.iters_per_epoch);
  auto bytes = encode_snapshot(make_checkpoint(first, first_state)).buffer();
  binio::Reader r(bytes);
  const Snapshot ckpt = decode_snapshot(r);

  ModelConfig other = s.model;
  other.seed = 77;
  MetaModel resumed(other);
  TrainState resumed_state;
  restore_checkpoint(ckpt, resumed, resumed_state);
  fit(resumed, s.sources, s.train, resumed_state);
  CHECK(make_checkpoint(resumed, resumed_state) == make_checkpoint(full, full_state));
}

TEST_CASE("gradient routing follows the objective terms") {
  Setup s = small_setup();
  MetaModel model(s.model);
  TrainState state;
  s.train.epochs = 1;
  s.train.decay_epochs = {};
  fit(model, s.sources, s.train, state);  // establishes every expert
  auto rng = detail::keyed_rng(1, 2, 3);
  const PKBatch batch = sample_pk_batch(s.sources[1], 3, 2, rng);
  const Snapshot before = model.snapshot();
  auto g = gradient_routing(model, batch, 1, s.train);
  CHECK(model.snapshot() == before);

  for (const char* term : {"Lg_tri", "Lg_cross"}) {
    CHECK(g[term]["shared_conv"] > 0.0);
    CHECK(g[term]["bn_global"] > 0.0);
    CHECK(g[term]["global_branch"] > 0.0);
    for (const char* none : {"bn_expert0", "bn_expert1", "bn_expert2", "expert_conv", "expert_head", "aggregation"})
      CHECK(g[term][none] == 0.0);
  }
  CHECK(g["Lg_cross"]["global_head"] > 0.0);
  for (const char* term : {"Le_tri", "Le_cross"}) {
    CHECK(g[term]["shared_conv"] > 0.0);
    CHECK(g[term]["bn_expert1"] > 0.0);
    CHECK(g[term]["expert_conv"] > 0.0);
    for (const char* none : {"bn_expert0", "bn_expert2", "bn_global", "global_branch", "global_head", "aggregation"})
      CHECK(g[term][none] == 0.0);
  }
  CHECK(g["Le_cross"]["expert_head"] > 0.0);
  for (const auto& [group, norm] : g["L_consis"])
    if (group != "aggregation") CHECK(norm == 0.0);
  CHECK(g["L_consis"]["aggregation"] > 0.0);
}

TEST_CASE("sequential updates run and differ from the combined step") {
  Setup s = small_setup();
  MetaModel a(s.model), b(s.model);
  TrainState sa, sb;
  fit(a, s.sources, s.train, sa);
  s.train.sequential_updates = true;
  fit(b, s.sources, s.train, sb);
  CHECK_FALSE(a.snapshot() == b.snapshot());
  for (const auto& r : sb.history) CHECK(std::isfinite(r.total));
}

TEST_CASE("mismatched source count is rejected") {
  Setup s = small_setup();
  MetaModel model(s.model);
  TrainState state;
  s.sources.pop_back();
  CHECK_THROWS_AS(fit(model, s.sources, s.train, state), Error);
}

TEST_CASE("total loss falls over a longer run") {
  Setup s = small_setup();
  s.train.epochs = 20;
  s.train.iters_per_epoch = 12;
  s.train.warmup_iters = 20;
  s.train.decay_epochs = {12, 17};
  MetaModel model(s.model);
  TrainState state;
  fit(model, s.sources, s.train, state);
  double first = 0.0, last = 0.0;
  for (const auto& r : state.history) {
    if (r.epoch == 0) first += r.total;
    if (r.epoch == 19) last += r.total;
  }
  CHECK(last < first);
}
