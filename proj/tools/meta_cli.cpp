// meta_cli: generate synthetic domains, train, evaluate, inspect statistics
// and run the ablation suite.
//
// Exit codes: 0 ok, 2 usage, 3 data, 4 numeric, 5 missing artifact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "meta/eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace meta;

namespace {

constexpr int kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4, kExitMissing = 5;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return kExitUsage;
    case ErrorKind::numeric: return kExitNumeric;
    case ErrorKind::missing_artifact: return kExitMissing;
    default: return kExitData;
  }
}

// ------------------------------------------------------------------ files

std::string train_file(std::size_t d) { return "domain" + std::to_string(d) + "_train.metad"; }
std::string query_file(std::size_t d) { return "domain" + std::to_string(d) + "_query.metad"; }
std::string gallery_file(std::size_t d) { return "domain" + std::to_string(d) + "_gallery.metad"; }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::data, "cannot open " + path.string() + " for writing");
  os << text;
  require(static_cast<bool>(os), ErrorKind::data, "write failed for " + path.string());
}

json read_json(const fs::path& path, ErrorKind missing_kind) {
  std::ifstream is(path);
  require(static_cast<bool>(is), missing_kind, "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "malformed JSON in " + path.string() + ": " + e.what());
  }
}

void prepare_out(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec && fs::is_directory(out), ErrorKind::data, "cannot create output directory " + out.string());
}

/// Train files present in a data directory, keyed by domain id.
std::map<std::size_t, fs::path> find_train_files(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::missing_artifact, "data directory " + dir.string() + " does not exist");
  std::map<std::size_t, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    const std::string pre = "domain", suf = "_train.metad";
    if (n.size() > pre.size() + suf.size() && n.rfind(pre, 0) == 0 && n.substr(n.size() - suf.size()) == suf) {
      const std::string mid = n.substr(pre.size(), n.size() - pre.size() - suf.size());
      if (!mid.empty() && mid.find_first_not_of("0123456789") == std::string::npos) out[std::stoul(mid)] = e.path();
    }
  }
  require(!out.empty(), ErrorKind::missing_artifact, "no domain*_train.metad files in " + dir.string());
  return out;
}

struct Sources {
  std::vector<SyntheticDataset> data;
  std::vector<std::size_t> domains;
};

Sources load_sources(const fs::path& dir, std::size_t target) {
  Sources s;
  for (const auto& [d, path] : find_train_files(dir)) {
    if (d == target) continue;
    SyntheticDataset ds = load_dataset(path.string());
    require(ds.domains() == std::set<std::size_t>{d}, ErrorKind::data, path.string() + " does not hold domain " + std::to_string(d) + " only");
    s.data.push_back(std::move(ds));
    s.domains.push_back(d);
  }
  require(!s.data.empty(), ErrorKind::data, "no source domains left after excluding target domain " + std::to_string(target));
  return s;
}

// ----------------------------------------------------------------- config

/// Applies `a.b.c=value` overrides; values parse as JSON, else as strings.
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::invalid_argument, "override '" + s + "' is not key=value");
    const std::string key = s.substr(0, eq), raw = s.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json* node = &cfg;
    std::stringstream ks(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ks, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = value;
  }
}

struct Resolved {
  ModelConfig model;
  TrainConfig train;
  std::string feature = "final";
  std::size_t max_rank = 20;
  std::size_t target_domain = 0;
  json echo;
};

std::optional<std::string> ablation_variant_name(const std::string& key) {
  static const std::map<std::string, std::string> names{
      {"none", "META"},
      {"no-global", "w/o global branch"},
      {"no-expert", "w/o expert branch"},
      {"no-aggregation", "w/o aggregation module"},
      {"bn-bn", "BN-BN"},
      {"bn-ibn", "BN-IBN"},
      {"in-in", "IN-IN"},
      {"loss-base", "L_base"},
      {"loss-cross", "L_base+L_cross"},
      {"loss-tri", "L_base+L_tri"},
      {"loss-consis", "L_base+L_consis"},
  };
  auto it = names.find(key);
  if (it == names.end()) return std::nullopt;
  return it->second;
}

/// Defaults <- config file <- --set overrides <- dedicated flags, then
/// source-dependent fields (K, identity count) from the data.
Resolved resolve_config(const std::string& config_path, const std::vector<std::string>& sets, std::optional<std::size_t> target,
                        std::optional<std::uint64_t> seed, const std::string& ablate, const Sources* sources) {
  json user = json::object();
  if (!config_path.empty()) user = read_json(config_path, ErrorKind::invalid_argument);
  require(user.is_object(), ErrorKind::data, "config root must be a JSON object");
  apply_overrides(user, sets);
  const bool explicit_ids = user.contains("model") && user["model"].contains("identity_count");

  json model = to_json(ModelConfig{});
  model.erase("L");
  json train = to_json(TrainConfig{});
  json eval = {{"feature", "final"}, {"max_rank", 20}};
  json data = {{"target_domain", 3}};
  const std::map<std::string, json*> sections{{"model", &model}, {"train", &train}, {"eval", &eval}, {"data", &data}};
  for (const auto& [name, value] : user.items()) {
    auto sec = sections.find(name);
    require(sec != sections.end(), ErrorKind::invalid_argument, "unknown config section '" + name + "'");
    require(value.is_object(), ErrorKind::invalid_argument, "config section '" + name + "' must be an object");
    for (const auto& [key, v] : value.items())
      require(sec->second->contains(key), ErrorKind::invalid_argument, "unknown config key '" + name + "." + key + "'");
    sec->second->merge_patch(value);
  }
  if (target) data["target_domain"] = *target;
  if (seed) {
    model["seed"] = *seed;
    train["seed"] = *seed;
  }

  Resolved r;
  try {
    r.model = model_config_from_json(model);
    r.train = train_config_from_json(train);
    r.feature = eval.at("feature").get<std::string>();
    r.max_rank = eval.at("max_rank").get<std::size_t>();
    r.target_domain = data.at("target_domain").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(ErrorKind::invalid_argument, std::string("bad configuration value: ") + e.what());
  }
  parse_feature_mode(r.feature);
  if (!ablate.empty()) {
    const auto name = ablation_variant_name(ablate);
    require(name.has_value(), ErrorKind::invalid_argument,
            "unknown --ablate '" + ablate +
                "' (expected none, no-global, no-expert, no-aggregation, bn-bn, bn-ibn, in-in, loss-base, loss-cross, loss-tri, loss-consis)");
    for (const auto& v : standard_ablation_variants(r.model, r.train))
      if (v.name == *name) {
        r.model = v.model;
        r.train = v.train;
      }
  }
  if (sources) {
    r.model.num_experts = sources->data.size();
    if (!explicit_ids) {
      std::size_t max_id = 0;
      for (const auto& ds : sources->data)
        for (const auto& s : ds.samples) max_id = std::max(max_id, s.identity);
      r.model.identity_count = max_id + 1;
    }
  }
  r.model.validate();
  r.train.validate();
  r.echo = {{"model", to_json(r.model)},
            {"train", to_json(r.train)},
            {"eval", {{"feature", r.feature}, {"max_rank", r.max_rank}}},
            {"data", {{"target_domain", r.target_domain}}}};
  if (!ablate.empty()) r.echo["ablate"] = ablate;
  if (sources) r.echo["data"]["source_domains"] = sources->domains;
  return r;
}

// ----------------------------------------------------------- checkpoints

struct LoadedModel {
  MetaModel model;
  std::vector<std::size_t> source_domains;
  std::size_t target_domain;
};

/// Checkpoint plus its JSON sidecar (`<checkpoint>.json`).
LoadedModel load_model(const fs::path& ckpt) {
  require(fs::is_regular_file(ckpt), ErrorKind::missing_artifact, "checkpoint " + ckpt.string() + " does not exist");
  const fs::path side = fs::path(ckpt.string() + ".json");
  const json j = read_json(side, ErrorKind::missing_artifact);
  LoadedModel lm{MetaModel(model_config_from_json(j.at("model"))), j.at("source_domains").get<std::vector<std::size_t>>(),
                 j.at("target_domain").get<std::size_t>()};
  TrainState ignored;
  restore_checkpoint(load_snapshot(ckpt.string()), lm.model, ignored);
  return lm;
}

void save_model(const fs::path& path, const MetaModel& model, const TrainState& state, const Resolved& cfg, const Sources& src) {
  save_snapshot(make_checkpoint(model, state), path.string());
  json side = {{"model", to_json(model.config())}, {"source_domains", src.domains}, {"target_domain", cfg.target_domain},
               {"step", state.step}};
  write_text(path.string() + ".json", side.dump(2) + "\n");
}

// --------------------------------------------------------------- commands

struct GenArgs {
  GenConfig cfg;
  std::size_t target = 0;
  bool target_set = false;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  a.cfg.validate();
  const std::size_t target = a.target_set ? a.target : a.cfg.domains - 1;
  require(target < a.cfg.domains, ErrorKind::invalid_argument, "--target-domain must be < --domains");
  prepare_out(a.out);
  const auto data = generate(a.cfg);
  auto emit = [&](const SyntheticDataset& ds, const std::string& name) {
    const fs::path p = fs::path(a.out) / name;
    save_dataset(ds, p.string());
    std::printf("wrote %s: %zu samples, %zu identities, %zu bytes\n", p.string().c_str(), ds.samples.size(), ds.identities().size(),
                static_cast<std::size_t>(fs::file_size(p)));
  };
  for (const auto& d : data) emit(d.train, train_file(d.spec.domain_id));
  emit(data[target].query, query_file(target));
  emit(data[target].gallery, gallery_file(target));
  const GenConfig& c = a.cfg;
  json echo = {{"seed", c.seed},
               {"domains", c.domains},
               {"ids_per_domain", c.ids_per_domain},
               {"samples_per_id", c.samples_per_id},
               {"query_per_id", c.query_per_id},
               {"gallery_per_id", c.gallery_per_id},
               {"channels", c.channels},
               {"height", c.height},
               {"width", c.width},
               {"separation", c.separation},
               {"noise_sigma", c.noise_sigma},
               {"target_domain", target}};
  json specs = json::array();
  for (const auto& d : data)
    specs.push_back({{"domain", d.spec.domain_id},
                     {"style_scale", d.spec.style_scale},
                     {"style_shift", d.spec.style_shift},
                     {"identity_range", {d.spec.identity_begin, d.spec.identity_end}}});
  echo["domain_specs"] = specs;
  write_text(fs::path(a.out) / "gen_config.json", echo.dump(2) + "\n");
  return kExitOk;
}

struct RunArgs {
  std::string config, data, out, ablate, resume, checkpoint, feature, variants;
  std::vector<std::string> sets;
  std::optional<std::size_t> target;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> domain;
  std::string split = "query";
  std::size_t max_samples = 16;
};

int cmd_train(const RunArgs& a) {
  Resolved probe = resolve_config(a.config, a.sets, a.target, a.seed, a.ablate, nullptr);
  const Sources src = load_sources(a.data, probe.target_domain);
  Resolved cfg = resolve_config(a.config, a.sets, a.target, a.seed, a.ablate, &src);
  const fs::path out(a.out);
  prepare_out(out);
  fs::create_directories(out / "checkpoints");

  MetaModel model(cfg.model);
  TrainState state;
  if (!a.resume.empty()) {
    require(fs::is_regular_file(a.resume), ErrorKind::missing_artifact, "resume checkpoint " + a.resume + " does not exist");
    restore_checkpoint(load_snapshot(a.resume), model, state);
    cfg.echo["resumed_from_step"] = state.step;
  }
  write_text(out / "resolved_config.json", cfg.echo.dump(2) + "\n");
  std::printf("config: %s\n", cfg.echo.dump().c_str());

  std::ofstream hist(out / "history.csv", std::ios::trunc);
  require(static_cast<bool>(hist), ErrorKind::data, "cannot write history.csv");
  hist << history_csv_header() << '\n';
  FitHooks hooks;
  hooks.after_step = [&](std::size_t, const StepMetrics&, const MetaModel&) { hist << to_csv(state.history.back()) << '\n'; };
  hooks.on_epoch_end = [&](std::size_t epoch, const MetaModel& m, const TrainState& s) {
    double total = 0.0, consis = 0.0;
    const std::size_t n = std::min(cfg.train.iters_per_epoch, s.history.size());
    for (std::size_t i = s.history.size() - n; i < s.history.size(); ++i) {
      total += s.history[i].total;
      consis += s.history[i].loss.consistency;
    }
    char name[64];
    std::snprintf(name, sizeof name, "epoch_%03zu.metaw", epoch + 1);
    save_model(out / "checkpoints" / name, m, s, cfg, src);
    std::printf("epoch %zu/%zu  loss %.4f  L_consis %.4f  lr %.3g\n", epoch + 1, cfg.train.epochs, total / double(n), consis / double(n),
                s.lr);
    std::fflush(stdout);
  };
  fit(model, src.data, cfg.train, state, hooks);
  hist.close();
  save_model(out / "model.metaw", model, state, cfg, src);
  std::printf("wrote %s\n", (out / "model.metaw").string().c_str());
  return kExitOk;
}

int cmd_eval(const RunArgs& a) {
  LoadedModel lm = load_model(a.checkpoint);
  const std::size_t target = a.target.value_or(lm.target_domain);
  Resolved cfg = resolve_config(a.config, a.sets, target, std::nullopt, "", nullptr);
  if (!a.feature.empty()) cfg.feature = a.feature;
  const FeatureMode mode = parse_feature_mode(cfg.feature);
  const fs::path data(a.data);
  const SyntheticDataset query = load_dataset((data / query_file(target)).string());
  const SyntheticDataset gallery = load_dataset((data / gallery_file(target)).string());
  const fs::path out(a.out);
  prepare_out(out);

  RetrievalReport rep = evaluate(lm.model, query, gallery, mode, cfg.max_rank);
  if (lm.model.config().expert_branch) {
    std::vector<SyntheticDataset> labelled;
    const auto files = find_train_files(data);
    for (std::size_t d : lm.source_domains) {
      auto it = files.find(d);
      require(it != files.end(), ErrorKind::missing_artifact, "train file for source domain " + std::to_string(d) + " is missing");
      labelled.push_back(load_dataset(it->second.string()));
    }
    rep.relevance_accuracy = relevance_accuracy(lm.model, labelled, lm.source_domains);
  }
  json echo = {{"checkpoint", fs::path(a.checkpoint).filename().string()},
               {"target_domain", target},
               {"feature", cfg.feature},
               {"max_rank", cfg.max_rank}};
  write_text(out / "resolved_config.json", echo.dump(2) + "\n");
  write_text(out / "report.json", to_json(rep).dump(2) + "\n");
  write_text(out / "cmc.csv", cmc_csv(rep));
  if (!rep.per_query_weights.empty()) write_text(out / "weights.csv", weights_csv(rep));
  std::printf("%s  feature=%s  mAP %.4f  rank-1 %.4f\n", fs::path(a.checkpoint).filename().string().c_str(), cfg.feature.c_str(), rep.mAP,
              rep.rank1());
  return kExitOk;
}

int cmd_inspect(const RunArgs& a) {
  LoadedModel lm = load_model(a.checkpoint);
  MetaModel& m = lm.model;
  const std::size_t domain = a.domain.value_or(lm.target_domain);
  const fs::path data(a.data);
  std::string file;
  if (a.split == "train")
    file = train_file(domain);
  else if (a.split == "query")
    file = query_file(domain);
  else if (a.split == "gallery")
    file = gallery_file(domain);
  else
    fail(ErrorKind::invalid_argument, "--split must be train, query or gallery");
  const SyntheticDataset ds = load_dataset((data / file).string());
  const std::size_t N = std::min(a.max_samples, ds.samples.size());
  require(N > 0, ErrorKind::invalid_argument, "--max-samples must be positive");
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor x = ds.images(idx);
  const std::size_t K = m.num_experts(), L = m.num_sites();

  // Per-sample statistics are taken along the expert path that fits each
  // sample best (lowest mean relevance).
  std::vector<std::vector<RelevanceVector>> rel;
  for (std::size_t k = 0; k < K; ++k) rel.push_back(m.collect_relevance(x, k));
  std::vector<std::vector<Tensor>> traces(K);
  {
    Tape tape;
    Tape::NoGradGuard ng(tape);
    for (std::size_t k = 0; k < K; ++k) m.expert_feature(tape, x, k, &traces[k]);
  }
  const fs::path out(a.out);
  prepare_out(out);
  std::ostringstream csv;
  csv.precision(17);
  csv << "site,expert_or_sample,channel,mean,var\n";
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t k = 0; k < K; ++k) {
      const NormStats& s = m.site_bank(l).expert(k).running;
      for (std::size_t c = 0; c < s.channels(); ++c) csv << l << ",expert" << k << ',' << c << ',' << s.mean[c] << ',' << s.var[c] << '\n';
    }
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (rel[k][n].mean() < rel[best][n].mean()) best = k;
      const NormStats s = compute_in_stats(traces[best][l])[n];
      for (std::size_t c = 0; c < s.channels(); ++c) csv << l << ",sample" << n << ',' << c << ',' << s.mean[c] << ',' << s.var[c] << '\n';
    }
  }
  write_text(out / "stats.csv", csv.str());
  json echo = {{"checkpoint", fs::path(a.checkpoint).filename().string()}, {"domain", domain}, {"split", a.split}, {"samples", N},
               {"sites", L}, {"experts", K}};
  write_text(out / "resolved_config.json", echo.dump(2) + "\n");
  std::printf("wrote %s: %zu sites x (%zu experts + %zu samples)\n", (out / "stats.csv").string().c_str(), L, K, N);
  return kExitOk;
}

int cmd_ablate(const RunArgs& a) {
  Resolved probe = resolve_config(a.config, a.sets, a.target, a.seed, "", nullptr);
  const Sources src = load_sources(a.data, probe.target_domain);
  Resolved cfg = resolve_config(a.config, a.sets, a.target, a.seed, "", &src);
  const fs::path data(a.data);
  Benchmark bench;
  bench.sources = src.data;
  bench.source_domains = src.domains;
  bench.target_domain = cfg.target_domain;
  bench.query = load_dataset((data / query_file(cfg.target_domain)).string());
  bench.gallery = load_dataset((data / gallery_file(cfg.target_domain)).string());

  auto variants = standard_ablation_variants(cfg.model, cfg.train);
  if (!a.variants.empty()) {
    std::vector<AblationVariant> picked;
    std::stringstream ss(a.variants);
    std::string key;
    while (std::getline(ss, key, ',')) {
      const auto name = ablation_variant_name(key);
      require(name.has_value(), ErrorKind::invalid_argument, "unknown variant '" + key + "' in --variants");
      for (const auto& v : variants)
        if (v.name == *name) picked.push_back(v);
    }
    variants = std::move(picked);
  }
  const fs::path out(a.out);
  prepare_out(out);
  write_text(out / "resolved_config.json", cfg.echo.dump(2) + "\n");
  const auto rows = run_ablation(variants, bench);
  const std::string table = render_ablation_table(rows);
  write_text(out / "ablation.txt", table);
  write_text(out / "ablation.json", to_json(rows).dump(2) + "\n");
  std::fputs(table.c_str(), stdout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"META synthetic re-identification toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate synthetic multi-domain datasets");
  g->add_option("--seed", gen.cfg.seed, "generator seed");
  g->add_option("--domains", gen.cfg.domains, "number of domains K")->check(CLI::PositiveNumber);
  g->add_option("--ids", gen.cfg.ids_per_domain, "identities per domain")->check(CLI::PositiveNumber);
  g->add_option("--samples", gen.cfg.samples_per_id, "train samples per identity")->check(CLI::Range(2, 1 << 20));
  g->add_option("--query", gen.cfg.query_per_id, "query samples per identity")->check(CLI::PositiveNumber);
  g->add_option("--gallery", gen.cfg.gallery_per_id, "gallery samples per identity")->check(CLI::PositiveNumber);
  g->add_option("--channels", gen.cfg.channels, "image channels")->check(CLI::PositiveNumber);
  g->add_option("--height", gen.cfg.height, "image height")->check(CLI::PositiveNumber);
  g->add_option("--width", gen.cfg.width, "image width")->check(CLI::PositiveNumber);
  g->add_option("--sep", gen.cfg.separation, "style separation s")->check(CLI::NonNegativeNumber);
  g->add_option("--noise", gen.cfg.noise_sigma, "pixel noise sigma")->check(CLI::NonNegativeNumber);
  g->add_option("--target-domain", gen.target, "held-out domain that gets query/gallery files (default K-1)");
  g->add_option("--out", gen.out, "output directory")->required();

  RunArgs run;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", run.config, "JSON config with model/train/eval/data sections");
    c->add_option("--set", run.sets, "dotted override, e.g. train.base_lr=1e-3 (repeatable)");
    c->add_option("--data", run.data, "dataset directory written by gen")->required();
    c->add_option("--out", run.out, "output directory")->required();
  };
  auto* t = app.add_subcommand("train", "train a model on every domain except the target");
  common(t);
  t->add_option("--target-domain", run.target, "held-out domain excluded from training");
  t->add_option("--seed", run.seed, "seed for model init and batch sampling");
  t->add_option("--ablate", run.ablate, "train an ablation variant (e.g. no-aggregation)");
  t->add_option("--resume", run.resume, "checkpoint to continue from");

  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on the held-out domain");
  common(e);
  e->add_option("--checkpoint", run.checkpoint, "checkpoint file")->required();
  e->add_option("--target-domain", run.target, "domain whose query/gallery files are used (default: from checkpoint)");
  e->add_option("--feature", run.feature, "final, f_global or f_exp");

  auto* s = app.add_subcommand("inspect-stats", "dump expert running stats and per-sample IN stats");
  s->add_option("--checkpoint", run.checkpoint, "checkpoint file")->required();
  s->add_option("--data", run.data, "dataset directory written by gen")->required();
  s->add_option("--out", run.out, "output directory")->required();
  s->add_option("--domain", run.domain, "domain of the inspected samples (default: target)");
  s->add_option("--split", run.split, "train, query or gallery");
  s->add_option("--max-samples", run.max_samples, "number of samples");

  auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation variants");
  common(ab);
  ab->add_option("--target-domain", run.target, "held-out domain");
  ab->add_option("--seed", run.seed, "seed for model init and batch sampling");
  ab->add_option("--variants", run.variants, "comma-separated subset (e.g. none,no-aggregation)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    std::cerr << app.help();
    return kExitUsage;
  }
  gen.target_set = g->count("--target-domain") > 0;

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(run);
    if (*e) return cmd_eval(run);
    if (*s) return cmd_inspect(run);
    if (*ab) return cmd_ablate(run);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err.kind());
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
