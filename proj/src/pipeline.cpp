#include "xmil/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iomanip>
#include <set>
#include <sstream>

#include "xmil/io.hpp"
#include "xmil/lrp.hpp"
#include "xmil/parallel.hpp"
#include "xmil/report.hpp"

namespace xmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSummarySchema = 1;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
void read(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key) || obj[key].is_null()) return;
  try {
    dst = obj[key].get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::set<std::string> generator_keys(TaskType task) {
  std::set<std::string> keys{"manifest", "fold", "n_bags", "n_min", "n_max", "dim"};
  switch (task) {
    case TaskType::Classification:
      keys.insert({"witness_rate", "signal_shift", "positive_fraction"});
      break;
    case TaskType::Regression:
      keys.insert({"signal_scale", "noise_sd", "key_shift", "max_key_fraction", "reference_value"});
      break;
    case TaskType::Survival:
      keys.insert({"signal_shift", "base_rate", "censor_rate", "num_intervals"});
      break;
  }
  return keys;
}

std::string rel(const RunPaths& paths, const fs::path& p) { return fs::relative(p, paths.root).generic_string(); }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (methods.empty()) throw ConfigError("explain.methods must not be empty");
  std::set<std::string> seen;
  for (const auto& m : methods) {
    const auto& known = known_methods();
    if (std::find(known.begin(), known.end(), m) == known.end()) throw ConfigError("unknown method '" + m + "'");
    if (!seen.insert(m).second) throw ConfigError("method '" + m + "' listed twice");
  }
  if (manifest && !fs::exists(*manifest)) throw ConfigError("manifest " + manifest->string() + " does not exist");
  if (fold < 0 || fold > 4) throw ConfigError("fold must be in 0..4");
  if (explain_split != "train" && explain_split != "val" && explain_split != "test") {
    throw ConfigError("explain.split must be train, val or test");
  }
  if (max_bags == 0) throw ConfigError("explain.max_bags must be positive");
  if (explain.ig_steps < 1) throw ConfigError("explain.ig_steps must be >= 1");
  if (!(explain.lrp_epsilon > 0.0) || explain.lrp_gamma < 0.0) throw ConfigError("lrp epsilon must be > 0, gamma >= 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("stats.alpha must be in (0,1)");
  if (sweep_learning_rates.empty() != sweep_weight_decays.empty()) {
    throw ConfigError("train.sweep needs both learning_rates and weight_decays");
  }
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  reject_unknown(j, {"task", "seed", "out", "threads", "data", "model", "train", "explain", "flip", "stats", "report"},
                 "config");
  RunConfig c;
  if (j.contains("task")) {
    try {
      c.task = parse_task(j["task"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config.task: ") + e.what());
    }
  }
  read(j, "seed", c.seed, "config");
  std::string out = c.out.string();
  read(j, "out", out, "config");
  c.out = out;
  read(j, "threads", c.threads, "config");

  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, generator_keys(c.task), "data");
    if (d.contains("manifest") && !d["manifest"].is_null()) {
      fs::path m = d["manifest"].get<std::string>();
      c.manifest = m.is_relative() && !base_dir.empty() ? base_dir / m : m;
    }
    read(d, "fold", c.fold, "data");
    for (const auto& [key, value] : d.items()) {
      if (key == "manifest" || key == "fold") continue;
      if (key == "reference_value") {
        if (!value.is_null()) c.reference_value = value.get<double>();
        continue;
      }
      c.generator[key] = value;
    }
  }

  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, {"architecture", "hidden", "layers", "heads", "state_size", "bias", "dropout"}, "model");
    if (m.contains("architecture")) {
      try {
        c.model.arch = parse_architecture(m["architecture"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("model.architecture: ") + e.what());
      }
    }
    read(m, "hidden", c.model.hidden, "model");
    read(m, "layers", c.model.layers, "model");
    read(m, "heads", c.model.heads, "model");
    read(m, "state_size", c.model.state_size, "model");
    read(m, "bias", c.model.bias, "model");
    read(m, "dropout", c.model.dropout, "model");
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, {"epochs", "learning_rate", "weight_decay", "optimizer", "sample_size", "batch_size",
                       "warmup_steps", "beta", "sweep"},
                   "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    if (t.contains("optimizer")) {
      try {
        c.train.optimizer = parse_optimizer(t["optimizer"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("train.optimizer: ") + e.what());
      }
    }
    read(t, "sample_size", c.train.sample_size, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "warmup_steps", c.train.warmup_steps, "train");
    read(t, "beta", c.train.beta, "train");
    if (t.contains("sweep")) {
      const json& s = t["sweep"];
      reject_unknown(s, {"learning_rates", "weight_decays"}, "train.sweep");
      read(s, "learning_rates", c.sweep_learning_rates, "train.sweep");
      read(s, "weight_decays", c.sweep_weight_decays, "train.sweep");
    }
  }

  if (j.contains("explain")) {
    const json& e = j["explain"];
    reject_unknown(e, {"methods", "class", "ig_steps", "lrp_epsilon", "lrp_gamma", "split", "max_bags", "ledger"},
                   "explain");
    read(e, "methods", c.methods, "explain");
    if (e.contains("class") && !e["class"].is_null()) c.explain.cls = e["class"].get<int>();
    read(e, "ig_steps", c.explain.ig_steps, "explain");
    read(e, "lrp_epsilon", c.explain.lrp_epsilon, "explain");
    read(e, "lrp_gamma", c.explain.lrp_gamma, "explain");
    read(e, "split", c.explain_split, "explain");
    read(e, "max_bags", c.max_bags, "explain");
    read(e, "ledger", c.lrp_ledger, "explain");
  }
  if (j.contains("flip")) {
    const json& f = j["flip"];
    reject_unknown(f, {"track"}, "flip");
    if (f.contains("track")) {
      try {
        c.track = parse_tracked_output(f["track"].get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("flip.track: ") + e.what());
      }
    }
  }
  if (j.contains("stats")) {
    reject_unknown(j["stats"], {"alpha"}, "stats");
    read(j["stats"], "alpha", c.alpha, "stats");
  }
  if (j.contains("report")) {
    reject_unknown(j["report"], {"curve_bags"}, "report");
    read(j["report"], "curve_bags", c.report_curve_bags, "report");
  }
  c.explain.seed = c.seed;
  c.train.seed = c.seed + 1;
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

json to_json(const RunConfig& c) {
  json data = c.generator;
  if (c.manifest) data["manifest"] = c.manifest->string();
  data["fold"] = c.fold;
  if (c.reference_value) data["reference_value"] = *c.reference_value;
  json train = to_json(c.train);
  train.erase("seed");
  if (!c.sweep_learning_rates.empty()) {
    train["sweep"] = {{"learning_rates", c.sweep_learning_rates}, {"weight_decays", c.sweep_weight_decays}};
  }
  json explain = {{"methods", c.methods},
                  {"ig_steps", c.explain.ig_steps},
                  {"lrp_epsilon", c.explain.lrp_epsilon},
                  {"lrp_gamma", c.explain.lrp_gamma},
                  {"split", c.explain_split},
                  {"max_bags", c.max_bags},
                  {"ledger", c.lrp_ledger}};
  explain["class"] = c.explain.cls ? json(*c.explain.cls) : json(nullptr);
  return {{"task", to_string(c.task)},
          {"seed", c.seed},
          {"out", c.out.generic_string()},
          {"threads", c.threads},
          {"data", data},
          {"model",
           {{"architecture", to_string(c.model.arch)},
            {"hidden", c.model.hidden},
            {"layers", c.model.layers},
            {"heads", c.model.heads},
            {"state_size", c.model.state_size},
            {"bias", c.model.bias},
            {"dropout", c.model.dropout}}},
          {"train", train},
          {"explain", explain},
          {"flip", {{"track", to_string(c.track)}}},
          {"stats", {{"alpha", c.alpha}}},
          {"report", {{"curve_bags", c.report_curve_bags}}}};
}

fs::path resolve_out_dir(const fs::path& out) {
  if (out.is_absolute()) return out;
  if (const char* root = std::getenv("XMIL_OUT_ROOT"); root && *root) return fs::path(root) / out;
  return out;
}

Dataset generate_dataset(const RunConfig& config) {
  const json& g = config.generator;
  const std::string where = "data";
  auto common = [&](auto& cfg) {
    read(g, "n_bags", cfg.n_bags, where);
    read(g, "n_min", cfg.n_min, where);
    read(g, "n_max", cfg.n_max, where);
    read(g, "dim", cfg.dim, where);
    cfg.seed = config.seed;
  };
  Dataset data;
  switch (config.task) {
    case TaskType::Classification: {
      ClassificationConfig cfg;
      common(cfg);
      read(g, "witness_rate", cfg.witness_rate, where);
      read(g, "signal_shift", cfg.signal_shift, where);
      read(g, "positive_fraction", cfg.positive_fraction, where);
      data = generate_classification_bags(cfg);
      break;
    }
    case TaskType::Regression: {
      RegressionConfig cfg;
      common(cfg);
      read(g, "signal_scale", cfg.signal_scale, where);
      read(g, "noise_sd", cfg.noise_sd, where);
      read(g, "key_shift", cfg.key_shift, where);
      read(g, "max_key_fraction", cfg.max_key_fraction, where);
      cfg.reference_value = config.reference_value;
      data = generate_regression_bags(cfg);
      break;
    }
    case TaskType::Survival: {
      SurvivalConfig cfg;
      common(cfg);
      read(g, "signal_shift", cfg.signal_shift, where);
      read(g, "base_rate", cfg.base_rate, where);
      read(g, "censor_rate", cfg.censor_rate, where);
      read(g, "num_intervals", cfg.num_intervals, where);
      data = generate_survival_bags(cfg);
      break;
    }
  }
  if (config.fold != 0) {
    data.fold = config.fold;
    data.splits = splits_for_fold(data, config.fold);
  }
  return data;
}

FileList stage_gen_data(const RunConfig& config, const RunPaths& paths, Dataset* out) {
  Dataset data = config.manifest ? load_dataset(*config.manifest) : generate_dataset(config);
  if (config.manifest && config.fold != data.fold && !data.partitions.empty()) {
    data.fold = config.fold;
    data.splits = splits_for_fold(data, config.fold);
  }
  if (data.task != config.task) throw ConfigError("dataset task " + to_string(data.task) + " does not match config");
  save_dataset(data, paths.manifest().parent_path());
  FileList files{rel(paths, paths.manifest())};
  for (const Bag& b : data.bags) files.push_back("data/bags/" + b.id + ".bag");
  if (out) *out = std::move(data);
  return files;
}

Dataset load_run_dataset(const RunConfig& config, const RunPaths& paths) {
  if (fs::exists(paths.manifest())) return load_dataset(paths.manifest());
  if (config.manifest) return load_dataset(*config.manifest);
  throw std::runtime_error("no dataset at " + paths.manifest().string() + "; run gen-data first");
}

ModelSpec resolve_model_spec(const RunConfig& config, const Dataset& data) {
  ModelSpec spec = config.model;
  spec.input_dim = data.dim;
  spec.head.task = data.task;
  spec.head.num_classes = data.num_classes;
  spec.head.num_intervals = data.num_intervals;
  spec.head.reference_value = data.task == TaskType::Regression ? data.reference_value : 0.0;
  spec.validate();
  return spec;
}

FileList stage_train(const RunConfig& config, const RunPaths& paths, const Dataset& data, ModelCheckpoint* out) {
  const ModelSpec spec = resolve_model_spec(config, data);
  TrainResult result = config.sweep_learning_rates.empty()
                           ? train(data, spec, config.train)
                           : train_sweep(data, spec, config.train, config.sweep_learning_rates,
                                         config.sweep_weight_decays);
  save_checkpoint(result.checkpoint, paths.checkpoint());
  write_training_log(result.log, paths.train_log());
  json metrics = {{"metric", result.checkpoint.meta.metric},
                  {"val", result.checkpoint.meta.val_metric},
                  {"best_epoch", result.checkpoint.meta.best_epoch}};
  if (!data.splits.test.empty()) {
    try {
      metrics["test"] = evaluate(result.checkpoint, data.select(data.splits.test));
    } catch (const std::invalid_argument&) {
      metrics["test"] = nullptr;  // metric undefined on this split
    }
  }
  io::write_file_atomic(paths.model_metrics(), metrics.dump(2) + "\n");
  if (out) *out = std::move(result.checkpoint);
  return {rel(paths, paths.checkpoint()), rel(paths, paths.train_log()), rel(paths, paths.model_metrics())};
}

std::vector<const Bag*> explained_bags(const RunConfig& config, const Dataset& data) {
  const auto& ids = config.explain_split == "train" ? data.splits.train
                    : config.explain_split == "val" ? data.splits.val
                                                    : data.splits.test;
  if (ids.empty()) throw std::runtime_error("split '" + config.explain_split + "' is empty");
  std::vector<std::string> chosen(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), config.max_bags)));
  return data.select(chosen);
}

FileList stage_explain(const RunConfig& config, const RunPaths& paths, const Dataset& data,
                       const ModelCheckpoint& ckpt, HeatmapMap* out) {
  const auto bags = explained_bags(config, data);
  const std::size_t cells = bags.size() * config.methods.size();
  std::vector<Heatmap> maps(cells);
  std::vector<std::vector<LedgerEntry>> ledgers(config.lrp_ledger ? bags.size() : 0);
  parallel_for(cells, config.threads, [&](std::size_t i) {
    const Bag& bag = *bags[i / config.methods.size()];
    const std::string& method = config.methods[i % config.methods.size()];
    if (method == "lrp" && config.lrp_ledger) {
      const ForwardTrace trace = forward(ckpt, bag.features);
      const LrpResult r = lrp_explain(ckpt, bag, default_target(trace, config.explain.cls),
                                      {config.explain.lrp_epsilon, config.explain.lrp_gamma});
      maps[i] = r.heatmap;
      ledgers[i / config.methods.size()] = r.ledger;
    } else {
      maps[i] = explain(method, ckpt, bag, config.explain);
    }
  });
  fs::remove_all(paths.heatmap_dir());
  FileList files;
  for (std::size_t i = 0; i < cells; ++i) {
    const fs::path p = paths.heatmap(maps[i].bag_id, maps[i].method);
    write_heatmap(maps[i], p);
    files.push_back(rel(paths, p));
  }
  for (std::size_t b = 0; b < ledgers.size(); ++b) {
    const fs::path p = paths.heatmap_dir() / "ledger" / (bags[b]->id + ".csv");
    write_ledger_csv(ledgers[b], p);
    files.push_back(rel(paths, p));
  }
  if (out) {
    out->clear();
    for (auto& h : maps) out->emplace(std::make_pair(h.bag_id, h.method), std::move(h));
  }
  return files;
}

HeatmapMap load_heatmaps(const RunConfig& config, const RunPaths& paths, const std::vector<const Bag*>& bags) {
  HeatmapMap out;
  for (const Bag* b : bags) {
    for (const auto& m : config.methods) {
      const fs::path p = paths.heatmap(b->id, m);
      if (!fs::exists(p)) throw std::runtime_error("missing heatmap " + p.string() + "; run explain first");
      out.emplace(std::make_pair(b->id, m), read_heatmap(p));
    }
  }
  return out;
}

FileList stage_flip(const RunConfig& config, const RunPaths& paths, const Dataset& data, const ModelCheckpoint& ckpt,
                    const HeatmapMap& heatmaps, CohortResult* out) {
  const auto bags = explained_bags(config, data);
  CohortResult cohort = evaluate_cohort(ckpt, bags, config.methods, heatmaps, config.track, config.threads);
  io::write_file_atomic(paths.curves(), curves_csv(cohort));
  io::write_file_atomic(paths.srg(), srg_csv(cohort));
  if (out) *out = std::move(cohort);
  return {rel(paths, paths.curves()), rel(paths, paths.srg())};
}

std::string verdict_line(const ComparisonTable& table) {
  const std::string best = table.verdict();
  const auto it = std::find(table.methods.begin(), table.methods.end(), best);
  std::ostringstream out;
  out << "verdict: " << best << " (MRS " << std::fixed << std::setprecision(3)
      << table.mrs[static_cast<std::size_t>(it - table.methods.begin())] << ")";
  return out.str();
}

FileList stage_stats(const RunConfig& config, const RunPaths& paths, const CohortResult& cohort,
                     ComparisonTable* out) {
  ComparisonTable table = compare_methods(cohort.methods, cohort.srg, config.alpha);
  table.grouping = {{"task", to_string(config.task)}, {"architecture", to_string(config.model.arch)}};
  const fs::path dir = paths.stats_dir();
  io::write_file_atomic(dir / "comparison.json", to_json(table).dump(2) + "\n");
  io::write_file_atomic(dir / "comparison.csv", comparison_csv(table));
  std::ostringstream mrs;
  mrs << "method,mrs\n";
  for (std::size_t i = 0; i < table.methods.size(); ++i) mrs << table.methods[i] << ',' << io::format_double(table.mrs[i]) << '\n';
  io::write_file_atomic(dir / "mrs.csv", mrs.str());
  io::write_file_atomic(dir / "verdict.txt", verdict_line(table) + "\n");
  if (out) *out = std::move(table);
  return {rel(paths, dir / "comparison.json"), rel(paths, dir / "comparison.csv"), rel(paths, dir / "mrs.csv"),
          rel(paths, dir / "verdict.txt")};
}

FileList stage_report(const RunConfig& config, const RunPaths& paths) {
  const CohortResult cohort = read_srg_csv(paths.srg());
  const ComparisonTable table = compare_methods(cohort.methods, cohort.srg, config.alpha);
  const fs::path dir = paths.report_dir();
  FileList files;
  auto emit = [&](const std::string& name, const std::string& svg) {
    io::write_file_atomic(dir / name, svg);
    files.push_back(rel(paths, dir / name));
  };

  // Curves for the first few bags.
  std::map<std::string, std::map<std::string, report::CurveSet>> curves;
  const std::size_t wanted = std::min(config.report_curve_bags, cohort.bag_ids.size());
  const std::set<std::string> plotted(cohort.bag_ids.begin(), cohort.bag_ids.begin() + static_cast<std::ptrdiff_t>(wanted));
  {
    std::istringstream in(io::read_file(paths.curves()));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (f.size() != 5) throw FormatError(paths.curves().string() + ": malformed row '" + line + "'");
      if (!plotted.contains(f[0])) continue;
      auto& set = curves[f[0]][f[1]];
      set.method = f[1];
      (f[2] == "ascending" ? set.ascending : set.descending).push_back(std::stod(f[4]));
    }
  }
  fs::remove_all(dir);
  for (std::size_t b = 0; b < wanted; ++b) {
    const std::string& id = cohort.bag_ids[b];
    std::vector<report::CurveSet> sets;
    for (const auto& m : cohort.methods) sets.push_back(curves[id][m]);
    emit("curves_" + id + ".svg", report::curves_svg(id, sets));
  }
  emit("srg_strip.svg", report::srg_strip_svg(cohort.methods, cohort.srg));
  emit("effect_matrix.svg", report::effect_matrix_svg(table));
  emit("mrs.svg", report::mrs_bar_svg(table.methods, table.mrs));
  return files;
}

int run_all(const RunConfig& config, const RunPaths& paths, std::ostream& log) {
  json summary;
  summary["schema_version"] = kSummarySchema;
  summary["started_at"] = utc_now();
  summary["config"] = to_json(config);
  summary["run_dir"] = paths.root.generic_string();
  json stages = json::array();
  json files = json::object();
  int status = 0;

  Dataset data;
  ModelCheckpoint ckpt;
  HeatmapMap heatmaps;
  CohortResult cohort;
  ComparisonTable table;

  auto stage = [&](const std::string& name, auto&& body) {
    if (status != 0) {
      stages.push_back({{"name", name}, {"status", "skipped"}});
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      files[name] = body();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      stages.push_back({{"name", name}, {"status", "ok"}, {"seconds", secs}});
      log << "[" << name << "] ok (" << std::fixed << std::setprecision(1) << secs << " s)\n";
    } catch (const std::exception& e) {
      status = 1;
      stages.push_back({{"name", name}, {"status", "error"}, {"error", e.what()}});
      log << "[" << name << "] error: " << e.what() << "\n";
    }
  };

  stage("gen-data", [&] { return stage_gen_data(config, paths, &data); });
  stage("train", [&] { return stage_train(config, paths, data, &ckpt); });
  stage("explain", [&] { return stage_explain(config, paths, data, ckpt, &heatmaps); });
  stage("flip", [&] { return stage_flip(config, paths, data, ckpt, heatmaps, &cohort); });
  stage("stats", [&] { return stage_stats(config, paths, cohort, &table); });
  stage("report", [&] { return stage_report(config, paths); });

  summary["stages"] = stages;
  summary["files"] = files;
  if (status == 0) {
    summary["model"] = json::parse(io::read_file(paths.model_metrics()));
    summary["verdict"] = table.verdict();
    json mrs = json::object();
    for (std::size_t i = 0; i < table.methods.size(); ++i) mrs[table.methods[i]] = table.mrs[i];
    summary["mean_rank_scores"] = mrs;
    log << verdict_line(table) << "\n";
  }
  summary["finished_at"] = utc_now();
  summary["exit_code"] = status;
  io::write_file_atomic(paths.summary(), summary.dump(2) + "\n");
  return status;
}

}  // namespace xmil
