// xmil: command-line front end for the MIL explanation benchmark.
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "xmil/io.hpp"
#include "xmil/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> threads;
  std::optional<std::string> methods;
  std::optional<int> cls;
  std::optional<std::string> track;
  std::optional<std::string> task;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--task", o.task, "classification, regression or survival");
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--out", o.out, "run directory");
  cmd->add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--methods", o.methods, "comma-separated explanation methods");
  cmd->add_option("--class", o.cls, "explained class (default: predicted)");
  cmd->add_option("--track", o.track, "tracked output: softmax or logit");
}

xmil::RunConfig resolve(const Overrides& o) {
  nlohmann::json j = nlohmann::json::object();
  std::filesystem::path base;
  if (!o.config.empty()) {
    j = nlohmann::json::parse(xmil::io::read_file(o.config));
    base = std::filesystem::path(o.config).parent_path();
  }
  if (o.task) j["task"] = *o.task;
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) j["out"] = *o.out;
  if (o.threads) j["threads"] = *o.threads;
  if (o.methods) {
    std::vector<std::string> list;
    std::stringstream ss(*o.methods);
    for (std::string m; std::getline(ss, m, ',');)
      if (!m.empty()) list.push_back(m);
    j["explain"]["methods"] = list;
  }
  if (o.cls) j["explain"]["class"] = *o.cls;
  if (o.track) j["flip"]["track"] = *o.track;
  xmil::RunConfig cfg = xmil::parse_run_config(j, base);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explainability benchmark for multiple-instance learning models"};
  app.require_subcommand(1);
  Overrides o;
  auto* gen = app.add_subcommand("gen-data", "generate (or import) the dataset");
  auto* train = app.add_subcommand("train", "train a model on the run dataset");
  auto* explain = app.add_subcommand("explain", "compute heatmaps for every method");
  auto* flip = app.add_subcommand("flip", "patch-dropping curves and SRG");
  auto* stats = app.add_subcommand("stats", "pairwise method comparison");
  auto* report = app.add_subcommand("report", "SVG figures from flip results");
  auto* all = app.add_subcommand("run-all", "every stage in order");
  for (auto* c : {gen, train, explain, flip, stats, report, all}) add_common(c, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const xmil::RunConfig cfg = resolve(o);
    const xmil::RunPaths paths{xmil::resolve_out_dir(cfg.out)};
    auto done = [](const xmil::FileList& files) {
      for (const auto& f : files) std::cout << f << '\n';
      return 0;
    };
    if (*all) return xmil::run_all(cfg, paths, std::cout);
    if (*gen) return done(xmil::stage_gen_data(cfg, paths));
    const xmil::Dataset data = xmil::load_run_dataset(cfg, paths);
    if (*train) return done(xmil::stage_train(cfg, paths, data));
    if (*report) return done(xmil::stage_report(cfg, paths));
    const xmil::ModelCheckpoint ckpt = xmil::load_checkpoint(paths.checkpoint());
    if (*explain) return done(xmil::stage_explain(cfg, paths, data, ckpt));
    xmil::CohortResult cohort;
    if (*flip) {
      const auto heatmaps = xmil::load_heatmaps(cfg, paths, xmil::explained_bags(cfg, data));
      return done(xmil::stage_flip(cfg, paths, data, ckpt, heatmaps));
    }
    cohort = xmil::read_srg_csv(paths.srg());
    xmil::ComparisonTable table;
    const int rc = done(xmil::stage_stats(cfg, paths, cohort, &table));
    std::cout << xmil::verdict_line(table) << '\n';
    return rc;
  } catch (const xmil::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
