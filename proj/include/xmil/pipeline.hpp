#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmil/datasets.hpp"
#include "xmil/explainers.hpp"
#include "xmil/faithfulness.hpp"
#include "xmil/models.hpp"
#include "xmil/stats.hpp"
#include "xmil/training.hpp"

namespace xmil {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  TaskType task = TaskType::Classification;
  std::uint64_t seed = 7;
  std::filesystem::path out = "runs/default";
  int threads = 1;

  // Data: either an existing manifest or generator settings.
  std::optional<std::filesystem::path> manifest;
  nlohmann::json generator = nlohmann::json::object();  // task-specific generator keys
  int fold = 0;

  ModelSpec model;  // input_dim and head sizes are filled from the dataset
  std::optional<double> reference_value;
  TrainConfig train;
  std::vector<double> sweep_learning_rates, sweep_weight_decays;

  std::vector<std::string> methods{"attention", "gxi", "grad2", "ig", "single", "lrp", "random"};
  ExplainOptions explain;
  std::string explain_split = "test";
  std::size_t max_bags = 100;
  bool lrp_ledger = false;

  TrackedOutput track = TrackedOutput::Softmax;
  double alpha = 0.05;
  std::size_t report_curve_bags = 4;

  void validate() const;
};

/// Parses a JSON config; unknown keys anywhere are rejected. Relative
/// manifest paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

/// Applies the output-root environment variable to a relative output path.
std::filesystem::path resolve_out_dir(const std::filesystem::path& out);

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path manifest() const { return root / "data" / "manifest.json"; }
  std::filesystem::path checkpoint() const { return root / "model" / "checkpoint.xmil"; }
  std::filesystem::path train_log() const { return root / "model" / "train_log.csv"; }
  std::filesystem::path model_metrics() const { return root / "model" / "metrics.json"; }
  std::filesystem::path heatmap_dir() const { return root / "heatmaps"; }
  std::filesystem::path heatmap(const std::string& bag, const std::string& method) const {
    return heatmap_dir() / (bag + "__" + method + ".csv");
  }
  std::filesystem::path curves() const { return root / "flip" / "curves.csv"; }
  std::filesystem::path srg() const { return root / "flip" / "srg.csv"; }
  std::filesystem::path stats_dir() const { return root / "stats"; }
  std::filesystem::path report_dir() const { return root / "report"; }
  std::filesystem::path summary() const { return root / "summary.json"; }
};

/// Files written by a stage, relative to the run root.
using FileList = std::vector<std::string>;

Dataset generate_dataset(const RunConfig& config);
FileList stage_gen_data(const RunConfig& config, const RunPaths& paths, Dataset* out = nullptr);
Dataset load_run_dataset(const RunConfig& config, const RunPaths& paths);

ModelSpec resolve_model_spec(const RunConfig& config, const Dataset& data);
FileList stage_train(const RunConfig& config, const RunPaths& paths, const Dataset& data,
                     ModelCheckpoint* out = nullptr);

std::vector<const Bag*> explained_bags(const RunConfig& config, const Dataset& data);
using HeatmapMap = std::map<std::pair<std::string, std::string>, Heatmap>;
FileList stage_explain(const RunConfig& config, const RunPaths& paths, const Dataset& data,
                       const ModelCheckpoint& ckpt, HeatmapMap* out = nullptr);
HeatmapMap load_heatmaps(const RunConfig& config, const RunPaths& paths, const std::vector<const Bag*>& bags);

FileList stage_flip(const RunConfig& config, const RunPaths& paths, const Dataset& data, const ModelCheckpoint& ckpt,
                    const HeatmapMap& heatmaps, CohortResult* out = nullptr);
FileList stage_stats(const RunConfig& config, const RunPaths& paths, const CohortResult& cohort,
                     ComparisonTable* out = nullptr);
FileList stage_report(const RunConfig& config, const RunPaths& paths);

/// Human-readable verdict naming the best method by MRS.
std::string verdict_line(const ComparisonTable& table);

/// Every stage in order; writes summary.json. Returns 0 iff no stage failed.
int run_all(const RunConfig& config, const RunPaths& paths, std::ostream& log);

}  // namespace xmil
