#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "xmil/tensor.hpp"

namespace xmil {

/// Malformed bag, manifest or checkpoint file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskType { Classification, Regression, Survival };

std::string to_string(TaskType task);
TaskType parse_task(const std::string& name);

struct ClassLabel {
  int index = 0;
};
struct RegressionLabel {
  double value = 0.0;
};
struct SurvivalLabel {
  int interval = 1;  // 1..K
  int censored = 0;  // 1 = event not observed
  double time = 0.0;
};

using TaskLabel = std::variant<ClassLabel, RegressionLabel, SurvivalLabel>;

struct Bag {
  std::string id;
  Tensor features;  // N x D
  TaskLabel label;
  std::optional<std::vector<std::array<int, 2>>> positions;
  std::optional<std::vector<bool>> truth_mask;

  std::size_t size() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

struct Splits {
  std::vector<std::string> train, val, test;
};

/// In-memory dataset together with the metadata its manifest records.
struct Dataset {
  TaskType task = TaskType::Classification;
  std::size_t dim = 0;
  int num_classes = 2;
  int num_intervals = 4;
  double reference_value = 0.0;
  std::vector<Bag> bags;
  std::vector<int> partitions;  // per bag, 0..4 (cross-validation partition)
  int fold = 0;
  Splits splits;
  std::vector<double> direction;  // signal direction of synthetic generators
  nlohmann::json generator = nlohmann::json::object();
  std::uint64_t seed = 0;

  const Bag& bag(const std::string& id) const;
  std::vector<const Bag*> select(const std::vector<std::string>& ids) const;
};

struct ClassificationConfig {
  std::size_t n_bags = 500;
  std::size_t n_min = 100, n_max = 200;
  std::size_t dim = 32;
  double witness_rate = 0.1;
  double signal_shift = 2.0;
  double positive_fraction = 0.5;
  std::uint64_t seed = 0;
};

struct RegressionConfig {
  std::size_t n_bags = 500;
  std::size_t n_min = 32, n_max = 96;
  std::size_t dim = 32;
  double signal_scale = 1.0;
  double noise_sd = 0.1;
  double key_shift = 2.0;         // mean shift of key instances along the direction
  double max_key_fraction = 0.5;  // per-bag key fraction ~ U(0, max)
  std::optional<double> reference_value;  // default: training median
  std::uint64_t seed = 0;
};

struct SurvivalConfig {
  std::size_t n_bags = 500;
  std::size_t n_min = 32, n_max = 96;
  std::size_t dim = 32;
  double signal_shift = 2.0;
  double base_rate = 0.1;
  double censor_rate = 0.05;
  int num_intervals = 4;
  std::uint64_t seed = 0;
};

Dataset generate_classification_bags(const ClassificationConfig& config);
Dataset generate_regression_bags(const RegressionConfig& config);
Dataset generate_survival_bags(const SurvivalConfig& config);

/// Maps observed times to intervals 1..K whose edges are the interior
/// K-quantiles (linear interpolation) of the uncensored times. Intervals are
/// right-closed, so a time equal to an edge falls in the lower interval and
/// coinciding edges collapse onto interval 1.
std::vector<int> discretize_event_times(const std::vector<double>& times, const std::vector<int>& censored,
                                        int num_intervals = 4);

/// Assigns the 5 cyclic cross-validation partitions and the train/val/test
/// split of `fold` (test = partition fold, val = fold+1 mod 5).
void assign_partitions(Dataset& data, std::uint64_t seed, int fold = 0);
Splits splits_for_fold(const Dataset& data, int fold);

// Bag file: "XMILBAG1", u32 N, u32 D, N*D f64, u8 mask flag, N mask bytes.
void save_bag(const Bag& bag, const std::filesystem::path& path);
/// The returned bag's id is the file stem; labels live in the manifest.
Bag load_bag(const std::filesystem::path& path);

nlohmann::json label_to_json(const TaskLabel& label);
TaskLabel label_from_json(const nlohmann::json& j, TaskType task);

/// Writes manifest.json plus bags/<id>.bag under `dir`.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace xmil
