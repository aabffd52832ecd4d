#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xmil/explainers.hpp"
#include "xmil/models.hpp"

namespace xmil {

inline constexpr std::size_t kPartitions = 100;
inline constexpr std::size_t kCurveLength = kPartitions + 1;

enum class Ordering { Ascending, Descending };
std::string to_string(Ordering o);

/// Output followed along the curve for classification models.
enum class TrackedOutput { Softmax, Logit };
TrackedOutput parse_tracked_output(const std::string& name);
std::string to_string(TrackedOutput t);

struct PartitionPlan {
  Ordering ordering = Ordering::Ascending;
  std::vector<std::vector<std::size_t>> sets;  // E_1..E_100, instance indices
};

/// Stable sort by (score under the ordering, instance index), sliced into
/// chunks of floor(N i/100) - floor(N (i-1)/100).
PartitionPlan partition_patches(const std::vector<double>& scores, Ordering ordering);

/// Scalar followed along the curve: class probability (or logit), regression
/// difference, or survival risk.
double tracked_output(const ForwardTrace& trace, const ExplanationTarget& target, TrackedOutput track);

/// Outputs for X_m = union of E_{m+1..100}, m = 0..100, instances kept in
/// bag order. The empty bag is a single all-zero instance.
std::vector<double> flip_curve(const ModelCheckpoint& ckpt, const Bag& bag, const PartitionPlan& plan,
                               const ExplanationTarget& target, TrackedOutput track = TrackedOutput::Softmax);

/// (1/100) sum_{m=0}^{100} f(X_m).
double aupc(const std::vector<double>& curve);

struct PerturbationRecord {
  std::string bag_id;
  std::string method;
  std::vector<double> ascending, descending;
  double aupc_ascending = 0.0;
  double aupc_descending = 0.0;
  double srg = 0.0;
};

double srg(const PerturbationRecord& record);

PerturbationRecord evaluate_heatmap(const ModelCheckpoint& ckpt, const Bag& bag, const Heatmap& heatmap,
                                    TrackedOutput track = TrackedOutput::Softmax);

struct CohortResult {
  std::vector<std::string> bag_ids;
  std::vector<std::string> methods;
  std::vector<PerturbationRecord> records;  // bag-major, then method order
  std::vector<std::vector<double>> srg;      // bags x methods

  const PerturbationRecord& record(std::size_t bag, std::size_t method) const {
    return records[bag * methods.size() + method];
  }
};

/// `heatmaps` is keyed by (bag id, method); every cell must be present.
CohortResult evaluate_cohort(const ModelCheckpoint& ckpt, const std::vector<const Bag*>& bags,
                             const std::vector<std::string>& methods,
                             const std::map<std::pair<std::string, std::string>, Heatmap>& heatmaps,
                             TrackedOutput track = TrackedOutput::Softmax, int threads = 1);

// curves.csv: bag_id,method,ordering,m,output
// srg.csv:    bag_id,method,aupc_asc,aupc_desc,srg
std::string curves_csv(const CohortResult& cohort);
std::string srg_csv(const CohortResult& cohort);
/// Reads srg.csv back into a bags x methods matrix (row/column order of first appearance).
CohortResult read_srg_csv(const std::filesystem::path& path);

}  // namespace xmil
