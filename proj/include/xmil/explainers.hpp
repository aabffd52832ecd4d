#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xmil/datasets.hpp"
#include "xmil/models.hpp"

namespace xmil {

enum class TargetKind { ClassLogit, RegressionDiff, SurvivalRisk };

struct ExplanationTarget {
  TargetKind kind = TargetKind::ClassLogit;
  int cls = 0;

  /// "class:<c>", "regression_diff" or "survival_risk".
  std::string label() const;
};

/// Classification explains `cls` if given, otherwise the predicted class.
ExplanationTarget default_target(const ForwardTrace& trace, std::optional<int> cls = std::nullopt);

struct Heatmap {
  std::string bag_id;
  std::string method;
  std::vector<double> scores;
  ExplanationTarget target;
  bool signed_scores = true;
};

/// Scalar explained by gradient methods: the class logit, the regression
/// difference, or the survival risk.
double target_value(const ForwardTrace& trace, const ExplanationTarget& target);
/// d target / d X (N x D) for a trace that already ran forward.
Tensor target_gradient(ForwardTrace& trace, const ExplanationTarget& target);

/// Pooling weights (attnmil, mambamil) or class-token attention rollout (transmil).
Heatmap explain_attention(const ForwardTrace& trace, const std::string& bag_id);
/// Rollout prod_l (0.5 A_l + 0.5 I), applied from the first layer outward;
/// returns the class-token row restricted to the instance columns.
std::vector<double> attention_rollout(const std::vector<Tensor>& layers);

Heatmap explain_gxi(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target);
Heatmap explain_grad2(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target);
/// Integrated gradients from the zero baseline with the midpoint rule.
Heatmap explain_ig(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target, int steps = 64);
/// Model output on every singleton bag {x_n}: class probability, regression
/// difference or survival risk.
Heatmap explain_single(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target);
Heatmap explain_random(const Bag& bag, std::uint64_t seed);

/// Per-bag seed for the random baseline: global seed mixed with an FNV-1a
/// hash of the bag id.
std::uint64_t random_seed_for(const std::string& bag_id, std::uint64_t global_seed);

struct ExplainOptions {
  std::optional<int> cls;
  int ig_steps = 64;
  double lrp_epsilon = 1e-9;
  double lrp_gamma = 0.0;
  std::uint64_t seed = 0;
};

const std::vector<std::string>& known_methods();
/// Dispatches by method name: attention, gxi, grad2, ig, single, lrp, random.
Heatmap explain(const std::string& method, const ModelCheckpoint& ckpt, const Bag& bag, const ExplainOptions& options);

// Heatmap CSV: bag_id,method,target,instance_index,score
std::string heatmap_csv(const Heatmap& heatmap);
void write_heatmap(const Heatmap& heatmap, const std::filesystem::path& path);
Heatmap read_heatmap(const std::filesystem::path& path);

}  // namespace xmil
