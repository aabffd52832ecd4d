#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "xmil/datasets.hpp"
#include "xmil/models.hpp"

namespace xmil {

enum class OptimizerKind { Sgd, Adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  int epochs = 15;
  double learning_rate = 4e-4;
  double weight_decay = 1e-2;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::size_t sample_size = 2048;  // instances drawn per training bag, clipped to N
  std::size_t batch_size = 4;      // bags per optimizer step
  int warmup_steps = 0;            // linear learning-rate warmup
  double beta = 0.0;               // survival: weight of the uncensored-only term
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

struct FoldPlan {
  std::vector<Splits> folds;  // fold f: test = partition f, val = partition f+1
};

FoldPlan make_fold_plan(const Dataset& data);

double loss_classification(const Tensor& logits, int target);
double loss_regression(double pred_diff, double target, double reference_value);
/// Weighted discrete-time survival negative log-likelihood. `interval` is
/// 1-based; hazards are clamped to [1e-7, 1-1e-7].
double loss_survival(const Tensor& hazards, int interval, int censored, double beta);

/// Loss for `label` plus its gradient with respect to the head logits.
struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};
LossGrad loss_and_grad(const HeadOutput& out, const TaskLabel& label, const TaskHeadSpec& head, double beta);

/// Binary AUROC with 0.5 credit for ties.
double metric_auroc(const std::vector<double>& scores, const std::vector<int>& labels);
/// Macro one-vs-rest AUROC over the classes present.
double metric_auroc_multiclass(const std::vector<std::vector<double>>& probabilities, const std::vector<int>& labels);
double metric_spearman(const std::vector<double>& preds, const std::vector<double>& targets);
/// Harrell's C over pairs with uncensored i and t_i < t_j; ties in risk get 0.5.
double metric_cindex(const std::vector<double>& risks, const std::vector<double>& times,
                     const std::vector<int>& censored);

std::string metric_name(TaskType task);
/// Task metric of `ckpt` on full bags.
double evaluate(const ModelCheckpoint& ckpt, const std::vector<const Bag*>& bags);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
};

struct TrainResult {
  ModelCheckpoint checkpoint;  // best validation epoch
  std::vector<EpochLog> log;
};

/// Trains on data.splits.train and selects on data.splits.val.
TrainResult train(const Dataset& data, const ModelSpec& spec, const TrainConfig& config);

/// Grid over learning rate x weight decay; returns the best-validation run.
TrainResult train_sweep(const Dataset& data, const ModelSpec& spec, const TrainConfig& base,
                        const std::vector<double>& learning_rates, const std::vector<double>& weight_decays);

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

}  // namespace xmil
