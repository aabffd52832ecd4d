#include "xmil/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "xmil/io.hpp"

namespace xmil {

namespace {

constexpr double kHazardFloor = 1e-7;

double clamp_hazard(double h) { return std::clamp(h, kHazardFloor, 1.0 - kHazardFloor); }

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;  // constant input: no association
  return sab / std::sqrt(saa * sbb);
}

class Optimizer {
 public:
  Optimizer(const TrainConfig& config) : config_(config) {}

  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads, double scale) {
    ++t_;
    double lr = config_.learning_rate;
    if (config_.warmup_steps > 0 && t_ <= config_.warmup_steps) {
      lr *= static_cast<double>(t_) / static_cast<double>(config_.warmup_steps);
    }
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const Tensor& g = git->second;
      if (config_.optimizer == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (g[i] * scale + config_.weight_decay * p[i]);
        continue;
      }
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(p.size(), 0.0);
        v.assign(p.size(), 0.0);
      }
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * scale + config_.weight_decay * p[i];
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v[i] = b2 * v[i] + (1 - b2) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
  }

 private:
  const TrainConfig& config_;
  int t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

std::vector<std::size_t> sample_instances(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k >= n) return idx;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("train: weight decay must be >= 0");
  if (sample_size == 0 || batch_size == 0) throw std::invalid_argument("train: sample and batch size must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("train: warmup must be >= 0");
  if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("train: beta must be in [0,1]");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},           {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
          {"optimizer", to_string(c.optimizer)}, {"sample_size", c.sample_size}, {"batch_size", c.batch_size},
          {"warmup_steps", c.warmup_steps}, {"beta", c.beta},               {"seed", c.seed}};
}

FoldPlan make_fold_plan(const Dataset& data) {
  FoldPlan plan;
  for (int f = 0; f < 5; ++f) plan.folds.push_back(splits_for_fold(data, f));
  return plan;
}

double loss_classification(const Tensor& logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size()) {
    throw std::invalid_argument("loss_classification: class out of range");
  }
  const double mx = *std::max_element(logits.values().begin(), logits.values().end());
  double z = 0.0;
  for (double l : logits.values()) z += std::exp(l - mx);
  return std::log(z) + mx - logits[static_cast<std::size_t>(target)];
}

double loss_regression(double pred_diff, double target, double reference_value) {
  const double e = pred_diff - (target - reference_value);
  return e * e;
}

double loss_survival(const Tensor& hazards, int interval, int censored, double beta) {
  const int k = static_cast<int>(hazards.size());
  if (interval < 1 || interval > k) throw std::invalid_argument("loss_survival: interval out of range");
  if (censored != 0 && censored != 1) throw std::invalid_argument("loss_survival: censored must be 0 or 1");
  double log_s_prev = 0.0;  // log S_0 = 0
  for (int j = 0; j < interval - 1; ++j) log_s_prev += std::log(1.0 - clamp_hazard(hazards[j]));
  const double h_y = clamp_hazard(hazards[interval - 1]);
  const double log_s_y = log_s_prev + std::log(1.0 - h_y);
  const double c = censored;
  const double uncensored = -(1.0 - c) * (log_s_prev + std::log(h_y));
  const double full = -c * log_s_y + uncensored;
  return (1.0 - beta) * full + beta * uncensored;
}

LossGrad loss_and_grad(const HeadOutput& out, const TaskLabel& label, const TaskHeadSpec& head, double beta) {
  LossGrad lg;
  lg.grad = Tensor(out.logits.shape(), 0.0);
  switch (head.task) {
    case TaskType::Classification: {
      const int cls = std::get<ClassLabel>(label).index;
      lg.loss = loss_classification(out.logits, cls);
      for (std::size_t i = 0; i < lg.grad.size(); ++i) {
        lg.grad[i] = out.probabilities[i] - (static_cast<int>(i) == cls ? 1.0 : 0.0);
      }
      break;
    }
    case TaskType::Regression: {
      const double target = std::get<RegressionLabel>(label).value;
      lg.loss = loss_regression(out.difference, target, head.reference_value);
      lg.grad[0] = 2.0 * (out.difference - (target - head.reference_value));
      break;
    }
    case TaskType::Survival: {
      const auto& s = std::get<SurvivalLabel>(label);
      lg.loss = loss_survival(out.hazards, s.interval, s.censored, beta);
      // d/dl_j of -log(1-h_j) is h_j; of -log h_j is -(1-h_j).
      const double c = s.censored;
      for (int j = 0; j < s.interval; ++j) {
        const double h = clamp_hazard(out.hazards[j]);
        if (j + 1 < s.interval) {
          lg.grad[j] = h * ((1.0 - beta) * c + (1.0 - c));
        } else {
          lg.grad[j] = (1.0 - beta) * c * h - (1.0 - c) * (1.0 - h);
        }
      }
      break;
    }
  }
  return lg;
}

double metric_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auroc: length mismatch");
  std::size_t pos = 0, neg = 0;
  for (int l : labels) (l ? pos : neg)++;
  if (pos == 0 || neg == 0) throw std::invalid_argument("auroc: need both classes");
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_sum += ranks[i];
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2.0) / (p * n);
}

double metric_auroc_multiclass(const std::vector<std::vector<double>>& probabilities, const std::vector<int>& labels) {
  if (probabilities.empty()) throw std::invalid_argument("auroc: no samples");
  const std::size_t classes = probabilities.front().size();
  if (classes == 2) {
    std::vector<double> s;
    for (const auto& p : probabilities) s.push_back(p[1]);
    return metric_auroc(s, labels);
  }
  double total = 0.0;
  int used = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s.push_back(probabilities[i][c]);
      y.push_back(labels[i] == static_cast<int>(c));
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(y.size())) continue;
    total += metric_auroc(s, y);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("auroc: need at least two classes present");
  return total / used;
}

double metric_spearman(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.size() != targets.size() || preds.size() < 2) throw std::invalid_argument("spearman: need >= 2 pairs");
  return pearson(average_ranks(preds), average_ranks(targets));
}

double metric_cindex(const std::vector<double>& risks, const std::vector<double>& times,
                     const std::vector<int>& censored) {
  if (risks.size() != times.size() || risks.size() != censored.size()) {
    throw std::invalid_argument("cindex: length mismatch");
  }
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < risks.size(); ++i) {
    if (censored[i]) continue;
    for (std::size_t j = 0; j < risks.size(); ++j) {
      if (!(times[i] < times[j])) continue;
      ++comparable;
      if (risks[i] > risks[j]) concordant += 1.0;
      else if (risks[i] == risks[j]) concordant += 0.5;
    }
  }
  if (comparable == 0) throw std::invalid_argument("cindex: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

std::string metric_name(TaskType task) {
  switch (task) {
    case TaskType::Classification: return "auroc";
    case TaskType::Regression: return "spearman";
    case TaskType::Survival: return "cindex";
  }
  return "?";
}

double evaluate(const ModelCheckpoint& ckpt, const std::vector<const Bag*>& bags) {
  std::vector<std::vector<double>> probs;
  std::vector<int> classes;
  std::vector<double> preds, targets, times;
  std::vector<int> censored;
  for (const Bag* bag : bags) {
    const HeadOutput out = forward(ckpt, bag->features).head_output();
    switch (ckpt.spec.head.task) {
      case TaskType::Classification:
        probs.push_back(out.probabilities.values());
        classes.push_back(std::get<ClassLabel>(bag->label).index);
        break;
      case TaskType::Regression:
        preds.push_back(out.difference);
        targets.push_back(std::get<RegressionLabel>(bag->label).value);
        break;
      case TaskType::Survival: {
        const auto& s = std::get<SurvivalLabel>(bag->label);
        preds.push_back(out.risk);
        times.push_back(s.time);
        censored.push_back(s.censored);
        break;
      }
    }
  }
  switch (ckpt.spec.head.task) {
    case TaskType::Classification: return metric_auroc_multiclass(probs, classes);
    case TaskType::Regression: return metric_spearman(preds, targets);
    case TaskType::Survival: return metric_cindex(preds, times, censored);
  }
  return 0.0;
}

namespace {

// Inference-mode loss over full training bags; smoother than a running
// average over dropout-perturbed updates.
double mean_loss(const ModelCheckpoint& ckpt, const std::vector<const Bag*>& bags, double beta) {
  double total = 0.0;
  for (const Bag* bag : bags)
    total += loss_and_grad(forward(ckpt, bag->features).head_output(), bag->label, ckpt.spec.head, beta).loss;
  return total / static_cast<double>(bags.size());
}

}  // namespace

TrainResult train(const Dataset& data, const ModelSpec& spec, const TrainConfig& config) {
  config.validate();
  if (data.splits.train.empty()) throw std::invalid_argument("train: empty training split");
  if (data.splits.val.empty()) throw std::invalid_argument("train: empty validation split");
  const auto train_bags = data.select(data.splits.train);
  const auto val_bags = data.select(data.splits.val);

  TrainResult result;
  ModelCheckpoint current = init_checkpoint(spec, config.seed);
  current.meta.metric = metric_name(spec.head.task);
  result.checkpoint = current;
  result.checkpoint.meta.val_metric = evaluate(current, val_bags);

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  Optimizer opt(config);
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::map<std::string, Tensor> acc;
    std::size_t in_batch = 0;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Bag& bag = *train_bags[order[pos]];
      const auto rows = sample_instances(bag.size(), config.sample_size, rng);
      const Tensor x = rows.size() == bag.size() ? bag.features : take_rows(bag.features, rows);
      ForwardTrace trace = forward(current, x, &rng);
      const LossGrad lg = loss_and_grad(trace.head_output(), bag.label, spec.head, config.beta);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", bag " + bag.id);
      }
      trace.graph.backward(trace.logits, lg.grad);
      for (auto& [name, g] : trace.graph.param_grads()) {
        auto [it, fresh] = acc.try_emplace(name, g);
        if (!fresh)
          for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
      }
      if (++in_batch == config.batch_size || pos + 1 == order.size()) {
        opt.step(current.params, acc, 1.0 / static_cast<double>(in_batch));
        acc.clear();
        in_batch = 0;
      }
    }
    EpochLog row;
    row.epoch = epoch;
    row.train_loss = mean_loss(current, train_bags, config.beta);
    row.val_metric = evaluate(current, val_bags);
    result.log.push_back(row);
    if (!have_best || row.val_metric > result.checkpoint.meta.val_metric) {
      have_best = true;
      result.checkpoint = current;
      result.checkpoint.meta.val_metric = row.val_metric;
      result.checkpoint.meta.best_epoch = epoch;
    }
  }
  result.checkpoint.meta.seed = config.seed;
  result.checkpoint.meta.epochs = config.epochs;
  result.checkpoint.meta.metric = metric_name(spec.head.task);
  return result;
}

TrainResult train_sweep(const Dataset& data, const ModelSpec& spec, const TrainConfig& base,
                        const std::vector<double>& learning_rates, const std::vector<double>& weight_decays) {
  if (learning_rates.empty() || weight_decays.empty()) throw std::invalid_argument("sweep: empty grid");
  std::optional<TrainResult> best;
  for (double lr : learning_rates) {
    for (double wd : weight_decays) {
      TrainConfig c = base;
      c.learning_rate = lr;
      c.weight_decay = wd;
      TrainResult r = train(data, spec, c);
      if (!best || r.checkpoint.meta.val_metric > best->checkpoint.meta.val_metric) best = std::move(r);
    }
  }
  return std::move(*best);
}

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,train_loss,val_metric\n";
  for (const auto& row : log) {
    out << row.epoch << ',' << io::format_double(row.train_loss) << ',' << io::format_double(row.val_metric) << '\n';
  }
  io::write_file_atomic(path, out.str());
}

}  // namespace xmil
