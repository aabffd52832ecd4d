#include "xmil/explainers.hpp"

#include <algorithm>
#include <random>
#include <sstream>

#include "xmil/io.hpp"
#include "xmil/lrp.hpp"

namespace xmil {

namespace {

Heatmap make_heatmap(const Bag& bag, std::string method, const ExplanationTarget& target, bool signed_scores) {
  Heatmap h;
  h.bag_id = bag.id;
  h.method = std::move(method);
  h.target = target;
  h.signed_scores = signed_scores;
  return h;
}

void check_target(const ModelCheckpoint& ckpt, const ExplanationTarget& target) {
  const TaskType task = ckpt.spec.head.task;
  const bool ok = (task == TaskType::Classification && target.kind == TargetKind::ClassLogit) ||
                  (task == TaskType::Regression && target.kind == TargetKind::RegressionDiff) ||
                  (task == TaskType::Survival && target.kind == TargetKind::SurvivalRisk);
  if (!ok) throw std::invalid_argument("explanation target " + target.label() + " does not fit a " + to_string(task) + " model");
  if (target.kind == TargetKind::ClassLogit && (target.cls < 0 || target.cls >= ckpt.spec.head.num_classes)) {
    throw std::invalid_argument("explanation class " + std::to_string(target.cls) + " out of range");
  }
}

std::string target_label_of(TargetKind kind, int cls) {
  switch (kind) {
    case TargetKind::ClassLogit: return "class:" + std::to_string(cls);
    case TargetKind::RegressionDiff: return "regression_diff";
    case TargetKind::SurvivalRisk: return "survival_risk";
  }
  return "?";
}

ExplanationTarget parse_target(const std::string& s) {
  ExplanationTarget t;
  if (s == "regression_diff") {
    t.kind = TargetKind::RegressionDiff;
  } else if (s == "survival_risk") {
    t.kind = TargetKind::SurvivalRisk;
  } else if (s.starts_with("class:")) {
    t.kind = TargetKind::ClassLogit;
    t.cls = std::stoi(s.substr(6));
  } else {
    throw FormatError("unknown explanation target '" + s + "'");
  }
  return t;
}

bool method_is_signed(const std::string& method, const ExplanationTarget& target) {
  if (method == "single") return target.kind != TargetKind::ClassLogit;
  return method == "gxi" || method == "ig" || method == "lrp";
}

}  // namespace

std::string ExplanationTarget::label() const { return target_label_of(kind, cls); }

ExplanationTarget default_target(const ForwardTrace& trace, std::optional<int> cls) {
  ExplanationTarget t;
  switch (trace.head.task) {
    case TaskType::Classification: {
      t.kind = TargetKind::ClassLogit;
      if (cls) {
        const auto k = static_cast<int>(trace.graph.value(trace.logits).size());
        if (*cls < 0 || *cls >= k) throw std::invalid_argument("target class out of range");
        t.cls = *cls;
      } else {
        const auto& p = trace.graph.value(trace.probabilities).values();
        t.cls = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      }
      break;
    }
    case TaskType::Regression: t.kind = TargetKind::RegressionDiff; break;
    case TaskType::Survival: t.kind = TargetKind::SurvivalRisk; break;
  }
  return t;
}

double target_value(const ForwardTrace& trace, const ExplanationTarget& target) {
  switch (target.kind) {
    case TargetKind::ClassLogit: return trace.graph.value(trace.logits)[static_cast<std::size_t>(target.cls)];
    case TargetKind::RegressionDiff: return trace.graph.value(trace.logits)[0];
    case TargetKind::SurvivalRisk: return trace.graph.value(trace.risk)[0];
  }
  return 0.0;
}

Tensor target_gradient(ForwardTrace& trace, const ExplanationTarget& target) {
  CompGraph& g = trace.graph;
  if (target.kind == TargetKind::SurvivalRisk) {
    g.backward(trace.risk, Tensor::scalar(1.0));
  } else {
    Tensor seed(g.value(trace.logits).shape(), 0.0);
    seed[target.kind == TargetKind::ClassLogit ? static_cast<std::size_t>(target.cls) : 0] = 1.0;
    g.backward(trace.logits, seed);
  }
  const Tensor& grad = g.grad(trace.input);
  return grad.empty() ? Tensor(g.value(trace.input).shape(), 0.0) : grad;
}

std::vector<double> attention_rollout(const std::vector<Tensor>& layers) {
  if (layers.empty()) throw std::invalid_argument("rollout: no attention layers");
  const std::size_t n = layers.front().rows();
  Tensor acc;
  for (const Tensor& a : layers) {
    if (a.rows() != n || a.cols() != n) throw ShapeError("rollout: attention matrices must be square and equal-sized");
    Tensor mixed = a;
    for (double& v : mixed.values()) v *= 0.5;
    for (std::size_t i = 0; i < n; ++i) mixed(i, i) += 0.5;
    acc = acc.empty() ? mixed : matmul(mixed, acc);
  }
  return std::vector<double>(acc.row(0).begin() + 1, acc.row(0).end());
}

Heatmap explain_attention(const ForwardTrace& trace, const std::string& bag_id) {
  Heatmap h;
  h.bag_id = bag_id;
  h.method = "attention";
  h.target = default_target(trace);
  h.signed_scores = false;
  if (trace.pooling_weights >= 0) {
    h.scores = trace.graph.value(trace.pooling_weights).values();
  } else if (!trace.attention_heads.empty()) {
    h.scores = attention_rollout(trace.attention_matrices());
  } else {
    throw std::invalid_argument("attention: trace has no attention record");
  }
  return h;
}

Heatmap explain_gxi(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target) {
  check_target(ckpt, target);
  ForwardTrace trace = forward(ckpt, bag.features);
  const Tensor grad = target_gradient(trace, target);
  Heatmap h = make_heatmap(bag, "gxi", target, true);
  h.scores.assign(bag.size(), 0.0);
  for (std::size_t n = 0; n < bag.size(); ++n)
    for (std::size_t d = 0; d < bag.dim(); ++d) h.scores[n] += grad(n, d) * bag.features(n, d);
  return h;
}

Heatmap explain_grad2(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target) {
  check_target(ckpt, target);
  ForwardTrace trace = forward(ckpt, bag.features);
  const Tensor grad = target_gradient(trace, target);
  Heatmap h = make_heatmap(bag, "grad2", target, false);
  h.scores.assign(bag.size(), 0.0);
  for (std::size_t n = 0; n < bag.size(); ++n)
    for (std::size_t d = 0; d < bag.dim(); ++d) h.scores[n] += grad(n, d) * grad(n, d);
  return h;
}

Heatmap explain_ig(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target, int steps) {
  if (steps < 1) throw std::invalid_argument("ig: steps must be >= 1");
  check_target(ckpt, target);
  Tensor avg(bag.features.shape(), 0.0);
  Tensor scaled = bag.features;
  for (int k = 0; k < steps; ++k) {
    const double alpha = (k + 0.5) / steps;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = alpha * bag.features[i];
    ForwardTrace trace = forward(ckpt, scaled);
    const Tensor grad = target_gradient(trace, target);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += grad[i];
  }
  Heatmap h = make_heatmap(bag, "ig", target, true);
  h.scores.assign(bag.size(), 0.0);
  for (std::size_t n = 0; n < bag.size(); ++n)
    for (std::size_t d = 0; d < bag.dim(); ++d) h.scores[n] += avg(n, d) / steps * bag.features(n, d);
  return h;
}

Heatmap explain_single(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target) {
  check_target(ckpt, target);
  Heatmap h = make_heatmap(bag, "single", target, target.kind != TargetKind::ClassLogit);
  h.scores.reserve(bag.size());
  for (std::size_t n = 0; n < bag.size(); ++n) {
    const ForwardTrace trace = forward(ckpt, take_rows(bag.features, {n}));
    if (target.kind == TargetKind::ClassLogit) {
      h.scores.push_back(trace.graph.value(trace.probabilities)[static_cast<std::size_t>(target.cls)]);
    } else {
      h.scores.push_back(target_value(trace, target));
    }
  }
  return h;
}

std::uint64_t random_seed_for(const std::string& bag_id, std::uint64_t global_seed) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bag_id) {
    hash ^= ch;
    hash *= 0x100000001b3ULL;
  }
  return hash ^ (global_seed * 0x9e3779b97f4a7c15ULL);
}

Heatmap explain_random(const Bag& bag, std::uint64_t seed) {
  Heatmap h;
  h.bag_id = bag.id;
  h.method = "random";
  h.signed_scores = false;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  h.scores.resize(bag.size());
  for (double& s : h.scores) s = unit(rng);
  return h;
}

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> methods{"attention", "gxi", "grad2", "ig", "single", "lrp", "random"};
  return methods;
}

Heatmap explain(const std::string& method, const ModelCheckpoint& ckpt, const Bag& bag, const ExplainOptions& options) {
  const ForwardTrace trace = forward(ckpt, bag.features);
  const ExplanationTarget target = default_target(trace, options.cls);
  Heatmap h;
  if (method == "attention") {
    h = explain_attention(trace, bag.id);
  } else if (method == "gxi") {
    h = explain_gxi(ckpt, bag, target);
  } else if (method == "grad2") {
    h = explain_grad2(ckpt, bag, target);
  } else if (method == "ig") {
    h = explain_ig(ckpt, bag, target, options.ig_steps);
  } else if (method == "single") {
    h = explain_single(ckpt, bag, target);
  } else if (method == "lrp") {
    h = lrp_explain(ckpt, bag, target, {options.lrp_epsilon, options.lrp_gamma}).heatmap;
  } else if (method == "random") {
    h = explain_random(bag, random_seed_for(bag.id, options.seed));
  } else {
    throw std::invalid_argument("unknown explanation method '" + method + "'");
  }
  h.target = target;
  return h;
}

std::string heatmap_csv(const Heatmap& heatmap) {
  std::ostringstream out;
  out << "bag_id,method,target,instance_index,score\n";
  const std::string target = heatmap.target.label();
  for (std::size_t n = 0; n < heatmap.scores.size(); ++n) {
    out << heatmap.bag_id << ',' << heatmap.method << ',' << target << ',' << n << ','
        << io::format_double(heatmap.scores[n]) << '\n';
  }
  return out.str();
}

void write_heatmap(const Heatmap& heatmap, const std::filesystem::path& path) {
  io::write_file_atomic(path, heatmap_csv(heatmap));
}

Heatmap read_heatmap(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "bag_id,method,target,instance_index,score") {
    throw FormatError(path.string() + ": bad heatmap header");
  }
  Heatmap h;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw FormatError(path.string() + ": expected 5 columns in '" + line + "'");
    if (expected == 0) {
      h.bag_id = f[0];
      h.method = f[1];
      h.target = parse_target(f[2]);
      h.signed_scores = method_is_signed(h.method, h.target);
    }
    if (std::stoul(f[3]) != expected) throw FormatError(path.string() + ": instance indices out of order");
    h.scores.push_back(std::stod(f[4]));
    ++expected;
  }
  if (h.scores.empty()) throw FormatError(path.string() + ": empty heatmap");
  return h;
}

}  // namespace xmil
