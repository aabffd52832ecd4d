#include "xmil/faithfulness.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "xmil/io.hpp"
#include "xmil/parallel.hpp"

namespace xmil {

std::string to_string(Ordering o) { return o == Ordering::Ascending ? "ascending" : "descending"; }

TrackedOutput parse_tracked_output(const std::string& name) {
  if (name == "softmax") return TrackedOutput::Softmax;
  if (name == "logit") return TrackedOutput::Logit;
  throw std::invalid_argument("unknown tracked output '" + name + "' (softmax|logit)");
}

std::string to_string(TrackedOutput t) { return t == TrackedOutput::Softmax ? "softmax" : "logit"; }

PartitionPlan partition_patches(const std::vector<double>& scores, Ordering ordering) {
  if (scores.empty()) throw std::invalid_argument("partition: empty heatmap");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (ordering == Ordering::Ascending) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  }
  PartitionPlan plan;
  plan.ordering = ordering;
  plan.sets.resize(kPartitions);
  for (std::size_t i = 1; i <= kPartitions; ++i) {
    const std::size_t lo = n * (i - 1) / kPartitions, hi = n * i / kPartitions;
    plan.sets[i - 1].assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return plan;
}

double tracked_output(const ForwardTrace& trace, const ExplanationTarget& target, TrackedOutput track) {
  if (target.kind == TargetKind::ClassLogit && track == TrackedOutput::Softmax) {
    return trace.graph.value(trace.probabilities)[static_cast<std::size_t>(target.cls)];
  }
  return target_value(trace, target);
}

std::vector<double> flip_curve(const ModelCheckpoint& ckpt, const Bag& bag, const PartitionPlan& plan,
                               const ExplanationTarget& target, TrackedOutput track) {
  if (bag.dim() != ckpt.spec.input_dim) {
    throw ShapeError("flip: bag has D=" + std::to_string(bag.dim()) + ", model expects " +
                     std::to_string(ckpt.spec.input_dim));
  }
  if (plan.sets.size() != kPartitions) throw std::invalid_argument("flip: plan must have 100 sets");
  std::vector<char> kept(bag.size(), 1);
  std::size_t covered = 0;
  for (const auto& set : plan.sets) covered += set.size();
  if (covered != bag.size()) throw std::invalid_argument("flip: plan does not cover the bag");

  std::vector<double> curve(kCurveLength);
  auto eval = [&](std::size_t remaining) {
    if (remaining == 0) {
      return tracked_output(forward(ckpt, Tensor::matrix(1, bag.dim())), target, track);
    }
    std::vector<std::size_t> rows;
    rows.reserve(remaining);
    for (std::size_t i = 0; i < bag.size(); ++i)
      if (kept[i]) rows.push_back(i);
    return tracked_output(forward(ckpt, take_rows(bag.features, rows)), target, track);
  };
  std::size_t remaining = bag.size();
  curve[0] = tracked_output(forward(ckpt, bag.features), target, track);
  for (std::size_t m = 1; m <= kPartitions; ++m) {
    const auto& removed = plan.sets[m - 1];
    if (removed.empty()) {
      curve[m] = curve[m - 1];  // X_m == X_{m-1}
      continue;
    }
    for (std::size_t i : removed) {
      if (!kept[i]) throw std::invalid_argument("flip: instance listed in two sets");
      kept[i] = 0;
    }
    remaining -= removed.size();
    curve[m] = eval(remaining);
  }
  return curve;
}

double aupc(const std::vector<double>& curve) {
  if (curve.size() != kCurveLength) throw std::invalid_argument("aupc: curve must have 101 points");
  double s = 0.0;
  for (double v : curve) s += v;
  return s / static_cast<double>(kPartitions);
}

double srg(const PerturbationRecord& record) { return record.aupc_ascending - record.aupc_descending; }

PerturbationRecord evaluate_heatmap(const ModelCheckpoint& ckpt, const Bag& bag, const Heatmap& heatmap,
                                    TrackedOutput track) {
  if (heatmap.scores.size() != bag.size()) {
    throw ShapeError("flip: heatmap for " + heatmap.bag_id + " has " + std::to_string(heatmap.scores.size()) +
                     " scores, bag has " + std::to_string(bag.size()));
  }
  PerturbationRecord rec;
  rec.bag_id = bag.id;
  rec.method = heatmap.method;
  rec.ascending = flip_curve(ckpt, bag, partition_patches(heatmap.scores, Ordering::Ascending), heatmap.target, track);
  rec.descending = flip_curve(ckpt, bag, partition_patches(heatmap.scores, Ordering::Descending), heatmap.target, track);
  rec.aupc_ascending = aupc(rec.ascending);
  rec.aupc_descending = aupc(rec.descending);
  rec.srg = srg(rec);
  return rec;
}

CohortResult evaluate_cohort(const ModelCheckpoint& ckpt, const std::vector<const Bag*>& bags,
                             const std::vector<std::string>& methods,
                             const std::map<std::pair<std::string, std::string>, Heatmap>& heatmaps,
                             TrackedOutput track, int threads) {
  CohortResult out;
  out.methods = methods;
  for (const Bag* b : bags) out.bag_ids.push_back(b->id);
  for (const Bag* b : bags)
    for (const auto& m : methods)
      if (!heatmaps.contains({b->id, m})) throw std::invalid_argument("flip: missing heatmap for (" + b->id + ", " + m + ")");
  out.records.resize(bags.size() * methods.size());
  parallel_for(out.records.size(), threads, [&](std::size_t cell) {
    const Bag& bag = *bags[cell / methods.size()];
    const std::string& method = methods[cell % methods.size()];
    out.records[cell] = evaluate_heatmap(ckpt, bag, heatmaps.at({bag.id, method}), track);
  });
  out.srg.assign(bags.size(), std::vector<double>(methods.size()));
  for (std::size_t b = 0; b < bags.size(); ++b)
    for (std::size_t m = 0; m < methods.size(); ++m) out.srg[b][m] = out.record(b, m).srg;
  return out;
}

std::string curves_csv(const CohortResult& cohort) {
  std::ostringstream out;
  out << "bag_id,method,ordering,m,output\n";
  for (const auto& rec : cohort.records) {
    for (const auto* curve : {&rec.ascending, &rec.descending}) {
      const char* name = curve == &rec.ascending ? "ascending" : "descending";
      for (std::size_t m = 0; m < curve->size(); ++m) {
        out << rec.bag_id << ',' << rec.method << ',' << name << ',' << m << ',' << io::format_double((*curve)[m])
            << '\n';
      }
    }
  }
  return out.str();
}

std::string srg_csv(const CohortResult& cohort) {
  std::ostringstream out;
  out << "bag_id,method,aupc_asc,aupc_desc,srg\n";
  for (const auto& rec : cohort.records) {
    out << rec.bag_id << ',' << rec.method << ',' << io::format_double(rec.aupc_ascending) << ','
        << io::format_double(rec.aupc_descending) << ',' << io::format_double(rec.srg) << '\n';
  }
  return out.str();
}

CohortResult read_srg_csv(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "bag_id,method,aupc_asc,aupc_desc,srg") {
    throw FormatError(path.string() + ": bad SRG header");
  }
  CohortResult out;
  std::map<std::pair<std::string, std::string>, PerturbationRecord> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw FormatError(path.string() + ": expected 5 columns in '" + line + "'");
    if (std::find(out.bag_ids.begin(), out.bag_ids.end(), f[0]) == out.bag_ids.end()) out.bag_ids.push_back(f[0]);
    if (std::find(out.methods.begin(), out.methods.end(), f[1]) == out.methods.end()) out.methods.push_back(f[1]);
    PerturbationRecord rec;
    rec.bag_id = f[0];
    rec.method = f[1];
    rec.aupc_ascending = std::stod(f[2]);
    rec.aupc_descending = std::stod(f[3]);
    rec.srg = std::stod(f[4]);
    if (!cells.emplace(std::make_pair(f[0], f[1]), rec).second) {
      throw FormatError(path.string() + ": duplicate cell (" + f[0] + ", " + f[1] + ")");
    }
  }
  for (const auto& b : out.bag_ids) {
    std::vector<double> row;
    for (const auto& m : out.methods) {
      auto it = cells.find({b, m});
      if (it == cells.end()) throw FormatError(path.string() + ": missing cell (" + b + ", " + m + ")");
      row.push_back(it->second.srg);
      out.records.push_back(it->second);
    }
    out.srg.push_back(std::move(row));
  }
  return out;
}

}  // namespace xmil
