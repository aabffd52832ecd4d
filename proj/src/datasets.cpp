#include "xmil/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "xmil/io.hpp"

namespace xmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kBagMagic = "XMILBAG1";
constexpr int kPartitions = 5;

std::string bag_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "bag_%04zu", i);
  return buf;
}

std::vector<double> random_direction(std::mt19937_64& rng, std::size_t dim) {
  std::normal_distribution<double> normal;
  std::vector<double> u(dim);
  double norm = 0.0;
  for (double& v : u) {
    v = normal(rng);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (double& v : u) v /= norm;
  return u;
}

Tensor background(std::mt19937_64& rng, std::size_t n, std::size_t dim) {
  std::normal_distribution<double> normal;
  Tensor x = Tensor::matrix(n, dim);
  for (double& v : x.values()) v = normal(rng);
  return x;
}

void shift_row(Tensor& x, std::size_t row, const std::vector<double>& u, double shift) {
  for (std::size_t d = 0; d < u.size(); ++d) x(row, d) += shift * u[d];
}

std::vector<std::array<int, 2>> grid_positions(std::size_t n) {
  const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  std::vector<std::array<int, 2>> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = {static_cast<int>(i / width), static_cast<int>(i % width)};
  return pos;
}

void check_sizes(std::size_t n_bags, std::size_t n_min, std::size_t n_max, std::size_t dim) {
  if (n_bags == 0) throw std::invalid_argument("n_bags must be positive");
  if (n_min == 0 || n_max < n_min) throw std::invalid_argument("bag size range must satisfy 1 <= n_min <= n_max");
  if (dim == 0) throw std::invalid_argument("feature dimension must be positive");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Type-7 (linear interpolation) sample quantile of sorted data.
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::string to_string(TaskType task) {
  switch (task) {
    case TaskType::Classification: return "classification";
    case TaskType::Regression: return "regression";
    case TaskType::Survival: return "survival";
  }
  return "?";
}

TaskType parse_task(const std::string& name) {
  if (name == "classification") return TaskType::Classification;
  if (name == "regression") return TaskType::Regression;
  if (name == "survival") return TaskType::Survival;
  throw std::invalid_argument("unknown task '" + name + "'");
}

const Bag& Dataset::bag(const std::string& id) const {
  for (const Bag& b : bags)
    if (b.id == id) return b;
  throw std::out_of_range("no bag with id '" + id + "'");
}

std::vector<const Bag*> Dataset::select(const std::vector<std::string>& ids) const {
  std::vector<const Bag*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(&bag(id));
  return out;
}

Dataset generate_classification_bags(const ClassificationConfig& config) {
  check_sizes(config.n_bags, config.n_min, config.n_max, config.dim);
  if (config.witness_rate < 0.0 || config.witness_rate > 1.0) throw std::invalid_argument("witness_rate must be in [0,1]");
  if (!(config.signal_shift > 0.0)) throw std::invalid_argument("signal_shift must be positive");
  if (config.positive_fraction < 0.0 || config.positive_fraction > 1.0)
    throw std::invalid_argument("positive_fraction must be in [0,1]");
  const auto n_pos = static_cast<std::size_t>(std::llround(config.positive_fraction * double(config.n_bags)));
  if (config.witness_rate == 0.0 && n_pos > 0) {
    throw std::invalid_argument("cannot construct positive bags with witness_rate = 0");
  }

  std::mt19937_64 rng(config.seed);
  Dataset data;
  data.task = TaskType::Classification;
  data.dim = config.dim;
  data.num_classes = 2;
  data.seed = config.seed;
  data.direction = random_direction(rng, config.dim);

  std::vector<int> labels(config.n_bags, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::uniform_int_distribution<std::size_t> size_dist(config.n_min, config.n_max);
  std::bernoulli_distribution witness(config.witness_rate);
  for (std::size_t i = 0; i < config.n_bags; ++i) {
    Bag bag;
    bag.id = bag_id(i);
    const std::size_t n = size_dist(rng);
    bag.features = background(rng, n, config.dim);
    std::vector<bool> mask(n, false);
    if (labels[i] == 1) {
      bool any = false;
      for (std::size_t k = 0; k < n; ++k) any |= (mask[k] = witness(rng));
      if (!any) mask[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)] = true;
      for (std::size_t k = 0; k < n; ++k)
        if (mask[k]) shift_row(bag.features, k, data.direction, config.signal_shift);
    }
    bag.label = ClassLabel{labels[i]};
    bag.truth_mask = std::move(mask);
    bag.positions = grid_positions(n);
    data.bags.push_back(std::move(bag));
  }
  data.generator = {{"kind", "classification"},       {"n_bags", config.n_bags},
                    {"n_min", config.n_min},          {"n_max", config.n_max},
                    {"dim", config.dim},              {"witness_rate", config.witness_rate},
                    {"signal_shift", config.signal_shift}, {"positive_fraction", config.positive_fraction}};
  assign_partitions(data, config.seed);
  return data;
}

Dataset generate_regression_bags(const RegressionConfig& config) {
  check_sizes(config.n_bags, config.n_min, config.n_max, config.dim);
  if (config.noise_sd < 0.0) throw std::invalid_argument("noise_sd must be nonnegative");
  if (config.max_key_fraction < 0.0 || config.max_key_fraction > 1.0)
    throw std::invalid_argument("max_key_fraction must be in [0,1]");

  std::mt19937_64 rng(config.seed);
  Dataset data;
  data.task = TaskType::Regression;
  data.dim = config.dim;
  data.seed = config.seed;
  data.direction = random_direction(rng, config.dim);

  std::uniform_int_distribution<std::size_t> size_dist(config.n_min, config.n_max);
  std::uniform_real_distribution<double> fraction(0.0, config.max_key_fraction);
  std::normal_distribution<double> noise;
  for (std::size_t i = 0; i < config.n_bags; ++i) {
    Bag bag;
    bag.id = bag_id(i);
    const std::size_t n = size_dist(rng);
    bag.features = background(rng, n, config.dim);
    std::bernoulli_distribution key(fraction(rng));
    for (std::size_t k = 0; k < n; ++k)
      if (key(rng)) shift_row(bag.features, k, data.direction, config.key_shift);

    std::vector<double> contribution(n, 0.0);
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t d = 0; d < config.dim; ++d) contribution[k] += bag.features(k, d) * data.direction[d];
      total += contribution[k];
    }
    const double eps = noise(rng);
    bag.label = RegressionLabel{total / static_cast<double>(n) * config.signal_scale + config.noise_sd * eps};

    // Top quartile of per-instance contributions, ties broken by index.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return contribution[a] > contribution[b]; });
    std::vector<bool> mask(n, false);
    const std::size_t top = (n + 3) / 4;
    for (std::size_t k = 0; k < top; ++k) mask[order[k]] = true;
    bag.truth_mask = std::move(mask);
    bag.positions = grid_positions(n);
    data.bags.push_back(std::move(bag));
  }
  data.generator = {{"kind", "regression"},         {"n_bags", config.n_bags},
                    {"n_min", config.n_min},        {"n_max", config.n_max},
                    {"dim", config.dim},            {"signal_scale", config.signal_scale},
                    {"noise_sd", config.noise_sd},  {"key_shift", config.key_shift},
                    {"max_key_fraction", config.max_key_fraction}};
  assign_partitions(data, config.seed);
  if (config.reference_value) {
    data.reference_value = *config.reference_value;
  } else {
    std::vector<double> train_values;
    for (const Bag* b : data.select(data.splits.train)) train_values.push_back(std::get<RegressionLabel>(b->label).value);
    data.reference_value = median(train_values);
  }
  return data;
}

Dataset generate_survival_bags(const SurvivalConfig& config) {
  check_sizes(config.n_bags, config.n_min, config.n_max, config.dim);
  if (config.num_intervals < 2) throw std::invalid_argument("number of intervals must be >= 2");
  if (!(config.base_rate > 0.0) || !(config.censor_rate > 0.0)) throw std::invalid_argument("rates must be positive");

  std::mt19937_64 rng(config.seed);
  Dataset data;
  data.task = TaskType::Survival;
  data.dim = config.dim;
  data.num_intervals = config.num_intervals;
  data.seed = config.seed;
  data.direction = random_direction(rng, config.dim);

  std::uniform_int_distribution<std::size_t> size_dist(config.n_min, config.n_max);
  std::uniform_real_distribution<double> fraction(0.0, 1.0);
  std::vector<double> times;
  std::vector<int> censored;
  for (std::size_t i = 0; i < config.n_bags; ++i) {
    Bag bag;
    bag.id = bag_id(i);
    const std::size_t n = size_dist(rng);
    bag.features = background(rng, n, config.dim);
    std::bernoulli_distribution key(fraction(rng));
    std::vector<bool> mask(n, false);
    std::size_t keys = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (key(rng)) {
        mask[k] = true;
        ++keys;
        shift_row(bag.features, k, data.direction, config.signal_shift);
      }
    }
    const double risk = static_cast<double>(keys) / static_cast<double>(n);
    std::exponential_distribution<double> event_dist(config.base_rate * std::exp(risk));
    std::exponential_distribution<double> censor_dist(config.censor_rate);
    const double event = event_dist(rng);
    const double censor = censor_dist(rng);
    const int is_censored = censor < event ? 1 : 0;
    times.push_back(std::min(event, censor));
    censored.push_back(is_censored);
    bag.label = SurvivalLabel{1, is_censored, times.back()};
    bag.truth_mask = std::move(mask);
    bag.positions = grid_positions(n);
    data.bags.push_back(std::move(bag));
  }
  const auto intervals = discretize_event_times(times, censored, config.num_intervals);
  for (std::size_t i = 0; i < data.bags.size(); ++i) std::get<SurvivalLabel>(data.bags[i].label).interval = intervals[i];

  data.generator = {{"kind", "survival"},          {"n_bags", config.n_bags},
                    {"n_min", config.n_min},       {"n_max", config.n_max},
                    {"dim", config.dim},           {"signal_shift", config.signal_shift},
                    {"base_rate", config.base_rate}, {"censor_rate", config.censor_rate},
                    {"num_intervals", config.num_intervals}};
  assign_partitions(data, config.seed);
  return data;
}

std::vector<int> discretize_event_times(const std::vector<double>& times, const std::vector<int>& censored,
                                        int num_intervals) {
  if (times.size() != censored.size()) throw std::invalid_argument("times and censoring flags differ in length");
  if (num_intervals < 1) throw std::invalid_argument("number of intervals must be positive");
  std::vector<double> events;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (!censored[i]) events.push_back(times[i]);
  if (events.size() < static_cast<std::size_t>(num_intervals)) {
    throw std::invalid_argument("need at least " + std::to_string(num_intervals) + " uncensored events, got " +
                                std::to_string(events.size()));
  }
  std::sort(events.begin(), events.end());
  std::vector<double> edges;
  for (int k = 1; k < num_intervals; ++k) edges.push_back(quantile_sorted(events, double(k) / num_intervals));

  std::vector<int> out(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    int below = 0;
    for (double e : edges) below += e < times[i] ? 1 : 0;
    out[i] = 1 + below;
  }
  return out;
}

void assign_partitions(Dataset& data, std::uint64_t seed, int fold) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(data.bags.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  data.partitions.assign(data.bags.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) data.partitions[order[i]] = static_cast<int>(i % kPartitions);
  data.fold = fold;
  data.splits = splits_for_fold(data, fold);
}

Splits splits_for_fold(const Dataset& data, int fold) {
  if (fold < 0 || fold >= kPartitions) throw std::invalid_argument("fold must be in [0,5)");
  if (data.partitions.size() != data.bags.size()) throw std::logic_error("dataset has no partition assignment");
  Splits s;
  const int val = (fold + 1) % kPartitions;
  for (std::size_t i = 0; i < data.bags.size(); ++i) {
    const int p = data.partitions[i];
    if (p == fold) s.test.push_back(data.bags[i].id);
    else if (p == val) s.val.push_back(data.bags[i].id);
    else s.train.push_back(data.bags[i].id);
  }
  return s;
}

void save_bag(const Bag& bag, const fs::path& path) {
  if (bag.size() == 0 || bag.dim() == 0) throw std::invalid_argument("cannot save an empty bag");
  io::ByteWriter w;
  w.bytes(kBagMagic);
  w.u32(static_cast<std::uint32_t>(bag.size()));
  w.u32(static_cast<std::uint32_t>(bag.dim()));
  for (double v : bag.features.values()) w.f64(v);
  if (bag.truth_mask) {
    if (bag.truth_mask->size() != bag.size()) throw std::invalid_argument("truth mask length differs from N");
    w.u8(1);
    for (bool b : *bag.truth_mask) w.u8(b ? 1 : 0);
  } else {
    w.u8(0);
  }
  io::write_file_atomic(path, w.str());
}

Bag load_bag(const fs::path& path) {
  const std::string raw = io::read_file(path);
  io::ByteReader r(raw, path.string());
  const std::string_view magic = r.bytes(kBagMagic.size());
  if (magic != kBagMagic) {
    throw FormatError(path.string() + ": bad magic '" + std::string(magic) + "', expected 'XMILBAG1'");
  }
  const std::uint32_t n = r.u32();
  const std::uint32_t d = r.u32();
  if (n == 0 || d == 0) throw FormatError(path.string() + ": empty bag (N or D is zero)");
  if (r.remaining() < std::size_t{n} * d * 8 + 1) throw FormatError(path.string() + ": truncated file");
  Bag bag;
  bag.id = path.stem().string();
  std::vector<double> values(std::size_t{n} * d);
  for (double& v : values) v = r.f64();
  bag.features = Tensor::matrix(n, d, std::move(values));
  const std::uint8_t has_mask = r.u8();
  if (has_mask > 1) throw FormatError(path.string() + ": invalid truth-mask flag");
  if (has_mask) {
    std::vector<bool> mask(n);
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::uint8_t b = r.u8();
      if (b > 1) throw FormatError(path.string() + ": truth-mask byte is not 0/1");
      mask[i] = b == 1;
    }
    bag.truth_mask = std::move(mask);
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after bag payload");
  return bag;
}

json label_to_json(const TaskLabel& label) {
  return std::visit(
      [](const auto& l) -> json {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ClassLabel>) return {{"class", l.index}};
        else if constexpr (std::is_same_v<T, RegressionLabel>) return {{"value", l.value}};
        else return {{"interval", l.interval}, {"censored", l.censored}, {"time", l.time}};
      },
      label);
}

TaskLabel label_from_json(const json& j, TaskType task) {
  switch (task) {
    case TaskType::Classification: return ClassLabel{j.at("class").get<int>()};
    case TaskType::Regression: return RegressionLabel{j.at("value").get<double>()};
    case TaskType::Survival:
      return SurvivalLabel{j.at("interval").get<int>(), j.at("censored").get<int>(), j.at("time").get<double>()};
  }
  throw std::logic_error("unreachable");
}

void save_dataset(const Dataset& data, const fs::path& dir) {
  json manifest;
  manifest["schema_version"] = 1;
  manifest["task"] = to_string(data.task);
  json dims = {{"features", data.dim}};
  if (data.task == TaskType::Classification) dims["num_classes"] = data.num_classes;
  if (data.task == TaskType::Survival) dims["num_intervals"] = data.num_intervals;
  if (data.task == TaskType::Regression) dims["reference_value"] = data.reference_value;
  manifest["dims"] = dims;
  json bags = json::object(), labels = json::object(), partitions = json::object();
  for (std::size_t i = 0; i < data.bags.size(); ++i) {
    const Bag& b = data.bags[i];
    const std::string rel = "bags/" + b.id + ".bag";
    save_bag(b, dir / rel);
    bags[b.id] = rel;
    labels[b.id] = label_to_json(b.label);
    if (!data.partitions.empty()) partitions[b.id] = data.partitions[i];
  }
  manifest["bags"] = bags;
  manifest["labels"] = labels;
  manifest["partitions"] = partitions;
  manifest["fold"] = data.fold;
  manifest["splits"] = {{"train", data.splits.train}, {"val", data.splits.val}, {"test", data.splits.test}};
  manifest["generator"] = data.generator;
  manifest["seed"] = data.seed;
  manifest["direction"] = data.direction;
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(io::read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  const fs::path root = manifest_path.parent_path();
  Dataset data;
  try {
    data.task = parse_task(manifest.at("task").get<std::string>());
    const json& dims = manifest.at("dims");
    data.dim = dims.at("features").get<std::size_t>();
    if (data.task == TaskType::Classification) data.num_classes = dims.value("num_classes", 2);
    if (data.task == TaskType::Survival) data.num_intervals = dims.value("num_intervals", 4);
    if (data.task == TaskType::Regression) data.reference_value = dims.value("reference_value", 0.0);

    const json& labels = manifest.at("labels");
    for (const auto& [id, rel] : manifest.at("bags").items()) {
      const fs::path file = root / rel.get<std::string>();
      if (!fs::exists(file)) throw FormatError("manifest lists missing bag file " + file.string());
      Bag bag = load_bag(file);
      bag.id = id;
      if (bag.dim() != data.dim) {
        throw FormatError("bag " + id + " has D=" + std::to_string(bag.dim()) + ", manifest says " +
                          std::to_string(data.dim));
      }
      if (!labels.contains(id)) throw FormatError("no label for bag " + id);
      bag.label = label_from_json(labels.at(id), data.task);
      data.bags.push_back(std::move(bag));
    }
    if (manifest.contains("partitions") && !manifest["partitions"].empty()) {
      for (const Bag& b : data.bags) data.partitions.push_back(manifest["partitions"].at(b.id).get<int>());
    }
    data.fold = manifest.value("fold", 0);
    const json& splits = manifest.at("splits");
    data.splits.train = splits.value("train", std::vector<std::string>{});
    data.splits.val = splits.value("val", std::vector<std::string>{});
    data.splits.test = splits.value("test", std::vector<std::string>{});
    if (manifest.contains("generator")) data.generator = manifest["generator"];
    data.seed = manifest.value("seed", std::uint64_t{0});
    data.direction = manifest.value("direction", std::vector<double>{});
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }

  std::set<std::string> seen;
  for (const auto* list : {&data.splits.train, &data.splits.val, &data.splits.test}) {
    for (const auto& id : *list) {
      if (!seen.insert(id).second) throw FormatError("bag " + id + " appears in more than one split");
      data.bag(id);
    }
  }
  return data;
}

}  // namespace xmil
