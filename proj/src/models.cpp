#include "xmil/models.hpp"

#include <cmath>

#include "xmil/io.hpp"

namespace xmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::string_view kCheckpointMagic = "XMILCKP1";

std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

class Builder {
 public:
  Builder(CompGraph& g, const ModelCheckpoint& ckpt) : g_(g), ckpt_(ckpt) {}

  NodeId p(const std::string& name) { return g_.param(name, ckpt_.param(name)); }

  NodeId linear(NodeId x, const std::string& prefix) {
    NodeId y = g_.matmul(x, p(prefix + ".weight"), RelevanceRoute::Lhs);
    if (ckpt_.spec.bias) y = g_.add(y, p(prefix + ".bias"));
    return y;
  }

  NodeId dropout(NodeId x, double rate) { return rate > 0.0 ? g_.dropout(x, rate) : x; }

  /// Instance embedding relu(X W + b).
  NodeId embed(NodeId x) { return dropout(g_.relu(linear(x, "embed")), ckpt_.spec.dropout[0]); }

  /// Attention pooling: a = softmax_n(w . tanh(V h_n)), returns a^T H.
  NodeId attention_pool(NodeId h, ForwardTrace& trace) {
    NodeId hidden = dropout(g_.tanh(linear(h, "attn.V")), ckpt_.spec.dropout[1]);
    NodeId scores = linear(hidden, "attn.w");
    NodeId weights = g_.softmax(scores, 0);
    g_.set_name(weights, "pooling_weights");
    trace.pooling_weights = weights;
    return g_.matmul(g_.transpose(weights), h, RelevanceRoute::Rhs);
  }

  void head(NodeId embedding, ForwardTrace& trace) {
    trace.embedding = embedding;
    NodeId x = dropout(embedding, ckpt_.spec.dropout[2]);
    NodeId logits = linear(x, "head");
    g_.set_name(logits, "logits");
    trace.logits = logits;
    switch (ckpt_.spec.head.task) {
      case TaskType::Classification:
        trace.probabilities = g_.softmax(logits, 1);
        g_.set_name(trace.probabilities, "probabilities");
        g_.set_output(logits);
        break;
      case TaskType::Regression:
        g_.set_output(logits);
        break;
      case TaskType::Survival: {
        trace.hazards = g_.sigmoid(logits);
        g_.set_name(trace.hazards, "hazards");
        NodeId keep = g_.sigmoid(g_.scale(logits, -1.0));  // 1 - h_k
        trace.survival = g_.cumprod(keep);
        g_.set_name(trace.survival, "survival");
        trace.risk = g_.scale(g_.sum(trace.survival, -1), -1.0);
        g_.set_name(trace.risk, "risk");
        g_.set_output(trace.risk);
        break;
      }
    }
  }

 private:
  CompGraph& g_;
  const ModelCheckpoint& ckpt_;
};

void build_attnmil(const ModelCheckpoint& ckpt, ForwardTrace& trace) {
  CompGraph& g = trace.graph;
  Builder b(g, ckpt);
  trace.input = g.input("X");
  NodeId h = b.embed(trace.input);
  b.head(b.attention_pool(h, trace), trace);
}

void build_transmil(const ModelCheckpoint& ckpt, ForwardTrace& trace) {
  const ModelSpec& spec = ckpt.spec;
  CompGraph& g = trace.graph;
  Builder b(g, ckpt);
  trace.input = g.input("X");
  NodeId h = b.embed(trace.input);
  NodeId cls = spec.bias ? b.p("cls_token") : g.constant("cls_token", Tensor::matrix(1, spec.hidden));
  NodeId tokens = g.concat({cls, h}, 0);
  const std::size_t head_dim = spec.hidden / spec.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string pre = layer_prefix(l);
    NodeId normed = g.layernorm(tokens);
    NodeId q = b.linear(normed, pre + "q");
    NodeId k = b.linear(normed, pre + "k");
    NodeId v = b.linear(normed, pre + "v");
    std::vector<NodeId> outs;
    std::vector<NodeId> probs;
    for (std::size_t hd = 0; hd < spec.heads; ++hd) {
      const std::size_t lo = hd * head_dim, hi = lo + head_dim;
      NodeId qh = g.slice(q, 1, lo, hi);
      NodeId kh = g.slice(k, 1, lo, hi);
      NodeId vh = g.slice(v, 1, lo, hi);
      NodeId scores = g.scale(g.matmul(qh, g.transpose(kh), RelevanceRoute::None), inv_sqrt);
      NodeId p = g.softmax(scores, 1);
      g.set_name(p, pre + "attention." + std::to_string(hd));
      probs.push_back(p);
      outs.push_back(g.matmul(p, vh, RelevanceRoute::Rhs));
    }
    trace.attention_heads.push_back(probs);
    NodeId merged = spec.heads == 1 ? outs[0] : g.concat(outs, 1);
    NodeId attended = b.dropout(b.linear(merged, pre + "o"), spec.dropout[1]);
    tokens = g.add(tokens, attended);
    NodeId normed2 = g.layernorm(tokens);
    NodeId ff = b.linear(g.relu(b.linear(normed2, pre + "ff1")), pre + "ff2");
    tokens = g.add(tokens, b.dropout(ff, spec.dropout[1]));
  }
  NodeId cls_out = g.slice(g.layernorm(tokens), 0, 0, 1);
  b.head(cls_out, trace);
}

void build_mambamil(const ModelCheckpoint& ckpt, ForwardTrace& trace) {
  const ModelSpec& spec = ckpt.spec;
  CompGraph& g = trace.graph;
  Builder b(g, ckpt);
  trace.input = g.input("X");
  NodeId h = b.embed(trace.input);
  NodeId u = g.silu(b.linear(h, "mamba.in_a"));
  NodeId delta = g.softplus(b.linear(u, "mamba.dt"));
  NodeId bt = g.matmul(u, b.p("mamba.B.weight"), RelevanceRoute::Lhs);
  NodeId ct = g.matmul(u, b.p("mamba.C.weight"), RelevanceRoute::Lhs);
  NodeId y = g.selective_scan(u, delta, b.p("mamba.A_log"), bt, ct);
  NodeId gate = g.silu(b.linear(h, "mamba.in_b"));
  NodeId gated = g.mul(y, gate);
  NodeId out = b.dropout(b.linear(gated, "mamba.out"), spec.dropout[1]);
  b.head(b.attention_pool(out, trace), trace);
}

double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void write_tensor(io::ByteWriter& w, const std::string& name, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

}  // namespace

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::AttnMil: return "attnmil";
    case Architecture::TransMil: return "transmil";
    case Architecture::MambaMil: return "mambamil";
  }
  return "?";
}

Architecture parse_architecture(const std::string& name) {
  if (name == "attnmil") return Architecture::AttnMil;
  if (name == "transmil") return Architecture::TransMil;
  if (name == "mambamil") return Architecture::MambaMil;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

int TaskHeadSpec::outputs() const {
  switch (task) {
    case TaskType::Classification: return num_classes;
    case TaskType::Regression: return 1;
    case TaskType::Survival: return num_intervals;
  }
  return 0;
}

void TaskHeadSpec::validate() const {
  if (task == TaskType::Classification && num_classes < 2) throw std::invalid_argument("head: need C >= 2");
  if (task == TaskType::Survival && num_intervals < 1) throw std::invalid_argument("head: need K >= 1");
  if (!std::isfinite(reference_value)) throw std::invalid_argument("head: reference value must be finite");
}

void ModelSpec::validate() const {
  if (input_dim == 0 || hidden == 0) throw std::invalid_argument("model: dimensions must be positive");
  if (arch == Architecture::TransMil) {
    if (layers == 0 || heads == 0) throw std::invalid_argument("model: transmil needs layers, heads > 0");
    if (hidden % heads != 0) throw std::invalid_argument("model: heads must divide the hidden width");
  }
  if (arch == Architecture::MambaMil && state_size == 0) throw std::invalid_argument("model: state size must be positive");
  for (double r : dropout)
    if (r < 0.0 || r >= 1.0) throw std::invalid_argument("model: dropout rates must be in [0,1)");
  head.validate();
}

json to_json(const ModelSpec& spec) {
  return {{"architecture", to_string(spec.arch)},
          {"input_dim", spec.input_dim},
          {"hidden", spec.hidden},
          {"layers", spec.layers},
          {"heads", spec.heads},
          {"state_size", spec.state_size},
          {"bias", spec.bias},
          {"dropout", spec.dropout},
          {"head",
           {{"task", to_string(spec.head.task)},
            {"num_classes", spec.head.num_classes},
            {"num_intervals", spec.head.num_intervals},
            {"reference_value", spec.head.reference_value}}}};
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec spec;
  spec.arch = parse_architecture(j.at("architecture").get<std::string>());
  spec.input_dim = j.at("input_dim").get<std::size_t>();
  spec.hidden = j.at("hidden").get<std::size_t>();
  spec.layers = j.at("layers").get<std::size_t>();
  spec.heads = j.at("heads").get<std::size_t>();
  spec.state_size = j.at("state_size").get<std::size_t>();
  spec.bias = j.at("bias").get<bool>();
  spec.dropout = j.at("dropout").get<std::array<double, 3>>();
  const json& h = j.at("head");
  spec.head.task = parse_task(h.at("task").get<std::string>());
  spec.head.num_classes = h.at("num_classes").get<int>();
  spec.head.num_intervals = h.at("num_intervals").get<int>();
  spec.head.reference_value = h.at("reference_value").get<double>();
  spec.validate();
  return spec;
}

const Tensor& ModelCheckpoint::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("checkpoint has no parameter '" + name + "'");
  return it->second;
}

std::map<std::string, Tensor::Shape> parameter_shapes(const ModelSpec& spec) {
  std::map<std::string, Tensor::Shape> shapes;
  const std::size_t hd = spec.hidden;
  auto linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    shapes[prefix + ".weight"] = {in, out};
    if (spec.bias) shapes[prefix + ".bias"] = {1, out};
  };
  linear("embed", spec.input_dim, hd);
  switch (spec.arch) {
    case Architecture::AttnMil:
      linear("attn.V", hd, hd);
      linear("attn.w", hd, 1);
      break;
    case Architecture::TransMil:
      if (spec.bias) shapes["cls_token"] = {1, hd};
      for (std::size_t l = 0; l < spec.layers; ++l) {
        const std::string pre = layer_prefix(l);
        for (const char* name : {"q", "k", "v", "o"}) linear(pre + name, hd, hd);
        linear(pre + "ff1", hd, 2 * hd);
        linear(pre + "ff2", 2 * hd, hd);
      }
      break;
    case Architecture::MambaMil:
      linear("mamba.in_a", hd, hd);
      linear("mamba.in_b", hd, hd);
      linear("mamba.dt", hd, hd);
      shapes["mamba.B.weight"] = {hd, spec.state_size};
      shapes["mamba.C.weight"] = {hd, spec.state_size};
      shapes["mamba.A_log"] = {hd, spec.state_size};
      linear("mamba.out", hd, hd);
      linear("attn.V", hd, hd);
      linear("attn.w", hd, 1);
      break;
  }
  linear("head", hd, static_cast<std::size_t>(spec.head.outputs()));
  return shapes;
}

ModelCheckpoint init_checkpoint(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelCheckpoint ckpt;
  ckpt.spec = spec;
  ckpt.meta.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> normal;
  for (const auto& [name, shape] : parameter_shapes(spec)) {
    Tensor t(shape, 0.0);
    if (name == "cls_token") {
      for (double& v : t.values()) v = 0.02 * normal(rng);
    } else if (name == "mamba.A_log") {
      for (std::size_t c = 0; c < t.rows(); ++c)
        for (std::size_t s = 0; s < t.cols(); ++s) t(c, s) = std::log(static_cast<double>(s + 1));
    } else if (name.ends_with(".bias")) {
      for (double& v : t.values()) v = 0.05 * unit(rng);
    } else {
      const double bound = xavier_bound(t.rows(), t.cols());
      for (double& v : t.values()) v = bound * unit(rng);
    }
    ckpt.params.emplace(name, std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const ModelCheckpoint& ckpt, const fs::path& path) {
  json header = {{"format", "xmil-checkpoint"},
                 {"version", 1},
                 {"spec", to_json(ckpt.spec)},
                 {"meta",
                  {{"seed", ckpt.meta.seed},
                   {"epochs", ckpt.meta.epochs},
                   {"best_epoch", ckpt.meta.best_epoch},
                   {"metric", ckpt.meta.metric},
                   {"val_metric", ckpt.meta.val_metric}}}};
  const std::string text = header.dump();
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u64(text.size());
  w.bytes(text);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) write_tensor(w, name, t);
  io::write_file_atomic(path, w.str());
}

ModelCheckpoint load_checkpoint(const fs::path& path) {
  const std::string raw = io::read_file(path);
  io::ByteReader r(raw, path.string());
  if (r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError(path.string() + ": bad checkpoint magic");
  const std::uint64_t header_len = r.u64();
  ModelCheckpoint ckpt;
  try {
    const json header = json::parse(r.bytes(header_len));
    ckpt.spec = model_spec_from_json(header.at("spec"));
    const json& meta = header.at("meta");
    ckpt.meta.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.meta.epochs = meta.at("epochs").get<int>();
    ckpt.meta.best_epoch = meta.at("best_epoch").get<int>();
    ckpt.meta.metric = meta.at("metric").get<std::string>();
    ckpt.meta.val_metric = meta.at("val_metric").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.bytes(name_len));
    const std::uint32_t rank = r.u32();
    if (rank > 2) throw FormatError(path.string() + ": tensor '" + name + "' has rank > 2");
    Tensor::Shape shape(rank);
    std::size_t count_values = 1;
    for (auto& d : shape) {
      d = r.u64();
      count_values *= d;
    }
    if (r.remaining() < count_values * 8) throw FormatError(path.string() + ": truncated tensor '" + name + "'");
    std::vector<double> values(count_values);
    for (double& v : values) v = r.f64();
    ckpt.params.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes");
  const auto expected = parameter_shapes(ckpt.spec);
  if (expected.size() != ckpt.params.size()) throw FormatError(path.string() + ": parameter set does not match spec");
  for (const auto& [name, shape] : expected) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end() || it->second.shape() != shape) {
      throw FormatError(path.string() + ": parameter '" + name + "' missing or misshapen");
    }
  }
  return ckpt;
}

HeadOutput head_forward(const Tensor& head_logits, const TaskHeadSpec& head) {
  HeadOutput out;
  out.logits = head_logits;
  if (static_cast<int>(head_logits.size()) != head.outputs()) {
    throw ShapeError("head: expected " + std::to_string(head.outputs()) + " logits, got " +
                     std::to_string(head_logits.size()));
  }
  switch (head.task) {
    case TaskType::Classification:
      out.probabilities = softmax(head_logits, 1);
      break;
    case TaskType::Regression:
      out.difference = head_logits[0];
      break;
    case TaskType::Survival: {
      out.hazards = head_logits;
      out.survival = head_logits;
      double keep = 1.0;
      out.risk = 0.0;
      for (std::size_t k = 0; k < head_logits.size(); ++k) {
        out.hazards[k] = sigmoid(head_logits[k]);
        keep *= sigmoid(-head_logits[k]);
        out.survival[k] = keep;
        out.risk -= keep;
      }
      break;
    }
  }
  return out;
}

std::vector<Tensor> ForwardTrace::attention_matrices() const {
  std::vector<Tensor> out;
  for (const auto& heads : attention_heads) {
    Tensor avg = graph.value(heads.front());
    for (std::size_t h = 1; h < heads.size(); ++h) {
      const Tensor& p = graph.value(heads[h]);
      for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += p[k];
    }
    for (double& v : avg.values()) v /= static_cast<double>(heads.size());
    out.push_back(std::move(avg));
  }
  return out;
}

HeadOutput ForwardTrace::head_output() const {
  HeadOutput out;
  out.logits = graph.value(logits);
  switch (head.task) {
    case TaskType::Classification:
      out.probabilities = graph.value(probabilities);
      break;
    case TaskType::Regression:
      out.difference = graph.value(logits)[0];
      break;
    case TaskType::Survival:
      out.hazards = graph.value(hazards);
      out.survival = graph.value(survival);
      out.risk = graph.value(risk)[0];
      break;
  }
  return out;
}

ForwardTrace forward(const ModelCheckpoint& ckpt, const Tensor& features, std::mt19937_64* train_rng) {
  if (features.rows() == 0) throw ShapeError("forward: bag has no instances");
  if (features.cols() != ckpt.spec.input_dim) {
    throw ShapeError("forward: bag has D=" + std::to_string(features.cols()) + ", model expects " +
                     std::to_string(ckpt.spec.input_dim));
  }
  ForwardTrace trace;
  trace.arch = ckpt.spec.arch;
  trace.head = ckpt.spec.head;
  switch (ckpt.spec.arch) {
    case Architecture::AttnMil: build_attnmil(ckpt, trace); break;
    case Architecture::TransMil: build_transmil(ckpt, trace); break;
    case Architecture::MambaMil: build_mambamil(ckpt, trace); break;
  }
  trace.graph.set_training(train_rng);
  trace.graph.forward({{"X", features.rank() == 2 ? features : Tensor::matrix(features.rows(), features.cols(), features.values())}});
  return trace;
}

namespace {
ForwardTrace forward_checked(const Bag& bag, const ModelCheckpoint& ckpt, Architecture expected) {
  if (ckpt.spec.arch != expected) {
    throw std::invalid_argument("checkpoint architecture is " + to_string(ckpt.spec.arch) + ", not " +
                                to_string(expected));
  }
  return forward(ckpt, bag.features);
}
}  // namespace

ForwardTrace attnmil_forward(const Bag& bag, const ModelCheckpoint& ckpt) {
  return forward_checked(bag, ckpt, Architecture::AttnMil);
}
ForwardTrace transmil_forward(const Bag& bag, const ModelCheckpoint& ckpt) {
  return forward_checked(bag, ckpt, Architecture::TransMil);
}
ForwardTrace mambamil_forward(const Bag& bag, const ModelCheckpoint& ckpt) {
  return forward_checked(bag, ckpt, Architecture::MambaMil);
}

}  // namespace xmil
