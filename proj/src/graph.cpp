#include "xmil/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "xmil/ssm.hpp"

namespace xmil {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Silu: return "silu";
    case OpKind::Softplus: return "softplus";
    case OpKind::Softmax: return "softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::SelectiveScan: return "ssm-scan";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::CumProd: return "cumprod";
    case OpKind::Dropout: return "dropout";
  }
  return "?";
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

Tensor silu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.values()) v = silu(v);
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  Tensor out = x;
  const std::size_t rows = x.rows(), cols = x.cols();
  const std::size_t groups = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  auto idx = [&](std::size_t g, std::size_t k) { return axis == 1 ? g * cols + k : k * cols + g; };
  for (std::size_t g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[idx(g, k)]);
    double total = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      const double e = std::exp(x[idx(g, k)] - mx);
      out[idx(g, k)] = e;
      total += e;
    }
    for (std::size_t k = 0; k < len; ++k) out[idx(g, k)] /= total;
  }
  return out;
}

namespace {

void layernorm_rows(const Tensor& x, double eps, Tensor& out, Tensor* stds) {
  const std::size_t rows = x.rows(), cols = x.cols();
  out = x;
  if (stds) *stds = Tensor::matrix(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += x(r, c);
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (x(r, c) - mu) * (x(r, c) - mu);
    const double sd = std::sqrt(var / static_cast<double>(cols));
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = (x(r, c) - mu) / (sd + eps);
    if (stds) (*stds)(r, 0) = sd;
  }
}

Tensor matmul_impl(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data().data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// A^T * B without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b.data().data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      if (av == 0.0) continue;
      double* orow = out.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// A * B^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(j, p);
      out(i, j) = acc;
    }
  return out;
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
  const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
  if (!rows_ok || !cols_ok) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + b.shape_string() + " onto " + a.shape_string());
  }
}

inline double bcast(const Tensor& b, std::size_t r, std::size_t c) {
  return b(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c);
}

// Sums `g` (shape of a) down to the broadcast shape of `b`.
Tensor reduce_to(const Tensor& g, const Tensor& b) {
  Tensor out(b.shape(), 0.0);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c)
      out(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c) += g(r, c);
  return out;
}

template <typename F>
Tensor map(const Tensor& x, F f) {
  Tensor out = x;
  for (double& v : out.values()) v = f(v);
  return out;
}

}  // namespace

Tensor layernorm(const Tensor& x, double eps) {
  Tensor out;
  layernorm_rows(x, eps, out, nullptr);
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b); }

NodeId CompGraph::push(Node n) {
  for (NodeId in : n.inputs) {
    if (in < 0 || static_cast<std::size_t>(in) >= nodes_.size()) {
      throw std::invalid_argument("graph: input node id out of range");
    }
  }
  nodes_.push_back(std::move(n));
  output_ = static_cast<NodeId>(nodes_.size() - 1);
  forward_done_ = false;
  return output_;
}

NodeId CompGraph::input(std::string name) {
  Node n;
  n.kind = OpKind::Input;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId CompGraph::param(std::string name, const Tensor& value) {
  Node n;
  n.kind = OpKind::Param;
  n.name = std::move(name);
  n.param = &value;
  return push(std::move(n));
}

NodeId CompGraph::constant(std::string name, Tensor value) {
  Node n;
  n.kind = OpKind::Constant;
  n.name = std::move(name);
  n.value = std::move(value);
  return push(std::move(n));
}

namespace {
Node make(OpKind kind, std::vector<NodeId> inputs) {
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  return n;
}
}  // namespace

NodeId CompGraph::matmul(NodeId a, NodeId b, RelevanceRoute route) {
  Node n = make(OpKind::MatMul, {a, b});
  n.route = route;
  return push(std::move(n));
}
NodeId CompGraph::transpose(NodeId a) { return push(make(OpKind::Transpose, {a})); }
NodeId CompGraph::add(NodeId a, NodeId b) { return push(make(OpKind::Add, {a, b})); }
NodeId CompGraph::mul(NodeId a, NodeId b) { return push(make(OpKind::Mul, {a, b})); }
NodeId CompGraph::scale(NodeId a, double factor) {
  Node n = make(OpKind::Scale, {a});
  n.scalar = factor;
  return push(std::move(n));
}
NodeId CompGraph::tanh(NodeId a) { return push(make(OpKind::Tanh, {a})); }
NodeId CompGraph::relu(NodeId a) { return push(make(OpKind::Relu, {a})); }
NodeId CompGraph::sigmoid(NodeId a) { return push(make(OpKind::Sigmoid, {a})); }
NodeId CompGraph::silu(NodeId a) { return push(make(OpKind::Silu, {a})); }
NodeId CompGraph::softplus(NodeId a) { return push(make(OpKind::Softplus, {a})); }
NodeId CompGraph::softmax(NodeId a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Node n = make(OpKind::Softmax, {a});
  n.axis = axis;
  return push(std::move(n));
}
NodeId CompGraph::layernorm(NodeId a, double eps) {
  Node n = make(OpKind::LayerNorm, {a});
  n.scalar = eps;
  return push(std::move(n));
}
NodeId CompGraph::selective_scan(NodeId x, NodeId delta, NodeId a_log, NodeId b, NodeId c) {
  return push(make(OpKind::SelectiveScan, {x, delta, a_log, b, c}));
}
NodeId CompGraph::sum(NodeId a, int axis) {
  Node n = make(OpKind::Sum, {a});
  n.axis = axis;
  return push(std::move(n));
}
NodeId CompGraph::mean(NodeId a, int axis) {
  Node n = make(OpKind::Mean, {a});
  n.axis = axis;
  return push(std::move(n));
}
NodeId CompGraph::concat(std::vector<NodeId> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  Node n = make(OpKind::Concat, std::move(parts));
  n.axis = axis;
  return push(std::move(n));
}
NodeId CompGraph::slice(NodeId a, int axis, std::size_t begin, std::size_t end) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  if (end < begin) throw std::invalid_argument("slice: end < begin");
  Node n = make(OpKind::Slice, {a});
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}
NodeId CompGraph::cumprod(NodeId a) { return push(make(OpKind::CumProd, {a})); }
NodeId CompGraph::dropout(NodeId a, double rate) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  Node n = make(OpKind::Dropout, {a});
  n.scalar = rate;
  return push(std::move(n));
}

void CompGraph::set_name(NodeId id, std::string name) { at(id).name = std::move(name); }

std::optional<NodeId> CompGraph::find(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].name == name) return static_cast<NodeId>(i);
  }
  return std::nullopt;
}

const Tensor& CompGraph::forward(const std::map<std::string, Tensor>& inputs) {
  if (nodes_.empty()) throw std::logic_error("forward: empty graph");
  forward_done_ = false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    n.grad = Tensor();
    if (n.kind == OpKind::Input) {
      auto it = inputs.find(n.name);
      if (it == inputs.end()) throw std::invalid_argument("forward: input '" + n.name + "' is not bound");
      n.value = it->second;
    } else if (n.kind == OpKind::Param) {
      n.value = *n.param;
    } else if (n.kind != OpKind::Constant) {
      eval(n);
    }
    if (!n.value.all_finite()) {
      throw NumericError("non-finite activation at node " + std::to_string(i) + " (" + op_name(n.kind) +
                         (n.name.empty() ? "" : " '" + n.name + "'") + ")");
    }
  }
  forward_done_ = true;
  return nodes_[static_cast<std::size_t>(output_)].value;
}

void CompGraph::eval(Node& n) {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[static_cast<std::size_t>(n.inputs[i])].value; };
  switch (n.kind) {
    case OpKind::MatMul:
      n.value = matmul_impl(in(0), in(1));
      break;
    case OpKind::Transpose:
      n.value = in(0).transposed();
      break;
    case OpKind::Add:
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      check_broadcast(a, b, op_name(n.kind));
      n.value = a;
      const bool add = n.kind == OpKind::Add;
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) {
          const double bv = bcast(b, r, c);
          n.value(r, c) = add ? a(r, c) + bv : a(r, c) * bv;
        }
      break;
    }
    case OpKind::Scale:
      n.value = map(in(0), [s = n.scalar](double v) { return s * v; });
      break;
    case OpKind::Tanh:
      n.value = map(in(0), [](double v) { return std::tanh(v); });
      break;
    case OpKind::Relu:
      n.value = map(in(0), [](double v) { return v > 0.0 ? v : 0.0; });
      break;
    case OpKind::Sigmoid:
      n.value = map(in(0), [](double v) { return xmil::sigmoid(v); });
      break;
    case OpKind::Silu:
      n.value = map(in(0), [](double v) { return xmil::silu(v); });
      break;
    case OpKind::Softplus:
      n.value = map(in(0), [](double v) { return xmil::softplus(v); });
      break;
    case OpKind::Softmax:
      n.value = xmil::softmax(in(0), n.axis);
      break;
    case OpKind::LayerNorm:
      layernorm_rows(in(0), n.scalar, n.value, &n.aux);
      break;
    case OpKind::SelectiveScan:
      n.value = diagonal_scan({in(0), in(1), in(2), in(3), in(4)}, &n.aux);
      break;
    case OpKind::Sum:
    case OpKind::Mean: {
      const Tensor& a = in(0);
      const std::size_t rows = a.rows(), cols = a.cols();
      Tensor out = n.axis == 0 ? Tensor::matrix(1, cols) : n.axis == 1 ? Tensor::matrix(rows, 1) : Tensor::matrix(1, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          out(n.axis == 0 || n.axis == -1 ? 0 : r, n.axis == 1 || n.axis == -1 ? 0 : c) += a(r, c);
      if (n.kind == OpKind::Mean) {
        const double count = n.axis == 0 ? double(rows) : n.axis == 1 ? double(cols) : double(rows * cols);
        for (double& v : out.values()) v /= count;
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::Concat: {
      std::size_t rows = 0, cols = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& p = in(i);
        if (n.axis == 0) {
          if (i && p.cols() != cols) throw ShapeError("concat: column mismatch " + p.shape_string());
          cols = p.cols();
          rows += p.rows();
        } else {
          if (i && p.rows() != rows) throw ShapeError("concat: row mismatch " + p.shape_string());
          rows = p.rows();
          cols += p.cols();
        }
      }
      Tensor out = Tensor::matrix(rows, cols);
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& p = in(i);
        for (std::size_t r = 0; r < p.rows(); ++r)
          for (std::size_t c = 0; c < p.cols(); ++c) {
            if (n.axis == 0) out(offset + r, c) = p(r, c);
            else out(r, offset + c) = p(r, c);
          }
        offset += n.axis == 0 ? p.rows() : p.cols();
      }
      n.value = std::move(out);
      break;
    }
    case OpKind::Slice: {
      const Tensor& a = in(0);
      const std::size_t limit = n.axis == 0 ? a.rows() : a.cols();
      if (n.end > limit) throw ShapeError("slice: range exceeds " + a.shape_string());
      const std::size_t len = n.end - n.begin;
      Tensor out = n.axis == 0 ? Tensor::matrix(len, a.cols()) : Tensor::matrix(a.rows(), len);
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
          out(r, c) = n.axis == 0 ? a(n.begin + r, c) : a(r, n.begin + c);
      n.value = std::move(out);
      break;
    }
    case OpKind::CumProd: {
      Tensor out = in(0);
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 1; c < out.cols(); ++c) out(r, c) *= out(r, c - 1);
      n.value = std::move(out);
      break;
    }
    case OpKind::Dropout: {
      n.value = in(0);
      n.aux = Tensor();
      if (rng_ && n.scalar > 0.0) {
        std::bernoulli_distribution keep(1.0 - n.scalar);
        n.aux = Tensor(n.value.shape(), 0.0);
        const double gain = 1.0 / (1.0 - n.scalar);
        for (std::size_t i = 0; i < n.value.size(); ++i) {
          n.aux[i] = keep(*rng_) ? gain : 0.0;
          n.value[i] *= n.aux[i];
        }
      }
      break;
    }
    case OpKind::Input:
    case OpKind::Param:
    case OpKind::Constant:
      break;
  }
}

void CompGraph::backward(NodeId from, const Tensor& seed) {
  if (!forward_done_) throw std::logic_error("backward: no cached forward pass");
  const Node& start = node(from);
  if (seed.size() != start.value.size() || !seed.same_shape(start.value)) {
    throw ShapeError("backward: seed " + seed.shape_string() + " does not match node value " +
                     start.value.shape_string());
  }
  for (Node& n : nodes_) n.grad = Tensor();
  at(from).grad = Tensor(start.value.shape(), seed.values());
  for (NodeId id = from; id >= 0; --id) {
    Node& n = at(id);
    if (n.grad.empty() || n.inputs.empty()) continue;
    propagate_grad(n);
  }
}

void CompGraph::propagate_grad(Node& n) {
  auto in = [&](std::size_t i) -> const Tensor& { return nodes_[static_cast<std::size_t>(n.inputs[i])].value; };
  auto accum = [&](std::size_t i, const Tensor& g) {
    Node& target = nodes_[static_cast<std::size_t>(n.inputs[i])];
    if (target.grad.empty()) target.grad = Tensor(target.value.shape(), 0.0);
    if (g.size() != target.grad.size()) throw ShapeError("backward: gradient size mismatch");
    for (std::size_t k = 0; k < g.size(); ++k) target.grad[k] += g[k];
  };
  const Tensor& g = n.grad;
  switch (n.kind) {
    case OpKind::MatMul:
      accum(0, matmul_nt(g, in(1)));
      accum(1, matmul_tn(in(0), g));
      break;
    case OpKind::Transpose:
      accum(0, g.transposed());
      break;
    case OpKind::Add:
      accum(0, g);
      accum(1, reduce_to(g, in(1)));
      break;
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      Tensor ga = g, gb_full = g;
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) {
          ga(r, c) = g(r, c) * bcast(b, r, c);
          gb_full(r, c) = g(r, c) * a(r, c);
        }
      accum(0, ga);
      accum(1, reduce_to(gb_full, b));
      break;
    }
    case OpKind::Scale:
      accum(0, map(g, [s = n.scalar](double v) { return s * v; }));
      break;
    case OpKind::Tanh: {
      Tensor out = g;
      for (std::size_t k = 0; k < g.size(); ++k) out[k] *= 1.0 - n.value[k] * n.value[k];
      accum(0, out);
      break;
    }
    case OpKind::Relu: {
      Tensor out = g;
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) out[k] = x[k] > 0.0 ? g[k] : 0.0;
      accum(0, out);
      break;
    }
    case OpKind::Sigmoid: {
      Tensor out = g;
      for (std::size_t k = 0; k < g.size(); ++k) out[k] *= n.value[k] * (1.0 - n.value[k]);
      accum(0, out);
      break;
    }
    case OpKind::Silu: {
      Tensor out = g;
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        const double s = xmil::sigmoid(x[k]);
        out[k] *= s + x[k] * s * (1.0 - s);
      }
      accum(0, out);
      break;
    }
    case OpKind::Softplus: {
      Tensor out = g;
      const Tensor& x = in(0);
      for (std::size_t k = 0; k < g.size(); ++k) out[k] *= xmil::sigmoid(x[k]);
      accum(0, out);
      break;
    }
    case OpKind::Softmax: {
      const Tensor& y = n.value;
      Tensor out = g;
      const std::size_t rows = y.rows(), cols = y.cols();
      if (n.axis == 1) {
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < cols; ++c) out(r, c) = y(r, c) * (g(r, c) - dot);
        }
      } else {
        for (std::size_t c = 0; c < cols; ++c) {
          double dot = 0.0;
          for (std::size_t r = 0; r < rows; ++r) dot += g(r, c) * y(r, c);
          for (std::size_t r = 0; r < rows; ++r) out(r, c) = y(r, c) * (g(r, c) - dot);
        }
      }
      accum(0, out);
      break;
    }
    case OpKind::LayerNorm: {
      const Tensor& x = in(0);
      const std::size_t rows = x.rows(), cols = x.cols();
      const double d = static_cast<double>(cols);
      Tensor out = g;
      for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x(r, c);
        mu /= d;
        const double sd = n.aux(r, 0);
        const double s = sd + n.scalar;
        double gmean = 0.0, gc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          gmean += g(r, c);
          gc += g(r, c) * (x(r, c) - mu);
        }
        gmean /= d;
        for (std::size_t c = 0; c < cols; ++c) {
          const double centered = x(r, c) - mu;
          double v = (g(r, c) - gmean) / s;
          if (sd > 0.0) v -= gc / (s * s) * centered / (d * sd);
          out(r, c) = v;
        }
      }
      accum(0, out);
      break;
    }
    case OpKind::SelectiveScan: {
      const Tensor& x = in(0);
      const Tensor& delta = in(1);
      const Tensor& a_log = in(2);
      const Tensor& b = in(3);
      const Tensor& c = in(4);
      const Tensor& h = n.aux;
      const std::size_t steps = x.rows(), channels = x.cols(), state = a_log.cols();
      Tensor gx(x.shape(), 0.0), gdelta(delta.shape(), 0.0), ga_log(a_log.shape(), 0.0), gb(b.shape(), 0.0),
          gc(c.shape(), 0.0);
      std::vector<double> gh(channels * state, 0.0);  // dL/dh(t), h(T) has no readers
      for (std::size_t t = steps; t-- > 0;) {
        // gh holds dL/dh(t+1) in 1-based terms; state row t+1 of `h`.
        std::vector<double> gprev(channels * state, 0.0);
        for (std::size_t ch = 0; ch < channels; ++ch) {
          const double dt = delta(t, ch);
          const double xt = x(t, ch);
          const double gy = g(t, ch);
          for (std::size_t s = 0; s < state; ++s) {
            const std::size_t k = ch * state + s;
            const double prev = h(t, k);
            const double a_neg = -std::exp(a_log(ch, s));
            const double abar = std::exp(dt * a_neg);
            // h(t+1) = abar * h(t) + dt * b * x
            const double ghk = gh[k];
            gprev[k] += abar * ghk;
            const double g_abar = ghk * prev;
            gdelta(t, ch) += g_abar * abar * a_neg;
            ga_log(ch, s) += g_abar * abar * dt * a_neg;
            const double g_bbar = ghk * xt;
            gdelta(t, ch) += g_bbar * b(t, s);
            gb(t, s) += g_bbar * dt;
            gx(t, ch) += ghk * dt * b(t, s);
            // y(t+1) = sum_s c * h(t)
            gprev[k] += c(t, s) * gy;
            gc(t, s) += gy * prev;
          }
        }
        gh.swap(gprev);
      }
      accum(0, gx);
      accum(1, gdelta);
      accum(2, ga_log);
      accum(3, gb);
      accum(4, gc);
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      const Tensor& a = in(0);
      const std::size_t rows = a.rows(), cols = a.cols();
      double count = 1.0;
      if (n.kind == OpKind::Mean) count = n.axis == 0 ? double(rows) : n.axis == 1 ? double(cols) : double(rows * cols);
      Tensor out(a.shape(), 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          out(r, c) = g(n.axis == 0 || n.axis == -1 ? 0 : r, n.axis == 1 || n.axis == -1 ? 0 : c) / count;
      accum(0, out);
      break;
    }
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& p = in(i);
        Tensor part(p.shape(), 0.0);
        for (std::size_t r = 0; r < p.rows(); ++r)
          for (std::size_t c = 0; c < p.cols(); ++c)
            part(r, c) = n.axis == 0 ? g(offset + r, c) : g(r, offset + c);
        offset += n.axis == 0 ? p.rows() : p.cols();
        accum(i, part);
      }
      break;
    }
    case OpKind::Slice: {
      const Tensor& a = in(0);
      Tensor out(a.shape(), 0.0);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) {
          if (n.axis == 0) out(n.begin + r, c) = g(r, c);
          else out(r, n.begin + c) = g(r, c);
        }
      accum(0, out);
      break;
    }
    case OpKind::CumProd: {
      const Tensor& x = in(0);
      Tensor out(x.shape(), 0.0);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t j = 0; j < x.cols(); ++j) {
          double acc = 0.0;
          for (std::size_t k = j; k < x.cols(); ++k) {
            double prod = 1.0;
            for (std::size_t i = 0; i <= k; ++i)
              if (i != j) prod *= x(r, i);
            acc += g(r, k) * prod;
          }
          out(r, j) = acc;
        }
      accum(0, out);
      break;
    }
    case OpKind::Dropout: {
      if (n.aux.empty()) {
        accum(0, g);
      } else {
        Tensor out = g;
        for (std::size_t k = 0; k < g.size(); ++k) out[k] *= n.aux[k];
        accum(0, out);
      }
      break;
    }
    case OpKind::Input:
    case OpKind::Param:
    case OpKind::Constant:
      break;
  }
}

std::map<std::string, Tensor> CompGraph::backward_grad(const Tensor& seed) {
  if (!forward_done_) throw std::logic_error("backward_grad: no cached forward pass");
  backward(output_, seed);
  std::map<std::string, Tensor> out;
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::Input) continue;
    out[n.name] = n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }
  return out;
}

std::map<std::string, Tensor> CompGraph::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const Node& n : nodes_) {
    if (n.kind != OpKind::Param) continue;
    out[n.name] = n.grad.empty() ? Tensor(n.value.shape(), 0.0) : n.grad;
  }
  return out;
}

}  // namespace xmil
