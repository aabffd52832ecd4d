#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "xmil/tensor.hpp"

namespace xmil {

using NodeId = int;

enum class OpKind {
  Input,
  Param,
  Constant,
  MatMul,
  Transpose,
  Add,
  Mul,
  Scale,
  Tanh,
  Relu,
  Sigmoid,
  Silu,
  Softplus,
  Softmax,
  LayerNorm,
  SelectiveScan,
  Sum,
  Mean,
  Concat,
  Slice,
  CumProd,
  Dropout,
};

const char* op_name(OpKind kind);

/// Which operand of a matmul receives relevance during LRP; the other
/// operand is held constant (weights, or attention probabilities).
enum class RelevanceRoute { Lhs, Rhs, None };

struct Node {
  OpKind kind = OpKind::Input;
  std::vector<NodeId> inputs;
  std::string name;

  // Op attributes.
  double scalar = 0.0;  // scale factor, layernorm eps, dropout rate
  int axis = 0;         // softmax/sum/mean/concat/slice axis; -1 = all
  std::size_t begin = 0, end = 0;
  RelevanceRoute route = RelevanceRoute::Lhs;
  const Tensor* param = nullptr;  // Param nodes reference external storage

  // Cached by forward / backward.
  Tensor value;
  Tensor grad;
  Tensor aux;  // dropout mask, layernorm row std, scan states h_0..h_T
};

/// Recorded computation over a fixed op structure.
///
/// The graph is built once through the builder methods, then evaluated by
/// forward() for concrete named inputs. Every node's activation is cached
/// until the next forward, which backward() and relevance propagation read.
/// A graph with cached activations must not be shared across threads.
class CompGraph {
 public:
  CompGraph() = default;

  NodeId input(std::string name);
  /// References `value`; it must outlive the graph and stay unchanged.
  NodeId param(std::string name, const Tensor& value);
  NodeId constant(std::string name, Tensor value);

  NodeId matmul(NodeId a, NodeId b, RelevanceRoute route = RelevanceRoute::Lhs);
  NodeId transpose(NodeId a);
  /// `b` may match `a` or broadcast along rows and/or columns.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId tanh(NodeId a);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId silu(NodeId a);
  NodeId softplus(NodeId a);
  /// axis 1 normalizes each row, axis 0 each column.
  NodeId softmax(NodeId a, int axis = 1);
  /// Row-wise (z - mean) / (std + eps), population std, no affine part.
  NodeId layernorm(NodeId a, double eps = 1e-5);
  /// Selective scan with per-channel diagonal state (see ssm.hpp).
  NodeId selective_scan(NodeId x, NodeId delta, NodeId a_log, NodeId b, NodeId c);
  /// axis 0 reduces rows (-> 1 x cols), 1 reduces columns, -1 everything.
  NodeId sum(NodeId a, int axis = -1);
  NodeId mean(NodeId a, int axis = -1);
  NodeId concat(std::vector<NodeId> parts, int axis = 0);
  NodeId slice(NodeId a, int axis, std::size_t begin, std::size_t end);
  /// Cumulative product along each row.
  NodeId cumprod(NodeId a);
  NodeId dropout(NodeId a, double rate);

  void set_output(NodeId id) { output_ = id; }
  NodeId output() const { return output_; }
  void set_name(NodeId id, std::string name);
  std::optional<NodeId> find(const std::string& name) const;

  /// Enables stochastic ops (dropout) drawing from `rng`; nullptr = inference.
  void set_training(std::mt19937_64* rng) { rng_ = rng; }

  const Tensor& forward(const std::map<std::string, Tensor>& inputs);
  bool has_forward() const { return forward_done_; }

  /// Reverse-mode pass seeded with `seed` at `from`; gradients of
  /// sum(seed * value(from)) are left on every upstream node.
  void backward(NodeId from, const Tensor& seed);
  /// Gradient of (seed . output) with respect to every named input.
  std::map<std::string, Tensor> backward_grad(const Tensor& seed);
  /// Gradients accumulated on Param nodes by the last backward().
  std::map<std::string, Tensor> param_grads() const;

  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(NodeId id) const { return node(id).value; }
  const Tensor& grad(NodeId id) const { return node(id).grad; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  NodeId push(Node n);
  void eval(Node& n);
  void propagate_grad(Node& n);
  Node& at(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }

  std::vector<Node> nodes_;
  NodeId output_ = -1;
  bool forward_done_ = false;
  std::mt19937_64* rng_ = nullptr;
};

// Elementwise helpers shared by the graph and standalone oracles.
double sigmoid(double x);
double silu(double x);
double softplus(double x);

/// Elementwise x * sigmoid(x).
Tensor silu(const Tensor& x);
/// Softmax with max subtraction along `axis` (1 = per row, 0 = per column).
Tensor softmax(const Tensor& x, int axis = 1);
/// Row-wise layer normalization without affine parameters.
Tensor layernorm(const Tensor& x, double eps = 1e-5);
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace xmil
