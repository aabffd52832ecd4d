#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmil/datasets.hpp"
#include "xmil/graph.hpp"

namespace xmil {

enum class Architecture { AttnMil, TransMil, MambaMil };

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& name);

struct TaskHeadSpec {
  TaskType task = TaskType::Classification;
  int num_classes = 2;
  int num_intervals = 4;
  double reference_value = 0.0;  // regression outputs are differences to this

  int outputs() const;
  void validate() const;
};

struct ModelSpec {
  Architecture arch = Architecture::AttnMil;
  std::size_t input_dim = 0;
  std::size_t hidden = 64;
  std::size_t layers = 2;       // transmil
  std::size_t heads = 4;        // transmil
  std::size_t state_size = 16;  // mambamil
  bool bias = true;
  /// Training-only dropout rates applied to (embedding, attention/block, head).
  std::array<double, 3> dropout{0.2, 0.2, 0.0};
  TaskHeadSpec head;

  void validate() const;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  int best_epoch = 0;
  std::string metric;
  double val_metric = 0.0;
};

struct ModelCheckpoint {
  ModelSpec spec;
  std::map<std::string, Tensor> params;
  TrainingMeta meta;

  const Tensor& param(const std::string& name) const;
};

/// Fresh parameters: Xavier-uniform weights, small uniform biases, a small
/// random class token, and Mamba-style A_log = log(1..S).
ModelCheckpoint init_checkpoint(const ModelSpec& spec, std::uint64_t seed);
/// Names and shapes of every parameter `spec` requires.
std::map<std::string, Tensor::Shape> parameter_shapes(const ModelSpec& spec);

// Checkpoint file: "XMILCKP1", u64 header length, JSON header, u32 tensor
// count, then per tensor: u32 name length, name, u32 rank, u64 dims, f64 data.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Task-head outputs computed from the head's pre-activation logits.
struct HeadOutput {
  Tensor logits;         // C logits, 1 regression output, or K hazard logits
  Tensor probabilities;  // classification softmax
  double difference = 0.0;  // regression: prediction - reference value
  Tensor hazards;        // survival h_k
  Tensor survival;       // survival S_k
  double risk = 0.0;     // survival r = -sum_k S_k
};

HeadOutput head_forward(const Tensor& head_logits, const TaskHeadSpec& head);

/// One recorded forward pass. The graph references the checkpoint's
/// parameters, so the checkpoint must outlive the trace.
struct ForwardTrace {
  Architecture arch = Architecture::AttnMil;
  TaskHeadSpec head;
  CompGraph graph;
  NodeId input = -1;
  NodeId embedding = -1;  // bag embedding fed to the head
  NodeId logits = -1;
  NodeId probabilities = -1;  // classification
  NodeId hazards = -1, survival = -1, risk = -1;  // survival
  NodeId pooling_weights = -1;  // N x 1 (attnmil, mambamil)
  std::vector<std::vector<NodeId>> attention_heads;  // transmil: [layer][head] -> (N+1)x(N+1)

  /// Head-averaged self-attention matrix per layer.
  std::vector<Tensor> attention_matrices() const;
  HeadOutput head_output() const;
};

/// Dispatches on the checkpoint architecture. A non-null `train_rng`
/// enables dropout.
ForwardTrace forward(const ModelCheckpoint& ckpt, const Tensor& features, std::mt19937_64* train_rng = nullptr);

ForwardTrace attnmil_forward(const Bag& bag, const ModelCheckpoint& ckpt);
ForwardTrace transmil_forward(const Bag& bag, const ModelCheckpoint& ckpt);
ForwardTrace mambamil_forward(const Bag& bag, const ModelCheckpoint& ckpt);

}  // namespace xmil
