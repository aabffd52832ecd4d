#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "xmil/models.hpp"

namespace xmil::fixture {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = n(rng);
  return t;
}

inline Bag random_bag(std::size_t n, std::size_t d, std::mt19937_64& rng, std::string id = "b") {
  Bag b;
  b.id = std::move(id);
  b.features = random_matrix(n, d, rng);
  b.label = ClassLabel{0};
  return b;
}

inline ModelSpec small_spec(Architecture arch, TaskType task = TaskType::Classification, std::size_t dim = 6,
                            bool bias = true) {
  ModelSpec s;
  s.arch = arch;
  s.input_dim = dim;
  s.hidden = 8;
  s.layers = 2;
  s.heads = 2;
  s.state_size = 4;
  s.bias = bias;
  s.dropout = {0.0, 0.0, 0.0};
  s.head.task = task;
  s.head.num_classes = task == TaskType::Classification ? 2 : 1;
  s.head.num_intervals = 4;
  return s;
}

/// Checkpoint with its parameters perturbed away from the tiny init so that
/// every path carries signal.
inline ModelCheckpoint random_checkpoint(const ModelSpec& spec, std::uint64_t seed, double scale = 0.4) {
  ModelCheckpoint c = init_checkpoint(spec, seed);
  std::mt19937_64 rng(seed * 31 + 1);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [name, t] : c.params) {
    if (name.ends_with("A_log")) continue;
    for (double& v : t.values()) v += n(rng);
  }
  return c;
}

inline const Architecture kArchitectures[] = {Architecture::AttnMil, Architecture::TransMil, Architecture::MambaMil};

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("xmil_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace xmil::fixture
