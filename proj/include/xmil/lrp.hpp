#pragma once

#include <string>
#include <vector>

#include "xmil/explainers.hpp"
#include "xmil/graph.hpp"
#include "xmil/models.hpp"
#include "xmil/ssm.hpp"

namespace xmil {

struct LrpConfig {
  double epsilon = 1e-9;  // signed stabilizer added to every denominator
  double gamma = 0.0;     // 0 = epsilon rule
};

/// Adds epsilon with the sign of z (sign(0) = +1).
double stabilize(double z, double epsilon);

/// a: N x I activations, w: I x J weights, r: N x J upstream relevance.
/// r_i = sum_j a_i rho(w_ij) / (sum_i' a_i' rho(w_i'j) + eps) * R_j,
/// rho(w) = w + gamma * max(w, 0).
Tensor lrp_linear(const Tensor& a, const Tensor& w, const Tensor& r, double epsilon = 1e-9, double gamma = 0.0);

/// AH rule for y = P z, y_j = sum_k p_jk z_k. z: N x D, p: M x N, r: M x D.
/// The attention matrix is held constant; relevance is split per feature.
Tensor lrp_attention_ah(const Tensor& z, const Tensor& p, const Tensor& r, double epsilon = 1e-9);

/// LN rule with the standard deviation detached: the centering map
/// y_jd = sum_k z_kd (delta_kj - 1/N) over the N rows, per column d.
/// N = 1 passes relevance through unchanged.
Tensor lrp_layernorm_ln(const Tensor& z, const Tensor& r, double epsilon = 1e-9);

/// SiLU rule: sigma(x) treated as constant, so relevance passes unchanged.
Tensor lrp_silu(const Tensor& x, const Tensor& r);

struct GateRelevance {
  Tensor a, b;
};
/// Multiplicative gate y = z_a * z_b: each factor receives half.
GateRelevance lrp_gate(const Tensor& z_a, const Tensor& z_b, const Tensor& r);

/// Relevance through h(t) = A(t) h(t-1) + B(t) x(t), y(t) = C(t) h(t-1)
/// with A, B, C held constant. `states` holds h(0..T); `r_y` the upstream
/// relevance of y(1..T); `r_h` optional extra upstream relevance on h(1..T)
/// (empty = none).
struct SsmRelevance {
  std::vector<Tensor> x;  // R(x(1..T))
  std::vector<Tensor> h;  // total R(h(0..T))
};
SsmRelevance lrp_ssm(const std::vector<Tensor>& a, const std::vector<Tensor>& b, const std::vector<Tensor>& c,
                     const std::vector<Tensor>& states, const std::vector<Tensor>& x, const std::vector<Tensor>& r_y,
                     const std::vector<Tensor>& r_h = {}, double epsilon = 1e-9);

/// Diagonal-scan specialization used inside the MambaMIL graph; returns R(x) (T x E).
Tensor lrp_diagonal_scan(const DiagonalScanInputs& in, const Tensor& states, const Tensor& r_y, double epsilon = 1e-9);

struct LedgerEntry {
  NodeId node = -1;
  std::string op;
  double relevance = 0.0;  // relevance sum arriving at the node
};

struct RelevanceState {
  std::vector<Tensor> relevance;  // per node; empty = none arrived
  std::vector<LedgerEntry> ledger;
  LrpConfig config;
};

/// Walks the graph backwards from `from`, seeded with `seed` (shape of the
/// node value), applying the rule registered for each op.
RelevanceState lrp_propagate(const CompGraph& graph, NodeId from, const Tensor& seed, const LrpConfig& config = {});

/// Relevance vector seeded at the head logits for `target`.
Tensor lrp_seed(ForwardTrace& trace, const ExplanationTarget& target);

struct LrpResult {
  Heatmap heatmap;
  Tensor seed;           // relevance placed at the head logits
  Tensor input_relevance;  // N x D
  std::vector<LedgerEntry> ledger;
};

LrpResult lrp_explain(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target,
                      const LrpConfig& config = {});
/// Seeds R_k = l_k * dr/dl_k at the hazard logits.
LrpResult lrp_survival_composite(const ModelCheckpoint& ckpt, const Bag& bag, const LrpConfig& config = {});
/// Propagates an explicit logit-level seed (for linearity checks).
LrpResult lrp_from_seed(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target,
                        const Tensor& seed, const LrpConfig& config = {});

void write_ledger_csv(const std::vector<LedgerEntry>& ledger, const std::filesystem::path& path);

}  // namespace xmil
