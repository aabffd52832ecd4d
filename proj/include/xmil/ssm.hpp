#pragma once

#include <span>
#include <vector>

#include "xmil/tensor.hpp"

namespace xmil {

/// Linear state-space recurrence with time-varying dense matrices:
///
///   h(t) = A(t) h(t-1) + B(t) x(t),   y(t) = C(t) h(t-1),   h(0) = 0
///
/// A(t) is S x S, B(t) is S x E, C(t) is O x S, x(t) has E entries.
/// Each x(t) and the returned y(t) are rank-1 tensors.
struct ScanResult {
  std::vector<Tensor> y;       // y(1..T)
  std::vector<Tensor> states;  // h(0..T)
};

ScanResult ssm_scan(std::span<const Tensor> a, std::span<const Tensor> b, std::span<const Tensor> c,
                    std::span<const Tensor> x);

/// Parameters of the per-channel diagonal scan used inside MambaMIL:
/// for channel c and state s,
///
///   abar(t,c,s) = exp(-delta(t,c) * exp(a_log(c,s)))
///   bbar(t,c,s) = delta(t,c) * b(t,s)
///   h(t,c,s)    = abar(t,c,s) h(t-1,c,s) + bbar(t,c,s) x(t,c)
///   y(t,c)      = sum_s c(t,s) h(t-1,c,s)
///
/// x, delta: T x E; a_log: E x S; b, c: T x S.
struct DiagonalScanInputs {
  const Tensor& x;
  const Tensor& delta;
  const Tensor& a_log;
  const Tensor& b;
  const Tensor& c;
};

/// Returns y (T x E); `states` receives h(0..T) as a (T+1) x (E*S) matrix.
Tensor diagonal_scan(const DiagonalScanInputs& in, Tensor* states = nullptr);

/// Expands the diagonal parameterization at step t (0-based) into the dense
/// A(t), B(t), C(t) of ssm_scan, with state index c*S + s.
void expand_diagonal_step(const DiagonalScanInputs& in, std::size_t t, Tensor& a, Tensor& b, Tensor& c);

}  // namespace xmil
