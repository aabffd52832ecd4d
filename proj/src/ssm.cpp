#include "xmil/ssm.hpp"

#include <cmath>
#include <string>

namespace xmil {

ScanResult ssm_scan(std::span<const Tensor> a, std::span<const Tensor> b, std::span<const Tensor> c,
                    std::span<const Tensor> x) {
  const std::size_t steps = x.size();
  if (a.size() != steps || b.size() != steps || c.size() != steps) {
    throw ShapeError("ssm_scan: sequence lengths differ");
  }
  ScanResult out;
  if (steps == 0) return out;
  const std::size_t state = a[0].rows();
  out.states.emplace_back(Tensor::Shape{state}, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t in_dim = x[t].size();
    if (a[t].rows() != state || a[t].cols() != state || b[t].rows() != state || b[t].cols() != in_dim ||
        c[t].cols() != state) {
      throw ShapeError("ssm_scan: dimension mismatch at step " + std::to_string(t + 1));
    }
    const Tensor& prev = out.states.back();
    Tensor y({c[t].rows()}, 0.0);
    for (std::size_t j = 0; j < c[t].rows(); ++j)
      for (std::size_t i = 0; i < state; ++i) y[j] += c[t](j, i) * prev[i];
    Tensor h({state}, 0.0);
    for (std::size_t j = 0; j < state; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < state; ++i) acc += a[t](j, i) * prev[i];
      for (std::size_t i = 0; i < in_dim; ++i) acc += b[t](j, i) * x[t][i];
      h[j] = acc;
    }
    out.y.push_back(std::move(y));
    out.states.push_back(std::move(h));
  }
  return out;
}

namespace {

void check_diagonal(const DiagonalScanInputs& in) {
  const std::size_t steps = in.x.rows(), channels = in.x.cols(), state = in.a_log.cols();
  if (in.delta.rows() != steps || in.delta.cols() != channels || in.a_log.rows() != channels ||
      in.b.rows() != steps || in.b.cols() != state || in.c.rows() != steps || in.c.cols() != state) {
    throw ShapeError("selective scan: inconsistent shapes x" + in.x.shape_string() + " delta" +
                     in.delta.shape_string() + " a_log" + in.a_log.shape_string() + " b" + in.b.shape_string() +
                     " c" + in.c.shape_string());
  }
}

}  // namespace

Tensor diagonal_scan(const DiagonalScanInputs& in, Tensor* states) {
  check_diagonal(in);
  const std::size_t steps = in.x.rows(), channels = in.x.cols(), state = in.a_log.cols();
  const std::size_t width = channels * state;
  Tensor y = Tensor::matrix(steps, channels);
  Tensor h = Tensor::matrix(steps + 1, width);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double dt = in.delta(t, ch);
      const double xt = in.x(t, ch);
      double acc = 0.0;
      for (std::size_t s = 0; s < state; ++s) {
        const std::size_t k = ch * state + s;
        const double prev = h(t, k);
        acc += in.c(t, s) * prev;
        const double abar = std::exp(-dt * std::exp(in.a_log(ch, s)));
        h(t + 1, k) = abar * prev + dt * in.b(t, s) * xt;
      }
      y(t, ch) = acc;
    }
  }
  if (states) *states = std::move(h);
  return y;
}

void expand_diagonal_step(const DiagonalScanInputs& in, std::size_t t, Tensor& a, Tensor& b, Tensor& c) {
  check_diagonal(in);
  const std::size_t channels = in.x.cols(), state = in.a_log.cols();
  const std::size_t width = channels * state;
  a = Tensor::matrix(width, width);
  b = Tensor::matrix(width, channels);
  c = Tensor::matrix(channels, width);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const double dt = in.delta(t, ch);
    for (std::size_t s = 0; s < state; ++s) {
      const std::size_t k = ch * state + s;
      a(k, k) = std::exp(-dt * std::exp(in.a_log(ch, s)));
      b(k, ch) = dt * in.b(t, s);
      c(ch, k) = in.c(t, s);
    }
  }
}

}  // namespace xmil
