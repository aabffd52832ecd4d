#include "xmil/lrp.hpp"

#include <cmath>
#include <sstream>

#include "xmil/io.hpp"

namespace xmil {

namespace {

bool is_leaf_param(const Node& n) { return n.kind == OpKind::Param || n.kind == OpKind::Constant; }

void accumulate(std::vector<Tensor>& rel, NodeId id, const Tensor& r) {
  Tensor& dst = rel[static_cast<std::size_t>(id)];
  if (dst.empty()) {
    dst = r;
    return;
  }
  if (dst.size() != r.size()) throw ShapeError("lrp: relevance size mismatch");
  for (std::size_t i = 0; i < r.size(); ++i) dst[i] += r[i];
}

// Value of a broadcast operand at (r, c).
double bvalue(const Tensor& b, std::size_t r, std::size_t c) {
  return b(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c);
}

double& bref(Tensor& b, std::size_t r, std::size_t c) { return b(b.rows() == 1 ? 0 : r, b.cols() == 1 ? 0 : c); }

Tensor as_matrix(const Tensor& t) { return t.rank() == 2 ? t : Tensor::matrix(t.rows(), t.cols(), t.values()); }

}  // namespace

double stabilize(double z, double epsilon) { return z >= 0.0 ? z + epsilon : z - epsilon; }

Tensor lrp_linear(const Tensor& a, const Tensor& w, const Tensor& r, double epsilon, double gamma) {
  const std::size_t n = a.rows(), in = a.cols(), out = w.cols();
  if (w.rows() != in || r.rows() != n || r.cols() != out) {
    throw ShapeError("lrp_linear: shapes " + a.shape_string() + ", " + w.shape_string() + ", " + r.shape_string());
  }
  Tensor rho = w;
  if (gamma != 0.0)
    for (double& v : rho.values()) v += gamma * std::max(v, 0.0);
  Tensor result = Tensor::matrix(n, in);
  std::vector<double> s(out);
  for (std::size_t row = 0; row < n; ++row) {
    for (std::size_t j = 0; j < out; ++j) {
      double z = 0.0;
      for (std::size_t i = 0; i < in; ++i) z += a(row, i) * rho(i, j);
      s[j] = r(row, j) / stabilize(z, epsilon);
    }
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < out; ++j) acc += rho(i, j) * s[j];
      result(row, i) = a(row, i) * acc;
    }
  }
  if (!result.all_finite()) throw NumericError("lrp_linear: non-finite relevance (epsilon too small?)");
  return result;
}

Tensor lrp_attention_ah(const Tensor& z, const Tensor& p, const Tensor& r, double epsilon) {
  const std::size_t n = z.rows(), d = z.cols(), m = p.rows();
  if (p.cols() != n || r.rows() != m || r.cols() != d) {
    throw ShapeError("lrp_attention_ah: shapes " + z.shape_string() + ", " + p.shape_string() + ", " +
                     r.shape_string());
  }
  const Tensor y = matmul(p, z);
  Tensor s = Tensor::matrix(m, d);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) s(j, c) = r(j, c) / stabilize(y(j, c), epsilon);
  Tensor result = Tensor::matrix(n, d);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += p(j, k) * s(j, c);
      result(k, c) = z(k, c) * acc;
    }
  }
  if (!result.all_finite()) throw NumericError("lrp_attention_ah: non-finite relevance");
  return result;
}

Tensor lrp_layernorm_ln(const Tensor& z, const Tensor& r, double epsilon) {
  if (!z.same_shape(r) && z.size() != r.size()) throw ShapeError("lrp_layernorm_ln: shape mismatch");
  const std::size_t n = z.rows(), d = z.cols();
  if (n == 1) return as_matrix(r);
  Tensor result = Tensor::matrix(n, d);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += z(k, c);
    mean /= static_cast<double>(n);
    double shared = 0.0;
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) {
      s[j] = r(j, c) / stabilize(z(j, c) - mean, epsilon);
      shared += s[j];
    }
    shared /= static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) result(k, c) = z(k, c) * (s[k] - shared);
  }
  if (!result.all_finite()) throw NumericError("lrp_layernorm_ln: non-finite relevance");
  return result;
}

Tensor lrp_silu(const Tensor& x, const Tensor& r) {
  if (x.size() != r.size()) throw ShapeError("lrp_silu: shape mismatch");
  return r;
}

GateRelevance lrp_gate(const Tensor& z_a, const Tensor& z_b, const Tensor& r) {
  if (z_a.size() != r.size() || z_b.size() != r.size()) throw ShapeError("lrp_gate: shape mismatch");
  GateRelevance g{r, r};
  for (double& v : g.a.values()) v *= 0.5;
  for (double& v : g.b.values()) v *= 0.5;
  return g;
}

SsmRelevance lrp_ssm(const std::vector<Tensor>& a, const std::vector<Tensor>& b, const std::vector<Tensor>& c,
                     const std::vector<Tensor>& states, const std::vector<Tensor>& x, const std::vector<Tensor>& r_y,
                     const std::vector<Tensor>& r_h, double epsilon) {
  const std::size_t steps = x.size();
  if (a.size() != steps || b.size() != steps || c.size() != steps || r_y.size() != steps ||
      states.size() != steps + 1 || (!r_h.empty() && r_h.size() != steps)) {
    throw ShapeError("lrp_ssm: sequence lengths differ");
  }
  SsmRelevance out;
  out.x.resize(steps);
  out.h.resize(steps + 1);
  const std::size_t s_dim = states.front().size();
  for (auto& h : out.h) h = Tensor::vector(std::vector<double>(s_dim, 0.0));
  if (!r_h.empty()) out.h[steps] = r_h[steps - 1];
  for (std::size_t t = steps; t >= 1; --t) {
    const std::size_t i = t - 1;  // parameters of step t
    const Tensor& prev = states[t - 1];
    const Tensor& at = a[i];
    const Tensor& bt = b[i];
    const Tensor& ct = c[i];
    const Tensor& xt = x[i];
    const std::size_t e_dim = xt.size(), o_dim = ct.rows();
    if (at.rows() != s_dim || at.cols() != s_dim || bt.rows() != s_dim || bt.cols() != e_dim || ct.cols() != s_dim ||
        r_y[i].size() != o_dim) {
      throw ShapeError("lrp_ssm: parameter shapes do not match the state");
    }
    Tensor& r_prev = out.h[t - 1];
    // y(t) = C(t) h(t-1)
    for (std::size_t o = 0; o < o_dim; ++o) {
      double z = 0.0;
      for (std::size_t j = 0; j < s_dim; ++j) z += ct(o, j) * prev[j];
      const double sc = r_y[i][o] / stabilize(z, epsilon);
      for (std::size_t j = 0; j < s_dim; ++j) r_prev[j] += prev[j] * ct(o, j) * sc;
    }
    // h(t) = A(t) h(t-1) + B(t) x(t)
    Tensor rx = Tensor::vector(std::vector<double>(e_dim, 0.0));
    const Tensor& r_cur = out.h[t];
    for (std::size_t k = 0; k < s_dim; ++k) {
      double z = 0.0;
      for (std::size_t j = 0; j < s_dim; ++j) z += at(k, j) * prev[j];
      for (std::size_t e = 0; e < e_dim; ++e) z += bt(k, e) * xt[e];
      const double sc = r_cur[k] / stabilize(z, epsilon);
      for (std::size_t j = 0; j < s_dim; ++j) r_prev[j] += prev[j] * at(k, j) * sc;
      for (std::size_t e = 0; e < e_dim; ++e) rx[e] += xt[e] * bt(k, e) * sc;
    }
    out.x[i] = std::move(rx);
    if (!r_h.empty() && t >= 2) {
      for (std::size_t j = 0; j < s_dim; ++j) r_prev[j] += r_h[t - 2][j];
    }
  }
  for (const auto& r : out.x)
    if (!r.all_finite()) throw NumericError("lrp_ssm: non-finite relevance");
  return out;
}

Tensor lrp_diagonal_scan(const DiagonalScanInputs& in, const Tensor& states, const Tensor& r_y, double epsilon) {
  const std::size_t steps = in.x.rows(), channels = in.x.cols(), s_dim = in.a_log.cols();
  if (states.rows() != steps + 1 || states.cols() != channels * s_dim || r_y.rows() != steps ||
      r_y.cols() != channels) {
    throw ShapeError("lrp_diagonal_scan: shape mismatch");
  }
  Tensor rx = Tensor::matrix(steps, channels);
  std::vector<double> r_cur(channels * s_dim, 0.0), r_prev(channels * s_dim);
  for (std::size_t t = steps; t-- > 0;) {
    // Row t of the inputs drives h(t+1) and y(t+1); states row t is h(t).
    std::fill(r_prev.begin(), r_prev.end(), 0.0);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      double z = 0.0;
      for (std::size_t s = 0; s < s_dim; ++s) z += in.c(t, s) * states(t, ch * s_dim + s);
      const double sc = r_y(t, ch) / stabilize(z, epsilon);
      const double dt = in.delta(t, ch), xt = in.x(t, ch);
      for (std::size_t s = 0; s < s_dim; ++s) {
        const std::size_t k = ch * s_dim + s;
        const double prev = states(t, k);
        r_prev[k] += prev * in.c(t, s) * sc;
        const double abar = std::exp(-dt * std::exp(in.a_log(ch, s)));
        const double bx = dt * in.b(t, s) * xt;
        const double sh = r_cur[k] / stabilize(abar * prev + bx, epsilon);
        r_prev[k] += abar * prev * sh;
        rx(t, ch) += bx * sh;
      }
    }
    r_cur.swap(r_prev);
  }
  if (!rx.all_finite()) throw NumericError("lrp_diagonal_scan: non-finite relevance");
  return rx;
}

RelevanceState lrp_propagate(const CompGraph& graph, NodeId from, const Tensor& seed, const LrpConfig& config) {
  if (!graph.has_forward()) throw std::logic_error("lrp: no cached forward pass");
  const Tensor& start = graph.value(from);
  if (seed.size() != start.size()) {
    throw ShapeError("lrp: seed " + seed.shape_string() + " does not match node " + start.shape_string());
  }
  RelevanceState st;
  st.config = config;
  st.relevance.resize(graph.size());
  st.relevance[static_cast<std::size_t>(from)] = Tensor(start.shape(), seed.values());
  const double eps = config.epsilon;
  auto& rel = st.relevance;

  for (NodeId id = from; id >= 0; --id) {
    const Tensor& r = rel[static_cast<std::size_t>(id)];
    if (r.empty()) continue;
    const Node& n = graph.node(id);
    st.ledger.push_back({id, op_name(n.kind), r.sum()});
    auto in = [&](std::size_t i) -> const Tensor& { return graph.value(n.inputs[i]); };
    auto input_node = [&](std::size_t i) -> const Node& { return graph.node(n.inputs[i]); };
    switch (n.kind) {
      case OpKind::Input:
      case OpKind::Param:
      case OpKind::Constant:
        break;
      case OpKind::MatMul:
        if (n.route == RelevanceRoute::Lhs) {
          accumulate(rel, n.inputs[0], lrp_linear(as_matrix(in(0)), as_matrix(in(1)), as_matrix(r), eps, config.gamma));
        } else if (n.route == RelevanceRoute::Rhs) {
          accumulate(rel, n.inputs[1], lrp_attention_ah(as_matrix(in(1)), as_matrix(in(0)), as_matrix(r), eps));
        }
        break;
      case OpKind::Transpose:
        accumulate(rel, n.inputs[0], as_matrix(r).transposed());
        break;
      case OpKind::Add: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t rows = a.rows(), cols = a.cols();
        Tensor ra(a.shape(), 0.0), rb(b.shape(), 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < cols; ++j) {
            const double av = a(i, j), bv = bvalue(b, i, j);
            const double sc = r[i * cols + j] / stabilize(av + bv, eps);
            ra(i, j) = av * sc;
            bref(rb, i, j) += bv * sc;
          }
        }
        if (!is_leaf_param(input_node(0))) accumulate(rel, n.inputs[0], ra);
        if (!is_leaf_param(input_node(1))) accumulate(rel, n.inputs[1], rb);
        break;
      }
      case OpKind::Mul: {
        const bool a_const = is_leaf_param(input_node(0)), b_const = is_leaf_param(input_node(1));
        if (a_const && b_const) break;
        if (b_const) {
          accumulate(rel, n.inputs[0], r);
        } else if (a_const) {
          if (in(1).size() != r.size()) throw ShapeError("lrp: broadcast gate operand must be constant");
          accumulate(rel, n.inputs[1], r);
        } else {
          if (in(0).size() != r.size() || in(1).size() != r.size()) {
            throw ShapeError("lrp: gate rule needs equally shaped factors");
          }
          const GateRelevance g = lrp_gate(in(0), in(1), r);
          accumulate(rel, n.inputs[0], g.a);
          accumulate(rel, n.inputs[1], g.b);
        }
        break;
      }
      case OpKind::Silu:
        accumulate(rel, n.inputs[0], lrp_silu(in(0), r));
        break;
      case OpKind::Scale:
      case OpKind::Tanh:
      case OpKind::Relu:
      case OpKind::Sigmoid:
      case OpKind::Softplus:
      case OpKind::Dropout:
        accumulate(rel, n.inputs[0], r);
        break;
      case OpKind::Softmax:
      case OpKind::CumProd:
        break;  // held constant
      case OpKind::LayerNorm: {
        const Tensor z = as_matrix(in(0)).transposed();
        accumulate(rel, n.inputs[0], lrp_layernorm_ln(z, as_matrix(r).transposed(), eps).transposed());
        break;
      }
      case OpKind::SelectiveScan: {
        const DiagonalScanInputs scan{in(0), in(1), in(2), in(3), in(4)};
        accumulate(rel, n.inputs[0], lrp_diagonal_scan(scan, n.aux, as_matrix(r), eps));
        break;
      }
      case OpKind::Sum:
      case OpKind::Mean: {
        const Tensor& a = in(0);
        const std::size_t rows = a.rows(), cols = a.cols();
        const Tensor totals = [&] {
          Tensor t = n.axis == 0 ? Tensor::matrix(1, cols) : n.axis == 1 ? Tensor::matrix(rows, 1) : Tensor::matrix(1, 1);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) bref(t, i, j) += a(i, j);
          return t;
        }();
        const Tensor rm = Tensor(totals.shape(), r.values());
        Tensor ra(a.shape(), 0.0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j)
            ra(i, j) = a(i, j) * bvalue(rm, i, j) / stabilize(bvalue(totals, i, j), eps);
        accumulate(rel, n.inputs[0], ra);
        break;
      }
      case OpKind::Concat: {
        const Tensor rm = as_matrix(r);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const Tensor& part = in(p);
          Tensor rp(part.shape(), 0.0);
          for (std::size_t i = 0; i < part.rows(); ++i)
            for (std::size_t j = 0; j < part.cols(); ++j)
              rp(i, j) = n.axis == 0 ? rm(offset + i, j) : rm(i, offset + j);
          offset += n.axis == 0 ? part.rows() : part.cols();
          accumulate(rel, n.inputs[p], rp);
        }
        break;
      }
      case OpKind::Slice: {
        const Tensor& a = in(0);
        const Tensor rm = as_matrix(r);
        Tensor ra(a.shape(), 0.0);
        for (std::size_t i = 0; i < rm.rows(); ++i)
          for (std::size_t j = 0; j < rm.cols(); ++j) {
            if (n.axis == 0) ra(n.begin + i, j) = rm(i, j);
            else ra(i, n.begin + j) = rm(i, j);
          }
        accumulate(rel, n.inputs[0], ra);
        break;
      }
    }
  }
  return st;
}

Tensor lrp_seed(ForwardTrace& trace, const ExplanationTarget& target) {
  const Tensor& logits = trace.graph.value(trace.logits);
  Tensor seed(logits.shape(), 0.0);
  switch (target.kind) {
    case TargetKind::ClassLogit: {
      const auto c = static_cast<std::size_t>(target.cls);
      if (c >= logits.size()) throw std::invalid_argument("lrp: class out of range");
      seed[c] = logits[c];
      break;
    }
    case TargetKind::RegressionDiff:
      seed[0] = logits[0];
      break;
    case TargetKind::SurvivalRisk: {
      if (trace.risk < 0) throw std::invalid_argument("lrp: survival target on a non-survival model");
      // Gradient x input of the risk at the hazard logits.
      CompGraph& g = trace.graph;
      g.backward(trace.risk, Tensor::scalar(1.0));
      const Tensor& grad = g.grad(trace.logits);
      for (std::size_t k = 0; k < seed.size(); ++k) seed[k] = logits[k] * grad[k];
      break;
    }
  }
  return seed;
}

namespace {
LrpResult propagate_trace(ForwardTrace& trace, const Bag& bag, const ExplanationTarget& target, const Tensor& seed,
                          const LrpConfig& config) {
  LrpResult res;
  res.seed = seed;
  RelevanceState st = lrp_propagate(trace.graph, trace.logits, seed, config);
  const Tensor& rx = st.relevance[static_cast<std::size_t>(trace.input)];
  res.input_relevance = rx.empty() ? Tensor(bag.features.shape(), 0.0) : rx;
  res.ledger = std::move(st.ledger);
  res.heatmap.bag_id = bag.id;
  res.heatmap.method = "lrp";
  res.heatmap.target = target;
  res.heatmap.signed_scores = true;
  res.heatmap.scores.assign(bag.size(), 0.0);
  for (std::size_t i = 0; i < bag.size(); ++i)
    for (std::size_t d = 0; d < bag.dim(); ++d) res.heatmap.scores[i] += res.input_relevance(i, d);
  return res;
}
}  // namespace

LrpResult lrp_from_seed(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target,
                        const Tensor& seed, const LrpConfig& config) {
  ForwardTrace trace = forward(ckpt, bag.features);
  return propagate_trace(trace, bag, target, seed, config);
}

LrpResult lrp_explain(const ModelCheckpoint& ckpt, const Bag& bag, const ExplanationTarget& target,
                      const LrpConfig& config) {
  ForwardTrace trace = forward(ckpt, bag.features);
  const Tensor seed = lrp_seed(trace, target);
  return propagate_trace(trace, bag, target, seed, config);
}

LrpResult lrp_survival_composite(const ModelCheckpoint& ckpt, const Bag& bag, const LrpConfig& config) {
  if (ckpt.spec.head.task != TaskType::Survival) throw std::invalid_argument("lrp: survival composite needs a survival head");
  ExplanationTarget t;
  t.kind = TargetKind::SurvivalRisk;
  return lrp_explain(ckpt, bag, t, config);
}

void write_ledger_csv(const std::vector<LedgerEntry>& ledger, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "node,op,relevance_sum\n";
  for (const auto& e : ledger) out << e.node << ',' << e.op << ',' << io::format_double(e.relevance) << '\n';
  io::write_file_atomic(path, out.str());
}

}  // namespace xmil
