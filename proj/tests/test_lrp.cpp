#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "common.hpp"
#include "xmil/lrp.hpp"
#include "xmil/ssm.hpp"

using namespace xmil;
using fixture::random_bag;
using fixture::random_checkpoint;
using fixture::random_matrix;
using fixture::small_spec;

namespace {

double total(const Tensor& t) { return std::accumulate(t.values().begin(), t.values().end(), 0.0); }
double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

double column_sum(const Tensor& t, std::size_t d) {
  double s = 0.0;
  for (std::size_t r = 0; r < t.rows(); ++r) s += t(r, d);
  return s;
}

Tensor vec(std::initializer_list<double> v) { return Tensor::vector(std::vector<double>(v)); }
Tensor scalar_mat(double v) { return Tensor::matrix(1, 1, {v}); }

ModelSpec bias_free(Architecture arch, TaskType task = TaskType::Classification) {
  ModelSpec s = small_spec(arch, task, 6, false);
  s.layers = 2;
  return s;
}

}  // namespace

TEST(LrpLinear, OneNeuronConservation) {
  const Tensor a = Tensor::matrix(1, 3, {0.5, -1.2, 2.0});
  const Tensor w = Tensor::matrix(3, 1, {1.5, 0.3, -0.7});
  const double y = 0.5 * 1.5 - 1.2 * 0.3 - 2.0 * 0.7;
  const Tensor r = lrp_linear(a, w, Tensor::matrix(1, 1, {y}), 1e-15);
  EXPECT_NEAR(r[0], 0.75, 1e-12);
  EXPECT_NEAR(r[1], -0.36, 1e-12);
  EXPECT_NEAR(r[2], -1.4, 1e-12);
  EXPECT_NEAR(total(r), y, 1e-12);
}

TEST(LrpLinear, PositiveContributionsSplitProportionally) {
  const Tensor a = Tensor::matrix(1, 2, {1.0, 3.0});
  const Tensor w = Tensor::matrix(2, 1, {2.0, 1.0});
  const Tensor r = lrp_linear(a, w, Tensor::matrix(1, 1, {10.0}), 1e-12);
  EXPECT_NEAR(r[0], 4.0, 1e-10);
  EXPECT_NEAR(r[1], 6.0, 1e-10);
}

TEST(LrpLinear, GammaFavoursPositiveWeights) {
  const Tensor a = Tensor::matrix(1, 2, {1.0, 1.0});
  const Tensor w = Tensor::matrix(2, 1, {2.0, -1.0});
  // rho(w) = (2 + 2*0.5, -1) = (3, -1); shares 3/2 and -1/2
  const Tensor r = lrp_linear(a, w, Tensor::matrix(1, 1, {1.0}), 1e-12, 0.5);
  EXPECT_NEAR(r[0], 1.5, 1e-10);
  EXPECT_NEAR(r[1], -0.5, 1e-10);
}

TEST(LrpLinear, LargeEpsilonShrinksKeepingSigns) {
  const Tensor a = Tensor::matrix(1, 3, {0.5, -1.2, 2.0});
  const Tensor w = Tensor::matrix(3, 1, {1.5, 0.3, 0.7});
  const Tensor r0 = lrp_linear(a, w, Tensor::matrix(1, 1, {1.0}), 1e-9);
  const Tensor r1 = lrp_linear(a, w, Tensor::matrix(1, 1, {1.0}), 1e3);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_LT(std::abs(r1[i]), std::abs(r0[i]) * 1e-2);
    EXPECT_EQ(std::signbit(r1[i]), std::signbit(a[i] * w[i]));
  }
}

TEST(LrpLinear, BatchRowsAreIndependent) {
  std::mt19937_64 rng(1);
  const Tensor a = random_matrix(4, 5, rng), w = random_matrix(5, 3, rng), r = random_matrix(4, 3, rng);
  const Tensor out = lrp_linear(a, w, r);
  for (std::size_t n = 0; n < 4; ++n) {
    const Tensor row = lrp_linear(take_rows(a, {n}), w, take_rows(r, {n}));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(out(n, i), row[i]);
  }
}

TEST(LrpAttention, OneHotRoutesToSingleToken) {
  std::mt19937_64 rng(2);
  const Tensor z = random_matrix(3, 4, rng);
  const Tensor p = Tensor::matrix(1, 3, {0.0, 1.0, 0.0});
  const Tensor r = random_matrix(1, 4, rng);
  const Tensor out = lrp_attention_ah(z, p, r, 1e-15);
  for (std::size_t d = 0; d < 4; ++d) {
    EXPECT_EQ(out(0, d), 0.0);
    EXPECT_NEAR(out(1, d), r[d], 1e-12);
    EXPECT_EQ(out(2, d), 0.0);
  }
}

TEST(LrpAttention, UniformOverIdenticalTokensSplitsEqually) {
  const Tensor z = Tensor::matrix(3, 2, {1.0, -2.0, 1.0, -2.0, 1.0, -2.0});
  const Tensor p = Tensor::matrix(2, 3, 1.0 / 3.0);
  const Tensor r = Tensor::matrix(2, 2, {0.6, 0.3, -0.9, 1.2});
  const Tensor out = lrp_attention_ah(z, p, r, 1e-15);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(out(k, 0), (0.6 - 0.9) / 3.0, 1e-12);
    EXPECT_NEAR(out(k, 1), (0.3 + 1.2) / 3.0, 1e-12);
  }
}

TEST(LrpAttention, ConservesPerDimension) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_matrix(3, 5, rng);
    const Tensor p = softmax(random_matrix(3, 3, rng));
    const Tensor r = random_matrix(3, 5, rng);
    const Tensor out = lrp_attention_ah(z, p, r, 1e-12);
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(column_sum(out, d), column_sum(r, d), 1e-8);
  }
}

TEST(LrpLayerNorm, SingleTokenPassesThrough) {
  const Tensor z = Tensor::matrix(1, 3, {0.2, -1.0, 4.0});
  const Tensor r = Tensor::matrix(1, 3, {1.0, 2.0, -3.0});
  EXPECT_EQ(lrp_layernorm_ln(z, r).values(), r.values());
}

TEST(LrpLayerNorm, ConservesPerDimension) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_matrix(5, 4, rng), r = random_matrix(5, 4, rng);
    const Tensor out = lrp_layernorm_ln(z, r, 1e-12);
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(column_sum(out, d), column_sum(r, d), 1e-8);
  }
}

TEST(LrpLayerNorm, MirroredTokensHandEvaluation) {
  // z = (v, -v): both centered outputs have denominators of magnitude v and
  // each token takes half of every upstream relevance.
  const Tensor z = Tensor::matrix(2, 2, {1.5, -0.4, -1.5, 0.4});
  const Tensor r = Tensor::matrix(2, 2, {0.8, 0.1, -0.2, 0.5});
  const Tensor out = lrp_layernorm_ln(z, r, 1e-15);
  for (std::size_t d = 0; d < 2; ++d) {
    const double half = 0.5 * (r(0, d) + r(1, d));
    EXPECT_NEAR(out(0, d), half, 1e-12);
    EXPECT_NEAR(out(1, d), half, 1e-12);
  }
  // relevance equal to the centered outputs cancels exactly
  const Tensor own = lrp_layernorm_ln(z, z, 1e-15);
  for (double v : own.values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(LrpSilu, IdentityOnRelevance) {
  std::mt19937_64 rng(5);
  const Tensor x = random_matrix(3, 4, rng), r = random_matrix(3, 4, rng);
  const Tensor out = lrp_silu(x, r);
  EXPECT_EQ(out.shape(), r.shape());
  EXPECT_EQ(out.values(), r.values());
}

TEST(LrpGate, HalvesEachBranch) {
  std::mt19937_64 rng(6);
  const Tensor za = random_matrix(2, 3, rng), zb = random_matrix(2, 3, rng), r = random_matrix(2, 3, rng);
  const GateRelevance g = lrp_gate(za, zb, r);
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(g.a[i], 0.5 * r[i]);
    EXPECT_EQ(g.b[i], 0.5 * r[i]);
    EXPECT_EQ(g.a[i] + g.b[i], r[i]);
  }
  const GateRelevance zero = lrp_gate(za, zb, Tensor(r.shape(), 0.0));
  for (double v : zero.a.values()) EXPECT_EQ(v, 0.0);
}

TEST(LrpSsm, SingleStepGivesFullStateRelevanceToInput) {
  const std::vector<Tensor> a{scalar_mat(0.7)}, b{Tensor::matrix(1, 2, {0.5, -1.0})}, c{scalar_mat(2.0)};
  const std::vector<Tensor> x{vec({1.0, 0.25})};
  const ScanResult fwd = ssm_scan(a, b, c, x);
  EXPECT_EQ(fwd.y[0][0], 0.0);
  const SsmRelevance r = lrp_ssm(a, b, c, fwd.states, x, {vec({0.0})}, {vec({3.0})}, 1e-15);
  // h(1) = 0.5 - 0.25 = 0.25, shares 0.5/0.25 and -0.25/0.25
  EXPECT_NEAR(r.x[0][0], 6.0, 1e-9);
  EXPECT_NEAR(r.x[0][1], -3.0, 1e-9);
  EXPECT_EQ(r.h[0][0], 0.0);
}

TEST(LrpSsm, ZeroTransitionHasNoHistoryTerm) {
  std::mt19937_64 rng(7);
  const std::size_t steps = 4, s = 3, e = 2;
  std::vector<Tensor> a, b, c, x, r_y, r_h;
  for (std::size_t t = 0; t < steps; ++t) {
    a.push_back(Tensor::matrix(s, s));
    b.push_back(random_matrix(s, e, rng));
    c.push_back(random_matrix(1, s, rng));
    x.push_back(Tensor::vector(random_matrix(1, e, rng).values()));
    r_y.push_back(vec({0.0}));
    r_h.push_back(Tensor::vector(random_matrix(1, s, rng).values()));
  }
  const ScanResult fwd = ssm_scan(a, b, c, x);
  const SsmRelevance r = lrp_ssm(a, b, c, fwd.states, x, r_y, r_h, 1e-15);
  for (std::size_t t = 0; t < steps; ++t) EXPECT_NEAR(total(r.x[t]), total(r_h[t]), 1e-8) << t;
}

TEST(LrpSsm, ScalarTwoStepHandEvaluation) {
  const double a1 = 0.3, a2 = 0.8, b1 = 1.5, b2 = -0.6, c1 = 0.9, c2 = 1.7, x1 = 0.4, x2 = 1.1;
  const double ry2 = 0.35, rh1 = -0.2, rh2 = 0.9;
  const std::vector<Tensor> a{scalar_mat(a1), scalar_mat(a2)}, b{scalar_mat(b1), scalar_mat(b2)},
      c{scalar_mat(c1), scalar_mat(c2)}, x{vec({x1}), vec({x2})};
  const ScanResult fwd = ssm_scan(a, b, c, x);
  const SsmRelevance r = lrp_ssm(a, b, c, fwd.states, x, {vec({0.0}), vec({ry2})}, {vec({rh1}), vec({rh2})}, 1e-15);
  const double h1 = b1 * x1, h2 = a2 * h1 + b2 * x2;
  const double r_h1 = ry2 + a2 * h1 / h2 * rh2 + rh1;
  EXPECT_NEAR(r.x[1][0], b2 * x2 / h2 * rh2, 1e-12);
  EXPECT_NEAR(r.h[1][0], r_h1, 1e-12);
  EXPECT_NEAR(r.x[0][0], r_h1, 1e-12);
  EXPECT_NEAR(r.x[0][0] + r.x[1][0], ry2 + rh1 + rh2, 1e-12);
}

TEST(LrpSsm, DiagonalScanMatchesDenseRule) {
  std::mt19937_64 rng(8);
  const std::size_t steps = 5, e = 2, s = 3;
  const Tensor x = random_matrix(steps, e, rng);
  Tensor delta = random_matrix(steps, e, rng);
  for (double& v : delta.values()) v = std::abs(v) + 0.1;
  const Tensor a_log = random_matrix(e, s, rng, 0.3);
  const Tensor bm = random_matrix(steps, s, rng), cm = random_matrix(steps, s, rng);
  const DiagonalScanInputs in{x, delta, a_log, bm, cm};
  Tensor states;
  diagonal_scan(in, &states);
  const Tensor r_y = random_matrix(steps, e, rng);
  const Tensor rx = lrp_diagonal_scan(in, states, r_y);

  std::vector<Tensor> a(steps), b(steps), c(steps), xs, ry, hs;
  for (std::size_t t = 0; t < steps; ++t) {
    expand_diagonal_step(in, t, a[t], b[t], c[t]);
    xs.push_back(Tensor::vector(take_rows(x, {t}).values()));
    ry.push_back(Tensor::vector(take_rows(r_y, {t}).values()));
  }
  for (std::size_t t = 0; t <= steps; ++t) hs.push_back(Tensor::vector(take_rows(states, {t}).values()));
  const SsmRelevance dense = lrp_ssm(a, b, c, hs, xs, ry);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t ch = 0; ch < e; ++ch) EXPECT_NEAR(rx(t, ch), dense.x[t][ch], 1e-9);
}

TEST(LrpSsm, RejectsLengthMismatch) {
  const std::vector<Tensor> one{scalar_mat(1.0)};
  EXPECT_THROW(lrp_ssm(one, one, one, {vec({0.0})}, {vec({1.0})}, {vec({1.0})}), ShapeError);
}

TEST(LrpExplain, ConservationOnBiasFreeModels) {
  std::mt19937_64 rng(9);
  for (Architecture arch : fixture::kArchitectures) {
    const ModelCheckpoint c = random_checkpoint(bias_free(arch), 10);
    for (int trial = 0; trial < 5; ++trial) {
      const Bag bag = random_bag(3 + 4 * trial, 6, rng);
      const LrpResult r = lrp_explain(c, bag, {TargetKind::ClassLogit, trial % 2});
      const double seed = total(r.seed);
      EXPECT_LE(std::abs(total(r.heatmap.scores) - seed), 1e-6 * std::abs(seed)) << to_string(arch);
      EXPECT_NEAR(total(r.input_relevance), total(r.heatmap.scores), 1e-12);
    }
  }
}

TEST(LrpExplain, ConservationForRegressionAndSurvival) {
  std::mt19937_64 rng(10);
  for (TaskType task : {TaskType::Regression, TaskType::Survival}) {
    for (Architecture arch : fixture::kArchitectures) {
      const ModelCheckpoint c = random_checkpoint(bias_free(arch, task), 11);
      const Bag bag = random_bag(7, 6, rng);
      ForwardTrace trace = forward(c, bag.features);
      const LrpResult r = lrp_explain(c, bag, default_target(trace));
      const double seed = total(r.seed);
      EXPECT_LE(std::abs(total(r.heatmap.scores) - seed), 1e-6 * std::abs(seed)) << to_string(arch);
    }
  }
}

TEST(LrpExplain, SeedIsTargetLogit) {
  std::mt19937_64 rng(11);
  const ModelCheckpoint c = random_checkpoint(small_spec(Architecture::AttnMil), 12);
  const Bag bag = random_bag(4, 6, rng);
  ForwardTrace trace = forward(c, bag.features);
  const LrpResult r = lrp_explain(c, bag, {TargetKind::ClassLogit, 1});
  EXPECT_EQ(r.seed[0], 0.0);
  EXPECT_EQ(r.seed[1], trace.graph.value(trace.logits)[1]);
}

TEST(LrpExplain, LinearInSeed) {
  std::mt19937_64 rng(12);
  for (Architecture arch : fixture::kArchitectures) {
    const ModelCheckpoint c = random_checkpoint(small_spec(arch), 13);
    const Bag bag = random_bag(6, 6, rng);
    const ExplanationTarget t{TargetKind::ClassLogit, 0};
    const Tensor seed = Tensor::vector({0.7, 0.0});
    const auto base = lrp_from_seed(c, bag, t, seed).heatmap.scores;
    for (double alpha : {-1.0, 2.5}) {
      Tensor scaled = seed;
      scaled[0] *= alpha;
      const auto s = lrp_from_seed(c, bag, t, scaled).heatmap.scores;
      for (std::size_t n = 0; n < s.size(); ++n) EXPECT_NEAR(s[n], alpha * base[n], 1e-12 * (1 + std::abs(base[n])));
    }
  }
}

TEST(LrpExplain, ZeroInstanceGetsZero) {
  std::mt19937_64 rng(13);
  for (Architecture arch : fixture::kArchitectures) {
    const ModelCheckpoint c = random_checkpoint(bias_free(arch), 14);
    Bag bag = random_bag(5, 6, rng);
    for (std::size_t d = 0; d < 6; ++d) bag.features(3, d) = 0.0;
    EXPECT_EQ(lrp_explain(c, bag, {TargetKind::ClassLogit, 1}).heatmap.scores[3], 0.0) << to_string(arch);
  }
}

TEST(LrpExplain, RankingInvariantToPositiveHeadScale) {
  std::mt19937_64 rng(14);
  ModelCheckpoint c = random_checkpoint(bias_free(Architecture::TransMil), 15);
  const Bag bag = random_bag(8, 6, rng);
  const ExplanationTarget t{TargetKind::ClassLogit, 1};
  const auto base = lrp_explain(c, bag, t).heatmap.scores;
  Tensor& w = c.params.at("head.weight");
  for (std::size_t i = 0; i < w.rows(); ++i) w(i, 1) *= 3.0;
  const auto scaled = lrp_explain(c, bag, t).heatmap.scores;
  std::vector<std::size_t> ia(base.size()), ib(base.size());
  std::iota(ia.begin(), ia.end(), 0);
  std::iota(ib.begin(), ib.end(), 0);
  std::sort(ia.begin(), ia.end(), [&](auto i, auto j) { return base[i] < base[j]; });
  std::sort(ib.begin(), ib.end(), [&](auto i, auto j) { return scaled[i] < scaled[j]; });
  EXPECT_EQ(ia, ib);
  for (std::size_t n = 0; n < base.size(); ++n) EXPECT_NEAR(scaled[n], 3.0 * base[n], 1e-7 * (1 + std::abs(base[n])));
}

TEST(LrpExplain, BiasedModelRecordsLedger) {
  std::mt19937_64 rng(15);
  const ModelCheckpoint c = random_checkpoint(small_spec(Architecture::MambaMil), 16);
  const LrpResult r = lrp_explain(c, random_bag(5, 6, rng), {TargetKind::ClassLogit, 0});
  ASSERT_FALSE(r.ledger.empty());
  for (const auto& e : r.ledger) EXPECT_TRUE(std::isfinite(e.relevance));
  const auto dir = fixture::temp_dir("ledger");
  write_ledger_csv(r.ledger, dir / "l.csv");
  EXPECT_TRUE(std::filesystem::exists(dir / "l.csv"));
}

TEST(LrpSurvival, ZeroLogitsGiveZeroHeatmap) {
  std::mt19937_64 rng(16);
  ModelCheckpoint c = random_checkpoint(small_spec(Architecture::AttnMil, TaskType::Survival), 17);
  for (double& v : c.params.at("head.weight").values()) v = 0.0;
  for (double& v : c.params.at("head.bias").values()) v = 0.0;
  const LrpResult r = lrp_survival_composite(c, random_bag(4, 6, rng));
  for (double v : r.seed.values()) EXPECT_EQ(v, 0.0);
  for (double v : r.heatmap.scores) EXPECT_EQ(v, 0.0);
}

TEST(LrpSurvival, SingleIntervalHandDerivative) {
  std::mt19937_64 rng(17);
  ModelSpec spec = small_spec(Architecture::AttnMil, TaskType::Survival);
  spec.head.num_intervals = 1;
  const ModelCheckpoint c = random_checkpoint(spec, 18);
  const Bag bag = random_bag(4, 6, rng);
  const ForwardTrace trace = forward(c, bag.features);
  const double l = trace.graph.value(trace.logits)[0];
  const double s = 1.0 / (1.0 + std::exp(-l));
  EXPECT_NEAR(trace.head_output().risk, -(1.0 - s), 1e-14);
  const LrpResult r = lrp_survival_composite(c, bag);
  EXPECT_NEAR(r.seed[0], l * s * (1.0 - s), 1e-14);
}

TEST(LrpSurvival, SeedIsLogitTimesGradient) {
  std::mt19937_64 rng(18);
  for (Architecture arch : fixture::kArchitectures) {
    const ModelCheckpoint c = random_checkpoint(small_spec(arch, TaskType::Survival), 19);
    const Bag bag = random_bag(5, 6, rng);
    const LrpResult r = lrp_survival_composite(c, bag);
    // dr/dl_k by central differences on the head alone
    ForwardTrace trace = forward(c, bag.features);
    const Tensor logits = trace.graph.value(trace.logits);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      Tensor up = logits, down = logits;
      up[k] += 1e-6;
      down[k] -= 1e-6;
      const double g = (head_forward(up, c.spec.head).risk - head_forward(down, c.spec.head).risk) / 2e-6;
      EXPECT_NEAR(r.seed[k], logits[k] * g, 1e-8) << to_string(arch);
    }
    EXPECT_THROW(lrp_survival_composite(random_checkpoint(small_spec(arch), 1), bag), std::invalid_argument);
  }
}
