#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "xmil/stats.hpp"

using namespace xmil;

namespace {

// Two-sided p by enumerating every sign assignment of the (average) ranks.
double brute_force_p(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double v : d)
    if (v != 0.0) nz.push_back(v);
  const std::size_t n = nz.size();
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n; ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      below += std::abs(nz[j]) < std::abs(nz[i]);
      equal += std::abs(nz[j]) == std::abs(nz[i]);
    }
    ranks[i] = below + (equal + 1) / 2;
  }
  double observed = 0.0, total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    total += ranks[i];
    if (nz[i] > 0) observed += ranks[i];
  }
  const double mu = total / 2;
  std::size_t extreme = 0;
  for (std::uint64_t mask = 0; mask < (1ull << n); ++mask) {
    double w = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) w += ranks[i];
    extreme += std::abs(w - mu) >= std::abs(observed - mu) - 1e-9;
  }
  return static_cast<double>(extreme) / static_cast<double>(1ull << n);
}

}  // namespace

TEST(Wilcoxon, AllPositiveTen) {
  std::vector<double> d(10);
  std::iota(d.begin(), d.end(), 1.0);
  const WilcoxonResult w = wilcoxon_effect(d);
  EXPECT_EQ(w.n, 10u);
  EXPECT_EQ(w.w_plus, 55.0);
  EXPECT_NEAR(w.z, 27.5 / std::sqrt(96.25), 1e-12);
  EXPECT_NEAR(w.r, 0.8864, 1e-3);
  EXPECT_NEAR(w.p, 2.0 / 1024.0, 1e-15);
  EXPECT_TRUE(w.exact);
}

TEST(Wilcoxon, MatchesExactEnumeration) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.3, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 5 + trial % 8;
    std::vector<double> d(n);
    for (double& v : d) v = std::round(noise(rng) * 4) / 4;  // produces ties and zeros
    if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) d[0] = 1.0;
    EXPECT_NEAR(wilcoxon_effect(d).p, brute_force_p(d), 0.02) << trial;
  }
}

TEST(Wilcoxon, NormalApproximationForLargeSamples) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> noise(0.1, 1.0);
  std::vector<double> d(200);
  for (double& v : d) v = noise(rng);
  const WilcoxonResult w = wilcoxon_effect(d);
  EXPECT_FALSE(w.exact);
  EXPECT_DOUBLE_EQ(w.p, normal_two_sided_p(w.z));
  EXPECT_NEAR(normal_two_sided_p(1.959963984540054), 0.05, 1e-12);
}

TEST(Wilcoxon, AntisymmetricDifferencesGiveZero) {
  const std::vector<double> d{1.0, -1.0, 2.5, -2.5, 0.3, -0.3, 4.0, -4.0};
  const WilcoxonResult w = wilcoxon_effect(d);
  EXPECT_EQ(w.z, 0.0);
  EXPECT_EQ(w.r, 0.0);
  EXPECT_EQ(w.w_plus, 8.0 * 9.0 / 4.0);
}

TEST(Wilcoxon, NegationAndScaling) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.2, 1.0);
  for (std::size_t n : {6u, 30u, 80u}) {
    std::vector<double> d(n);
    for (double& v : d) v = noise(rng);
    const WilcoxonResult w = wilcoxon_effect(d);
    std::vector<double> neg(d), scaled(d);
    for (double& v : neg) v = -v;
    for (double& v : scaled) v *= 7.5;
    const WilcoxonResult wn = wilcoxon_effect(neg), ws = wilcoxon_effect(scaled);
    EXPECT_EQ(wn.r, -w.r);
    EXPECT_EQ(wn.p, w.p);
    EXPECT_EQ(ws.r, w.r);
    EXPECT_EQ(ws.p, w.p);
  }
}

TEST(Wilcoxon, ZerosDroppedAndSmallSamplesFlagged) {
  const WilcoxonResult w = wilcoxon_effect({0.0, 1.0, 0.0, 2.0, -0.5});
  EXPECT_EQ(w.n, 3u);
  EXPECT_FALSE(w.reliable);
  EXPECT_THROW(wilcoxon_effect({0.0, 0.0}), std::invalid_argument);
  EXPECT_TRUE(wilcoxon_effect({1, 2, 3, 4, 5}).reliable);
}

TEST(MedianMad, Cases) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_EQ(median_mad_effect({-2.0, -1.0, 0.0, 1.0, 2.0}), 0.0);
  EXPECT_EQ(median_mad_effect({0.4, 0.4, 0.4}), std::numeric_limits<double>::infinity());
  EXPECT_EQ(median_mad_effect({-0.4, -0.4}), -std::numeric_limits<double>::infinity());
  EXPECT_EQ(median_mad_effect({0.0, 0.0}), 0.0);
}

TEST(MedianMad, NormalConsistency) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(1.0, 1.0);
  std::vector<double> d(100000);
  for (double& v : d) v = n(rng);
  EXPECT_NEAR(median_mad_effect(d), 1.0, 0.03);
}

TEST(Fdr, HandCases) {
  EXPECT_EQ(fdr_adjust({0.03}), std::vector<double>{0.03});
  for (double p : fdr_adjust({0.01, 0.02, 0.03, 0.04})) EXPECT_NEAR(p, 0.04, 1e-15);
  for (double p : fdr_adjust({0.2, 0.2, 0.2})) EXPECT_DOUBLE_EQ(p, 0.2);
  const auto capped = fdr_adjust({0.9, 0.95, 0.6});
  for (double p : capped) EXPECT_LE(p, 1.0);
  EXPECT_THROW(fdr_adjust({0.5, 1.2}), std::invalid_argument);
  EXPECT_THROW(fdr_adjust({-0.1}), std::invalid_argument);
}

TEST(Fdr, MonotoneAndAboveRaw) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(1 + trial % 20);
    for (double& v : p) v = u(rng) * u(rng);
    const auto q = fdr_adjust(p);
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return p[a] < p[b]; });
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_GE(q[i], p[i]);
    for (std::size_t i = 1; i < order.size(); ++i) EXPECT_LE(q[order[i - 1]], q[order[i]]);
  }
}

TEST(Magnitude, Thresholds) {
  EXPECT_EQ(magnitude_class(0.1), Magnitude::Negligible);
  EXPECT_EQ(magnitude_class(-0.35), Magnitude::WeakModerate);
  EXPECT_EQ(magnitude_class(0.7), Magnitude::Strong);
  EXPECT_EQ(magnitude_class(-0.7), Magnitude::Strong);
  EXPECT_EQ(to_string(Magnitude::WeakModerate), "weak-moderate");
}

TEST(MeanRank, Cases) {
  EXPECT_EQ(mean_rank_scores({{0.9, 0.1}, {0.5, 0.2}, {0.3, -1.0}})[0], 1.0);
  const auto tied = mean_rank_scores({{0.4, 0.4}, {0.1, 0.1}});
  EXPECT_EQ(tied, (std::vector<double>{1.5, 1.5}));
  // bag 1 ranks (2, 1, 3), bag 2 ranks (1, 2.5, 2.5)
  const auto hand = mean_rank_scores({{0.5, 0.9, 0.1}, {0.8, 0.2, 0.2}});
  EXPECT_EQ(hand, (std::vector<double>{1.5, 1.75, 2.75}));
  EXPECT_THROW(mean_rank_scores({{0.1, 0.2}, {0.3}}), std::invalid_argument);
}

TEST(MeanRank, AveragesToMidRank) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> u(0, 4);
  for (std::size_t m : {2u, 5u, 7u}) {
    std::vector<std::vector<double>> srg(30, std::vector<double>(m));
    for (auto& row : srg)
      for (double& v : row) v = u(rng) * 0.25;
    const auto mrs = mean_rank_scores(srg);
    EXPECT_NEAR(std::accumulate(mrs.begin(), mrs.end(), 0.0) / m, (m + 1) / 2.0, 1e-12);
    for (double v : mrs) {
      EXPECT_GE(v, 1.0);
      EXPECT_LE(v, static_cast<double>(m));
    }
  }
}

TEST(Compare, TableAndVerdict) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 0.05);
  std::vector<std::vector<double>> srg(40, std::vector<double>(3));
  for (auto& row : srg) {
    row[0] = 0.5 + n(rng);
    row[1] = 0.2 + n(rng);
    row[2] = n(rng);
  }
  const ComparisonTable t = compare_methods({"lrp", "gxi", "random"}, srg);
  ASSERT_EQ(t.pairs.size(), 3u);
  EXPECT_EQ(t.verdict(), "lrp");
  EXPECT_EQ(t.mrs[0], 1.0);
  EXPECT_GT(t.effect("lrp", "random"), 0.8);
  EXPECT_EQ(t.effect("random", "lrp"), -t.effect("lrp", "random"));
  EXPECT_EQ(t.effect("gxi", "gxi"), 0.0);
  for (const auto& p : t.pairs) {
    EXPECT_TRUE(p.significant);
    EXPECT_GE(p.p_adjusted, p.p);
    EXPECT_EQ(p.magnitude, Magnitude::Strong);
  }
  const auto j = to_json(t);
  EXPECT_EQ(j.at("methods").size(), 3u);
  const std::string csv = comparison_csv(t);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_THROW(compare_methods({"only"}, {{0.1}}), std::invalid_argument);
}

TEST(Compare, IdenticalMethodsAreNotSignificant) {
  const std::vector<std::vector<double>> srg{{0.1, 0.1}, {0.3, 0.3}, {0.2, 0.2}};
  const ComparisonTable t = compare_methods({"a", "b"}, srg);
  EXPECT_EQ(t.pairs[0].r, 0.0);
  EXPECT_EQ(t.pairs[0].p, 1.0);
  EXPECT_FALSE(t.pairs[0].significant);
  EXPECT_EQ(t.mrs, (std::vector<double>{1.5, 1.5}));
}

TEST(Aggregate, MeansPerGroup) {
  const std::vector<std::vector<double>> up{{0.4, 0.1}, {0.5, 0.2}, {0.6, 0.0}, {0.7, 0.3}, {0.45, 0.05}};
  std::vector<std::vector<double>> down;
  for (const auto& row : up) down.push_back({row[1], row[0]});
  ComparisonTable a = compare_methods({"x", "y"}, up), b = compare_methods({"x", "y"}, down);
  a.grouping["task"] = "classification";
  b.grouping["task"] = "classification";
  const auto overall = aggregate_effects({a, b}, "");
  EXPECT_NEAR(overall.at("overall")[0][1], 0.0, 1e-15);
  const auto single = aggregate_effects({a}, "task");
  EXPECT_EQ(single.at("classification")[0][1], a.effect("x", "y"));
  b.grouping["task"] = "survival";
  const auto grouped = aggregate_effects({a, b, a}, "task");
  EXPECT_EQ(grouped.size(), 2u);
  EXPECT_NEAR(grouped.at("classification")[1][0], a.effect("y", "x"), 1e-15);
  ComparisonTable c = compare_methods({"x", "z"}, up);
  EXPECT_THROW(aggregate_effects({a, c}, ""), std::invalid_argument);
}
