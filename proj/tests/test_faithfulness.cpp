#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "common.hpp"
#include "xmil/faithfulness.hpp"

using namespace xmil;
using fixture::random_bag;
using fixture::random_checkpoint;
using fixture::small_spec;

namespace {

std::vector<double> distinct_scores(std::size_t n, std::uint64_t seed) {
  std::vector<double> s(n);
  std::iota(s.begin(), s.end(), 0.0);
  std::shuffle(s.begin(), s.end(), std::mt19937_64(seed));
  return s;
}

Heatmap heatmap_of(const Bag& bag, std::string method, std::vector<double> scores) {
  Heatmap h;
  h.bag_id = bag.id;
  h.method = std::move(method);
  h.target = {TargetKind::ClassLogit, 1};
  h.scores = std::move(scores);
  return h;
}

}  // namespace

TEST(Partition, HundredInstancesOnePerChunk) {
  const auto scores = distinct_scores(100, 1);
  const PartitionPlan plan = partition_patches(scores, Ordering::Ascending);
  ASSERT_EQ(plan.sets.size(), kPartitions);
  for (std::size_t i = 0; i < kPartitions; ++i) {
    ASSERT_EQ(plan.sets[i].size(), 1u);
    EXPECT_EQ(scores[plan.sets[i][0]], static_cast<double>(i));
  }
}

TEST(Partition, SmallBagLeavesEmptyChunks) {
  const PartitionPlan plan = partition_patches({0.3, 0.1, 0.2}, Ordering::Descending);
  std::size_t empty = 0;
  for (const auto& s : plan.sets) empty += s.empty();
  EXPECT_EQ(empty, 97u);
  EXPECT_EQ(plan.sets[33], std::vector<std::size_t>{0});
  EXPECT_EQ(plan.sets[66], std::vector<std::size_t>{2});
  EXPECT_EQ(plan.sets[99], std::vector<std::size_t>{1});
}

TEST(Partition, FloorChunkSizes) {
  for (std::size_t n : {1u, 7u, 99u, 101u, 250u, 1013u}) {
    const auto scores = distinct_scores(n, n);
    for (Ordering o : {Ordering::Ascending, Ordering::Descending}) {
      const PartitionPlan plan = partition_patches(scores, o);
      std::vector<std::size_t> sorted(n);
      std::iota(sorted.begin(), sorted.end(), 0);
      std::sort(sorted.begin(), sorted.end(), [&](auto a, auto b) {
        return o == Ordering::Ascending ? scores[a] < scores[b] : scores[a] > scores[b];
      });
      std::set<std::size_t> seen;
      for (std::size_t i = 1; i <= kPartitions; ++i) {
        const std::size_t lo = n * (i - 1) / kPartitions, hi = n * i / kPartitions;
        const std::vector<std::size_t> expected(sorted.begin() + lo, sorted.begin() + hi);
        EXPECT_EQ(plan.sets[i - 1], expected) << n << " chunk " << i;
        seen.insert(expected.begin(), expected.end());
      }
      EXPECT_EQ(seen.size(), n);
    }
  }
  const PartitionPlan plan = partition_patches(distinct_scores(250, 3), Ordering::Ascending);
  for (std::size_t i = 0; i < kPartitions; ++i) EXPECT_EQ(plan.sets[i].size(), i % 2 == 0 ? 2u : 3u);
}

TEST(Partition, TiesBrokenByIndex) {
  const std::vector<double> scores(150, 0.5);
  for (Ordering o : {Ordering::Ascending, Ordering::Descending}) {
    std::vector<std::size_t> flat;
    for (const auto& s : partition_patches(scores, o).sets) flat.insert(flat.end(), s.begin(), s.end());
    for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(flat[i], i);
  }
}

TEST(Aupc, ClosedForms) {
  EXPECT_DOUBLE_EQ(aupc(std::vector<double>(kCurveLength, 0.37)), 101 * 0.37 / 100);
  std::vector<double> linear(kCurveLength);
  for (std::size_t m = 0; m < kCurveLength; ++m) linear[m] = 1.0 - m / 100.0;
  EXPECT_NEAR(aupc(linear), 0.505, 1e-15);
  EXPECT_EQ(aupc(std::vector<double>(kCurveLength, 0.0)), 0.0);
}

TEST(Srg, IdenticalAndSwappedOrderings) {
  PerturbationRecord r;
  r.ascending.assign(kCurveLength, 0.0);
  for (std::size_t m = 0; m < kCurveLength; ++m) r.ascending[m] = std::sin(0.1 * m);
  r.descending = r.ascending;
  r.aupc_ascending = r.aupc_descending = aupc(r.ascending);
  EXPECT_EQ(srg(r), 0.0);
  r.aupc_descending = 0.2;
  const double forward = srg(r);
  std::swap(r.aupc_ascending, r.aupc_descending);
  EXPECT_EQ(srg(r), -forward);
}

TEST(FlipCurve, MatchesDirectRemoval) {
  std::mt19937_64 rng(4);
  for (Architecture arch : fixture::kArchitectures) {
    const ModelCheckpoint c = random_checkpoint(small_spec(arch), 5);
    const Bag bag = random_bag(37, 6, rng);
    const ExplanationTarget t{TargetKind::ClassLogit, 1};
    const PartitionPlan plan = partition_patches(distinct_scores(37, 9), Ordering::Descending);
    const auto curve = flip_curve(c, bag, plan, t);
    ASSERT_EQ(curve.size(), kCurveLength);
    for (std::size_t m : {0u, 1u, 27u, 50u, 99u, 100u}) {
      std::vector<bool> removed(37, false);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t n : plan.sets[i]) removed[n] = true;
      std::vector<std::size_t> kept;
      for (std::size_t n = 0; n < 37; ++n)
        if (!removed[n]) kept.push_back(n);
      const Tensor x = kept.empty() ? Tensor::matrix(1, 6) : take_rows(bag.features, kept);
      const HeadOutput out = forward(c, x).head_output();
      EXPECT_DOUBLE_EQ(curve[m], out.probabilities[1]) << to_string(arch) << " m=" << m;
    }
  }
}

TEST(FlipCurve, ConstantModelIsFlat) {
  std::mt19937_64 rng(5);
  ModelCheckpoint c = random_checkpoint(small_spec(Architecture::TransMil), 6);
  for (double& v : c.params.at("head.weight").values()) v = 0.0;
  const Bag bag = random_bag(20, 6, rng);
  const auto curve = flip_curve(c, bag, partition_patches(distinct_scores(20, 1), Ordering::Ascending),
                                {TargetKind::ClassLogit, 0});
  for (double v : curve) EXPECT_EQ(v, curve[0]);
  EXPECT_NEAR(aupc(curve), 1.01 * curve[0], 1e-14);
}

TEST(FlipCurve, KeyInstanceRemovalDropsDescendingCurve) {
  // AttnMIL reading only the first feature, with attention focused on it.
  ModelSpec spec = small_spec(Architecture::AttnMil, TaskType::Classification, 2);
  ModelCheckpoint c = init_checkpoint(spec, 1);
  for (auto& [name, t] : c.params)
    for (double& v : t.values()) v = 0.0;
  for (std::size_t j = 0; j < spec.hidden; ++j) c.params.at("embed.weight")(0, j) = 1.0;
  for (double& v : c.params.at("attn.V.weight").values()) v = 1.0;
  for (double& v : c.params.at("attn.w.weight").values()) v = 5.0;
  Tensor& head = c.params.at("head.weight");
  for (std::size_t j = 0; j < spec.hidden; ++j) head(j, 1) = 1.0;
  c.params.at("head.bias")[1] = -2.0;

  Bag bag;
  bag.id = "key";
  bag.features = Tensor::matrix(200, 2);
  bag.features(57, 0) = 3.0;
  std::vector<double> scores(200, 0.0);
  scores[57] = 1.0;
  const Heatmap h = heatmap_of(bag, "oracle", scores);
  const PerturbationRecord r = evaluate_heatmap(c, bag, h);
  EXPECT_GT(r.descending[0], 0.99);
  EXPECT_LT(r.descending[1], 0.2);
  EXPECT_GT(r.ascending[99], 0.99);
  EXPECT_GT(r.srg, 0.8);
}

TEST(TrackedOutput, PerTask) {
  std::mt19937_64 rng(6);
  const Bag bag = random_bag(5, 6, rng);
  const ModelCheckpoint cls = random_checkpoint(small_spec(Architecture::AttnMil), 7);
  const ForwardTrace tc = forward(cls, bag.features);
  EXPECT_EQ(tracked_output(tc, {TargetKind::ClassLogit, 1}, TrackedOutput::Softmax), tc.head_output().probabilities[1]);
  EXPECT_EQ(tracked_output(tc, {TargetKind::ClassLogit, 1}, TrackedOutput::Logit), tc.graph.value(tc.logits)[1]);
  const ModelCheckpoint surv = random_checkpoint(small_spec(Architecture::AttnMil, TaskType::Survival), 8);
  const ForwardTrace ts = forward(surv, bag.features);
  EXPECT_EQ(tracked_output(ts, {TargetKind::SurvivalRisk, 0}, TrackedOutput::Softmax), ts.head_output().risk);
  EXPECT_EQ(parse_tracked_output("logit"), TrackedOutput::Logit);
  EXPECT_THROW(parse_tracked_output("margin"), std::invalid_argument);
}

TEST(Evaluate, SrgInvariantToMonotoneTransforms) {
  std::mt19937_64 rng(7);
  const ModelCheckpoint c = random_checkpoint(small_spec(Architecture::MambaMil), 9);
  const Bag bag = random_bag(60, 6, rng);
  std::vector<double> scores(60);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : scores) v = n(rng);
  const double base = evaluate_heatmap(c, bag, heatmap_of(bag, "m", scores)).srg;
  const std::vector<std::function<double(double)>> maps{
      [](double x) { return std::exp(x); }, [](double x) { return 3 * x + 1; }, [](double x) { return x * x * x; },
      [](double x) { return std::atan(x); }};
  for (const auto& f : maps) {
    std::vector<double> t(scores.size());
    std::transform(scores.begin(), scores.end(), t.begin(), f);
    EXPECT_EQ(evaluate_heatmap(c, bag, heatmap_of(bag, "m", t)).srg, base);
  }
}

TEST(Evaluate, RandomHeatmapsHaveZeroMeanSrg) {
  std::mt19937_64 rng(8);
  const ModelCheckpoint c = random_checkpoint(small_spec(Architecture::AttnMil), 10, 1.0);
  const Bag bag = random_bag(40, 6, rng);
  std::vector<double> values;
  for (std::uint64_t s = 0; s < 200; ++s) values.push_back(evaluate_heatmap(c, bag, explain_random(bag, s)).srg);
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double half = 1.96 * std::sqrt(var / (values.size() - 1) / values.size());
  EXPECT_LE(mean - half, 0.0);
  EXPECT_GE(mean + half, 0.0);
}

TEST(Cohort, SharedFullBagOutputAndCsvRoundTrip) {
  std::mt19937_64 rng(9);
  const ModelCheckpoint c = random_checkpoint(small_spec(Architecture::TransMil), 11);
  std::vector<Bag> bags;
  for (int i = 0; i < 3; ++i) bags.push_back(random_bag(12 + i, 6, rng, "bag_" + std::to_string(i)));
  std::vector<const Bag*> ptrs;
  for (const auto& b : bags) ptrs.push_back(&b);
  const std::vector<std::string> methods{"gxi", "random"};
  std::map<std::pair<std::string, std::string>, Heatmap> maps;
  for (const auto& b : bags)
    for (const auto& m : methods) maps[{b.id, m}] = explain(m, c, b, {});
  const CohortResult res = evaluate_cohort(c, ptrs, methods, maps, TrackedOutput::Softmax, 2);
  ASSERT_EQ(res.srg.size(), 3u);
  for (std::size_t b = 0; b < 3; ++b) {
    const double full = res.record(b, 0).ascending[0];
    for (std::size_t m = 0; m < 2; ++m) {
      EXPECT_EQ(res.record(b, m).ascending[0], full);
      EXPECT_EQ(res.record(b, m).descending[0], full);
      EXPECT_EQ(res.srg[b][m], res.record(b, m).aupc_ascending - res.record(b, m).aupc_descending);
    }
  }
  const CohortResult serial = evaluate_cohort(c, ptrs, methods, maps);
  EXPECT_EQ(serial.srg, res.srg);
  EXPECT_EQ(curves_csv(serial), curves_csv(res));

  const auto dir = fixture::temp_dir("cohort");
  std::ofstream(dir / "srg.csv") << srg_csv(res);
  const CohortResult back = read_srg_csv(dir / "srg.csv");
  EXPECT_EQ(back.bag_ids, res.bag_ids);
  EXPECT_EQ(back.methods, res.methods);
  EXPECT_EQ(back.srg, res.srg);
  const std::string curves = curves_csv(res);
  EXPECT_EQ(std::count(curves.begin(), curves.end(), '\n'), 1 + 3 * 2 * 2 * 101);

  maps.erase({"bag_1", "random"});
  EXPECT_THROW(evaluate_cohort(c, ptrs, methods, maps), std::invalid_argument);
}
