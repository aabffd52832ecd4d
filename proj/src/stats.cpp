#include "xmil/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "xmil/io.hpp"

namespace xmil {

namespace {

// 1-based average ranks of v in ascending order.
std::vector<double> average_ranks_ascending(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return ranks;
}

// Two-sided exact p of the signed-rank statistic given the (average) ranks.
double exact_p(const std::vector<double>& ranks, double w_plus) {
  std::vector<std::size_t> doubled;
  std::size_t total = 0;
  for (double r : ranks) {
    doubled.push_back(static_cast<std::size_t>(std::lround(2.0 * r)));
    total += doubled.back();
  }
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  std::size_t reach = 0;
  for (std::size_t r : doubled) {
    for (std::size_t s = reach + 1; s-- > 0;) count[s + r] += count[s];
    reach += r;
  }
  const double all = std::ldexp(1.0, static_cast<int>(ranks.size()));
  const auto w = static_cast<std::size_t>(std::lround(2.0 * w_plus));
  double lower = 0.0, upper = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    if (s <= w) lower += count[s];
    if (s >= w) upper += count[s];
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

}  // namespace

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

WilcoxonResult wilcoxon_effect(const std::vector<double>& d) {
  std::vector<double> nz;
  for (double v : d) {
    if (!std::isfinite(v)) throw std::invalid_argument("wilcoxon: non-finite difference");
    if (v != 0.0) nz.push_back(v);
  }
  if (nz.empty()) throw std::invalid_argument("wilcoxon: all differences are zero");
  std::vector<double> mags(nz.size());
  for (std::size_t i = 0; i < nz.size(); ++i) mags[i] = std::abs(nz[i]);
  const auto ranks = average_ranks_ascending(mags);
  WilcoxonResult res;
  res.n = nz.size();
  for (std::size_t i = 0; i < nz.size(); ++i)
    if (nz[i] > 0) res.w_plus += ranks[i];
  const double n = static_cast<double>(res.n);
  const double mu = n * (n + 1) / 4.0;
  const double sigma = std::sqrt(n * (n + 1) * (2 * n + 1) / 24.0);
  res.z = (res.w_plus - mu) / sigma;
  res.r = res.z / std::sqrt(n);
  res.reliable = res.n >= 5;
  if (res.n <= kWilcoxonExactMax) {
    res.exact = true;
    res.p = exact_p(ranks, res.w_plus);
  } else {
    res.p = normal_two_sided_p(res.z);
  }
  return res;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

double median_mad_effect(const std::vector<double>& d) {
  const double med = median(d);
  std::vector<double> dev(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) dev[i] = std::abs(d[i] - med);
  const double mad = median(dev);
  if (mad == 0.0) {
    if (med == 0.0) return 0.0;
    return med > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
  }
  return med / (1.4826 * mad);
}

std::vector<double> fdr_adjust(const std::vector<double>& pvals) {
  const std::size_t m = pvals.size();
  for (double p : pvals)
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("fdr: p-value outside [0,1]");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  std::vector<double> out(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const std::size_t i = order[k];
    running = std::min(running, std::max(pvals[i], pvals[i] * static_cast<double>(m) / static_cast<double>(k + 1)));
    out[i] = std::min(running, 1.0);
  }
  return out;
}

Magnitude magnitude_class(double r) {
  const double a = std::abs(r);
  if (a < 0.2) return Magnitude::Negligible;
  if (a <= 0.5) return Magnitude::WeakModerate;
  return Magnitude::Strong;
}

std::string to_string(Magnitude m) {
  switch (m) {
    case Magnitude::Negligible: return "negligible";
    case Magnitude::WeakModerate: return "weak-moderate";
    case Magnitude::Strong: return "strong";
  }
  return "?";
}

std::vector<double> mean_rank_scores(const std::vector<std::vector<double>>& srg) {
  if (srg.empty()) throw std::invalid_argument("mrs: empty matrix");
  const std::size_t methods = srg.front().size();
  std::vector<double> total(methods, 0.0);
  for (const auto& row : srg) {
    if (row.size() != methods) throw std::invalid_argument("mrs: missing cells");
    std::vector<double> neg(row.size());
    for (std::size_t m = 0; m < row.size(); ++m) {
      if (!std::isfinite(row[m])) throw std::invalid_argument("mrs: non-finite SRG");
      neg[m] = -row[m];
    }
    const auto ranks = average_ranks_ascending(neg);
    for (std::size_t m = 0; m < methods; ++m) total[m] += ranks[m];
  }
  for (double& t : total) t /= static_cast<double>(srg.size());
  return total;
}

double ComparisonTable::effect(const std::string& a, const std::string& b) const {
  if (a == b) return 0.0;
  const PairComparison& p = pair(a, b);
  return p.a == a ? p.r : -p.r;
}

const PairComparison& ComparisonTable::pair(const std::string& a, const std::string& b) const {
  for (const auto& p : pairs)
    if ((p.a == a && p.b == b) || (p.a == b && p.b == a)) return p;
  throw std::out_of_range("comparison: no pair (" + a + ", " + b + ")");
}

std::string ComparisonTable::verdict() const {
  if (methods.empty()) throw std::logic_error("comparison: no methods");
  auto mean_effect = [&](std::size_t i) {
    double s = 0.0;
    for (std::size_t j = 0; j < methods.size(); ++j)
      if (j != i) s += effect(methods[i], methods[j]);
    return methods.size() > 1 ? s / static_cast<double>(methods.size() - 1) : 0.0;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < methods.size(); ++i) {
    if (mrs[i] < mrs[best] || (mrs[i] == mrs[best] && mean_effect(i) > mean_effect(best))) best = i;
  }
  return methods[best];
}

ComparisonTable compare_methods(const std::vector<std::string>& methods, const std::vector<std::vector<double>>& srg,
                                double alpha) {
  if (methods.size() < 2) throw std::invalid_argument("compare: need at least two methods");
  ComparisonTable t;
  t.methods = methods;
  t.alpha = alpha;
  t.mrs = mean_rank_scores(srg);
  if (t.mrs.size() != methods.size()) throw std::invalid_argument("compare: matrix width does not match methods");
  std::vector<double> raw;
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t j = i + 1; j < methods.size(); ++j) {
      std::vector<double> d(srg.size());
      for (std::size_t b = 0; b < srg.size(); ++b) d[b] = srg[b][i] - srg[b][j];
      PairComparison pc;
      pc.a = methods[i];
      pc.b = methods[j];
      pc.median_mad = median_mad_effect(d);
      if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) {
        pc.n = 0;
        pc.r = 0.0;
        pc.p = 1.0;
        pc.reliable = false;
      } else {
        const WilcoxonResult w = wilcoxon_effect(d);
        pc.n = w.n;
        pc.r = w.r;
        pc.p = w.p;
        pc.reliable = w.reliable;
      }
      pc.magnitude = magnitude_class(pc.r);
      raw.push_back(pc.p);
      t.pairs.push_back(pc);
    }
  }
  const auto adj = fdr_adjust(raw);
  for (std::size_t k = 0; k < t.pairs.size(); ++k) {
    t.pairs[k].p_adjusted = adj[k];
    t.pairs[k].significant = adj[k] < alpha;
  }
  return t;
}

std::map<std::string, std::vector<std::vector<double>>> aggregate_effects(const std::vector<ComparisonTable>& tables,
                                                                          const std::string& key) {
  if (tables.empty()) throw std::invalid_argument("aggregate: no tables");
  const auto& methods = tables.front().methods;
  std::map<std::string, std::vector<std::vector<double>>> sums;
  std::map<std::string, int> counts;
  for (const auto& t : tables) {
    if (t.methods != methods) throw std::invalid_argument("aggregate: inconsistent method sets");
    std::string group = "overall";
    if (!key.empty()) {
      auto it = t.grouping.find(key);
      if (it == t.grouping.end()) throw std::invalid_argument("aggregate: table lacks grouping key '" + key + "'");
      group = it->second;
    }
    auto& s = sums[group];
    if (s.empty()) s.assign(methods.size(), std::vector<double>(methods.size(), 0.0));
    for (std::size_t i = 0; i < methods.size(); ++i)
      for (std::size_t j = 0; j < methods.size(); ++j) s[i][j] += t.effect(methods[i], methods[j]);
    ++counts[group];
  }
  for (auto& [group, s] : sums)
    for (auto& row : s)
      for (double& v : row) v /= counts[group];
  return sums;
}

nlohmann::json to_json(const ComparisonTable& table) {
  using nlohmann::json;
  json pairs = json::array();
  auto num = [](double v) -> json {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : "-inf";
  };
  for (const auto& p : table.pairs) {
    pairs.push_back({{"a", p.a},
                     {"b", p.b},
                     {"n", p.n},
                     {"effect_r", p.r},
                     {"median_mad", num(p.median_mad)},
                     {"p", p.p},
                     {"p_adjusted", p.p_adjusted},
                     {"magnitude", to_string(p.magnitude)},
                     {"reliable", p.reliable},
                     {"significant", p.significant}});
  }
  json mrs = json::object();
  for (std::size_t i = 0; i < table.methods.size(); ++i) mrs[table.methods[i]] = table.mrs[i];
  return {{"methods", table.methods}, {"alpha", table.alpha},       {"pairs", pairs},
          {"mean_rank_scores", mrs},  {"grouping", table.grouping}, {"verdict", table.verdict()}};
}

std::string comparison_csv(const ComparisonTable& table) {
  std::ostringstream out;
  out << "method_a,method_b,n,effect_r,median_mad,p,p_adjusted,magnitude,reliable,significant\n";
  for (const auto& p : table.pairs) {
    out << p.a << ',' << p.b << ',' << p.n << ',' << io::format_double(p.r) << ',' << io::format_double(p.median_mad)
        << ',' << io::format_double(p.p) << ',' << io::format_double(p.p_adjusted) << ',' << to_string(p.magnitude)
        << ',' << (p.reliable ? 1 : 0) << ',' << (p.significant ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace xmil
