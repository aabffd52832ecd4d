#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace xmil {

struct WilcoxonResult {
  std::size_t n = 0;      // non-zero differences
  double w_plus = 0.0;    // rank sum of positive differences
  double z = 0.0;
  double r = 0.0;         // z / sqrt(n)
  double p = 1.0;         // two-sided
  bool exact = false;     // p from the exact null distribution
  bool reliable = true;   // false when n < 5
};

/// Exact null distribution is used for n <= this; normal approximation above.
inline constexpr std::size_t kWilcoxonExactMax = 50;

/// Signed-rank test on paired differences. Zeros are dropped, tied |d|
/// receive average ranks. Throws if every difference is zero.
WilcoxonResult wilcoxon_effect(const std::vector<double>& d);
/// Two-sided p from the normal approximation of z (no continuity correction).
double normal_two_sided_p(double z);

/// median(d) / (1.4826 MAD(d)); MAD = 0 gives +/-infinity (0 if the median is 0).
double median_mad_effect(const std::vector<double>& d);
double median(std::vector<double> v);

/// Benjamini-Hochberg step-up adjustment, returned in input order.
std::vector<double> fdr_adjust(const std::vector<double>& pvals);

enum class Magnitude { Negligible, WeakModerate, Strong };
Magnitude magnitude_class(double r);
std::string to_string(Magnitude m);

/// Per bag, methods ranked by SRG descending (rank 1 = highest) with
/// average ranks on ties; returns the mean rank per method.
std::vector<double> mean_rank_scores(const std::vector<std::vector<double>>& srg);

struct PairComparison {
  std::string a, b;  // effect sign: positive when a has higher SRG
  std::size_t n = 0;
  double r = 0.0;
  double median_mad = 0.0;
  double p = 1.0;
  double p_adjusted = 1.0;
  Magnitude magnitude = Magnitude::Negligible;
  bool reliable = true;
  bool significant = false;  // p_adjusted < alpha
};

struct ComparisonTable {
  std::vector<std::string> methods;
  std::vector<PairComparison> pairs;  // unordered pairs i < j in method order
  std::vector<double> mrs;            // per method
  double alpha = 0.05;
  std::map<std::string, std::string> grouping;  // e.g. task, architecture

  /// Effect of a over b (antisymmetric); 0 on the diagonal.
  double effect(const std::string& a, const std::string& b) const;
  const PairComparison& pair(const std::string& a, const std::string& b) const;
  /// Method with the lowest MRS; ties broken by the larger mean effect over the others.
  std::string verdict() const;
};

ComparisonTable compare_methods(const std::vector<std::string>& methods, const std::vector<std::vector<double>>& srg,
                                double alpha = 0.05);

/// Mean of the pairwise effect sizes over the tables in each group; tables
/// are grouped by the value of `key` in their grouping map ("overall" if the
/// key is empty).
std::map<std::string, std::vector<std::vector<double>>> aggregate_effects(const std::vector<ComparisonTable>& tables,
                                                                          const std::string& key);

nlohmann::json to_json(const ComparisonTable& table);
std::string comparison_csv(const ComparisonTable& table);

}  // namespace xmil
