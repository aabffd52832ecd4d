#pragma once

#include <string>
#include <vector>

#include "xmil/faithfulness.hpp"
#include "xmil/stats.hpp"

namespace xmil::report {

struct CurveSet {
  std::string method;
  std::vector<double> ascending, descending;
};

/// Small multiples of ascending/descending perturbation curves, one panel per method.
std::string curves_svg(const std::string& bag_id, const std::vector<CurveSet>& curves);
/// SRG per bag as a strip per method, with the median marked.
std::string srg_strip_svg(const std::vector<std::string>& methods, const std::vector<std::vector<double>>& srg);
/// methods x methods effect sizes; marker shape encodes the magnitude class.
std::string effect_matrix_svg(const ComparisonTable& table);
std::string mrs_bar_svg(const std::vector<std::string>& methods, const std::vector<double>& mrs);

std::string xml_escape(const std::string& s);

}  // namespace xmil::report
