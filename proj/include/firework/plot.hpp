// Self-contained SVG line plots for per-step metric curves.

#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace firework {

struct CurveSeries {
  std::string label;
  // (step, value) in increasing step order.
  std::vector<std::pair<int, double>> points;
};

// One polyline per series, a legend, and an asterisk on each series'
// maximum (first occurrence). Output depends only on the inputs.
void write_curve_svg(std::ostream& os, const std::vector<CurveSeries>& series, const std::string& title,
                     const std::string& y_label);

}  // namespace firework
