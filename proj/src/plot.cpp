#include "firework/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace firework {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_curve_svg(std::ostream& os, const std::vector<CurveSeries>& series, const std::string& title,
                     const std::string& y_label) {
  if (series.empty()) throw std::invalid_argument("write_curve_svg: no series");
  int x_min = 0, x_max = 0;
  double y_min = 0, y_max = 0;
  bool first = true;
  for (const auto& s : series) {
    if (s.points.empty()) throw std::invalid_argument("write_curve_svg: series '" + s.label + "' is empty");
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(y)) throw std::invalid_argument("write_curve_svg: non-finite value in '" + s.label + "'");
      if (first) {
        x_min = x_max = x;
        y_min = y_max = y;
        first = false;
      }
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_min = std::min(y_min, y);
      y_max = std::max(y_max, y);
    }
  }
  if (x_max == x_min) ++x_max;
  const double pad = std::max(1e-3, 0.1 * (y_max - y_min));
  y_min -= pad;
  y_max += pad;

  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + pw * (x - x_min) / double(x_max - x_min); };
  auto py = [&](double y) { return kTop + ph * (1.0 - (y - y_min) / (y_max - y_min)); };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << fmt(kLeft + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
     << "</text>\n";
  os << "<rect x=\"" << fmt(kLeft) << "\" y=\"" << fmt(kTop) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
     << "\" fill=\"none\" stroke=\"black\"/>\n";

  for (int x = x_min; x <= x_max; ++x) {
    os << "<line x1=\"" << fmt(px(x)) << "\" y1=\"" << fmt(kTop + ph) << "\" x2=\"" << fmt(px(x)) << "\" y2=\""
       << fmt(kTop + ph + 5) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << fmt(px(x)) << "\" y=\"" << fmt(kTop + ph + 18) << "\" text-anchor=\"middle\">" << x
       << "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double y = y_min + (y_max - y_min) * i / 5.0;
    os << "<line x1=\"" << fmt(kLeft - 5) << "\" y1=\"" << fmt(py(y)) << "\" x2=\"" << fmt(kLeft) << "\" y2=\""
       << fmt(py(y)) << "\" stroke=\"black\"/>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", y);
    os << "<text x=\"" << fmt(kLeft - 8) << "\" y=\"" << fmt(py(y) + 4) << "\" text-anchor=\"end\">" << buf
       << "</text>\n";
  }
  os << "<text x=\"" << fmt(kLeft + pw / 2) << "\" y=\"" << fmt(kHeight - 10) << "\" text-anchor=\"middle\">step t</text>\n";
  os << "<text x=\"18\" y=\"" << fmt(kTop + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
     << fmt(kTop + ph / 2) << ")\">" << escape(y_label) << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const CurveSeries& s = series[i];
    const char* color = kColors[i % (sizeof(kColors) / sizeof(kColors[0]))];
    os << "<polyline class=\"series\" data-label=\"" << escape(s.label) << "\" fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.points.size(); ++k) {
      os << (k ? " " : "") << fmt(px(s.points[k].first)) << "," << fmt(py(s.points[k].second));
    }
    os << "\"/>\n";
    const auto best = std::max_element(s.points.begin(), s.points.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    os << "<text class=\"max-marker\" x=\"" << fmt(px(best->first)) << "\" y=\"" << fmt(py(best->second) - 6)
       << "\" text-anchor=\"middle\" font-size=\"18\" fill=\"" << color << "\">*</text>\n";
    const double ly = kTop + 16 + 20 * double(i);
    os << "<line x1=\"" << fmt(kWidth - kRight + 12) << "\" y1=\"" << fmt(ly) << "\" x2=\"" << fmt(kWidth - kRight + 36)
       << "\" y2=\"" << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << fmt(kWidth - kRight + 42) << "\" y=\"" << fmt(ly + 4) << "\">" << escape(s.label)
       << "</text>\n";
  }
  os << "</svg>\n";
}

}  // namespace firework
