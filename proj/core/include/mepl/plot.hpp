#pragma once

#include <string>
#include <utility>
#include <vector>

namespace mepl {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order

  bool operator==(const Series&) const = default;
};

/// Standalone SVG line chart. Every marker carries its exact values in
/// data-series / data-x / data-y attributes.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

/// Reads the marker attributes back, grouped by series in first-seen order.
std::vector<Series> parse_plot_svg(const std::string& svg);

}  // namespace mepl
