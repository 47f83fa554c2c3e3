#include "mepl/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <regex>

#include "mepl/errors.hpp"

namespace mepl {

namespace {

constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};

std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
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

std::string unescape(const std::string& s) {
  std::string out = s;
  for (auto [from, to] : {std::pair{"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&amp;", "&"}}) {
    for (std::size_t p = out.find(from); p != std::string::npos; p = out.find(from, p + 1)) out.replace(p, std::string(from).size(), to);
  }
  return out;
}

// Round step (1, 2 or 5 times a power of ten) giving about `n` ticks.
double nice_step(double span, int n) {
  const double raw = span / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10 * mag;
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) throw ConfigError("plot values must be finite");
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double ypad = 0.05 * (y1 - y0);
  y0 -= ypad, y1 += ypad;
  const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;
  auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
  auto sy = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kW) + "\" height=\"" + num(kH) + "\" viewBox=\"0 0 " +
       num(kW) + " " + num(kH) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + px(kLeft + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) + "</text>\n";
  o += "<rect x=\"" + px(kLeft) + "\" y=\"" + px(kTop) + "\" width=\"" + px(pw) + "\" height=\"" + px(ph) +
       "\" fill=\"none\" stroke=\"#444\"/>\n";

  const double xs = nice_step(x1 - x0, 6), ys = nice_step(y1 - y0, 6);
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
    o += "<line x1=\"" + px(sx(t)) + "\" y1=\"" + px(kTop + ph) + "\" x2=\"" + px(sx(t)) + "\" y2=\"" + px(kTop + ph + 5) +
         "\" stroke=\"#444\"/>\n";
    char lab[32];
    std::snprintf(lab, sizeof lab, "%g", std::abs(t) < 1e-12 ? 0.0 : t);
    o += "<text x=\"" + px(sx(t)) + "\" y=\"" + px(kTop + ph + 18) + "\" text-anchor=\"middle\">" + lab + "</text>\n";
  }
  for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
    o += "<line x1=\"" + px(kLeft - 5) + "\" y1=\"" + px(sy(t)) + "\" x2=\"" + px(kLeft + pw) + "\" y2=\"" + px(sy(t)) +
         "\" stroke=\"#ddd\"/>\n";
    char lab[32];
    std::snprintf(lab, sizeof lab, "%g", std::abs(t) < 1e-12 ? 0.0 : t);
    o += "<text x=\"" + px(kLeft - 8) + "\" y=\"" + px(sy(t) + 4) + "\" text-anchor=\"end\">" + lab + "</text>\n";
  }
  o += "<text x=\"" + px(kLeft + pw / 2) + "\" y=\"" + px(kH - 18) + "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
  o += "<text transform=\"translate(18," + px(kTop + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" + escape(y_label) +
       "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const std::string color = kColors[i % std::size(kColors)];
    if (s.points.size() > 1) {
      o += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"";
      for (auto [x, y] : s.points) o += px(sx(x)) + "," + px(sy(y)) + " ";
      o += "\"/>\n";
    }
    for (auto [x, y] : s.points)
      o += "<circle cx=\"" + px(sx(x)) + "\" cy=\"" + px(sy(y)) + "\" r=\"3.5\" fill=\"" + color + "\" data-series=\"" +
           escape(s.name) + "\" data-x=\"" + num(x) + "\" data-y=\"" + num(y) + "\"/>\n";
    const double ly = kTop + 14 + 18.0 * static_cast<double>(i);
    o += "<line x1=\"" + px(kLeft + pw + 12) + "\" y1=\"" + px(ly - 4) + "\" x2=\"" + px(kLeft + pw + 32) + "\" y2=\"" +
         px(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + px(kLeft + pw + 38) + "\" y=\"" + px(ly) + "\">" + escape(s.name) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

std::vector<Series> parse_plot_svg(const std::string& svg) {
  static const std::regex marker(R"re(data-series="([^"]*)" data-x="([^"]*)" data-y="([^"]*)")re");
  std::vector<Series> out;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), marker); it != std::sregex_iterator(); ++it) {
    const std::string name = unescape((*it)[1]);
    auto parse = [](const std::string& t) {
      double v = 0;
      auto r = std::from_chars(t.data(), t.data() + t.size(), v);
      if (r.ec != std::errc() || r.ptr != t.data() + t.size()) throw ConfigError("bad plot value '" + t + "'");
      return v;
    };
    auto s = std::find_if(out.begin(), out.end(), [&](const Series& x) { return x.name == name; });
    if (s == out.end()) {
      out.push_back({name, {}});
      s = out.end() - 1;
    }
    s->points.emplace_back(parse((*it)[2]), parse((*it)[3]));
  }
  return out;
}

}  // namespace mepl
