#pragma once

// Minimal SVG 1.1 charts. Coordinates are printed with fixed precision so
// identical inputs give byte-identical files.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace ddmlab::harness::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

struct Chart {
  std::string title, x_label, y_label;
  double width = 640, height = 400;
  bool log_y = false;
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[i % 8];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '&') o += "&amp;";
    else if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '"') o += "&quot;";
    else o += c;
  }
  return o;
}

namespace detail {

constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;

struct Frame {
  const Chart& c;
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x1 == x0 ? 0.5 : (x - x0) / (x1 - x0)) * (c.width - kLeft - kRight); }
  double py(double y) const {
    const double v = c.log_y ? std::log10(y) : y;
    return c.height - kBottom - (y1 == y0 ? 0.5 : (v - y0) / (y1 - y0)) * (c.height - kTop - kBottom);
  }
};

inline std::string header(const Chart& c) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + num(c.width) + "\" height=\"" + num(c.height) + "\" viewBox=\"0 0 " +
       num(c.width) + " " + num(c.height) + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + num(c.width) + "\" height=\"" + num(c.height) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(c.width / 2) + "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" + escape(c.title) + "</text>\n";
  return s;
}

inline std::string axes(const Frame& f, bool numeric_x) {
  const Chart& c = f.c;
  std::string s;
  const double bx = c.height - kBottom, rx = c.width - kRight;
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(bx) + "\" x2=\"" + num(rx) + "\" y2=\"" + num(bx) + "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(kLeft) + "\" y1=\"" + num(kTop) + "\" x2=\"" + num(kLeft) + "\" y2=\"" + num(bx) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    const double y = bx - (c.height - kTop - kBottom) * i / 4.0;
    s += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(y + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
         tick(c.log_y ? std::pow(10.0, v) : v) + "</text>\n";
  }
  if (numeric_x)
    for (int i = 0; i <= 4; ++i) {
      const double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
      s += "<text x=\"" + num(f.px(v)) + "\" y=\"" + num(bx + 16) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + tick(v) +
           "</text>\n";
    }
  s += "<text x=\"" + num((kLeft + rx) / 2) + "\" y=\"" + num(c.height - 12) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
       escape(c.x_label) + "</text>\n";
  s += "<text x=\"16\" y=\"" + num((kTop + bx) / 2) + "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
       num((kTop + bx) / 2) + ")\">" + escape(c.y_label) + "</text>\n";
  return s;
}

inline std::string legend(const Chart& c, const std::vector<Series>& series) {
  std::string s;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 18.0 * static_cast<double>(i);
    s += "<rect x=\"" + num(c.width - kRight + 12) + "\" y=\"" + num(y - 9) + "\" width=\"10\" height=\"10\" fill=\"" + palette(i) + "\"/>\n";
    s += "<text x=\"" + num(c.width - kRight + 28) + "\" y=\"" + num(y) + "\" font-family=\"sans-serif\" font-size=\"11\">" + escape(series[i].label) +
         "</text>\n";
  }
  return s;
}

inline void y_range(const Chart& c, const std::vector<double>& ys, double& lo, double& hi, bool from_zero) {
  lo = std::numeric_limits<double>::infinity();
  hi = -lo;
  for (double y : ys) {
    if (!std::isfinite(y) || (c.log_y && y <= 0)) continue;
    const double v = c.log_y ? std::log10(y) : y;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (from_zero && !c.log_y) lo = std::min(lo, 0.0), hi = std::max(hi, 0.0);
  if (hi == lo) hi = lo + 1;
}

inline bool plottable(const Chart& c, double y) { return std::isfinite(y) && !(c.log_y && y <= 0); }

}  // namespace detail

inline std::string bar_chart(const Chart& c, const std::vector<std::string>& labels, const std::vector<double>& values) {
  double lo, hi;
  detail::y_range(c, values, lo, hi, true);
  detail::Frame f{c, 0, 1, lo, hi};
  std::string s = detail::header(c) + detail::axes(f, false);
  const double span = c.width - detail::kLeft - detail::kRight;
  const double slot = labels.empty() ? span : span / static_cast<double>(labels.size());
  const double base = f.py(c.log_y ? std::pow(10.0, lo) : std::max(lo, 0.0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double x = detail::kLeft + slot * (static_cast<double>(i) + 0.15);
    if (detail::plottable(c, values[i])) {
      const double y = f.py(values[i]);
      s += "<rect x=\"" + num(x) + "\" y=\"" + num(std::min(y, base)) + "\" width=\"" + num(slot * 0.7) + "\" height=\"" + num(std::abs(base - y)) +
           "\" fill=\"" + palette(i) + "\"/>\n";
    }
    s += "<text x=\"" + num(x + slot * 0.35) + "\" y=\"" + num(c.height - detail::kBottom + 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + escape(labels[i]) + "</text>\n";
  }
  return s + "</svg>\n";
}

inline std::string xy_chart(const Chart& c, const std::vector<Series>& series, bool lines) {
  std::vector<double> ys;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0;
  for (const auto& se : series)
    for (std::size_t i = 0; i < se.x.size(); ++i)
      if (std::isfinite(se.x[i]) && detail::plottable(c, se.y[i])) {
        x0 = std::min(x0, se.x[i]);
        x1 = std::max(x1, se.x[i]);
        ys.push_back(se.y[i]);
      }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  double lo, hi;
  detail::y_range(c, ys, lo, hi, false);
  detail::Frame f{c, x0, x1, lo, hi};
  std::string s = detail::header(c) + detail::axes(f, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& se = series[k];
    std::string pts;
    for (std::size_t i = 0; i < se.x.size(); ++i) {
      if (!std::isfinite(se.x[i]) || !detail::plottable(c, se.y[i])) continue;
      const double px = f.px(se.x[i]), py = f.py(se.y[i]);
      if (lines) {
        pts += (pts.empty() ? "" : " ") + num(px) + "," + num(py);
      } else {
        s += "<circle cx=\"" + num(px) + "\" cy=\"" + num(py) + "\" r=\"2.5\" fill=\"" + palette(k) + "\" fill-opacity=\"0.6\"/>\n";
      }
    }
    if (lines && !pts.empty()) s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + palette(k) + "\" stroke-width=\"2\"/>\n";
  }
  return s + detail::legend(c, series) + "</svg>\n";
}

inline std::string line_chart(const Chart& c, const std::vector<Series>& series) { return xy_chart(c, series, true); }
inline std::string scatter_chart(const Chart& c, const std::vector<Series>& series) { return xy_chart(c, series, false); }

}  // namespace ddmlab::harness::svg
