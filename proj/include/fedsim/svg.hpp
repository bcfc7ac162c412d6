#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"

namespace fedsim {

// Tiny self-contained SVG plotting for run reports: line charts for training
// curves and a colored grid for sweep results. Output is deterministic text.

struct PlotSeries {
  std::string label;
  std::vector<double> xs;
  std::vector<double> ys;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline const char* series_color(size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

struct Range {
  double lo = 0.0, hi = 1.0;

  static Range of(const std::vector<PlotSeries>& series, bool use_x) {
    Range r{1e300, -1e300};
    for (const auto& s : series) {
      const auto& v = use_x ? s.xs : s.ys;
      for (double x : v) {
        r.lo = std::min(r.lo, x);
        r.hi = std::max(r.hi, x);
      }
    }
    if (r.lo > r.hi) {
      r.lo = 0.0;
      r.hi = 1.0;
    }
    if (r.lo == r.hi) {
      r.lo -= 0.5;
      r.hi += 0.5;
    }
    const double pad = 0.05 * (r.hi - r.lo);
    return {r.lo - pad, r.hi + pad};
  }

  double at(double v, double px_lo, double px_hi) const {
    return px_lo + (v - lo) / (hi - lo) * (px_hi - px_lo);
  }
};

}  // namespace detail

inline void write_line_plot(const std::filesystem::path& path, const std::string& title,
                            const std::string& xlabel, const std::string& ylabel,
                            const std::vector<PlotSeries>& series) {
  size_t points = 0;
  for (const auto& s : series) {
    if (s.xs.size() != s.ys.size()) throw ConfigError("series x/y length mismatch");
    points += s.xs.size();
  }
  if (points == 0) throw ConfigError("nothing to plot");

  const double W = 860, H = 520, L = 70, R = 840, T = 46, B = 470;
  const auto xr = detail::Range::of(series, true);
  const auto yr = detail::Range::of(series, false);

  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write plot '" + path.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">"
      << title << "</text>\n";

  for (int i = 0; i <= 5; ++i) {
    const double fx = static_cast<double>(i) / 5.0;
    const double gx = L + fx * (R - L);
    const double gy = B - fx * (B - T);
    out << "<line x1=\"" << gx << "\" y1=\"" << T << "\" x2=\"" << gx << "\" y2=\"" << B
        << "\" stroke=\"#e0e0e0\"/>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << gy << "\" x2=\"" << R << "\" y2=\"" << gy
        << "\" stroke=\"#e0e0e0\"/>\n";
    out << "<text x=\"" << gx << "\" y=\"" << B + 18
        << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
        << detail::fmt(xr.lo + fx * (xr.hi - xr.lo)) << "</text>\n";
    out << "<text x=\"" << L - 8 << "\" y=\"" << gy + 4
        << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">"
        << detail::fmt(yr.lo + fx * (yr.hi - yr.lo)) << "</text>\n";
  }
  out << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << R - L << "\" height=\""
      << B - T << "\" fill=\"none\" stroke=\"#404040\"/>\n";
  out << "<text x=\"" << (L + R) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">" << xlabel
      << "</text>\n";
  out << "<text x=\"18\" y=\"" << (T + B) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 18 "
      << (T + B) / 2 << ")\">" << ylabel << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = detail::series_color(si);
    if (s.xs.size() > 1) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < s.xs.size(); ++i) {
        out << detail::fmt(xr.at(s.xs[i], L, R)) << "," << detail::fmt(yr.at(s.ys[i], B, T));
        if (i + 1 < s.xs.size()) out << " ";
      }
      out << "\"/>\n";
    }
    for (size_t i = 0; i < s.xs.size(); ++i) {
      out << "<circle cx=\"" << detail::fmt(xr.at(s.xs[i], L, R)) << "\" cy=\""
          << detail::fmt(yr.at(s.ys[i], B, T)) << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    out << "<rect x=\"" << L + 12 << "\" y=\"" << T + 10 + 18 * static_cast<double>(si)
        << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    out << "<text x=\"" << L + 30 << "\" y=\"" << T + 20 + 18 * static_cast<double>(si)
        << "\" font-size=\"12\" font-family=\"sans-serif\">" << s.label << "</text>\n";
  }
  out << "</svg>\n";
}

// Row-by-column colored grid with the cell value printed in each square.
inline void write_heatmap(const std::filesystem::path& path, const std::string& title,
                          const std::string& row_axis, const std::string& col_axis,
                          const std::vector<std::string>& row_names,
                          const std::vector<std::string>& col_names,
                          const std::vector<std::vector<double>>& values) {
  if (row_names.empty() || col_names.empty()) throw ConfigError("empty heatmap");
  if (values.size() != row_names.size()) throw ConfigError("heatmap rows mismatch");
  for (const auto& row : values) {
    if (row.size() != col_names.size()) throw ConfigError("heatmap columns mismatch");
  }
  double lo = 1e300, hi = -1e300;
  for (const auto& row : values) {
    for (double v : row) {
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }
  if (lo > hi) {
    lo = 0.0;
    hi = 1.0;
  }
  if (lo == hi) hi = lo + 1.0;

  const double cell = 86, left = 110, top = 80;
  const double W = left + cell * static_cast<double>(col_names.size()) + 30;
  const double H = top + cell * static_cast<double>(row_names.size()) + 50;

  auto shade = [&](double v) {
    if (!std::isfinite(v)) return std::string("#bbbbbb");
    const double f = (v - lo) / (hi - lo);
    // blue (low) to red (high)
    const int r = static_cast<int>(43 + f * (215 - 43));
    const int g = static_cast<int>(131 + f * (25 - 131));
    const int b = static_cast<int>(186 + f * (28 - 186));
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return std::string(buf);
  };

  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write heatmap '" + path.string() + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"26\" text-anchor=\"middle\" font-size=\"16\" "
         "font-family=\"sans-serif\">"
      << title << "</text>\n";
  out << "<text x=\"" << left + cell * static_cast<double>(col_names.size()) / 2 << "\" y=\"52\" "
         "text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">"
      << col_axis << "</text>\n";
  out << "<text x=\"24\" y=\"" << top + cell * static_cast<double>(row_names.size()) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 24 "
      << top + cell * static_cast<double>(row_names.size()) / 2 << ")\">" << row_axis
      << "</text>\n";

  for (size_t c = 0; c < col_names.size(); ++c) {
    out << "<text x=\"" << left + cell * (static_cast<double>(c) + 0.5) << "\" y=\""
        << top - 8 << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
        << col_names[c] << "</text>\n";
  }
  for (size_t r = 0; r < row_names.size(); ++r) {
    out << "<text x=\"" << left - 10 << "\" y=\""
        << top + cell * (static_cast<double>(r) + 0.55)
        << "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\">"
        << row_names[r] << "</text>\n";
    for (size_t c = 0; c < col_names.size(); ++c) {
      const double x = left + cell * static_cast<double>(c);
      const double y = top + cell * static_cast<double>(r);
      const double v = values[r][c];
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\""
          << cell << "\" fill=\"" << shade(v) << "\" stroke=\"white\"/>\n";
      out << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
          << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
          << (std::isfinite(v) ? detail::fmt(v) : std::string("failed")) << "</text>\n";
    }
  }
  out << "</svg>\n";
}

}  // namespace fedsim
