#pragma once

// Self-contained SVG line and bar charts. The plotted numbers are repeated in an
// XML comment so the files diff cleanly.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "nimbus/error.hpp"

namespace nimbus::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return palette[i % 8];
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

inline std::string comment_safe(std::string s) {
  for (std::size_t p; (p = s.find("--")) != std::string::npos;) s.replace(p, 2, "- ");
  return s;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 400, L = 70, R = 170, T = 40, B = 50;
  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline void axes(std::ostream& os, const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::H - Frame::B << "\" x2=\"" << Frame::W - Frame::R << "\" y2=\""
     << Frame::H - Frame::B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << Frame::L << "\" y1=\"" << Frame::T << "\" x2=\"" << Frame::L << "\" y2=\"" << Frame::H - Frame::B
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0, xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
    os << "<text x=\"" << Frame::L - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << yv
       << "</text>\n";
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << Frame::H - Frame::B + 16 << "\" text-anchor=\"middle\" font-size=\"11\">"
       << xv << "</text>\n";
  }
  os << "<text x=\"" << (Frame::L + Frame::W - Frame::R) / 2 << "\" y=\"" << Frame::H - 12
     << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xl) << "</text>\n";
  os << "<text x=\"16\" y=\"" << Frame::H / 2 << "\" transform=\"rotate(-90 16 " << Frame::H / 2
     << ")\" text-anchor=\"middle\" font-size=\"12\">" << escape(yl) << "</text>\n";
}

inline void write(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw DomainError("cannot write " + path.string());
  out << body;
}

}  // namespace detail

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DomainError("svg series '" + s.name + "' has mismatched x/y");
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!(x1 > x0)) x0 -= 0.5, x1 += 0.5;
  if (!(y1 > y0)) y0 -= 0.5, y1 += 0.5;
  y0 = std::min(y0, 0.0);
  detail::Frame f{x0, x1, y0, y1 + 0.05 * (y1 - y0)};

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::Frame::W << "\" height=\"" << detail::Frame::H
     << "\">\n<!-- data\n";
  for (const auto& s : series) {
    os << detail::comment_safe(s.name);
    for (std::size_t i = 0; i < s.x.size(); ++i) os << ' ' << s.x[i] << ':' << s.y[i];
    os << '\n';
  }
  os << "-->\n";
  detail::axes(os, f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << detail::color(k) << "\" stroke-width=\"1.8\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << f.px(s.x[i]) << ',' << f.py(s.y[i]) << ' ';
    os << "\"/>\n";
    const double ly = detail::Frame::T + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << detail::Frame::W - detail::Frame::R + 12 << "\" y1=\"" << ly << "\" x2=\""
       << detail::Frame::W - detail::Frame::R + 32 << "\" y2=\"" << ly << "\" stroke=\"" << detail::color(k)
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << detail::Frame::W - detail::Frame::R + 36 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">"
       << detail::escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::string>& labels,
                             const std::vector<double>& values) {
  if (labels.size() != values.size() || labels.empty()) throw DomainError("svg bar chart needs one label per value");
  double y1 = 0.0;
  for (double v : values) y1 = std::max(y1, v);
  if (!(y1 > 0.0)) y1 = 1.0;
  const double n = static_cast<double>(values.size());
  detail::Frame f{0.0, n, 0.0, y1 * 1.05};

  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::Frame::W << "\" height=\"" << detail::Frame::H
     << "\">\n<!-- data\n";
  for (std::size_t i = 0; i < values.size(); ++i) os << detail::comment_safe(labels[i]) << ' ' << values[i] << '\n';
  os << "-->\n";
  detail::axes(os, f, title, "", ylabel);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double xa = f.px(static_cast<double>(i) + 0.15), xb = f.px(static_cast<double>(i) + 0.85);
    os << "<rect x=\"" << xa << "\" y=\"" << f.py(values[i]) << "\" width=\"" << xb - xa << "\" height=\""
       << f.py(0.0) - f.py(values[i]) << "\" fill=\"" << detail::color(0) << "\"/>\n";
    os << "<text x=\"" << (xa + xb) / 2 << "\" y=\"" << f.py(0.0) + 30 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << detail::escape(labels[i]) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                             const std::string& ylabel, const std::vector<Series>& series) {
  detail::write(path, line_chart(title, xlabel, ylabel, series));
}

inline void write_bar_chart(const std::filesystem::path& path, const std::string& title, const std::string& ylabel,
                            const std::vector<std::string>& labels, const std::vector<double>& values) {
  detail::write(path, bar_chart(title, ylabel, labels, values));
}

}  // namespace nimbus::svg
