#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mocomsi/core/error.hpp"

namespace mocomsi {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

// Reads a whitespace separated numeric table (first column x, every other
// column one series). Lines starting with '#' may carry column names.
inline std::vector<Series> read_columns(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("plot input not found: " + path.string());
  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    if (line[0] == '#') {
      std::string tok;
      ss >> tok;  // '#'
      names.clear();
      if (tok.size() > 1) names.push_back(tok.substr(1));
      while (ss >> tok) names.push_back(tok);
      continue;
    }
    std::vector<double> row;
    for (std::string tok; ss >> tok;) {
      row.push_back(tok == "nan" || tok == "NaN" ? std::numeric_limits<double>::quiet_NaN() : std::stod(tok));
    }
    if (cols.empty()) cols.resize(row.size());
    if (row.size() != cols.size()) throw ParseError("ragged table: " + path.string());
    for (std::size_t i = 0; i < row.size(); ++i) cols[i].push_back(row[i]);
  }
  if (cols.size() < 2) throw ParseError("plot input needs at least two columns: " + path.string());
  std::vector<Series> out;
  for (std::size_t c = 1; c < cols.size(); ++c) {
    Series s;
    s.name = c < names.size() ? names[c] : path.stem().string() + (cols.size() > 2 ? "_" + std::to_string(c) : "");
    s.x = cols[0];
    s.y = cols[c];
    out.push_back(std::move(s));
  }
  return out;
}

// Minimal SVG line chart with axes, ticks and a legend.
inline void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                            const std::string& ylabel, const std::vector<Series>& series, bool diagonal = false) {
  constexpr double W = 640, H = 480, L = 70, R = 170, T = 40, B = 60;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

  std::ofstream out(path);
  if (!out) throw IngestError("cannot write plot: " + path.string());
  char buf[256];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"black\"/>\n", L, T,
                W - L - R, H - T - B);
  out << buf;
  for (int i = 0; i <= 5; ++i) {
    const double xv = x0 + (x1 - x0) * i / 5, yv = y0 + (y1 - y0) * i / 5;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%.3g</text>\n", px(xv), H - B + 18, xv);
    out << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.3g</text>\n", L - 6, py(yv) + 4, yv);
    out << buf;
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"18\" y=\"%.1f\" text-anchor=\"middle\" transform=\"rotate(-90 18 %.1f)\">", (T + H - B) / 2,
                (T + H - B) / 2);
  out << buf << ylabel << "</text>\n";
  if (diagonal) {
    std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n",
                  px(std::max(x0, y0)), py(std::max(x0, y0)), px(std::min(x1, y1)), py(std::min(x1, y1)));
    out << buf;
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kColors[k % 8];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.y[i]));
      out << buf;
    }
    out << "\"/>\n";
    const double ly = T + 16 + 18 * static_cast<double>(k);
    std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>\n", W - R + 10, ly,
                  W - R + 30, ly, color);
    out << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\">", W - R + 36, ly + 4);
    out << buf << s.name << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace mocomsi
