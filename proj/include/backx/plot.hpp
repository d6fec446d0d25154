#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace backx::plot {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Bubble {
  std::string name;
  double x = 0, y = 0, size = 0;
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                                  "#7f7f7f", "#bcbd22", "#17becf", "#000000", "#aec7e8", "#ffbb78", "#98df8a"};
  return palette[i % (sizeof palette / sizeof *palette)];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double left = 70, right = 190, top = 40, bottom = 50, width = 640, height = 420;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline std::string axes(const Frame& f, const std::string& title, const std::string& xlabel,
                        const std::string& ylabel) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" font-family=\"sans-serif\" "
                  "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(Frame::width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
       "</text>\n";
  const double bx = f.px(f.x0), by = f.py(f.y0), ex = f.px(f.x1), ey = f.py(f.y1);
  s += "<path d=\"M" + num(bx) + " " + num(ey) + " V" + num(by) + " H" + num(ex) + "\" stroke=\"black\" fill=\"none\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4, yv = f.y0 + (f.y1 - f.y0) * i / 4;
    s += "<text x=\"" + num(f.px(xv)) + "\" y=\"" + num(by + 15) + "\" text-anchor=\"middle\">" + num(xv) + "</text>\n";
    s += "<text x=\"" + num(bx - 5) + "\" y=\"" + num(f.py(yv) + 4) + "\" text-anchor=\"end\">" + num(yv) + "</text>\n";
  }
  s += "<text x=\"" + num((bx + ex) / 2) + "\" y=\"" + num(Frame::height - 10) + "\" text-anchor=\"middle\">" +
       escape(xlabel) + "</text>\n";
  s += "<text transform=\"translate(16," + num((by + ey) / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       escape(ylabel) + "</text>\n";
  return s;
}

inline void range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
}

}  // namespace detail

/// Line chart, one polyline with markers per series, legend on the right.
inline std::string line_chart(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                              const std::string& ylabel) {
  double x0 = 1e300, x1 = -1e300, y0 = 0, y1 = 1;  // y covers at least [0, 1]
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  if (x0 > x1) x0 = 0, x1 = 1;
  detail::range(x0, x1);
  detail::range(y0, y1);
  detail::Frame f{x0, x1, y0, y1};
  std::string out = detail::axes(f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += detail::num(f.px(s.x[i])) + "," + detail::num(f.py(s.y[i])) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + std::string(detail::color(k)) + "\" stroke-width=\"1.5\" points=\"" +
           pts + "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out += "<circle cx=\"" + detail::num(f.px(s.x[i])) + "\" cy=\"" + detail::num(f.py(s.y[i])) + "\" r=\"2.5\" fill=\"" +
             detail::color(k) + "\"/>\n";
    const double ly = detail::Frame::top + 14.0 * static_cast<double>(k);
    const double lx = detail::Frame::width - detail::Frame::right + 12;
    out += "<line x1=\"" + detail::num(lx) + "\" y1=\"" + detail::num(ly) + "\" x2=\"" + detail::num(lx + 16) +
           "\" y2=\"" + detail::num(ly) + "\" stroke=\"" + detail::color(k) + "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + detail::num(lx + 20) + "\" y=\"" + detail::num(ly + 4) + "\">" + detail::escape(s.name) +
           "</text>\n";
  }
  return out + "</svg>\n";
}

/// Scatter of labelled bubbles; radius scales with size / max size.
inline std::string bubble_chart(const std::vector<Bubble>& bubbles, const std::string& title,
                                const std::string& xlabel, const std::string& ylabel) {
  detail::Frame f{0, 1, 0, 1};
  for (const auto& b : bubbles) {
    f.x0 = std::min(f.x0, b.x), f.x1 = std::max(f.x1, b.x);
    f.y0 = std::min(f.y0, b.y), f.y1 = std::max(f.y1, b.y);
  }
  double smax = 0;
  for (const auto& b : bubbles) smax = std::max(smax, b.size);
  std::string out = detail::axes(f, title, xlabel, ylabel);
  for (std::size_t k = 0; k < bubbles.size(); ++k) {
    const auto& b = bubbles[k];
    const double r = 4 + 18 * (smax > 0 ? b.size / smax : 0);
    out += "<circle cx=\"" + detail::num(f.px(b.x)) + "\" cy=\"" + detail::num(f.py(b.y)) + "\" r=\"" +
           detail::num(r) + "\" fill=\"" + detail::color(k) + "\" fill-opacity=\"0.5\"/>\n";
    const double ly = detail::Frame::top + 14.0 * static_cast<double>(k);
    const double lx = detail::Frame::width - detail::Frame::right + 12;
    out += "<circle cx=\"" + detail::num(lx + 6) + "\" cy=\"" + detail::num(ly) + "\" r=\"5\" fill=\"" +
           detail::color(k) + "\"/>\n";
    out += "<text x=\"" + detail::num(lx + 20) + "\" y=\"" + detail::num(ly + 4) + "\">" + detail::escape(b.name) +
           "</text>\n";
  }
  return out + "</svg>\n";
}

}  // namespace backx::plot
