#pragma once

// SVG figures: top-down BEV scatter on the left, oblique 3D polylines on the
// right. Ground truth is drawn in green, predictions in red.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "d3lane/lane.hpp"

namespace d3l {

struct PlotOptions {
  double x_min = -10, x_max = 10;
  double y_min = 0, y_max = 103;
  double z_min = -2.5, z_max = 2.5;
  int panel_w = 360, panel_h = 480;
  std::string title;
};

namespace plot_detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Frame {
  double ox, oy, w, h;
};

}  // namespace plot_detail

inline std::string lanes_svg(const std::vector<Lane3D>& gts, const std::vector<ScoredLane>& preds,
                             const PlotOptions& o = {}) {
  using plot_detail::num;
  const double pad = 30;
  const double W = 2 * o.panel_w + 3 * pad, H = o.panel_h + 2 * pad + 10;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!o.title.empty()) s << "<text x=\"" << pad << "\" y=\"16\">" << o.title << "</text>\n";

  // left: BEV, x to the right, y up
  const plot_detail::Frame L{pad, pad + 10, double(o.panel_w), double(o.panel_h)};
  auto bev = [&](const Vec3& p) {
    return std::pair{L.ox + (p.x() - o.x_min) / (o.x_max - o.x_min) * L.w,
                     L.oy + L.h - (p.y() - o.y_min) / (o.y_max - o.y_min) * L.h};
  };
  s << "<rect x=\"" << L.ox << "\" y=\"" << L.oy << "\" width=\"" << L.w << "\" height=\"" << L.h
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  s << "<text x=\"" << L.ox << "\" y=\"" << L.oy + L.h + 14 << "\">BEV x " << num(o.x_min) << ".." << num(o.x_max)
    << " m, y " << num(o.y_min) << ".." << num(o.y_max) << " m</text>\n";
  auto scatter = [&](const Lane3D& l, const char* color, double r) {
    for (const auto& p : l.points) {
      auto [u, v] = bev(p);
      if (u < L.ox || u > L.ox + L.w || v < L.oy || v > L.oy + L.h) continue;
      s << "<circle cx=\"" << num(u) << "\" cy=\"" << num(v) << "\" r=\"" << r << "\" fill=\"" << color << "\"/>\n";
    }
  };
  for (const auto& g : gts) scatter(g, "#2a2", 1.6);
  for (const auto& p : preds) scatter(p.lane, "#d22", 1.0);

  // right: oblique view, y recedes up and to the right, z is vertical
  const plot_detail::Frame R{2 * pad + o.panel_w, pad + 10, double(o.panel_w), double(o.panel_h)};
  const double kx = 0.55 * R.w / (o.x_max - o.x_min);
  const double ky = 0.7 * R.h / (o.y_max - o.y_min);
  const double kz = 0.25 * R.h / (o.z_max - o.z_min);
  const double shear = 0.35;
  auto obl = [&](const Vec3& p) {
    const double dy = p.y() - o.y_min;
    return std::pair{R.ox + 0.1 * R.w + (p.x() - o.x_min) * kx + shear * dy * ky * 0.6,
                     R.oy + R.h - 0.05 * R.h - dy * ky - (p.z() - o.z_min) * kz};
  };
  s << "<rect x=\"" << R.ox << "\" y=\"" << R.oy << "\" width=\"" << R.w << "\" height=\"" << R.h
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  // ground plane outline at z = 0
  {
    const Vec3 c[4] = {{o.x_min, o.y_min, 0}, {o.x_max, o.y_min, 0}, {o.x_max, o.y_max, 0}, {o.x_min, o.y_max, 0}};
    s << "<polygon fill=\"#f4f4f4\" stroke=\"#bbb\" points=\"";
    for (const auto& p : c) {
      auto [u, v] = obl(p);
      s << num(u) << "," << num(v) << " ";
    }
    s << "\"/>\n";
  }
  s << "<text x=\"" << R.ox << "\" y=\"" << R.oy + R.h + 14 << "\">3D, z " << num(o.z_min) << ".." << num(o.z_max)
    << " m</text>\n";
  auto polyline = [&](const Lane3D& l, const char* color, double width) {
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width << "\" points=\"";
    for (const auto& p : l.points) {
      auto [u, v] = obl(p);
      s << num(u) << "," << num(v) << " ";
    }
    s << "\"/>\n";
  };
  for (const auto& g : gts) polyline(g, "#2a2", 2.2);
  for (const auto& p : preds) polyline(p.lane, "#d22", 1.2);
  s << "<text x=\"" << W - pad - 120 << "\" y=\"16\" fill=\"#2a2\">ground truth</text>\n";
  s << "<text x=\"" << W - pad - 40 << "\" y=\"16\" fill=\"#d22\">pred</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace d3l
