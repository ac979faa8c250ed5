#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "d3lane/error.hpp"
#include "d3lane/geometry.hpp"

namespace d3l {

// One lane as a polyline in road coordinates with strictly increasing y.
struct Lane3D {
  std::vector<Vec3> points;
  std::optional<int> category;

  bool valid() const {
    if (points.size() < 2) return false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!points[i].allFinite()) return false;
      if (i > 0 && !(points[i].y() > points[i - 1].y())) return false;
    }
    return true;
  }

  double y_begin() const { return points.front().y(); }
  double y_end() const { return points.back().y(); }

  // Linear interpolation of (x, z) at longitudinal position y; none outside
  // the lane's y-span.
  std::optional<Vec2> at(double y) const {
    if (points.size() < 2 || y < y_begin() || y > y_end()) return std::nullopt;
    auto it = std::lower_bound(points.begin(), points.end(), y, [](const Vec3& p, double v) { return p.y() < v; });
    if (it == points.begin()) return Vec2(it->x(), it->z());
    const Vec3& b = *it;
    const Vec3& a = *(it - 1);
    const double t = (y - a.y()) / (b.y() - a.y());
    return Vec2(a.x() + t * (b.x() - a.x()), a.z() + t * (b.z() - a.z()));
  }
};

// Decoded lane with its detection score.
struct ScoredLane {
  Lane3D lane;
  double score = 1.0;
};

}  // namespace d3l
