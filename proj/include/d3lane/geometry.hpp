#pragma once

// Camera models, ground-plane homographies, virtual-camera normalization and
// the mapping between image pixels, BEV grid cells and road coordinates.
//
// Road frame: right-handed, x to the right of the ego vehicle, y forward,
// z up; the road plane is z = 0.
// Camera frame: x right, y down, z along the optical axis.
// Pixel (col, row) has its center at continuous coordinate (col, row).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Vec2 = Eigen::Vector2d;

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

// Euler angles of the camera body relative to the road frame, in degrees.
// Pitch is positive nose-down, yaw positive counter-clockwise about +z,
// roll about the optical axis.
struct CameraAngles {
  double roll_deg = 0.0;
  double pitch_deg = 0.0;
  double yaw_deg = 0.0;
};

namespace detail {

// Camera axes expressed in body axes (body: x right, y forward, z up).
inline Mat3 body_to_camera() {
  Mat3 m;
  m << 1, 0, 0,
       0, 0, -1,
       0, 1, 0;
  return m;
}

// Body-to-road rotation: Rz(yaw) * Rx(-pitch) * Ry(roll).
inline Mat3 body_to_road(const CameraAngles& a) {
  using Eigen::AngleAxisd;
  return (AngleAxisd(deg2rad(a.yaw_deg), Vec3::UnitZ()) * AngleAxisd(-deg2rad(a.pitch_deg), Vec3::UnitX()) *
          AngleAxisd(deg2rad(a.roll_deg), Vec3::UnitY()))
      .toRotationMatrix();
}

}  // namespace detail

// Pinhole camera placed relative to the road frame.
class CameraRig {
 public:
  // rotation maps road-frame directions to camera-frame directions;
  // translation is the camera center in road coordinates.
  CameraRig(const Mat3& intrinsics, const Mat3& rotation, const Vec3& translation, int image_h, int image_w)
      : K_(intrinsics), R_(rotation), t_(translation), h_(image_h), w_(image_w) {
    if (K_(1, 0) != 0.0 || K_(2, 0) != 0.0 || K_(2, 1) != 0.0 || K_(2, 2) != 1.0)
      throw ConfigError("intrinsics", "must be upper triangular with K(2,2) = 1");
    if (!(K_(0, 0) > 0.0) || !(K_(1, 1) > 0.0)) throw ConfigError("intrinsics", "focal lengths must be positive");
    if (!((R_ * R_.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-6))
      throw ConfigError("rotation", "not orthonormal within 1e-6");
    if (!(t_.z() > 0.0)) throw ConfigError("translation", "camera must be above the road plane (z > 0)");
    if (h_ <= 0 || w_ <= 0) throw ConfigError("image_size", "must be positive");
    K_inv_ = K_.inverse();
  }

  static CameraRig from_angles(double fx, double fy, double cx, double cy, int image_h, int image_w,
                               const CameraAngles& angles, const Vec3& translation) {
    Mat3 K;
    K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    Mat3 R = detail::body_to_camera() * detail::body_to_road(angles).transpose();
    return CameraRig(K, R, translation, image_h, image_w);
  }

  const Mat3& intrinsics() const { return K_; }
  const Mat3& intrinsics_inv() const { return K_inv_; }
  const Mat3& rotation() const { return R_; }
  const Vec3& translation() const { return t_; }
  int image_h() const { return h_; }
  int image_w() const { return w_; }
  double height() const { return t_.z(); }

  CameraAngles angles() const {
    Mat3 B = (detail::body_to_camera().transpose() * R_).transpose();
    CameraAngles a;
    a.pitch_deg = -rad2deg(std::asin(std::clamp(B(2, 1), -1.0, 1.0)));
    a.roll_deg = rad2deg(std::atan2(-B(2, 0), B(2, 2)));
    a.yaw_deg = rad2deg(std::atan2(-B(0, 1), B(1, 1)));
    return a;
  }

  // Road point -> camera coordinates.
  Vec3 to_camera(const Vec3& p_road) const { return R_ * (p_road - t_); }

  // Road point -> pixel. None when the point is not in front of the camera.
  std::optional<Vec2> project(const Vec3& p_road) const {
    Vec3 pc = to_camera(p_road);
    if (!(pc.z() > 1e-9)) return std::nullopt;
    Vec3 uv = K_ * pc;
    return Vec2(uv.x() / uv.z(), uv.y() / uv.z());
  }

  // Viewing ray direction of a pixel, in road coordinates (not normalized).
  Vec3 ray_direction(double u, double v) const { return R_.transpose() * (K_inv_ * Vec3(u, v, 1.0)); }

  bool in_image(const Vec2& px) const {
    return px.x() >= 0.0 && px.y() >= 0.0 && px.x() <= w_ - 1.0 && px.y() <= h_ - 1.0;
  }

  // Maps homogeneous ground coordinates (x, y, 1) on z = 0 to homogeneous pixels.
  Mat3 ground_to_image() const {
    Mat3 G;
    G.col(0) = R_.col(0);
    G.col(1) = R_.col(1);
    G.col(2) = -R_ * t_;
    return K_ * G;
  }

  Config to_config() const {
    Config c;
    auto a = angles();
    c.set("fx", K_(0, 0));
    c.set("fy", K_(1, 1));
    c.set("cx", K_(0, 2));
    c.set("cy", K_(1, 2));
    c.set("image_h", h_);
    c.set("image_w", w_);
    c.set("roll_deg", a.roll_deg);
    c.set("pitch_deg", a.pitch_deg);
    c.set("yaw_deg", a.yaw_deg);
    c.set("tx", t_.x());
    c.set("ty", t_.y());
    c.set("tz", t_.z());
    return c;
  }

  static CameraRig from_config(const Config& c) {
    return from_angles(c.require<double>("fx"), c.require<double>("fy"), c.require<double>("cx"),
                       c.require<double>("cy"), c.require<int>("image_h"), c.require<int>("image_w"),
                       {c.get<double>("roll_deg", 0.0), c.get<double>("pitch_deg", 0.0), c.get<double>("yaw_deg", 0.0)},
                       Vec3(c.get<double>("tx", 0.0), c.get<double>("ty", 0.0), c.require<double>("tz")));
  }

 private:
  Mat3 K_, K_inv_, R_;
  Vec3 t_;
  int h_, w_;
};

// Canonical rig every input is normalized to: pitch-only, 1.5 m high,
// focal length 0.78125 * width, principal point at the image center.
inline CameraRig virtual_rig(int image_h = 576, int image_w = 1024, double pitch_deg = 3.0, double height = 1.5) {
  const double f = 0.78125 * image_w;
  return CameraRig::from_angles(f, f, image_w / 2.0, image_h / 2.0, image_h, image_w, {0.0, pitch_deg, 0.0},
                                Vec3(0.0, 0.0, height));
}

// Intersection of the pixel's viewing ray with the road plane z = 0. None when
// the ray is parallel to the plane or points above the horizon.
inline std::optional<Vec3> ray_ground_intersection(const Vec2& pixel, const CameraRig& rig) {
  Vec3 d = rig.ray_direction(pixel.x(), pixel.y());
  if (!(d.z() < -1e-12 * d.norm())) return std::nullopt;
  const Vec3& o = rig.translation();
  double s = -o.z() / d.z();
  Vec3 p = o + s * d;
  p.z() = 0.0;
  return p;
}

// Plane-induced homography: dst_pixel ~ H * src_pixel for points on z = 0.
inline Mat3 ground_homography(const CameraRig& src, const CameraRig& dst) {
  return dst.ground_to_image() * src.ground_to_image().inverse();
}

namespace detail {

inline double snap(double v) {
  double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

// Bilinear sample at continuous pixel coordinates; returns false when the
// location lies outside [0, w-1] x [0, h-1].
template <class T>
bool sample_bilinear(const Tensor<T>& img, double u, double v, T* out) {
  u = snap(u);
  v = snap(v);
  if (!(u >= 0.0 && v >= 0.0 && u <= img.w - 1.0 && v <= img.h - 1.0)) return false;
  int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
  int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
  T ax = static_cast<T>(u - x0), ay = static_cast<T>(v - y0);
  for (int ch = 0; ch < img.c; ++ch) {
    if (ax == T(0) && ay == T(0)) {
      out[ch] = img(ch, y0, x0);
      continue;
    }
    T top = img(ch, y0, x0) * (1 - ax) + img(ch, y0, x1) * ax;
    T bot = img(ch, y1, x0) * (1 - ax) + img(ch, y1, x1) * ax;
    out[ch] = top * (1 - ay) + bot * ay;
  }
  return true;
}

}  // namespace detail

// Resamples an image taken by `src` into the view of `virt`, assuming every
// pixel lies on the road plane. Out-of-source samples are zero.
template <class T>
Tensor<T> warp_to_virtual(const Tensor<T>& image, const CameraRig& src, const CameraRig& virt) {
  if (image.h != src.image_h() || image.w != src.image_w())
    throw ShapeError("warp_to_virtual: image " + image.shape_str() + " does not match source rig");
  Tensor<T> out(image.c, virt.image_h(), virt.image_w());
  const Mat3 H = ground_homography(virt, src);
  std::vector<T> px(static_cast<std::size_t>(image.c));
  for (int v = 0; v < out.h; ++v) {
    for (int u = 0; u < out.w; ++u) {
      Vec3 p = H * Vec3(u, v, 1.0);
      if (!(p.z() > 0.0)) continue;
      if (detail::sample_bilinear(image, p.x() / p.z(), p.y() / p.z(), px.data()))
        for (int ch = 0; ch < image.c; ++ch) out(ch, v, u) = px[static_cast<std::size_t>(ch)];
    }
  }
  return out;
}

// Regular grid over the road plane. Row 0 is nearest to the ego vehicle
// (smallest y), column 0 is leftmost (smallest x).
struct BevGrid {
  double x_min = -10.0, x_max = 10.0;
  double y_min = 3.0, y_max = 103.0;
  double dx = 0.5, dy = 0.5;
  int rows = 200, cols = 40;

  static BevGrid make(double x_min, double x_max, double y_min, double y_max, double dx, double dy) {
    if (!(x_max > x_min) || !(y_max > y_min) || !(dx > 0) || !(dy > 0))
      throw ConfigError("bev_grid", "ranges must be increasing and cell sizes positive");
    BevGrid g{x_min, x_max, y_min, y_max, dx, dy, 0, 0};
    g.rows = static_cast<int>(std::lround((y_max - y_min) / dy));
    g.cols = static_cast<int>(std::lround((x_max - x_min) / dx));
    if (g.rows < 1 || g.cols < 1) throw ConfigError("bev_grid", "grid must have at least one cell");
    return g;
  }

  double center_x(int c) const { return x_min + (c + 0.5) * dx; }
  double center_y(int r) const { return y_min + (r + 0.5) * dy; }
  int cells() const { return rows * cols; }

  Config to_config() const {
    Config c;
    c.set("x_min", x_min);
    c.set("x_max", x_max);
    c.set("y_min", y_min);
    c.set("y_max", y_max);
    c.set("dx", dx);
    c.set("dy", dy);
    return c;
  }
  static BevGrid from_config(const Config& c) {
    BevGrid d;
    return make(c.get("x_min", d.x_min), c.get("x_max", d.x_max), c.get("y_min", d.y_min), c.get("y_max", d.y_max),
                c.get("dx", d.dx), c.get("dy", d.dy));
  }
};

struct Cell {
  int r = 0;
  int c = 0;
  bool operator==(const Cell&) const = default;
  auto operator<=>(const Cell&) const = default;
};

inline Vec3 bev_cell_to_road(int r, int c, const BevGrid& grid) {
  return Vec3(grid.center_x(c), grid.center_y(r), 0.0);
}

inline std::optional<Cell> road_to_bev_cell(double x, double y, const BevGrid& grid) {
  double fc = std::floor((x - grid.x_min) / grid.dx);
  double fr = std::floor((y - grid.y_min) / grid.dy);
  if (!(fc >= 0 && fc < grid.cols && fr >= 0 && fr < grid.rows)) return std::nullopt;
  return Cell{static_cast<int>(fr), static_cast<int>(fc)};
}

// Front-view raster resampled onto the BEV grid. valid[r * cols + c] is 0 for
// cells whose ground center falls behind the camera or outside the image.
template <class T>
struct BevRaster {
  Tensor<T> values;
  std::vector<std::uint8_t> valid;
  bool is_valid(int r, int c) const { return valid[static_cast<std::size_t>(r) * values.w + c] != 0; }
};

template <class T>
BevRaster<T> warp_fv_raster_to_bev(const Tensor<T>& raster, const CameraRig& rig, const BevGrid& grid) {
  if (raster.h != rig.image_h() || raster.w != rig.image_w())
    throw ShapeError("warp_fv_raster_to_bev: raster " + raster.shape_str() + " does not match rig");
  BevRaster<T> out{Tensor<T>(raster.c, grid.rows, grid.cols), std::vector<std::uint8_t>(grid.cells(), 0)};
  std::vector<T> px(static_cast<std::size_t>(raster.c));
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      auto uv = rig.project(bev_cell_to_road(r, c, grid));
      if (!uv || !detail::sample_bilinear(raster, uv->x(), uv->y(), px.data())) continue;
      out.valid[static_cast<std::size_t>(r) * grid.cols + c] = 1;
      for (int ch = 0; ch < raster.c; ++ch) out.values(ch, r, c) = px[static_cast<std::size_t>(ch)];
    }
  }
  return out;
}

}  // namespace d3l
