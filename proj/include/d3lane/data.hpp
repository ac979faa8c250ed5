#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/hash.hpp"
#include "d3lane/lane.hpp"
#include "d3lane/nn/rng.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

enum class GroundStyle { Road, Checker };

struct SceneConfig {
  int image_h = 256;
  int image_w = 512;
  int lane_count_min = 2;
  int lane_count_max = 4;
  double lane_spacing = 3.5;
  double lateral_shift = 0.8;                                  // uniform +-, m
  double curvature_min = -1e-3, curvature_max = 1e-3;          // 1/m, x'' at y = 0
  double curvature_rate_min = -1e-5, curvature_rate_max = 1e-5;  // 1/m^2, x'''
  double slope_amplitude_min = 0.0, slope_amplitude_max = 2.0;  // m, sign is random
  double slope_wavelength_min = 80.0, slope_wavelength_max = 200.0;
  double mark_width = 0.25;
  double texture_amplitude = 0.06;
  double texture_scale = 0.8;  // m, finest noise lattice
  double noise_sigma = 0.01;
  double pitch_jitter_deg = 1.0;
  double yaw_jitter_deg = 1.0;
  double roll_jitter_deg = 0.5;
  double height_jitter = 0.1;
  double gt_y_min = 1.0, gt_y_max = 103.0, gt_step = 0.5;
  double gt_x_limit = 10.0;      // gt lanes are clipped to |x| <= limit
  double min_lane_length = 10.0;  // m of visible extent
  double depth_near = 1.5;        // inverse depth = min(1, depth_near / z_cam)
  int supersample = 2;
  GroundStyle style = GroundStyle::Road;
  double checker_size = 2.0;
  double checker_sharpness = 0.0;  // 0 = hard edges
  std::uint64_t seed = 0;

  void validate() const {
    auto range = [](const char* key, double lo, double hi) {
      if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) throw ConfigError(key, "range must satisfy min <= max");
    };
    if (image_h <= 0 || image_w <= 0) throw ConfigError("image_h", "image size must be positive");
    if (lane_count_min < 1 || lane_count_min > lane_count_max) throw ConfigError("lane_count_min", "need 1 <= min <= max");
    range("curvature", curvature_min, curvature_max);
    range("curvature_rate", curvature_rate_min, curvature_rate_max);
    range("slope_amplitude", slope_amplitude_min, slope_amplitude_max);
    range("slope_wavelength", slope_wavelength_min, slope_wavelength_max);
    if (!(slope_wavelength_min > 0)) throw ConfigError("slope_wavelength_min", "must be positive");
    if (slope_amplitude_min < 0) throw ConfigError("slope_amplitude_min", "amplitude is a magnitude, must be >= 0");
    if (!(lane_spacing > 0)) throw ConfigError("lane_spacing", "must be positive");
    if (!(mark_width > 0)) throw ConfigError("mark_width", "must be positive");
    if (supersample < 1) throw ConfigError("supersample", "must be >= 1");
    if (!(depth_near > 0)) throw ConfigError("depth_near", "must be positive");
    if (!(gt_step > 0) || gt_y_min >= gt_y_max) throw ConfigError("gt_step", "gt sampling range invalid");
  }

  static SceneConfig from_config(const Config& c) {
    SceneConfig s;
    s.image_h = c.get("image_h", s.image_h);
    s.image_w = c.get("image_w", s.image_w);
    s.lane_count_min = c.get("lane_count_min", s.lane_count_min);
    s.lane_count_max = c.get("lane_count_max", s.lane_count_max);
    s.lane_spacing = c.get("lane_spacing", s.lane_spacing);
    s.lateral_shift = c.get("lateral_shift", s.lateral_shift);
    s.curvature_min = c.get("curvature_min", s.curvature_min);
    s.curvature_max = c.get("curvature_max", s.curvature_max);
    s.curvature_rate_min = c.get("curvature_rate_min", s.curvature_rate_min);
    s.curvature_rate_max = c.get("curvature_rate_max", s.curvature_rate_max);
    s.slope_amplitude_min = c.get("slope_amplitude_min", s.slope_amplitude_min);
    s.slope_amplitude_max = c.get("slope_amplitude_max", s.slope_amplitude_max);
    s.slope_wavelength_min = c.get("slope_wavelength_min", s.slope_wavelength_min);
    s.slope_wavelength_max = c.get("slope_wavelength_max", s.slope_wavelength_max);
    s.mark_width = c.get("mark_width", s.mark_width);
    s.texture_amplitude = c.get("texture_amplitude", s.texture_amplitude);
    s.texture_scale = c.get("texture_scale", s.texture_scale);
    s.noise_sigma = c.get("noise_sigma", s.noise_sigma);
    s.pitch_jitter_deg = c.get("pitch_jitter_deg", s.pitch_jitter_deg);
    s.yaw_jitter_deg = c.get("yaw_jitter_deg", s.yaw_jitter_deg);
    s.roll_jitter_deg = c.get("roll_jitter_deg", s.roll_jitter_deg);
    s.height_jitter = c.get("height_jitter", s.height_jitter);
    s.gt_x_limit = c.get("gt_x_limit", s.gt_x_limit);
    s.gt_y_max = c.get("gt_y_max", s.gt_y_max);
    s.min_lane_length = c.get("min_lane_length", s.min_lane_length);
    s.depth_near = c.get("depth_near", s.depth_near);
    s.supersample = c.get("supersample", s.supersample);
    auto style = c.get<std::string>("style", "road");
    if (style == "road") s.style = GroundStyle::Road;
    else if (style == "checker") s.style = GroundStyle::Checker;
    else throw ConfigError("style", "expected road or checker, got '" + style + "'");
    s.checker_size = c.get("checker_size", s.checker_size);
    s.checker_sharpness = c.get("checker_sharpness", s.checker_sharpness);
    s.seed = static_cast<std::uint64_t>(c.get<long long>("seed", 0));
    s.validate();
    return s;
  }
};

// Per-scene draw. Lane k centerline: x(y) = offsets[k] + curvature/2 y^2 +
// curvature_rate/6 y^3. Ground height: z(y) = amplitude sin(2 pi y / wavelength).
struct SceneParams {
  std::vector<double> offsets;
  double curvature = 0.0;
  double curvature_rate = 0.0;
  double amplitude = 0.0;
  double wavelength = 100.0;

  double lane_x(int k, double y) const {
    return offsets[static_cast<std::size_t>(k)] + curvature / 2 * y * y + curvature_rate / 6 * y * y * y;
  }
  double ground_z(double y) const { return amplitude * std::sin(2 * std::numbers::pi * y / wavelength); }
};

struct Sample {
  Tensor<float> image;  // 3 x H x W in [0, 1]
  Tensor<float> depth;  // 1 x H x W normalized inverse depth, 0 for sky
  std::vector<Lane3D> lanes;
  CameraRig rig = virtual_rig();
  SceneParams params;
  std::string id;  // SHA-256 of image and depth bytes, hex
};

namespace scene {

constexpr double kMaxRange = 400.0;  // m of forward travel before a ray counts as sky

// First intersection of o + s d (s > 0) with the surface z = ground_z(y).
// The signed gap g(s) = o.z + s d.z - ground_z(o.y + s d.y) has a derivative
// bounded by L, so stepping by g / L never crosses the surface.
inline std::optional<double> trace(const Vec3& o, const Vec3& d, const SceneParams& p) {
  const double k = 2 * std::numbers::pi / p.wavelength;
  const double lip = std::abs(d.z()) + std::abs(p.amplitude) * k * std::abs(d.y());
  if (!(lip > 0)) return std::nullopt;
  double s = 0.0;
  for (int it = 0; it < 2000; ++it) {
    const double y = o.y() + s * d.y();
    if (std::abs(y - o.y()) > kMaxRange) return std::nullopt;
    const double g = o.z() + s * d.z() - p.ground_z(y);
    if (g < 1e-9) return s;
    s += g / lip;
  }
  return std::nullopt;
}

inline double lattice(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
  std::uint64_t h = nn::mix_seed(seed, static_cast<std::uint64_t>(ix) * 0x9E3779B1ULL ^ static_cast<std::uint64_t>(iy) * 0x85EBCA77ULL);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Smooth value noise in [0, 1).
inline double value_noise(double x, double y, std::uint64_t seed) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = x - fx, ty = y - fy;
  tx = tx * tx * (3 - 2 * tx);
  ty = ty * ty * (3 - 2 * ty);
  const double a = lattice(ix, iy, seed), b = lattice(ix + 1, iy, seed);
  const double c = lattice(ix, iy + 1, seed), e = lattice(ix + 1, iy + 1, seed);
  return (a + tx * (b - a)) + ty * ((c + tx * (e - c)) - (a + tx * (b - a)));
}

inline const double kSky[3] = {0.55, 0.70, 0.90};

inline void ground_color(const Vec3& p, const SceneConfig& cfg, const SceneParams& sp, std::uint64_t seed,
                         double rgb[3]) {
  if (cfg.style == GroundStyle::Checker) {
    // Checker parity is the sign of sin * sin; a finite edge sharpness keeps
    // the pattern band-limited so resampling comparisons are meaningful.
    const double q = std::sin(std::numbers::pi * p.x() / cfg.checker_size) *
                     std::sin(std::numbers::pi * p.y() / cfg.checker_size);
    double v = cfg.checker_sharpness > 0 ? 0.5 + 0.3 * std::tanh(cfg.checker_sharpness * q) : (q >= 0 ? 0.8 : 0.2);
    rgb[0] = rgb[1] = rgb[2] = v;
    return;
  }
  const double s = cfg.texture_scale;
  double n = 0.6 * value_noise(p.x() / s, p.y() / s, seed) + 0.4 * value_noise(p.x() / (4 * s), p.y() / (4 * s), seed + 1);
  double g = 0.36 + cfg.texture_amplitude * (2 * n - 1);
  rgb[0] = g;
  rgb[1] = g;
  rgb[2] = g + 0.02;
  if (p.y() < 0) return;
  for (int k = 0; k < static_cast<int>(sp.offsets.size()); ++k) {
    if (std::abs(p.x() - sp.lane_x(k, p.y())) <= cfg.mark_width / 2) {
      rgb[0] = 0.92;
      rgb[1] = 0.92;
      rgb[2] = 0.86;
      return;
    }
  }
}

inline SceneParams draw_params(const SceneConfig& cfg, nn::Rng& rng) {
  SceneParams p;
  const int n = rng.uniform_int(cfg.lane_count_min, cfg.lane_count_max);
  const double shift = rng.uniform(-cfg.lateral_shift, cfg.lateral_shift);
  for (int k = 0; k < n; ++k) p.offsets.push_back((k - (n - 1) / 2.0) * cfg.lane_spacing + shift);
  p.curvature = rng.uniform(cfg.curvature_min, cfg.curvature_max);
  p.curvature_rate = rng.uniform(cfg.curvature_rate_min, cfg.curvature_rate_max);
  const double amp = rng.uniform(cfg.slope_amplitude_min, cfg.slope_amplitude_max);
  p.amplitude = rng.uniform() < 0.5 ? -amp : amp;
  p.wavelength = rng.uniform(cfg.slope_wavelength_min, cfg.slope_wavelength_max);
  return p;
}

inline CameraRig draw_rig(const SceneConfig& cfg, nn::Rng& rng) {
  const CameraRig base = virtual_rig(cfg.image_h, cfg.image_w);
  const auto a = base.angles();
  const auto& K = base.intrinsics();
  CameraAngles j{a.roll_deg + rng.uniform(-cfg.roll_jitter_deg, cfg.roll_jitter_deg),
                 a.pitch_deg + rng.uniform(-cfg.pitch_jitter_deg, cfg.pitch_jitter_deg),
                 a.yaw_deg + rng.uniform(-cfg.yaw_jitter_deg, cfg.yaw_jitter_deg)};
  const double h = base.height() + rng.uniform(-cfg.height_jitter, cfg.height_jitter);
  return CameraRig::from_angles(K(0, 0), K(1, 1), K(0, 2), K(1, 2), cfg.image_h, cfg.image_w, j, Vec3(0, 0, h));
}

// A gt point is visible when it projects into the image and the viewing ray
// does not hit the surface earlier (hill crests hide what lies behind).
inline bool point_visible(const Vec3& p, const CameraRig& rig, const SceneParams& sp) {
  auto uv = rig.project(p);
  if (!uv || !rig.in_image(*uv)) return false;
  const Vec3 d = p - rig.translation();
  auto s = trace(rig.translation(), d, sp);
  return s && (1.0 - *s) * d.norm() < 0.05;
}

inline std::vector<Lane3D> visible_lanes(const SceneConfig& cfg, const SceneParams& sp, const CameraRig& rig) {
  std::vector<Lane3D> out;
  const int steps = static_cast<int>(std::floor((cfg.gt_y_max - cfg.gt_y_min) / cfg.gt_step + 1e-9));
  for (int k = 0; k < static_cast<int>(sp.offsets.size()); ++k) {
    Lane3D lane;
    bool started = false;
    for (int i = 0; i <= steps; ++i) {
      const double y = cfg.gt_y_min + i * cfg.gt_step;
      const Vec3 p(sp.lane_x(k, y), y, sp.ground_z(y));
      const bool ok = std::abs(p.x()) <= cfg.gt_x_limit && point_visible(p, rig, sp);
      if (ok) {
        lane.points.push_back(p);
        started = true;
      } else if (started) {
        break;  // keep the first contiguous visible run only
      }
    }
    if (lane.points.size() >= 2 && lane.y_end() - lane.y_begin() >= cfg.min_lane_length) out.push_back(std::move(lane));
  }
  return out;
}

}  // namespace scene

// Renders the ground surface of `params` as seen by `rig`. Exposed separately
// so oracle tests can render the same scene under different rigs.
inline void render(const SceneConfig& cfg, const SceneParams& params, const CameraRig& rig, std::uint64_t texture_seed,
                   Tensor<float>* image, Tensor<float>* depth) {
  const int H = rig.image_h(), W = rig.image_w(), ss = cfg.supersample;
  if (image) *image = Tensor<float>(3, H, W);
  if (depth) *depth = Tensor<float>(1, H, W);
  const Vec3& o = rig.translation();
  for (int v = 0; v < H; ++v) {
    for (int u = 0; u < W; ++u) {
      if (image) {
        double acc[3] = {0, 0, 0};
        for (int sy = 0; sy < ss; ++sy) {
          for (int sx = 0; sx < ss; ++sx) {
            const double pu = u - 0.5 + (sx + 0.5) / ss, pv = v - 0.5 + (sy + 0.5) / ss;
            const Vec3 d = rig.ray_direction(pu, pv);
            double rgb[3] = {scene::kSky[0], scene::kSky[1], scene::kSky[2]};
            if (auto s = scene::trace(o, d, params)) scene::ground_color(o + *s * d, cfg, params, texture_seed, rgb);
            for (int ch = 0; ch < 3; ++ch) acc[ch] += rgb[ch];
          }
        }
        for (int ch = 0; ch < 3; ++ch) (*image)(ch, v, u) = static_cast<float>(acc[ch] / (ss * ss));
      }
      if (depth) {
        const Vec3 d = rig.ray_direction(u, v);
        float inv = 0.0f;
        if (auto s = scene::trace(o, d, params)) {
          const double zc = rig.to_camera(o + *s * d).z();
          inv = static_cast<float>(std::min(1.0, cfg.depth_near / zc));
        }
        (*depth)(0, v, u) = inv;
      }
    }
  }
}

inline std::string content_id(const Tensor<float>& image, const Tensor<float>& depth) {
  Sha256 h;
  h.update(std::span<const float>(image.data));
  h.update(std::span<const float>(depth.data));
  return to_hex(h.finish());
}

// Deterministic in (cfg, index).
inline Sample generate_scene(const SceneConfig& cfg, std::uint64_t index) {
  cfg.validate();
  nn::Rng rng(nn::mix_seed(cfg.seed, index));
  Sample s;
  s.params = scene::draw_params(cfg, rng);
  s.rig = scene::draw_rig(cfg, rng);
  const std::uint64_t tex_seed = rng.next();
  render(cfg, s.params, s.rig, tex_seed, &s.image, &s.depth);
  if (cfg.noise_sigma > 0 && cfg.style == GroundStyle::Road) {
    for (auto& v : s.image.data) v = static_cast<float>(std::clamp(v + cfg.noise_sigma * rng.normal(), 0.0, 1.0));
  }
  s.lanes = scene::visible_lanes(cfg, s.params, s.rig);
  s.id = content_id(s.image, s.depth);
  return s;
}

// Training targets on the BEV grid. instance holds lane index + 1, 0 = none.
struct GtRasters {
  Tensor<float> confidence;  // 1 x rows x cols, 0 / 1
  Tensor<float> offset;      // lateral residual in cell units, [-0.5, 0.5)
  Tensor<float> height;      // z in meters
  std::vector<int> instance;

  int positives() const {
    return static_cast<int>(std::count_if(instance.begin(), instance.end(), [](int v) { return v > 0; }));
  }
};

// Per row, each lane marks the cell containing its x. When two lanes land in
// the same cell the one with smaller |x| (nearer the ego axis) wins, ties go
// to the lower lane index.
inline GtRasters rasterize_gt(const std::vector<Lane3D>& lanes, const BevGrid& grid) {
  GtRasters g{Tensor<float>(1, grid.rows, grid.cols), Tensor<float>(1, grid.rows, grid.cols),
              Tensor<float>(1, grid.rows, grid.cols), std::vector<int>(grid.cells(), 0)};
  std::vector<double> best_ax(grid.cells(), 0.0);
  for (int k = 0; k < static_cast<int>(lanes.size()); ++k) {
    for (int r = 0; r < grid.rows; ++r) {
      auto xz = lanes[static_cast<std::size_t>(k)].at(grid.center_y(r));
      if (!xz) continue;
      auto cell = road_to_bev_cell(xz->x(), grid.center_y(r), grid);
      if (!cell) continue;
      const auto i = static_cast<std::size_t>(r) * grid.cols + cell->c;
      const double ax = std::abs(xz->x());
      if (g.instance[i] != 0 && !(ax < best_ax[i])) continue;
      g.instance[i] = k + 1;
      best_ax[i] = ax;
      g.confidence(0, r, cell->c) = 1.0f;
      g.offset(0, r, cell->c) = static_cast<float>((xz->x() - grid.center_x(cell->c)) / grid.dx);
      g.height(0, r, cell->c) = static_cast<float>(xz->y());
    }
  }
  return g;
}

}  // namespace d3l
