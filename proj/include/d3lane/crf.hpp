#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <ostream>
#include <vector>

#include "d3lane/bevhead.hpp"
#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

struct CrfConfig {
  double w1 = 1.0, w2 = 0.5, w3 = 0.5;
  double sigma_color = 13.0 / 255.0;
  double sigma_depth = 0.1;
  int iterations = 5;
  int neighborhood = 8;
  double region_floor = 0.2;
  int max_region = 5000;

  void validate() const {
    if (!(w1 >= 0)) throw ConfigError("crf.w1", "must be >= 0");
    if (!(w2 >= 0)) throw ConfigError("crf.w2", "must be >= 0");
    if (!(w3 >= 0)) throw ConfigError("crf.w3", "must be >= 0");
    if (!(sigma_color > 0)) throw ConfigError("crf.sigma_color", "must be > 0");
    if (!(sigma_depth > 0)) throw ConfigError("crf.sigma_depth", "must be > 0");
    if (iterations < 1) throw ConfigError("crf.iterations", "must be >= 1");
    if (neighborhood != 4 && neighborhood != 8) throw ConfigError("crf.neighborhood", "must be 4 or 8");
    if (!(region_floor >= 0 && region_floor < 1)) throw ConfigError("crf.region_floor", "must lie in [0, 1)");
    if (max_region < 1) throw ConfigError("crf.max_region", "must be >= 1");
  }

  static CrfConfig from_config(const Config& c) {
    CrfConfig k;
    k.w1 = c.get("w1", k.w1);
    k.w2 = c.get("w2", k.w2);
    k.w3 = c.get("w3", k.w3);
    k.sigma_color = c.get("sigma_color", k.sigma_color);
    k.sigma_depth = c.get("sigma_depth", k.sigma_depth);
    k.iterations = c.get("iterations", k.iterations);
    k.neighborhood = c.get("neighborhood", k.neighborhood);
    k.region_floor = c.get("region_floor", k.region_floor);
    k.max_region = c.get("max_region", k.max_region);
    k.validate();
    return k;
  }
};

inline constexpr double kCrfEps = 1e-6;

// Rasters share one rows x cols grid. region lists active cells as
// r * cols + c.
struct CrfProblem {
  Tensor<double> unary_prob;  // 1 x rows x cols
  Tensor<double> color;       // 3 x rows x cols
  Tensor<double> depth;       // 1 x rows x cols
  std::vector<int> region;
  Cell baseline;
};

namespace crf_detail {

inline const std::vector<Cell>& offsets(int neighborhood) {
  static const std::vector<Cell> four{{-1, 0}, {0, -1}, {0, 1}, {1, 0}};
  static const std::vector<Cell> eight{{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  return neighborhood == 4 ? four : eight;
}

inline double clamp_prob(double p) { return std::clamp(p, kCrfEps, 1.0 - kCrfEps); }

// Region-local graph: unary costs per label and weighted edges.
struct Graph {
  std::vector<int> cells;
  std::vector<double> u0, u1;
  std::vector<std::vector<std::pair<int, double>>> nbrs;  // local index, weight
};

inline double pair_weight(const CrfProblem& p, const CrfConfig& cfg, int i, int j) {
  const std::size_t plane = p.unary_prob.plane();
  double dc = 0.0;
  for (int ch = 0; ch < p.color.c; ++ch) {
    const double d = p.color.data[ch * plane + i] - p.color.data[ch * plane + j];
    dc += d * d;
  }
  const double dd = p.depth.data[i] - p.depth.data[j];
  return cfg.w2 * std::exp(-dc / (2 * cfg.sigma_color * cfg.sigma_color)) +
         cfg.w3 * std::exp(-dd * dd / (2 * cfg.sigma_depth * cfg.sigma_depth));
}

inline Graph build_graph(const CrfProblem& p, const CrfConfig& cfg) {
  const int rows = p.unary_prob.h, cols = p.unary_prob.w;
  Graph g;
  g.cells = p.region;
  std::vector<int> local(static_cast<std::size_t>(rows) * cols, -1);
  for (std::size_t k = 0; k < g.cells.size(); ++k) local[static_cast<std::size_t>(g.cells[k])] = static_cast<int>(k);
  g.nbrs.resize(g.cells.size());
  for (std::size_t k = 0; k < g.cells.size(); ++k) {
    const int i = g.cells[k];
    const double q = clamp_prob(p.unary_prob.data[static_cast<std::size_t>(i)]);
    g.u1.push_back(-cfg.w1 * std::log(q));
    g.u0.push_back(-cfg.w1 * std::log(1.0 - q));
    const int r = i / cols, c = i % cols;
    for (const auto& o : offsets(cfg.neighborhood)) {
      const int rr = r + o.r, cc = c + o.c;
      if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
      const int l = local[static_cast<std::size_t>(rr) * cols + cc];
      if (l < 0) continue;
      g.nbrs[k].emplace_back(l, pair_weight(p, cfg, i, rr * cols + cc));
    }
  }
  return g;
}

inline double entropy(double q) {
  double h = 0.0;
  if (q > 0) h -= q * std::log(q);
  if (q < 1) h -= (1 - q) * std::log(1 - q);
  return h;
}

inline double free_energy(const Graph& g, const std::vector<double>& q) {
  double f = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    f += q[k] * g.u1[k] + (1 - q[k]) * g.u0[k] - entropy(q[k]);
    for (const auto& [l, w] : g.nbrs[k])
      if (static_cast<std::size_t>(l) > k) f += w * (q[k] * (1 - q[static_cast<std::size_t>(l)]) + q[static_cast<std::size_t>(l)] * (1 - q[k]));
  }
  return f;
}

}  // namespace crf_detail

// Bottom-most occupied row (row 0 is nearest the ego vehicle), column
// closest to the mask's column centroid, ties to the lower column.
template <class T>
Cell baseline_pixel(const Tensor<T>& prob, const std::vector<int>& mask) {
  if (mask.empty()) throw Error("baseline_pixel: empty instance mask");
  const int cols = prob.w;
  double centroid = 0.0;
  int bottom = prob.h;
  for (int i : mask) {
    centroid += i % cols;
    bottom = std::min(bottom, i / cols);
  }
  centroid /= static_cast<double>(mask.size());
  Cell best{bottom, -1};
  double best_d = 0.0;
  for (int i : mask) {
    if (i / cols != bottom) continue;
    const int c = i % cols;
    const double d = std::abs(c - centroid);
    if (best.c < 0 || d < best_d || (d == best_d && c < best.c)) {
      best.c = c;
      best_d = d;
    }
  }
  return best;
}

// Flood fill from the baseline over cells with prob >= floor, then a one-cell
// ring (8-neighborhood) around the fill. Breadth-first order decides which
// cells survive the size cap. Returned indices are sorted.
template <class T>
std::vector<int> build_lane_region(const Tensor<T>& prob, Cell baseline, double floor, const CrfConfig& cfg) {
  const int rows = prob.h, cols = prob.w;
  if (baseline.r < 0 || baseline.r >= rows || baseline.c < 0 || baseline.c >= cols)
    throw Error("build_lane_region: baseline outside the raster");
  const auto cap = static_cast<std::size_t>(cfg.max_region);
  std::vector<std::uint8_t> in(static_cast<std::size_t>(rows) * cols, 0);
  std::vector<int> fill;
  std::deque<int> queue{baseline.r * cols + baseline.c};
  in[static_cast<std::size_t>(queue.front())] = 1;
  while (!queue.empty() && fill.size() < cap) {
    const int i = queue.front();
    queue.pop_front();
    fill.push_back(i);
    for (const auto& o : crf_detail::offsets(cfg.neighborhood)) {
      const int r = i / cols + o.r, c = i % cols + o.c;
      if (r < 0 || r >= rows || c < 0 || c >= cols) continue;
      const auto j = static_cast<std::size_t>(r) * cols + c;
      if (in[j] || !(static_cast<double>(prob.data[j]) >= floor)) continue;
      in[j] = 1;
      queue.push_back(static_cast<int>(j));
    }
  }
  for (int i : queue) in[static_cast<std::size_t>(i)] = 0;  // enqueued but cut by the cap
  std::vector<int> region = fill;
  for (int i : fill) {
    for (const auto& o : crf_detail::offsets(8)) {
      if (region.size() >= cap) break;
      const int r = i / cols + o.r, c = i % cols + o.c;
      if (r < 0 || r >= rows || c < 0 || c >= cols) continue;
      const auto j = static_cast<std::size_t>(r) * cols + c;
      if (in[j]) continue;
      in[j] = 1;
      region.push_back(static_cast<int>(j));
    }
  }
  std::sort(region.begin(), region.end());
  return region;
}

// labels: one 0/1 entry per region cell, in region order. Pairs are counted
// once and only when both cells lie in the region.
inline double crf_energy(const std::vector<int>& labels, const CrfProblem& p, const CrfConfig& cfg) {
  if (labels.size() != p.region.size()) throw ShapeError("crf_energy: labels do not cover the region");
  const auto g = crf_detail::build_graph(p, cfg);
  double e = 0.0;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    e += labels[k] ? g.u1[k] : g.u0[k];
    for (const auto& [l, w] : g.nbrs[k])
      if (static_cast<std::size_t>(l) > k && labels[k] != labels[static_cast<std::size_t>(l)]) e += w;
  }
  return e;
}

// Sequential mean-field in region order, starting from the clamped unaries.
// Each update minimizes the variational free energy in q_i exactly, so the
// free energy never increases. free_energy_log, when given, receives the
// value before the first sweep and after each sweep.
inline Tensor<double> mean_field_refine(const CrfProblem& p, const CrfConfig& cfg,
                                        std::vector<double>* free_energy_log = nullptr) {
  const auto g = crf_detail::build_graph(p, cfg);
  std::vector<double> q;
  q.reserve(g.cells.size());
  for (int i : g.cells) q.push_back(crf_detail::clamp_prob(p.unary_prob.data[static_cast<std::size_t>(i)]));
  if (free_energy_log) free_energy_log->push_back(crf_detail::free_energy(g, q));
  for (int it = 0; it < cfg.iterations; ++it) {
    for (std::size_t k = 0; k < q.size(); ++k) {
      double a1 = g.u1[k], a0 = g.u0[k];  // expected cost of each label
      for (const auto& [l, w] : g.nbrs[k]) {
        a1 += w * (1 - q[static_cast<std::size_t>(l)]);
        a0 += w * q[static_cast<std::size_t>(l)];
      }
      q[k] = 1.0 / (1.0 + std::exp(a1 - a0));
    }
    if (free_energy_log) free_energy_log->push_back(crf_detail::free_energy(g, q));
  }
  Tensor<double> out = p.unary_prob;
  for (std::size_t k = 0; k < q.size(); ++k) out.data[static_cast<std::size_t>(g.cells[k])] = q[k];
  return out;
}

// One CRF per decoded instance: baseline -> region -> mean-field. Refined
// values are written back where regions overlap by taking the max; cells
// outside every region keep their input value. color_bev is 3 x rows x cols,
// depth_bev 1 x rows x cols.
template <class T>
BevPrediction<T> refine_all_lanes(const BevPrediction<T>& pred, const Tensor<float>& color_bev,
                                  const Tensor<float>& depth_bev, const CrfConfig& cfg, const DecodeConfig& decode,
                                  std::ostream* debug_log = nullptr) {
  cfg.validate();
  const int rows = pred.rows(), cols = pred.cols();
  if (color_bev.c != 3 || color_bev.h != rows || color_bev.w != cols || depth_bev.c != 1 || depth_bev.h != rows ||
      depth_bev.w != cols)
    throw ShapeError("refine_all_lanes: color " + color_bev.shape_str() + " / depth " + depth_bev.shape_str() +
                     " do not match " + pred.confidence.shape_str());
  BevPrediction<T> out = pred;
  const auto clusters = cluster_cells(pred, decode);
  if (clusters.empty()) return out;
  CrfProblem prob;
  prob.unary_prob = Tensor<double>(1, rows, cols);
  for (std::size_t i = 0; i < prob.unary_prob.size(); ++i) prob.unary_prob.data[i] = pred.confidence.data[i];
  prob.color = Tensor<double>(3, rows, cols);
  for (std::size_t i = 0; i < prob.color.size(); ++i) prob.color.data[i] = color_bev.data[i];
  prob.depth = Tensor<double>(1, rows, cols);
  for (std::size_t i = 0; i < prob.depth.size(); ++i) prob.depth.data[i] = depth_bev.data[i];

  std::vector<std::uint8_t> touched(static_cast<std::size_t>(rows) * cols, 0);
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    prob.baseline = baseline_pixel(prob.unary_prob, clusters[k]);
    prob.region = build_lane_region(prob.unary_prob, prob.baseline, cfg.region_floor, cfg);
    std::vector<double> fe;
    const auto q = mean_field_refine(prob, cfg, debug_log ? &fe : nullptr);
    if (debug_log) {
      *debug_log << "lane " << k << " cells " << prob.region.size() << " free_energy";
      for (double f : fe) *debug_log << ' ' << f;
      *debug_log << '\n';
    }
    for (int i : prob.region) {
      const auto j = static_cast<std::size_t>(i);
      const T v = static_cast<T>(q.data[j]);
      out.confidence.data[j] = touched[j] ? std::max(out.confidence.data[j], v) : v;
      touched[j] = 1;
    }
  }
  return out;
}

}  // namespace d3l
