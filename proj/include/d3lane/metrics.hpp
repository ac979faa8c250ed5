#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "d3lane/annotations.hpp"
#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/lane.hpp"

namespace d3l {

struct EvalConfig {
  std::vector<double> y_samples;  // default: 3, 8, ..., 103
  double point_threshold = 1.5;
  double coverage_ratio = 0.75;
  int min_covisible = 2;
  double near_begin = 0.0, near_end = 40.0;   // [begin, end)
  double far_begin = 40.0, far_end = 100.0;   // [begin, end]
  std::vector<double> ap_thresholds;          // default: 0, 0.05, ..., 0.95
  double score_threshold = 0.0;               // predictions scored below are ignored for F1

  EvalConfig() {
    for (int k = 0; k <= 20; ++k) y_samples.push_back(3.0 + 5.0 * k);
    for (int k = 0; k < 20; ++k) ap_thresholds.push_back(0.05 * k);
  }

  void validate() const {
    if (y_samples.empty()) throw ConfigError("eval.y_samples", "must not be empty");
    if (!(point_threshold > 0)) throw ConfigError("eval.point_threshold", "must be positive");
    if (!(coverage_ratio > 0 && coverage_ratio <= 1)) throw ConfigError("eval.coverage_ratio", "must lie in (0, 1]");
    if (min_covisible < 1) throw ConfigError("eval.min_covisible", "must be >= 1");
    if (!(near_end > near_begin) || !(far_end >= far_begin)) throw ConfigError("eval.near_range", "empty range");
    if (near_end > far_begin && far_end >= near_begin) throw ConfigError("eval.far_range", "ranges overlap");
    if (ap_thresholds.empty()) throw ConfigError("eval.ap_thresholds", "must not be empty");
  }

  static EvalConfig from_config(const Config& c) {
    EvalConfig e;
    auto nums = [&](const std::string& key, std::vector<double> fallback) {
      std::vector<std::string> def;
      auto raw = c.get_list(key, def);
      if (raw.empty()) return fallback;
      std::vector<double> out;
      for (const auto& s : raw) {
        try {
          std::size_t used = 0;
          out.push_back(std::stod(s, &used));
          if (used != s.size()) throw std::invalid_argument(s);
        } catch (const std::exception&) {
          throw ConfigError("eval." + key, "not a number: '" + s + "'");
        }
      }
      return out;
    };
    e.y_samples = nums("y_samples", e.y_samples);
    e.ap_thresholds = nums("ap_thresholds", e.ap_thresholds);
    e.point_threshold = c.get("point_threshold", e.point_threshold);
    e.coverage_ratio = c.get("coverage_ratio", e.coverage_ratio);
    e.min_covisible = c.get("min_covisible", e.min_covisible);
    e.near_begin = c.get("near_begin", e.near_begin);
    e.near_end = c.get("near_end", e.near_end);
    e.far_begin = c.get("far_begin", e.far_begin);
    e.far_end = c.get("far_end", e.far_end);
    e.score_threshold = c.get("score_threshold", e.score_threshold);
    e.validate();
    return e;
  }

  bool in_near(double y) const { return y >= near_begin && y < near_end; }
  bool in_far(double y) const { return y >= far_begin && y <= far_end; }
};

struct LaneSample {
  double x = 0.0, z = 0.0;
  bool visible = false;
};

inline std::vector<LaneSample> resample_lane(const Lane3D& lane, const std::vector<double>& y_samples) {
  std::vector<LaneSample> out;
  out.reserve(y_samples.size());
  for (double y : y_samples) {
    auto xz = lane.at(y);
    out.push_back(xz ? LaneSample{xz->x(), xz->y(), true} : LaneSample{});
  }
  return out;
}

// Comparison of one predicted and one gt lane on the common samples.
struct PairStats {
  int covisible = 0;
  int within = 0;
  double cost = std::numeric_limits<double>::infinity();  // mean (x, z) distance
  bool admissible = false;
};

inline PairStats compare_lanes(const std::vector<LaneSample>& p, const std::vector<LaneSample>& g, const EvalConfig& cfg) {
  PairStats s;
  double sum = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!p[k].visible || !g[k].visible) continue;
    const double d = std::hypot(p[k].x - g[k].x, p[k].z - g[k].z);
    ++s.covisible;
    s.within += d <= cfg.point_threshold;
    sum += d;
  }
  if (s.covisible == 0) return s;
  s.cost = sum / s.covisible;
  s.admissible = s.covisible >= cfg.min_covisible && s.within >= cfg.coverage_ratio * s.covisible;
  return s;
}

// Minimum-cost perfect assignment on a square matrix (Hungarian method with
// potentials, O(n^3)). Returns the column assigned to each row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row(n, -1);
  for (int j = 1; j <= n; ++j) row[p[j] - 1] = j - 1;
  return row;
}

struct Matching {
  std::vector<std::pair<int, int>> pairs;  // (pred, gt), sorted by pred
  std::vector<int> unmatched_preds, unmatched_gts;
  double total_cost = 0.0;
  int tp() const { return static_cast<int>(pairs.size()); }
  int fp() const { return static_cast<int>(unmatched_preds.size()); }
  int fn() const { return static_cast<int>(unmatched_gts.size()); }
};

// Largest set of one-to-one admissible pairs, and among those the one with
// the smallest summed cost. Inadmissible and padding entries carry a penalty
// larger than any admissible total so cardinality is maximized first.
inline Matching match_resampled(const std::vector<std::vector<LaneSample>>& preds,
                                const std::vector<std::vector<LaneSample>>& gts, const EvalConfig& cfg) {
  const int np = static_cast<int>(preds.size()), ng = static_cast<int>(gts.size());
  std::vector<std::vector<PairStats>> st(static_cast<std::size_t>(np), std::vector<PairStats>(static_cast<std::size_t>(ng)));
  double big = 1.0;
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < ng; ++j) {
      st[i][j] = compare_lanes(preds[i], gts[j], cfg);
      if (st[i][j].admissible) big += st[i][j].cost;
    }
  const int n = std::max(np, ng);
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), big));
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < ng; ++j)
      if (st[i][j].admissible) cost[i][j] = st[i][j].cost;
  Matching m;
  std::vector<char> gt_used(static_cast<std::size_t>(ng), 0);
  const auto row = n ? hungarian(cost) : std::vector<int>{};
  for (int i = 0; i < np; ++i) {
    const int j = row[static_cast<std::size_t>(i)];
    if (j < ng && st[i][j].admissible) {
      m.pairs.emplace_back(i, j);
      m.total_cost += st[i][j].cost;
      gt_used[static_cast<std::size_t>(j)] = 1;
    } else {
      m.unmatched_preds.push_back(i);
    }
  }
  for (int j = 0; j < ng; ++j)
    if (!gt_used[static_cast<std::size_t>(j)]) m.unmatched_gts.push_back(j);
  return m;
}

inline Matching match_lanes(const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts, const EvalConfig& cfg) {
  std::vector<std::vector<LaneSample>> rp, rg;
  for (const auto& l : preds) rp.push_back(resample_lane(l, cfg.y_samples));
  for (const auto& l : gts) rg.push_back(resample_lane(l, cfg.y_samples));
  return match_resampled(rp, rg, cfg);
}

// Running mean; empty means "no matched points".
struct MeanStat {
  double sum = 0.0;
  long count = 0;
  void add(double v) {
    sum += v;
    ++count;
  }
  void merge(const MeanStat& o) {
    sum += o.sum;
    count += o.count;
  }
  std::optional<double> mean() const { return count ? std::optional<double>(sum / count) : std::nullopt; }
};

struct RangeErrors {
  MeanStat x_near, x_far, z_near, z_far, x_all, z_all;
  void merge(const RangeErrors& o) {
    x_near.merge(o.x_near);
    x_far.merge(o.x_far);
    z_near.merge(o.z_near);
    z_far.merge(o.z_far);
    x_all.merge(o.x_all);
    z_all.merge(o.z_all);
  }
};

// |dx| and |dz| over co-visible samples of matched pairs, split by y range.
// "all" covers every sample, including ones outside both ranges.
inline RangeErrors compute_errors(const Matching& m, const std::vector<Lane3D>& preds, const std::vector<Lane3D>& gts,
                                  const EvalConfig& cfg) {
  RangeErrors e;
  for (const auto& [i, j] : m.pairs) {
    const auto p = resample_lane(preds[static_cast<std::size_t>(i)], cfg.y_samples);
    const auto g = resample_lane(gts[static_cast<std::size_t>(j)], cfg.y_samples);
    for (std::size_t k = 0; k < cfg.y_samples.size(); ++k) {
      if (!p[k].visible || !g[k].visible) continue;
      const double y = cfg.y_samples[k], dx = std::abs(p[k].x - g[k].x), dz = std::abs(p[k].z - g[k].z);
      e.x_all.add(dx);
      e.z_all.add(dz);
      if (cfg.in_near(y)) {
        e.x_near.add(dx);
        e.z_near.add(dz);
      } else if (cfg.in_far(y)) {
        e.x_far.add(dx);
        e.z_far.add(dz);
      }
    }
  }
  return e;
}

struct Counts {
  long tp = 0, fp = 0, fn = 0;
  // No predictions counts as precision 1, no gts as recall 1.
  double precision() const { return tp + fp ? static_cast<double>(tp) / (tp + fp) : 1.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / (tp + fn) : 1.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
};

inline std::vector<Lane3D> lanes_above(const std::vector<ScoredLane>& preds, double threshold) {
  std::vector<Lane3D> out;
  for (const auto& p : preds)
    if (p.score >= threshold) out.push_back(p.lane);
  return out;
}

// Precision/recall at every threshold with at least one kept prediction,
// matching re-run per threshold and summed over frames; AP is the 11-point
// interpolated mean max-precision at recall >= 0, 0.1, ..., 1.
inline double average_precision(const std::vector<std::vector<ScoredLane>>& preds,
                                 const std::vector<std::vector<Lane3D>>& gts, const EvalConfig& cfg,
                                 std::vector<std::pair<double, double>>* pr_points = nullptr) {
  if (preds.size() != gts.size()) throw ShapeError("average_precision: frame count mismatch");
  std::vector<std::pair<double, double>> pts;  // (recall, precision)
  for (double t : cfg.ap_thresholds) {
    Counts c;
    for (std::size_t f = 0; f < preds.size(); ++f) {
      auto m = match_lanes(lanes_above(preds[f], t), gts[f], cfg);
      c.tp += m.tp();
      c.fp += m.fp();
      c.fn += m.fn();
    }
    if (c.tp + c.fp == 0) continue;
    pts.emplace_back(c.recall(), c.precision());
  }
  if (pr_points) *pr_points = pts;
  double ap = 0.0;
  for (int k = 0; k <= 10; ++k) {
    const double r = k / 10.0;
    double best = 0.0;
    for (const auto& [rec, prec] : pts)
      if (rec >= r - 1e-12) best = std::max(best, prec);
    ap += best;
  }
  return ap / 11.0;
}

struct FrameResult {
  std::string name;
  Counts counts;
  RangeErrors errors;
};

struct EvalResult {
  Counts counts;
  double ap = 0.0;
  RangeErrors errors;
  std::vector<FrameResult> frames;
  double f1() const { return counts.f1(); }
};

inline EvalResult evaluate(const std::vector<std::vector<ScoredLane>>& preds, const std::vector<std::vector<Lane3D>>& gts,
                           const EvalConfig& cfg, const std::vector<std::string>& names = {}) {
  cfg.validate();
  if (preds.size() != gts.size()) throw ShapeError("evaluate: frame count mismatch");
  EvalResult r;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    const auto kept = lanes_above(preds[f], cfg.score_threshold);
    const auto m = match_lanes(kept, gts[f], cfg);
    FrameResult fr;
    fr.name = f < names.size() ? names[f] : std::to_string(f);
    fr.counts = {m.tp(), m.fp(), m.fn()};
    fr.errors = compute_errors(m, kept, gts[f], cfg);
    r.counts.tp += fr.counts.tp;
    r.counts.fp += fr.counts.fp;
    r.counts.fn += fr.counts.fn;
    r.errors.merge(fr.errors);
    r.frames.push_back(std::move(fr));
  }
  r.ap = average_precision(preds, gts, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace metrics_detail {
inline Json mean_json(const MeanStat& s) { return s.mean() ? Json(*s.mean()) : Json(nullptr); }
inline Json errors_json(const RangeErrors& e) {
  Json j{{"x_err_near", mean_json(e.x_near)}, {"x_err_far", mean_json(e.x_far)},
         {"z_err_near", mean_json(e.z_near)}, {"z_err_far", mean_json(e.z_far)},
         {"x_err_all", mean_json(e.x_all)},   {"z_err_all", mean_json(e.z_all)}};
  j["no_matched_points"] = e.x_all.count == 0;
  return j;
}
inline Json counts_json(const Counts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"precision", c.precision()}, {"recall", c.recall()}, {"f1", c.f1()}};
}
inline std::string cell(const std::optional<double>& v, const char* fmt) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, fmt, *v);
  return buf;
}
}  // namespace metrics_detail

inline Json eval_to_json(const EvalResult& r) {
  using namespace metrics_detail;
  Json j = counts_json(r.counts);
  j["ap"] = r.ap;
  j["errors"] = errors_json(r.errors);
  Json frames = Json::array();
  for (const auto& f : r.frames) {
    Json fj = counts_json(f.counts);
    fj["name"] = f.name;
    fj["errors"] = errors_json(f.errors);
    frames.push_back(std::move(fj));
  }
  j["frames"] = std::move(frames);
  return j;
}

struct TableRow {
  std::string label;
  EvalResult result;
};

// Plain-text table with the columns of the results table in the paper:
// F-score and AP in percent, x/z errors near and far in meters.
inline std::string format_table(const std::vector<TableRow>& rows) {
  using metrics_detail::cell;
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.label.size());
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s | %10s | %6s | %10s | %10s | %10s | %10s\n", static_cast<int>(w), "Method",
                "F-Score(%)", "AP(%)", "x-Err/N(m)", "x-Err/F(m)", "z-Err/N(m)", "z-Err/F(m)");
  os << buf << std::string(w, '-') << "-+-" << std::string(10, '-') << "-+-" << std::string(6, '-');
  for (int k = 0; k < 4; ++k) os << "-+-" << std::string(10, '-');
  os << '\n';
  for (const auto& r : rows) {
    const auto& e = r.result.errors;
    std::snprintf(buf, sizeof buf, "%-*s | %10.1f | %6.1f | %10s | %10s | %10s | %10s\n", static_cast<int>(w),
                  r.label.c_str(), 100 * r.result.f1(), 100 * r.result.ap, cell(e.x_near.mean(), "%.3f").c_str(),
                  cell(e.x_far.mean(), "%.3f").c_str(), cell(e.z_near.mean(), "%.3f").c_str(),
                  cell(e.z_far.mean(), "%.3f").c_str());
    os << buf;
  }
  return os.str();
}

}  // namespace d3l
