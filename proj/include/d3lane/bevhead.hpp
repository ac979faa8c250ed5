#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/lane.hpp"
#include "d3lane/network.hpp"
#include "d3lane/nn/layers.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

struct StpConfig {
  int channels = 32;   // BEV feature width
  int groups = 4;      // channel groups sharing one view-transform matrix
  int downsample = 4;  // BEV features live at (rows / 4) x (cols / 4)

  static StpConfig from_config(const Config& c) {
    StpConfig s;
    s.channels = c.get("channels", s.channels);
    s.groups = c.get("groups", s.groups);
    s.downsample = c.get("downsample", s.downsample);
    if (s.channels <= 0 || s.groups <= 0 || s.channels % s.groups != 0)
      throw ConfigError("stp.groups", "must divide stp.channels");
    if (s.downsample <= 0) throw ConfigError("stp.downsample", "must be positive");
    return s;
  }
};

// Spatial Transformation Pyramid. Each scale is reduced to `channels` by a
// 1x1 convolution, split into channel groups, and every group is mapped from
// flattened front-view positions to flattened BEV positions by a learned
// matrix (plus a per-position bias). Scales are summed, then refined by two
// residual blocks in BEV space.
template <class T>
class Stp {
 public:
  Stp() = default;
  // in_channels: channel count of each fused input scale.
  Stp(const std::map<Scale, int>& in_channels, int image_h, int image_w, const BevGrid& grid, const StpConfig& cfg,
      nn::Rng& rng)
      : cfg_(cfg) {
    if (in_channels.empty()) throw ConfigError("stp.scales", "at least one scale required");
    if (grid.rows % cfg.downsample != 0 || grid.cols % cfg.downsample != 0)
      throw ConfigError("stp.downsample", "must divide the BEV grid rows and cols");
    bh_ = grid.rows / cfg.downsample;
    bw_ = grid.cols / cfg.downsample;
    const int nb = bh_ * bw_;
    for (const auto& [s, c] : in_channels) {
      const int st = stride_of(s);
      if (image_h % st != 0 || image_w % st != 0)
        throw ShapeError("stp: image " + std::to_string(image_h) + "x" + std::to_string(image_w) + " not divisible by " +
                         to_string(s));
      Level lv;
      lv.h = image_h / st;
      lv.w = image_w / st;
      const auto name = "stp." + to_string(s);
      lv.reduce = nn::Conv2d<T>(name + ".reduce", c, cfg.channels, 1, 1, rng);
      const int nf = lv.h * lv.w;
      lv.view = nn::Param<T>(name + ".view", {cfg.groups, nb, nf});
      lv.bias = nn::Param<T>(name + ".view_bias", {cfg.groups, nb});
      const double sd = std::sqrt(1.0 / nf);
      for (auto& v : lv.view.value) v = static_cast<T>(sd * rng.normal());
      levels_.emplace(s, std::move(lv));
    }
    block1_ = nn::ResidualBlock<T>("stp.bev1", cfg.channels, rng);
    block2_ = nn::ResidualBlock<T>("stp.bev2", cfg.channels, rng);
  }

  int out_h() const { return bh_; }
  int out_w() const { return bw_; }
  int out_channels() const { return cfg_.channels; }

  Tensor<T> forward(const FeaturePyramid<T>& fused) {
    const int gc = cfg_.channels / cfg_.groups, nb = bh_ * bw_;
    Tensor<T> sum(cfg_.channels, bh_, bw_);
    for (auto& [s, lv] : levels_) {
      auto it = fused.find(s);
      if (it == fused.end()) throw ConfigError("stp.scales", "fused features lack " + to_string(s));
      if (it->second.h != lv.h || it->second.w != lv.w)
        throw ShapeError("stp: " + to_string(s) + " input " + it->second.shape_str() + " does not match configured size");
      lv.reduced = lv.reduce.forward(it->second);
      const int nf = lv.h * lv.w;
      for (int g = 0; g < cfg_.groups; ++g) {
        nn::ConstRowMap<T> x(lv.reduced.data.data() + static_cast<std::size_t>(g) * gc * nf, gc, nf);
        nn::ConstRowMap<T> m(lv.view.value.data() + static_cast<std::size_t>(g) * nb * nf, nb, nf);
        nn::RowMap<T> y(sum.data.data() + static_cast<std::size_t>(g) * gc * nb, gc, nb);
        y.noalias() += x * m.transpose();
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(lv.bias.value.data() + static_cast<std::size_t>(g) * nb, nb);
        y.rowwise() += b;
      }
    }
    return block2_.forward(block1_.forward(relu_.forward(std::move(sum))));
  }

  FeaturePyramid<T> backward(const Tensor<T>& dy) {
    const int gc = cfg_.channels / cfg_.groups, nb = bh_ * bw_;
    Tensor<T> dsum = relu_.backward(block1_.backward(block2_.backward(dy)));
    FeaturePyramid<T> out;
    for (auto& [s, lv] : levels_) {
      const int nf = lv.h * lv.w;
      Tensor<T> dx(cfg_.channels, lv.h, lv.w);
      for (int g = 0; g < cfg_.groups; ++g) {
        nn::ConstRowMap<T> dyg(dsum.data.data() + static_cast<std::size_t>(g) * gc * nb, gc, nb);
        nn::ConstRowMap<T> x(lv.reduced.data.data() + static_cast<std::size_t>(g) * gc * nf, gc, nf);
        nn::ConstRowMap<T> m(lv.view.value.data() + static_cast<std::size_t>(g) * nb * nf, nb, nf);
        nn::RowMap<T> dm(lv.view.grad.data() + static_cast<std::size_t>(g) * nb * nf, nb, nf);
        dm.noalias() += dyg.transpose() * x;
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(lv.bias.grad.data() + static_cast<std::size_t>(g) * nb, nb);
        db += dyg.colwise().sum();
        nn::RowMap<T> dxg(dx.data.data() + static_cast<std::size_t>(g) * gc * nf, gc, nf);
        dxg.noalias() = dyg * m;
      }
      out[s] = lv.reduce.backward(dx);
    }
    return out;
  }

  nn::ParamList<T> params() {
    nn::ParamList<T> p;
    for (auto& [s, lv] : levels_) {
      nn::append(p, lv.reduce.params());
      p.push_back(&lv.view);
      p.push_back(&lv.bias);
    }
    nn::append(p, block1_.params());
    nn::append(p, block2_.params());
    return p;
  }

 private:
  struct Level {
    int h = 0, w = 0;
    nn::Conv2d<T> reduce;
    nn::Param<T> view, bias;
    Tensor<T> reduced;
  };
  StpConfig cfg_;
  int bh_ = 0, bw_ = 0;
  std::map<Scale, Level> levels_;
  nn::Relu<T> relu_;
  nn::ResidualBlock<T> block1_, block2_;
};

// Head outputs on the BEV grid. x_offset is in cell units.
template <class T>
struct BevPrediction {
  Tensor<T> confidence;  // 1 x rows x cols, in [0, 1]
  Tensor<T> embedding;   // E x rows x cols
  Tensor<T> x_offset;    // 1 x rows x cols, in [-0.5, 0.5]
  Tensor<T> height;      // 1 x rows x cols, meters

  static BevPrediction zeros(int rows, int cols, int embed_dim) {
    return {Tensor<T>(1, rows, cols), Tensor<T>(embed_dim, rows, cols), Tensor<T>(1, rows, cols), Tensor<T>(1, rows, cols)};
  }
  int rows() const { return confidence.h; }
  int cols() const { return confidence.w; }
};

// Loss gradients. `confidence` holds dLoss/dlogit (not d/dp), the other
// fields hold dLoss/d(field).
template <class T>
using PredictionGrad = BevPrediction<T>;

struct HeadConfig {
  int embed_dim = 4;
  int hidden = 16;
  bool coord_channels = true;  // append normalized (row, col) maps to the head input

  static HeadConfig from_config(const Config& c) {
    HeadConfig h;
    h.embed_dim = c.get("embed_dim", h.embed_dim);
    h.hidden = c.get("hidden", h.hidden);
    h.coord_channels = c.get("coord_channels", h.coord_channels);
    if (h.embed_dim <= 0 || h.hidden <= 0) throw ConfigError("head.embed_dim", "must be positive");
    return h;
  }
};

// Keypoint head: bilinear upsampling of the BEV features to the grid, then
// conv3x3 + ReLU and a 1x1 output conv. Output channels: confidence logit,
// E embedding channels, offset (0.5 tanh), height.
template <class T>
class BevHead {
 public:
  BevHead() = default;
  BevHead(int in_channels, const BevGrid& grid, const HeadConfig& cfg, nn::Rng& rng)
      : cfg_(cfg), rows_(grid.rows), cols_(grid.cols) {
    const int extra = cfg.coord_channels ? 2 : 0;
    conv_ = nn::Conv2d<T>("head.conv", in_channels + extra, cfg.hidden, 3, 1, rng);
    out_ = nn::Conv2d<T>("head.out", cfg.hidden, 3 + cfg.embed_dim, 1, 1, rng, 0.5);
    in_channels_ = in_channels;
  }

  int embed_dim() const { return cfg_.embed_dim; }

  BevPrediction<T> forward(const Tensor<T>& bev) {
    Tensor<T> up = resize_.forward(bev, rows_, cols_);
    if (cfg_.coord_channels) {
      Tensor<T> coords(2, rows_, cols_);
      for (int r = 0; r < rows_; ++r)
        for (int c = 0; c < cols_; ++c) {
          coords(0, r, c) = static_cast<T>(2.0 * (r + 0.5) / rows_ - 1.0);
          coords(1, r, c) = static_cast<T>(2.0 * (c + 0.5) / cols_ - 1.0);
        }
      up = concat_channels(up, coords);
    }
    raw_ = out_.forward(relu_.forward(conv_.forward(up)));
    const int E = cfg_.embed_dim;
    auto p = BevPrediction<T>::zeros(rows_, cols_, E);
    const int n = rows_ * cols_;
    for (int i = 0; i < n; ++i) {
      p.confidence.data[i] = nn::sigmoid(raw_.data[i]);
      for (int e = 0; e < E; ++e)
        p.embedding.data[static_cast<std::size_t>(e) * n + i] = raw_.data[static_cast<std::size_t>(1 + e) * n + i];
      p.x_offset.data[i] = static_cast<T>(0.5) * std::tanh(raw_.data[static_cast<std::size_t>(1 + E) * n + i]);
      p.height.data[i] = raw_.data[static_cast<std::size_t>(2 + E) * n + i];
    }
    last_offset_ = p.x_offset;
    return p;
  }

  Tensor<T> backward(const PredictionGrad<T>& g) {
    const int E = cfg_.embed_dim, n = rows_ * cols_;
    Tensor<T> d(raw_.c, rows_, cols_);
    for (int i = 0; i < n; ++i) {
      d.data[i] = g.confidence.data[i];
      for (int e = 0; e < E; ++e)
        d.data[static_cast<std::size_t>(1 + e) * n + i] = g.embedding.data[static_cast<std::size_t>(e) * n + i];
      const T o = last_offset_.data[i];  // 0.5 tanh(z): d/dz = 0.5 (1 - tanh^2) = 0.5 - 2 o^2
      d.data[static_cast<std::size_t>(1 + E) * n + i] = g.x_offset.data[i] * (static_cast<T>(0.5) - 2 * o * o);
      d.data[static_cast<std::size_t>(2 + E) * n + i] = g.height.data[i];
    }
    Tensor<T> dup = conv_.backward(relu_.backward(out_.backward(d)));
    if (cfg_.coord_channels) dup = split_channels(dup, in_channels_).first;
    return resize_.backward(dup);
  }

  nn::ParamList<T> params() {
    auto p = conv_.params();
    nn::append(p, out_.params());
    return p;
  }

 private:
  HeadConfig cfg_;
  int rows_ = 0, cols_ = 0, in_channels_ = 0;
  nn::BilinearResize<T> resize_;
  nn::Conv2d<T> conv_, out_;
  nn::Relu<T> relu_;
  Tensor<T> raw_, last_offset_;
};

// ---------------------------------------------------------------------------
// Losses

struct HeadLossConfig {
  double w_confidence = 1.0, w_offset = 1.0, w_height = 1.0, w_embedding = 1.0;
  double margin = 1.0;  // push hinge margin between lane mean embeddings
  double pos_weight = 1.0;  // weight of positive cells inside the BCE

  static HeadLossConfig from_config(const Config& c) {
    HeadLossConfig h;
    h.w_confidence = c.get("w_confidence", h.w_confidence);
    h.w_offset = c.get("w_offset", h.w_offset);
    h.w_height = c.get("w_height", h.w_height);
    h.w_embedding = c.get("w_embedding", h.w_embedding);
    h.margin = c.get("margin", h.margin);
    h.pos_weight = c.get("pos_weight", h.pos_weight);
    if (!(h.margin > 0)) throw ConfigError("loss.margin", "must be positive");
    if (!(h.pos_weight > 0)) throw ConfigError("loss.pos_weight", "must be positive");
    return h;
  }
};

template <class T>
struct HeadLosses {
  LossValue<T> confidence, offset, height, embedding;
  double total(const HeadLossConfig& w) const {
    return w.w_confidence * confidence.value + w.w_offset * offset.value + w.w_height * height.value +
           w.w_embedding * embedding.value;
  }
};

// Ground-truth rasters the losses consume (see data.hpp rasterize_gt).
template <class T>
struct HeadTargets {
  const Tensor<float>* confidence;
  const Tensor<float>* offset;
  const Tensor<float>* height;
  const std::vector<int>* instance;
};

namespace detail {
inline double xlogy_neg(double coef, double p) {
  if (coef == 0.0) return 0.0;
  return -coef * std::log(std::clamp(p, 1e-12, 1.0));
}
}  // namespace detail

// confidence: (weighted) BCE averaged over all cells; offset / height: L1
// averaged over positive cells; embedding: pull to each lane's mean plus a
// squared hinge pushing lane means at least `margin` apart. `grad`, when
// given, receives the weighted gradient of the total.
template <class T>
HeadLosses<T> head_losses(const BevPrediction<T>& pred, const HeadTargets<T>& gt, const HeadLossConfig& cfg,
                          PredictionGrad<T>* grad = nullptr) {
  const int rows = pred.rows(), cols = pred.cols(), n = rows * cols, E = pred.embedding.c;
  if (gt.confidence->h != rows || gt.confidence->w != cols || static_cast<int>(gt.instance->size()) != n)
    throw ShapeError("head_losses: prediction " + pred.confidence.shape_str() + " vs targets " +
                     gt.confidence->shape_str());
  HeadLosses<T> L;
  if (grad) *grad = BevPrediction<T>::zeros(rows, cols, E);

  // confidence
  double bce = 0.0;
  for (int i = 0; i < n; ++i) {
    const double p = pred.confidence.data[i], t = gt.confidence->data[i];
    const double wp = cfg.pos_weight * t;
    bce += detail::xlogy_neg(wp, p) + detail::xlogy_neg(1.0 - t, 1.0 - p);
    // d/dz of -(wp log p + (1-t) log(1-p)) with p = sigmoid(z)
    if (grad) grad->confidence.data[i] = static_cast<T>(cfg.w_confidence * (p * (wp + 1.0 - t) - wp) / n);
  }
  L.confidence.value = bce / n;

  std::map<int, std::vector<int>> lanes;
  for (int i = 0; i < n; ++i)
    if ((*gt.instance)[i] > 0) lanes[(*gt.instance)[i]].push_back(i);
  int npos = 0;
  for (auto& [k, v] : lanes) npos += static_cast<int>(v.size());
  if (npos == 0) {
    L.offset.flagged = L.height.flagged = L.embedding.flagged = true;
    return L;
  }

  double off = 0.0, hgt = 0.0;
  for (const auto& [k, cells] : lanes) {
    for (int i : cells) {
      const double d_o = static_cast<double>(pred.x_offset.data[i]) - gt.offset->data[i];
      const double d_h = static_cast<double>(pred.height.data[i]) - gt.height->data[i];
      off += std::abs(d_o);
      hgt += std::abs(d_h);
      if (grad) {
        grad->x_offset.data[i] = static_cast<T>(cfg.w_offset * (d_o > 0 ? 1.0 : d_o < 0 ? -1.0 : 0.0) / npos);
        grad->height.data[i] = static_cast<T>(cfg.w_height * (d_h > 0 ? 1.0 : d_h < 0 ? -1.0 : 0.0) / npos);
      }
    }
  }
  L.offset.value = off / npos;
  L.height.value = hgt / npos;

  // embedding
  const int K = static_cast<int>(lanes.size());
  std::vector<std::vector<double>> mu;
  std::vector<const std::vector<int>*> sets;
  for (const auto& [k, cells] : lanes) {
    std::vector<double> m(static_cast<std::size_t>(E), 0.0);
    for (int i : cells)
      for (int e = 0; e < E; ++e) m[static_cast<std::size_t>(e)] += pred.embedding.data[static_cast<std::size_t>(e) * n + i];
    for (auto& v : m) v /= static_cast<double>(cells.size());
    mu.push_back(std::move(m));
    sets.push_back(&cells);
  }
  double pull = 0.0;
  for (int k = 0; k < K; ++k) {
    const auto& cells = *sets[static_cast<std::size_t>(k)];
    const double inv = 1.0 / (K * static_cast<double>(cells.size()));
    for (int i : cells)
      for (int e = 0; e < E; ++e) {
        const auto ei = static_cast<std::size_t>(e) * n + i;
        const double d = pred.embedding.data[ei] - mu[static_cast<std::size_t>(k)][static_cast<std::size_t>(e)];
        pull += inv * d * d;
        if (grad) grad->embedding.data[ei] += static_cast<T>(cfg.w_embedding * 2.0 * inv * d);
      }
  }
  double push = 0.0;
  if (K > 1) {
    const double pairs = K * (K - 1) / 2.0;
    for (int a = 0; a < K; ++a)
      for (int b = a + 1; b < K; ++b) {
        double dist2 = 0.0;
        for (int e = 0; e < E; ++e) {
          const double d = mu[static_cast<std::size_t>(a)][static_cast<std::size_t>(e)] - mu[static_cast<std::size_t>(b)][static_cast<std::size_t>(e)];
          dist2 += d * d;
        }
        const double dist = std::sqrt(dist2);
        if (dist >= cfg.margin) continue;
        const double h = cfg.margin - dist;
        push += h * h / pairs;
        if (!grad || dist == 0.0) continue;
        // d/dmu_a = -2 h (mu_a - mu_b) / (dist * pairs); spread over the lane's cells
        for (int side = 0; side < 2; ++side) {
          const int self = side == 0 ? a : b, other = side == 0 ? b : a;
          const auto& cells = *sets[static_cast<std::size_t>(self)];
          for (int e = 0; e < E; ++e) {
            const double dmu = -2.0 * h *
                               (mu[static_cast<std::size_t>(self)][static_cast<std::size_t>(e)] - mu[static_cast<std::size_t>(other)][static_cast<std::size_t>(e)]) /
                               (dist * pairs);
            const double per = cfg.w_embedding * dmu / static_cast<double>(cells.size());
            for (int i : cells) grad->embedding.data[static_cast<std::size_t>(e) * n + i] += static_cast<T>(per);
          }
        }
      }
  }
  L.embedding.value = pull + push;
  return L;
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeConfig {
  double conf_threshold = 0.5;
  double embed_threshold = 0.5;

  static DecodeConfig from_config(const Config& c) {
    DecodeConfig d;
    d.conf_threshold = c.get("conf_threshold", d.conf_threshold);
    d.embed_threshold = c.get("embed_threshold", d.embed_threshold);
    if (!(d.conf_threshold > 0 && d.conf_threshold < 1)) throw ConfigError("decode.conf_threshold", "must lie in (0, 1)");
    if (!(d.embed_threshold > 0)) throw ConfigError("decode.embed_threshold", "must be positive");
    return d;
  }
};

// Greedy embedding linkage over cells with confidence above the threshold,
// visited by descending confidence (ties by cell index). A cell joins the
// cluster with the nearest mean embedding when that distance is below
// embed_threshold, otherwise it starts a new cluster. Returns cell indices
// (r * cols + c) per cluster in creation order.
template <class T>
std::vector<std::vector<int>> cluster_cells(const BevPrediction<T>& pred, const DecodeConfig& cfg) {
  const int n = pred.rows() * pred.cols(), E = pred.embedding.c;
  std::vector<int> order;
  for (int i = 0; i < n; ++i)
    if (pred.confidence.data[i] > cfg.conf_threshold) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return pred.confidence.data[a] > pred.confidence.data[b]; });
  std::vector<std::vector<int>> clusters;
  std::vector<std::vector<double>> sums;
  for (int i : order) {
    int best = -1;
    double best_d = cfg.embed_threshold;
    for (std::size_t k = 0; k < clusters.size(); ++k) {
      double d2 = 0.0;
      for (int e = 0; e < E; ++e) {
        const double m = sums[k][static_cast<std::size_t>(e)] / static_cast<double>(clusters[k].size());
        const double d = pred.embedding.data[static_cast<std::size_t>(e) * n + i] - m;
        d2 += d * d;
      }
      const double d = std::sqrt(d2);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    if (best < 0) {
      clusters.emplace_back();
      sums.emplace_back(static_cast<std::size_t>(E), 0.0);
      best = static_cast<int>(clusters.size()) - 1;
    }
    clusters[static_cast<std::size_t>(best)].push_back(i);
    for (int e = 0; e < E; ++e)
      sums[static_cast<std::size_t>(best)][static_cast<std::size_t>(e)] += pred.embedding.data[static_cast<std::size_t>(e) * n + i];
  }
  return clusters;
}

// Turns each cluster into a lane: per grid row the highest-confidence cell
// (ties to the lower column) gives x = center + offset * dx, y = row center,
// z = height. Clusters covering fewer than 2 rows are dropped. The score is
// the mean confidence of the chosen cells.
template <class T>
std::vector<ScoredLane> decode_instances(const BevPrediction<T>& pred, const DecodeConfig& cfg, const BevGrid& grid) {
  if (pred.rows() != grid.rows || pred.cols() != grid.cols)
    throw ShapeError("decode_instances: prediction " + pred.confidence.shape_str() + " does not match the BEV grid");
  std::vector<ScoredLane> out;
  for (const auto& cells : cluster_cells(pred, cfg)) {
    std::map<int, int> best;  // row -> cell
    for (int i : cells) {
      const int r = i / grid.cols;
      auto it = best.find(r);
      if (it == best.end()) {
        best.emplace(r, i);
        continue;
      }
      const T ci = pred.confidence.data[i], cb = pred.confidence.data[it->second];
      if (ci > cb || (ci == cb && i < it->second)) it->second = i;
    }
    if (best.size() < 2) continue;
    ScoredLane sl;
    double score = 0.0;
    for (const auto& [r, i] : best) {
      const int c = i % grid.cols;
      sl.lane.points.emplace_back(grid.center_x(c) + static_cast<double>(pred.x_offset.data[i]) * grid.dx,
                                  grid.center_y(r), static_cast<double>(pred.height.data[i]));
      score += pred.confidence.data[i];
    }
    sl.score = score / static_cast<double>(best.size());
    out.push_back(std::move(sl));
  }
  return out;
}

}  // namespace d3l
