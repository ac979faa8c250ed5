#pragma once

// Front-view residual backbone and the hierarchical depth-aware head.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/nn/layers.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

// Downsampling factor of a pyramid level relative to the input image.
enum class Scale : int { S8 = 8, S16 = 16, S32 = 32, S64 = 64, S128 = 128 };

inline constexpr Scale kAllScales[] = {Scale::S8, Scale::S16, Scale::S32, Scale::S64, Scale::S128};

inline int stride_of(Scale s) { return static_cast<int>(s); }
inline std::string to_string(Scale s) { return "S" + std::to_string(stride_of(s)); }
inline Scale parse_scale(const std::string& tag) {
  for (Scale s : kAllScales)
    if (to_string(s) == tag) return s;
  throw ConfigError("scale", "unknown scale tag '" + tag + "'");
}

template <class T>
using FeaturePyramid = std::map<Scale, Tensor<T>>;

struct NetworkConfig {
  int stem_channels = 8;
  // Channels of the S4, S8, S16, S32, S64, S128 stages.
  std::vector<int> stage_channels{16, 24, 32, 32, 32, 32};
  int decoder_channels = 8;

  int channels(Scale s) const {
    switch (s) {
      case Scale::S8: return stage_channels[1];
      case Scale::S16: return stage_channels[2];
      case Scale::S32: return stage_channels[3];
      case Scale::S64: return stage_channels[4];
      case Scale::S128: return stage_channels[5];
    }
    return 0;
  }

  static NetworkConfig from_config(const Config& c) {
    NetworkConfig n;
    n.stem_channels = c.get("stem_channels", n.stem_channels);
    auto list = c.get_list("stage_channels", {});
    if (!list.empty()) {
      if (list.size() != 6) throw ConfigError("stage_channels", "expected 6 comma separated values");
      for (std::size_t i = 0; i < 6; ++i) n.stage_channels[i] = std::stoi(list[i]);
    }
    n.decoder_channels = c.get("decoder_channels", n.decoder_channels);
    return n;
  }
};

// Strided residual stages. Stage k (k = 0..5) runs at stride 4 * 2^k, so the
// first four stages reach S32 and two extra stages produce S64 and S128.
template <class T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(const NetworkConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    stem_ = nn::Conv2d<T>("backbone.stem", 3, cfg.stem_channels, 3, 2, rng);
    int in = cfg.stem_channels;
    for (std::size_t k = 0; k < cfg.stage_channels.size(); ++k) {
      const int out = cfg.stage_channels[k];
      const auto name = "backbone.stage" + std::to_string(k);
      stages_.push_back(Stage{nn::Conv2d<T>(name + ".down", in, out, 3, 2, rng), {},
                              nn::ResidualBlock<T>(name + ".res", out, rng)});
      in = out;
    }
  }

  // Runs the network just deep enough to produce every requested level.
  FeaturePyramid<T> forward(const Tensor<T>& image, const std::set<Scale>& tags) {
    if (image.c != 3) throw ShapeError("backbone: expected 3-channel image, got " + image.shape_str());
    if (tags.empty()) throw ConfigError("scales", "no pyramid level requested");
    const int deepest = stride_of(*tags.rbegin());
    if (image.h % deepest != 0 || image.w % deepest != 0 || image.h < deepest || image.w < deepest)
      throw ShapeError("backbone: input " + image.shape_str() + " not divisible by " + std::to_string(deepest));
    ran_ = stage_index(deepest) + 1;
    Tensor<T> x = stem_relu_.forward(stem_.forward(image));
    FeaturePyramid<T> out;
    for (int k = 0; k < ran_; ++k) {
      auto& st = stages_[static_cast<std::size_t>(k)];
      x = st.res.forward(st.relu.forward(st.down.forward(x)));
      const int stride = 4 << k;
      if (stride >= 8) {
        Scale s = static_cast<Scale>(stride);
        if (tags.count(s)) out[s] = x;
      }
    }
    return out;
  }

  // Accumulates parameter gradients given gradients w.r.t. pyramid levels.
  void backward(const FeaturePyramid<T>& grads) {
    Tensor<T> g;
    for (int k = ran_ - 1; k >= 0; --k) {
      auto& st = stages_[static_cast<std::size_t>(k)];
      const int stride = 4 << k;
      if (stride >= 8) {
        auto it = grads.find(static_cast<Scale>(stride));
        if (it != grads.end()) {
          if (g.empty()) g = it->second;
          else add_inplace(g, it->second);
        }
      }
      if (g.empty()) continue;  // nothing downstream of this stage needs gradients yet
      g = st.down.backward(st.relu.backward(st.res.backward(g)));
    }
    if (!g.empty()) stem_.backward(stem_relu_.backward(g));
  }

  nn::ParamList<T> params() {
    auto p = stem_.params();
    for (auto& st : stages_) {
      nn::append(p, st.down.params());
      nn::append(p, st.res.params());
    }
    return p;
  }

  const NetworkConfig& config() const { return cfg_; }

 private:
  static int stage_index(int stride) {
    int k = 0;
    while ((4 << k) < stride) ++k;
    return k;
  }
  struct Stage {
    nn::Conv2d<T> down;
    nn::Relu<T> relu;
    nn::ResidualBlock<T> res;
  };
  NetworkConfig cfg_;
  nn::Conv2d<T> stem_;
  nn::Relu<T> stem_relu_;
  std::vector<Stage> stages_;
  int ran_ = 0;
};

// Normalized inverse depth in [0, 1], same spatial size as the input image.
template <class T>
struct DepthPrediction {
  Tensor<T> depth;
};

template <class T>
struct HdahOutput {
  std::optional<DepthPrediction<T>> depth;  // present in training mode only
  FeaturePyramid<T> taps;
};

// U-Net style head: an encoder that mirrors every backbone level it is given
// (taps feed the rest of the network in both modes) and an auxiliary decoder
// that reconstructs a full-resolution depth map in training mode only.
template <class T>
class DepthAwareHead {
 public:
  DepthAwareHead() = default;
  DepthAwareHead(const NetworkConfig& cfg, const std::set<Scale>& levels, nn::Rng& rng) : levels_(levels) {
    if (levels.empty()) throw ConfigError("hdah.levels", "at least one level required");
    std::optional<Scale> prev;
    for (Scale s : levels) {
      if (prev && stride_of(s) != 2 * stride_of(*prev))
        throw ConfigError("hdah.levels", "levels must be consecutive scales");
      const auto name = "hdah.enc." + to_string(s);
      Enc e;
      e.lateral = nn::Conv2d<T>(name + ".lateral", cfg.channels(s), cfg.channels(s), 1, 1, rng);
      if (prev) e.down = nn::Conv2d<T>(name + ".down", cfg.channels(*prev), cfg.channels(s), 3, 2, rng, 0.5);
      e.has_down = prev.has_value();
      enc_.emplace(s, std::move(e));
      prev = s;
    }
    // Decoder steps from the deepest level back to the shallowest one.
    for (auto it = levels.rbegin(); std::next(it) != levels.rend(); ++it) {
      Scale from = *it, to = *std::next(it);
      dec_.push_back(Dec{to, nn::Conv2d<T>("hdah.dec." + to_string(to), cfg.channels(from) + cfg.channels(to),
                                           cfg.channels(to), 3, 1, rng),
                         {}});
    }
    // Remaining x2 steps up to full resolution.
    int ch = cfg.channels(*levels.begin());
    for (int stride = stride_of(*levels.begin()) / 2; stride >= 2; stride /= 2) {
      tail_.push_back(Tail{nn::Conv2d<T>("hdah.up" + std::to_string(stride), ch, cfg.decoder_channels, 3, 1, rng), {}});
      ch = cfg.decoder_channels;
    }
    out_ = nn::Conv2d<T>("hdah.out", ch, 1, 1, 1, rng);
  }

  const std::set<Scale>& levels() const { return levels_; }
  int decoder_runs() const { return decoder_runs_; }

  HdahOutput<T> forward(const FeaturePyramid<T>& pyramid, bool training) {
    HdahOutput<T> out;
    std::optional<Scale> prev;
    for (Scale s : levels_) {
      auto it = pyramid.find(s);
      if (it == pyramid.end()) throw ConfigError("hdah.levels", "pyramid lacks " + to_string(s));
      auto& e = enc_.at(s);
      Tensor<T> z = e.lateral.forward(it->second);
      if (e.has_down) add_inplace(z, e.down.forward(out.taps.at(*prev)));
      out.taps[s] = e.relu.forward(std::move(z));
      prev = s;
    }
    if (!training) {
      trained_forward_ = false;
      return out;
    }
    ++decoder_runs_;
    trained_forward_ = true;
    Tensor<T> d = out.taps.at(*levels_.rbegin());
    for (auto& step : dec_) {
      d = step.relu.forward(step.conv.forward(concat_channels(nn::upsample_nearest(d, 2), out.taps.at(step.to))));
    }
    for (auto& t : tail_) d = t.relu.forward(t.conv.forward(nn::upsample_nearest(d, 2)));
    d = out_.forward(nn::upsample_nearest(d, 2));
    for (auto& v : d.data) v = nn::sigmoid(v);
    depth_out_ = d;
    out.depth = DepthPrediction<T>{std::move(d)};
    return out;
  }

  // grad_taps: gradients w.r.t. the encoder taps from downstream consumers.
  // grad_depth: gradient w.r.t. the predicted depth (ignored in inference).
  // Returns gradients w.r.t. the input pyramid levels.
  FeaturePyramid<T> backward(const FeaturePyramid<T>& grad_taps, const Tensor<T>* grad_depth) {
    FeaturePyramid<T> g_taps = grad_taps;
    auto acc = [&](Scale s, const Tensor<T>& g) {
      auto it = g_taps.find(s);
      if (it == g_taps.end()) g_taps[s] = g;
      else add_inplace(it->second, g);
    };
    if (trained_forward_ && grad_depth) {
      Tensor<T> g = *grad_depth;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T y = depth_out_.data[i];
        g.data[i] *= y * (1 - y);
      }
      g = nn::upsample_nearest_backward(out_.backward(g), 2);
      for (auto it = tail_.rbegin(); it != tail_.rend(); ++it)
        g = nn::upsample_nearest_backward(it->conv.backward(it->relu.backward(g)), 2);
      for (auto it = dec_.rbegin(); it != dec_.rend(); ++it) {
        Tensor<T> gc = it->conv.backward(it->relu.backward(g));
        const int up_c = gc.c - enc_channels(it->to);
        auto [g_up, g_skip] = split_channels(gc, up_c);
        acc(it->to, g_skip);
        g = nn::upsample_nearest_backward(g_up, 2);
      }
      acc(*levels_.rbegin(), g);
    }
    FeaturePyramid<T> g_in;
    for (auto it = levels_.rbegin(); it != levels_.rend(); ++it) {
      auto git = g_taps.find(*it);
      if (git == g_taps.end()) continue;
      auto& e = enc_.at(*it);
      Tensor<T> gz = e.relu.backward(git->second);
      g_in[*it] = e.lateral.backward(gz);
      if (e.has_down) acc(*std::next(it), e.down.backward(gz));
    }
    return g_in;
  }

  nn::ParamList<T> params() {
    nn::ParamList<T> p;
    for (auto& [s, e] : enc_) {
      nn::append(p, e.lateral.params());
      if (e.has_down) nn::append(p, e.down.params());
    }
    for (auto& d : dec_) nn::append(p, d.conv.params());
    for (auto& t : tail_) nn::append(p, t.conv.params());
    nn::append(p, out_.params());
    return p;
  }

 private:
  int enc_channels(Scale s) { return enc_.at(s).lateral.out_channels(); }

  struct Enc {
    nn::Conv2d<T> lateral, down;
    nn::Relu<T> relu;
    bool has_down = false;
  };
  struct Dec {
    Scale to;
    nn::Conv2d<T> conv;
    nn::Relu<T> relu;
  };
  struct Tail {
    nn::Conv2d<T> conv;
    nn::Relu<T> relu;
  };
  std::set<Scale> levels_;
  std::map<Scale, Enc> enc_;
  std::vector<Dec> dec_;
  std::vector<Tail> tail_;
  nn::Conv2d<T> out_;
  Tensor<T> depth_out_;
  bool trained_forward_ = false;
  int decoder_runs_ = 0;
};

template <class T>
struct LossValue {
  double value = 0.0;
  bool flagged = false;  // degenerate input (empty mask / no positives / zero variance)
};

// Mean absolute error over valid pixels, in normalized inverse depth.
// grad (optional) receives dLoss/dpred.
template <class T>
LossValue<T> depth_supervision_loss(const Tensor<T>& pred, const Tensor<T>& target,
                                    const std::vector<std::uint8_t>& valid_mask, Tensor<T>* grad = nullptr) {
  require_same_shape(pred, target, "depth_supervision_loss");
  if (valid_mask.size() != pred.size()) throw ShapeError("depth_supervision_loss: mask size mismatch");
  std::size_t n = 0;
  for (auto m : valid_mask) n += m != 0;
  if (grad) *grad = Tensor<T>(pred.c, pred.h, pred.w);
  if (n == 0) return {0.0, true};
  double s = 0.0;
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid_mask[i]) continue;
    const double d = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
    s += std::abs(d);
    if (grad) grad->data[i] = d > 0 ? inv : (d < 0 ? -inv : T(0));
  }
  return {s / static_cast<double>(n), false};
}

}  // namespace d3l
