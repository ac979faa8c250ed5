#pragma once

// Minimal layer set with explicit forward/backward passes. Every layer caches
// what its backward pass needs during forward; a layer instance is therefore
// used at most once per forward pass.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d3lane/error.hpp"
#include "d3lane/nn/rng.hpp"
#include "d3lane/tensor.hpp"

namespace d3l::nn {

template <class T>
struct Param {
  std::string name;
  std::vector<int> shape;
  Buffer<T> value;
  Buffer<T> grad;

  Param() = default;
  Param(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <class T>
using ParamList = std::vector<Param<T>*>;

template <class T>
void append(ParamList<T>& dst, const ParamList<T>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

// Square-kernel 2D convolution with "same" padding (k / 2) and optional stride.
template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_c, int out_c, int k, int stride, Rng& rng, double gain = 1.0)
      : in_c_(in_c), out_c_(out_c), k_(k), stride_(stride),
        weight_(name + ".weight", {out_c, in_c, k, k}), bias_(name + ".bias", {out_c}) {
    const double std = gain * std::sqrt(2.0 / (in_c * k * k));
    for (auto& v : weight_.value) v = static_cast<T>(std * rng.normal());
  }

  int out_channels() const { return out_c_; }
  int out_size(int n) const { return (n + 2 * (k_ / 2) - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) {
    if (x.c != in_c_) throw ShapeError(weight_.name + ": expected " + std::to_string(in_c_) + " channels, got " + x.shape_str());
    in_h_ = x.h;
    in_w_ = x.w;
    const int oh = out_size(x.h), ow = out_size(x.w);
    Tensor<T> y(out_c_, oh, ow);
    ConstRowMap<T> W(weight_.value.data(), out_c_, in_c_ * k_ * k_);
    if (pointwise()) {
      input_ = x;
      y.mat().noalias() = W * x.mat();
    } else {
      im2col(x, oh, ow);
      ConstRowMap<T> C(cols_.data(), in_c_ * k_ * k_, oh * ow);
      y.mat().noalias() = W * C;
    }
    for (int o = 0; o < out_c_; ++o) {
      const T b = bias_.value[o];
      for (auto& v : y.channel(o)) v += b;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const int rows = in_c_ * k_ * k_;
    const int n = dy.plane();
    ConstRowMap<T> W(weight_.value.data(), out_c_, rows);
    RowMap<T> dW(weight_.grad.data(), out_c_, rows);
    for (int o = 0; o < out_c_; ++o) {
      T s = 0;
      for (T v : dy.channel(o)) s += v;
      bias_.grad[o] += s;
    }
    Tensor<T> dx(in_c_, in_h_, in_w_);
    if (pointwise()) {
      dW.noalias() += dy.mat() * input_.mat().transpose();
      dx.mat().noalias() = W.transpose() * dy.mat();
    } else {
      ConstRowMap<T> C(cols_.data(), rows, n);
      dW.noalias() += dy.mat() * C.transpose();
      dcols_.resize(static_cast<std::size_t>(rows) * n);
      RowMap<T> dC(dcols_.data(), rows, n);
      dC.noalias() = W.transpose() * dy.mat();
      col2im(dx, dy.h, dy.w);
    }
    return dx;
  }

  ParamList<T> params() { return {&weight_, &bias_}; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1; }

  void im2col(const Tensor<T>& x, int oh, int ow) {
    const int pad = k_ / 2;
    const int n = oh * ow;
    cols_.assign(static_cast<std::size_t>(in_c_) * k_ * k_ * n, T(0));
    for (int ci = 0; ci < in_c_; ++ci)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          T* row = cols_.data() + static_cast<std::size_t>((ci * k_ + ky) * k_ + kx) * n;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ + ky - pad;
            if (iy < 0 || iy >= x.h) continue;
            const T* src = x.data.data() + (static_cast<std::size_t>(ci) * x.h + iy) * x.w;
            T* dst = row + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ + kx - pad;
              if (ix >= 0 && ix < x.w) dst[ox] = src[ix];
            }
          }
        }
  }

  void col2im(Tensor<T>& dx, int oh, int ow) const {
    const int pad = k_ / 2;
    const int n = oh * ow;
    for (int ci = 0; ci < in_c_; ++ci)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = dcols_.data() + static_cast<std::size_t>((ci * k_ + ky) * k_ + kx) * n;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride_ + ky - pad;
            if (iy < 0 || iy >= dx.h) continue;
            T* dst = dx.data.data() + (static_cast<std::size_t>(ci) * dx.h + iy) * dx.w;
            const T* src = row + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride_ + kx - pad;
              if (ix >= 0 && ix < dx.w) dst[ix] += src[ox];
            }
          }
        }
  }

  int in_c_ = 0, out_c_ = 0, k_ = 1, stride_ = 1;
  int in_h_ = 0, in_w_ = 0;
  Param<T> weight_, bias_;
  Buffer<T> cols_, dcols_;
  Tensor<T> input_;
};

template <class T>
class Relu {
 public:
  Tensor<T> forward(Tensor<T> x) {
    for (auto& v : x.data) v = v > T(0) ? v : T(0);
    out_ = x;
    return x;
  }
  Tensor<T> backward(Tensor<T> dy) const {
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (!(out_.data[i] > T(0))) dy.data[i] = T(0);
    return dy;
  }

 private:
  Tensor<T> out_;
};

// conv3x3 -> relu -> conv3x3, plus identity skip, then relu.
template <class T>
class ResidualBlock {
 public:
  ResidualBlock() = default;
  ResidualBlock(const std::string& name, int channels, Rng& rng)
      : conv1_(name + ".conv1", channels, channels, 3, 1, rng),
        conv2_(name + ".conv2", channels, channels, 3, 1, rng, 0.5) {}

  Tensor<T> forward(const Tensor<T>& x) {
    Tensor<T> h = conv2_.forward(relu1_.forward(conv1_.forward(x)));
    add_inplace(h, x);
    return relu_out_.forward(std::move(h));
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = relu_out_.backward(dy);
    Tensor<T> dx = conv1_.backward(relu1_.backward(conv2_.backward(g)));
    add_inplace(dx, g);
    return dx;
  }
  ParamList<T> params() {
    auto p = conv1_.params();
    append(p, conv2_.params());
    return p;
  }

 private:
  Conv2d<T> conv1_, conv2_;
  Relu<T> relu1_, relu_out_;
};

// Nearest-neighbour upsampling by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int f) {
  Tensor<T> y(x.c, x.h * f, x.w * f);
  for (int ch = 0; ch < x.c; ++ch)
    for (int yy = 0; yy < y.h; ++yy)
      for (int xx = 0; xx < y.w; ++xx) y(ch, yy, xx) = x(ch, yy / f, xx / f);
  return y;
}

template <class T>
Tensor<T> upsample_nearest_backward(const Tensor<T>& dy, int f) {
  Tensor<T> dx(dy.c, dy.h / f, dy.w / f);
  for (int ch = 0; ch < dy.c; ++ch)
    for (int yy = 0; yy < dy.h; ++yy)
      for (int xx = 0; xx < dy.w; ++xx) dx(ch, yy / f, xx / f) += dy(ch, yy, xx);
  return dx;
}

// Bilinear resize (align_corners = false) as an explicit linear operator so
// its adjoint is available for backward.
template <class T>
class BilinearResize {
 public:
  Tensor<T> forward(const Tensor<T>& x, int out_h, int out_w) {
    in_h_ = x.h;
    in_w_ = x.w;
    build(out_h, out_w);
    Tensor<T> y(x.c, out_h, out_w);
    for (int ch = 0; ch < x.c; ++ch)
      for (std::size_t i = 0; i < taps_.size(); ++i) {
        const Tap& t = taps_[i];
        y.data[static_cast<std::size_t>(ch) * y.plane() + i] =
            t.w[0] * x.data[static_cast<std::size_t>(ch) * x.plane() + t.idx[0]] +
            t.w[1] * x.data[static_cast<std::size_t>(ch) * x.plane() + t.idx[1]] +
            t.w[2] * x.data[static_cast<std::size_t>(ch) * x.plane() + t.idx[2]] +
            t.w[3] * x.data[static_cast<std::size_t>(ch) * x.plane() + t.idx[3]];
      }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) const {
    Tensor<T> dx(dy.c, in_h_, in_w_);
    for (int ch = 0; ch < dy.c; ++ch)
      for (std::size_t i = 0; i < taps_.size(); ++i) {
        const Tap& t = taps_[i];
        const T g = dy.data[static_cast<std::size_t>(ch) * dy.plane() + i];
        for (int k = 0; k < 4; ++k) dx.data[static_cast<std::size_t>(ch) * dx.plane() + t.idx[k]] += t.w[k] * g;
      }
    return dx;
  }

 private:
  struct Tap {
    int idx[4];
    T w[4];
  };
  void build(int out_h, int out_w) {
    if (out_h == out_h_ && out_w == out_w_ && static_cast<int>(taps_.size()) == out_h * out_w && built_h_ == in_h_ &&
        built_w_ == in_w_)
      return;
    out_h_ = out_h;
    out_w_ = out_w;
    built_h_ = in_h_;
    built_w_ = in_w_;
    taps_.resize(static_cast<std::size_t>(out_h) * out_w);
    const double sy = static_cast<double>(in_h_) / out_h, sx = static_cast<double>(in_w_) / out_w;
    for (int y = 0; y < out_h; ++y) {
      double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, in_h_ - 1.0);
      int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, in_h_ - 1);
      double ay = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, in_w_ - 1.0);
        int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, in_w_ - 1);
        double ax = fx - x0;
        Tap& t = taps_[static_cast<std::size_t>(y) * out_w + x];
        t.idx[0] = y0 * in_w_ + x0;
        t.idx[1] = y0 * in_w_ + x1;
        t.idx[2] = y1 * in_w_ + x0;
        t.idx[3] = y1 * in_w_ + x1;
        t.w[0] = static_cast<T>((1 - ay) * (1 - ax));
        t.w[1] = static_cast<T>((1 - ay) * ax);
        t.w[2] = static_cast<T>(ay * (1 - ax));
        t.w[3] = static_cast<T>(ay * ax);
      }
    }
  }
  int in_h_ = 0, in_w_ = 0, out_h_ = -1, out_w_ = -1, built_h_ = -1, built_w_ = -1;
  std::vector<Tap> taps_;
};

template <class T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

}  // namespace d3l::nn
