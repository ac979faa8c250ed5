#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d3lane/error.hpp"

namespace d3l {

// 32-byte aligned storage: Eigen picks vectorized paths by pointer alignment,
// so unaligned buffers would make results depend on where malloc lands.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense channels x height x width array, row-major within a channel.
template <class T>
struct Tensor {
  int c = 0;
  int h = 0;
  int w = 0;
  Buffer<T> data;

  Tensor() = default;
  Tensor(int channels, int height, int width, T fill = T(0))
      : c(channels), h(height), w(width),
        data(static_cast<std::size_t>(channels) * height * width, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  bool empty() const noexcept { return data.empty(); }
  int plane() const noexcept { return h * w; }

  T& operator()(int ch, int y, int x) { return data[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
  const T& operator()(int ch, int y, int x) const {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }

  std::span<T> channel(int ch) { return {data.data() + static_cast<std::size_t>(ch) * plane(), static_cast<std::size_t>(plane())}; }
  std::span<const T> channel(int ch) const {
    return {data.data() + static_cast<std::size_t>(ch) * plane(), static_cast<std::size_t>(plane())};
  }

  // Channels as rows, pixels as columns.
  using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  MatMap mat() { return MatMap(data.data(), c, plane()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), c, plane()); }

  bool same_shape(const Tensor& o) const noexcept { return c == o.c && h == o.h && w == o.w; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(c, h, w);
    std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  std::string shape_str() const {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
  }
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": " + a.shape_str() + " vs " + b.shape_str());
}

template <class T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require_same_shape(dst, src, "add");
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

// Channel concatenation: a's channels first, then b's.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.h != b.h || a.w != b.w) throw ShapeError("concat: spatial " + a.shape_str() + " vs " + b.shape_str());
  Tensor<T> out(a.c + b.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, int first) {
  Tensor<T> a(first, x.h, x.w), b(x.c - first, x.h, x.w);
  std::copy(x.data.begin(), x.data.begin() + static_cast<std::ptrdiff_t>(a.size()), a.data.begin());
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(a.size()), x.data.end(), b.data.begin());
  return {std::move(a), std::move(b)};
}

// Bilinear resize with align_corners = false semantics.
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& in, int out_h, int out_w) {
  if (in.h == out_h && in.w == out_w) return in;
  Tensor<T> out(in.c, out_h, out_w);
  const double sy = static_cast<double>(in.h) / out_h;
  const double sx = static_cast<double>(in.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.h - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, in.h - 1);
    T ay = static_cast<T>(fy - y0);
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.w - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, in.w - 1);
      T ax = static_cast<T>(fx - x0);
      for (int ch = 0; ch < in.c; ++ch) {
        T top = in(ch, y0, x0) * (1 - ax) + in(ch, y0, x1) * ax;
        T bot = in(ch, y1, x0) * (1 - ax) + in(ch, y1, x1) * ax;
        out(ch, y, x) = top * (1 - ay) + bot * ay;
      }
    }
  }
  return out;
}

}  // namespace d3l
