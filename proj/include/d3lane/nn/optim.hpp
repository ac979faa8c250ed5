#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/nn/layers.hpp"

namespace d3l::nn {

struct AdamOptions {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient norm clip, <= 0 disables
};

template <class T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (auto* p : params_)
      for (T g : p->grad) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    double scale = 1.0;
    if (opt_.clip_norm > 0) {
      double n = grad_norm();
      if (n > opt_.clip_norm) scale = opt_.clip_norm / n;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    const double lr = opt_.lr * lr_scale;
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = scale * static_cast<double>(p.grad[i]);
        m[i] = static_cast<T>(opt_.beta1 * m[i] + (1 - opt_.beta1) * g);
        v[i] = static_cast<T>(opt_.beta2 * v[i] + (1 - opt_.beta2) * g * g);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        p.value[i] = static_cast<T>(p.value[i] - lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
  }

  int steps() const { return t_; }

 private:
  ParamList<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<T>> m_, v_;
  int t_ = 0;
};

// Checkpoint archive, little-endian:
//   "D3LCKPT1" | u32 config_len | config text | u32 count |
//   count x ( u16 name_len | name | u8 ndim | ndim x i32 dim | u8 dtype | data )
// dtype 1 = float32, 2 = float64.
namespace checkpoint {

namespace detail {
template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <class V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw FormatError("checkpoint: truncated");
  return v;
}
}  // namespace detail

template <class T>
void save(const std::string& path, const Config& config, const ParamList<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot write " + path);
  os.write("D3LCKPT1", 8);
  auto text = config.to_string();
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(p->shape.size()));
    for (int d : p->shape) detail::put<std::int32_t>(os, d);
    detail::put<std::uint8_t>(os, sizeof(T) == 4 ? 1 : 2);
    os.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(p->size() * sizeof(T)));
  }
}

inline Config read_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "D3LCKPT1", 8) != 0) throw FormatError("checkpoint: bad magic in " + path);
  auto len = detail::get<std::uint32_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  return Config::parse(text);
}

// Loads values into `params`, matching by name. Every parameter must be
// present with an identical shape.
template <class T>
Config load(const std::string& path, const ParamList<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, "D3LCKPT1", 8) != 0) throw FormatError("checkpoint: bad magic in " + path);
  auto len = detail::get<std::uint32_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  Config cfg = Config::parse(text);
  std::map<std::string, Param<T>*> by_name;
  for (auto* p : params) by_name[p->name] = p;
  auto count = detail::get<std::uint32_t>(is);
  std::size_t loaded = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(detail::get<std::uint16_t>(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    std::vector<int> shape(detail::get<std::uint8_t>(is));
    std::size_t n = 1;
    for (auto& d : shape) {
      d = detail::get<std::int32_t>(is);
      n *= static_cast<std::size_t>(d);
    }
    auto dtype = detail::get<std::uint8_t>(is);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: unexpected weight '" + name + "'");
    if (it->second->shape != shape) throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    auto& dst = it->second->value;
    if (dtype == 1) {
      std::vector<float> buf(n);
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 4));
      std::copy(buf.begin(), buf.end(), dst.begin());
    } else if (dtype == 2) {
      std::vector<double> buf(n);
      is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * 8));
      for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(buf[i]);
    } else {
      throw FormatError("checkpoint: unknown dtype for '" + name + "'");
    }
    if (!is) throw FormatError("checkpoint: truncated data for '" + name + "'");
    ++loaded;
  }
  if (loaded != params.size())
    throw FormatError("checkpoint: " + std::to_string(params.size() - loaded) + " weights missing");
  return cfg;
}

}  // namespace checkpoint
}  // namespace d3l::nn
