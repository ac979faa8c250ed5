#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "d3lane/config.hpp"
#include "d3lane/error.hpp"
#include "d3lane/hash.hpp"
#include "d3lane/network.hpp"
#include "d3lane/nn/layers.hpp"
#include "d3lane/nn/rng.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

inline constexpr const char* kLayer17 = "layer17";
inline constexpr const char* kLayer23 = "layer23";
inline constexpr const char* kTeacherDepth = "depth";

using TeacherMaps = std::map<std::string, Tensor<float>>;

// SHA-256 over the shape (three little-endian u32) followed by the raw float
// data. Identifies an image in recorded teacher archives.
inline Digest image_hash(const Tensor<float>& image) {
  Sha256 h;
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(image.c), static_cast<std::uint32_t>(image.h),
                                 static_cast<std::uint32_t>(image.w)};
  h.update(dims, sizeof(dims));
  h.update(std::span<const float>(image.data));
  return h.finish();
}

// Interface to the frozen teacher. Implementations must return finite maps
// and bitwise-identical results for repeated queries of the same image.
class TeacherFeatureSource {
 public:
  virtual ~TeacherFeatureSource() = default;
  virtual TeacherMaps features(const Tensor<float>& image) const = 0;
  virtual int channels(const std::string& tag) const = 0;
};

// Desk-scale stand-in for the real teacher: a fixed-seed random linear
// projection of image patches. layer17 is produced at stride 32 and layer23
// at stride 64; each output cell summarizes its patch as a 4x4 grid of
// channel means (48 values) projected to `channels` features.
class SyntheticTeacher : public TeacherFeatureSource {
 public:
  static constexpr int kGrid = 4;
  static constexpr int kInputs = kGrid * kGrid * 3;

  explicit SyntheticTeacher(std::uint64_t seed = 0, int channels = 16) : channels_(channels) {
    if (channels <= 0) throw ConfigError("teacher.channels", "must be positive");
    int stream = 0;
    for (const char* tag : {kLayer17, kLayer23}) {
      nn::Rng rng(nn::mix_seed(seed, static_cast<std::uint64_t>(stream++)));
      auto& w = weights_[tag];
      w.resize(static_cast<std::size_t>(channels) * kInputs);
      for (auto& v : w) v = rng.normal() / std::sqrt(static_cast<double>(kInputs));
      auto& b = biases_[tag];
      b.resize(static_cast<std::size_t>(channels));
      for (auto& v : b) v = 0.1 * rng.normal();
    }
  }

  static int stride_of_tag(const std::string& tag) {
    if (tag == kLayer17) return 32;
    if (tag == kLayer23) return 64;
    throw ConfigError("teacher.tag", "unknown teacher tap '" + tag + "'");
  }

  int channels(const std::string& tag) const override {
    stride_of_tag(tag);
    return channels_;
  }

  TeacherMaps features(const Tensor<float>& image) const override {
    if (image.c != 3) throw ShapeError("synthetic teacher: expected a 3-channel image, got " + image.shape_str());
    TeacherMaps out;
    for (const char* tag : {kLayer17, kLayer23}) out[tag] = project(image, tag);
    return out;
  }

 private:
  Tensor<float> project(const Tensor<float>& image, const std::string& tag) const {
    const int s = stride_of_tag(tag);
    if (image.h % s != 0 || image.w % s != 0)
      throw ShapeError("synthetic teacher: image " + image.shape_str() + " not divisible by " + std::to_string(s));
    const int oh = image.h / s, ow = image.w / s, sub = s / kGrid;
    const auto& w = weights_.at(tag);
    const auto& b = biases_.at(tag);
    Tensor<float> out(channels_, oh, ow);
    std::vector<double> v(kInputs);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int k = 0;
        for (int ch = 0; ch < 3; ++ch)
          for (int gy = 0; gy < kGrid; ++gy)
            for (int gx = 0; gx < kGrid; ++gx) {
              double acc = 0.0;
              for (int y = 0; y < sub; ++y)
                for (int x = 0; x < sub; ++x) acc += image(ch, oy * s + gy * sub + y, ox * s + gx * sub + x);
              v[static_cast<std::size_t>(k++)] = acc / (sub * sub);
            }
        for (int c = 0; c < channels_; ++c) {
          double z = b[static_cast<std::size_t>(c)];
          for (int i = 0; i < kInputs; ++i) z += w[static_cast<std::size_t>(c) * kInputs + i] * v[static_cast<std::size_t>(i)];
          out(c, oy, ox) = static_cast<float>(z);
        }
      }
    }
    return out;
  }

  int channels_;
  std::map<std::string, std::vector<double>> weights_, biases_;
};

// ---------------------------------------------------------------------------
// Recorded-feature archive (all integers little-endian):
//   header: "D3LTEACH" | u32 version (1) | u32 entry_count
//   entry:  32-byte SHA-256 image hash | u16 tag_len | tag bytes | u8 dtype
//           (1 = float32, 2 = float64) | u32 C | u32 H | u32 W | C*H*W values
// Entries are written sorted by (hash, tag), so equal inputs give equal bytes.

struct TeacherArchive {
  std::map<Digest, TeacherMaps> entries;

  static constexpr char kMagic[8] = {'D', '3', 'L', 'T', 'E', 'A', 'C', 'H'};
  static constexpr std::uint32_t kVersion = 1;

  void write(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("teacher archive: cannot write " + path.string());
    auto put32 = [&](std::uint32_t v) {
      unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
      os.write(reinterpret_cast<const char*>(b), 4);
    };
    std::uint32_t count = 0;
    for (const auto& [h, maps] : entries) count += static_cast<std::uint32_t>(maps.size());
    os.write(kMagic, 8);
    put32(kVersion);
    put32(count);
    for (const auto& [hash, maps] : entries) {
      for (const auto& [tag, t] : maps) {
        os.write(reinterpret_cast<const char*>(hash.data()), 32);
        const auto len = static_cast<std::uint16_t>(tag.size());
        const unsigned char lb[2] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8)};
        os.write(reinterpret_cast<const char*>(lb), 2);
        os.write(tag.data(), len);
        os.put(1);
        put32(static_cast<std::uint32_t>(t.c));
        put32(static_cast<std::uint32_t>(t.h));
        put32(static_cast<std::uint32_t>(t.w));
        for (float f : t.data) {
          std::uint32_t u;
          std::memcpy(&u, &f, 4);
          put32(u);
        }
      }
    }
    if (!os) throw FormatError("teacher archive: write failed for " + path.string());
  }

  static TeacherArchive read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("teacher archive: cannot open " + path.string());
    auto bytes = [&](void* dst, std::size_t n) {
      is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
      if (!is) throw FormatError("teacher archive: truncated " + path.string());
    };
    auto get32 = [&] {
      unsigned char b[4];
      bytes(b, 4);
      return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
             static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
    };
    char magic[8];
    bytes(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw FormatError("teacher archive: bad magic in " + path.string());
    if (auto v = get32(); v != kVersion) throw FormatError("teacher archive: unsupported version " + std::to_string(v));
    const std::uint32_t count = get32();
    TeacherArchive a;
    for (std::uint32_t e = 0; e < count; ++e) {
      Digest h;
      bytes(h.data(), 32);
      unsigned char lb[2];
      bytes(lb, 2);
      std::string tag(static_cast<std::size_t>(lb[0] | lb[1] << 8), '\0');
      bytes(tag.data(), tag.size());
      unsigned char dtype;
      bytes(&dtype, 1);
      const auto c = get32(), hh = get32(), w = get32();
      Tensor<float> t(static_cast<int>(c), static_cast<int>(hh), static_cast<int>(w));
      for (auto& f : t.data) {
        if (dtype == 1) {
          std::uint32_t u = get32();
          std::memcpy(&f, &u, 4);
        } else if (dtype == 2) {
          std::uint64_t lo = get32(), hi = get32();
          std::uint64_t u = lo | hi << 32;
          double d;
          std::memcpy(&d, &u, 8);
          f = static_cast<float>(d);
        } else {
          throw FormatError("teacher archive: unknown dtype " + std::to_string(dtype));
        }
      }
      auto& maps = a.entries[h];
      if (!maps.emplace(tag, std::move(t)).second)
        throw FormatError("teacher archive: duplicate entry for " + to_hex(h) + " / " + tag);
    }
    return a;
  }
};

using ImageHasher = std::function<Digest(const Tensor<float>&)>;

// Runs `teacher` over `images` and writes the archive. Repeated images are
// stored once; two different images with the same hash are a hard error.
inline TeacherArchive record_teacher_features(const std::vector<Tensor<float>>& images,
                                              const TeacherFeatureSource& teacher,
                                              const std::filesystem::path& output,
                                              const ImageHasher& hasher = image_hash) {
  TeacherArchive a;
  std::map<Digest, const Tensor<float>*> seen;
  for (const auto& img : images) {
    const Digest h = hasher(img);
    if (auto it = seen.find(h); it != seen.end()) {
      if (!it->second->same_shape(img) || it->second->data != img.data)
        throw FormatError("teacher archive: hash collision on differing content (" + to_hex(h) + ")");
      continue;
    }
    seen.emplace(h, &img);
    auto maps = teacher.features(img);
    for (const auto& [tag, t] : maps)
      if (!t.all_finite()) throw FormatError("teacher archive: non-finite features for tag " + tag);
    a.entries.emplace(h, std::move(maps));
  }
  a.write(output);
  return a;
}

// Teacher backed by a recorded archive.
class FileTeacher : public TeacherFeatureSource {
 public:
  explicit FileTeacher(const std::filesystem::path& path) : archive_(TeacherArchive::read(path)) {
    for (const auto& [h, maps] : archive_.entries)
      for (const auto& [tag, t] : maps) channels_[tag] = t.c;
  }

  TeacherMaps features(const Tensor<float>& image) const override {
    auto it = archive_.entries.find(image_hash(image));
    if (it == archive_.entries.end()) throw Error("teacher archive has no entry for image " + to_hex(image_hash(image)));
    return it->second;
  }
  int channels(const std::string& tag) const override {
    auto it = channels_.find(tag);
    if (it == channels_.end()) throw ConfigError("teacher.tag", "archive has no tap '" + tag + "'");
    return it->second;
  }
  std::size_t size() const { return archive_.entries.size(); }

 private:
  TeacherArchive archive_;
  std::map<std::string, int> channels_;
};

// Teacher tap each student imitates. S32 <-> layer17 and S64 <-> layer23
// follow the paper; the extra scales used by the scale-combination sweep
// borrow the nearest tap.
inline const char* teacher_tag_for(Scale s) {
  switch (s) {
    case Scale::S8:
    case Scale::S16:
    case Scale::S32: return kLayer17;
    default: return kLayer23;
  }
}

// ---------------------------------------------------------------------------
// Students: a residual block of two 3x3 convolutions followed by a 1x1
// projection to the teacher's channel count.

template <class T>
class Student {
 public:
  Student() = default;
  Student(const std::string& name, int in_c, int teacher_c, nn::Rng& rng)
      : block_(name + ".block", in_c, rng), proj_(name + ".proj", in_c, teacher_c, 1, 1, rng) {}

  Tensor<T> forward(const Tensor<T>& x) { return proj_.forward(block_.forward(x)); }
  Tensor<T> backward(const Tensor<T>& dy) { return block_.backward(proj_.backward(dy)); }
  int out_channels() const { return proj_.out_channels(); }

  nn::ParamList<T> params() {
    auto p = block_.params();
    nn::append(p, proj_.params());
    return p;
  }

 private:
  nn::ResidualBlock<T> block_;
  nn::Conv2d<T> proj_;
};

struct DistillConfig {
  bool enabled = true;       // students + fusion
  bool loss_enabled = true;  // teacher loss path
  double weight = 1.0;
  std::set<Scale> scales{Scale::S32, Scale::S64};
  int teacher_channels = 16;

  static DistillConfig from_config(const Config& c) {
    DistillConfig d;
    d.enabled = c.get("enabled", d.enabled);
    d.loss_enabled = c.get("loss", d.loss_enabled);
    d.weight = c.get("weight", d.weight);
    if (!(d.weight >= 0)) throw ConfigError("distill.weight", "must be >= 0");
    if (c.has("scales")) {
      d.scales.clear();
      for (const auto& s : c.get_list("scales", {})) d.scales.insert(parse_scale(s));
    }
    d.teacher_channels = c.get("teacher_channels", d.teacher_channels);
    if (d.enabled && d.scales.empty()) throw ConfigError("distill.scales", "empty while distillation is enabled");
    return d;
  }
};

// Per-scale students fed from the backbone pyramid.
template <class T>
class Distiller {
 public:
  Distiller() = default;
  Distiller(const NetworkConfig& net, const DistillConfig& cfg, nn::Rng& rng) : cfg_(cfg) {
    for (Scale s : cfg.scales)
      students_.emplace(s, Student<T>("distill.student" + to_string(s), net.channels(s), cfg.teacher_channels, rng));
  }

  const std::set<Scale>& scales() const { return cfg_.scales; }

  Tensor<T> student_forward(const FeaturePyramid<T>& pyramid, Scale which) {
    auto st = students_.find(which);
    if (st == students_.end()) throw ConfigError("distill.scales", "no student configured for " + to_string(which));
    auto it = pyramid.find(which);
    if (it == pyramid.end()) throw ConfigError("distill.scales", "pyramid lacks " + to_string(which));
    return st->second.forward(it->second);
  }

  FeaturePyramid<T> forward(const FeaturePyramid<T>& pyramid) {
    FeaturePyramid<T> out;
    for (Scale s : cfg_.scales) out[s] = student_forward(pyramid, s);
    return out;
  }

  // Gradients w.r.t. the student inputs (backbone levels).
  FeaturePyramid<T> backward(const FeaturePyramid<T>& grads) {
    FeaturePyramid<T> out;
    for (const auto& [s, g] : grads) out[s] = students_.at(s).backward(g);
    return out;
  }

  nn::ParamList<T> params() {
    nn::ParamList<T> p;
    for (auto& [s, st] : students_) nn::append(p, st.params());
    return p;
  }

 private:
  DistillConfig cfg_;
  std::map<Scale, Student<T>> students_;
};

// Mean squared error between the student map and the teacher map after
// bilinear resizing of the teacher to the student's spatial size and
// standardizing it over the whole map. A zero-variance teacher is compared
// unnormalized and the result flagged.
template <class T>
LossValue<T> distillation_loss(const Tensor<T>& student, const Tensor<T>& teacher, Tensor<T>* grad = nullptr) {
  if (student.c != teacher.c)
    throw ShapeError("distillation_loss: channel mismatch " + student.shape_str() + " vs " + teacher.shape_str());
  Tensor<T> t = resize_bilinear(teacher, student.h, student.w);
  const double n = static_cast<double>(t.size());
  double mean = 0.0;
  for (T v : t.data) mean += v;
  mean /= n;
  double var = 0.0;
  for (T v : t.data) var += (v - mean) * (v - mean);
  var /= n;
  const bool degenerate = !(var > 1e-12);
  if (!degenerate) {
    const double inv = 1.0 / std::sqrt(var);
    for (auto& v : t.data) v = static_cast<T>((v - mean) * inv);
  }
  if (grad) *grad = Tensor<T>(student.c, student.h, student.w);
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double d = static_cast<double>(student.data[i]) - static_cast<double>(t.data[i]);
    s += d * d;
    if (grad) grad->data[i] = static_cast<T>(2.0 * d / n);
  }
  return {s / n, degenerate};
}

// Channel concatenation [level, distilled]; no mixing before the STP.
template <class T>
Tensor<T> fuse(const Tensor<T>& level, const Tensor<T>& distilled) {
  if (distilled.empty()) throw ConfigError("distill.enabled", "fusion requires distilled features");
  if (level.h != distilled.h || level.w != distilled.w)
    throw ShapeError("fuse: spatial mismatch " + level.shape_str() + " vs " + distilled.shape_str());
  return concat_channels(level, distilled);
}

// Splits the gradient of a fused map back into its two sources.
template <class T>
std::pair<Tensor<T>, Tensor<T>> fuse_backward(const Tensor<T>& grad, int level_channels) {
  return split_channels(grad, level_channels);
}

}  // namespace d3l
