#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "d3lane/error.hpp"
#include "d3lane/tensor.hpp"

namespace d3l {

// PFM ("PF" color / "Pf" gray), little-endian, rows stored bottom-to-top.
inline void write_pfm(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.c != 1 && img.c != 3) throw ShapeError("write_pfm: need 1 or 3 channels, got " + img.shape_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("pfm: cannot write " + path.string());
  os << (img.c == 3 ? "PF" : "Pf") << "\n" << img.w << " " << img.h << "\n-1.0\n";
  std::vector<float> row(static_cast<std::size_t>(img.w * img.c));
  for (int y = img.h - 1; y >= 0; --y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < img.c; ++ch) row[static_cast<std::size_t>(x * img.c + ch)] = img(ch, y, x);
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
  }
}

inline Tensor<float> read_pfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("pfm: cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0;
  double scale = 0;
  is >> magic >> w >> h >> scale;
  is.get();
  if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale >= 0)
    throw FormatError("pfm: unsupported header in " + path.string() + " (little-endian PF/Pf only)");
  const int c = magic == "PF" ? 3 : 1;
  Tensor<float> img(c, h, w);
  std::vector<float> row(static_cast<std::size_t>(w * c));
  for (int y = h - 1; y >= 0; --y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 4));
    if (!is) throw FormatError("pfm: truncated " + path.string());
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img(ch, y, x) = row[static_cast<std::size_t>(x * c + ch)];
  }
  return img;
}

// 8-bit binary PPM for previews; values are clamped to [0, 1].
inline void write_ppm(const std::filesystem::path& path, const Tensor<float>& img) {
  if (img.c != 3) throw ShapeError("write_ppm: need 3 channels, got " + img.shape_str());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("ppm: cannot write " + path.string());
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w * 3));
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<std::size_t>(x * 3 + ch)] =
            static_cast<unsigned char>(std::lround(std::clamp(img(ch, y, x), 0.0f, 1.0f) * 255.0f));
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("ppm: cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  is.get();
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw FormatError("ppm: unsupported header in " + path.string());
  Tensor<float> img(3, h, w);
  std::vector<unsigned char> row(static_cast<std::size_t>(w * 3));
  for (int y = 0; y < h; ++y) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!is) throw FormatError("ppm: truncated " + path.string());
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) img(ch, y, x) = row[static_cast<std::size_t>(x * 3 + ch)] / 255.0f;
  }
  return img;
}

}  // namespace d3l
