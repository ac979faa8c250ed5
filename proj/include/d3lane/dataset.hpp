#pragma once

// On-disk sample archive: one directory per split holding, per sample,
//   <name>.image.pfm   3 x H x W float image in [0, 1]
//   <name>.depth.pfm   1 x H x W normalized inverse depth
//   <name>.lanes.json  lane-set JSON (ground truth, score 1)
//   <name>.rig.cfg     camera rig as key = value lines
// plus manifest.json listing the samples in order.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "d3lane/annotations.hpp"
#include "d3lane/data.hpp"
#include "d3lane/imageio.hpp"

namespace d3l {

struct StoredSample {
  std::string name;
  std::string id;
  Tensor<float> image, depth;
  std::vector<Lane3D> lanes;
  CameraRig rig = virtual_rig();
};

inline std::string sample_name(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
  if (!f) throw Error("write failed: " + path.string());
}

// Generates `count` scenes into `dir` (created if needed).
inline void write_split(const std::filesystem::path& dir, const SceneConfig& cfg, std::size_t count,
                        std::size_t first_index = 0) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  Json manifest{{"format", "d3lane.dataset"}, {"version", 1}, {"seed", cfg.seed}, {"samples", Json::array()}};
  for (std::size_t k = 0; k < count; ++k) {
    const auto s = generate_scene(cfg, first_index + k);
    const auto name = sample_name(first_index + k);
    write_pfm(dir / (name + ".image.pfm"), s.image);
    write_pfm(dir / (name + ".depth.pfm"), s.depth);
    write_lane_set(dir / (name + ".lanes.json"), with_scores(s.lanes));
    write_text(dir / (name + ".rig.cfg"), s.rig.to_config().to_string());
    manifest["samples"].push_back({{"name", name}, {"id", s.id}});
  }
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

inline std::vector<std::string> read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  const auto doc = LocatedJson::parse(read_text_file(path));
  if (doc.field("", "format") != "d3lane.dataset") throw FormatError("not a d3lane dataset manifest: " + path.string());
  std::vector<std::string> names;
  const std::size_t n = doc.array("/samples");
  for (std::size_t k = 0; k < n; ++k) {
    const auto& name = doc.field(LocatedJson::join("/samples", k), "name");
    if (!name.is_string()) throw ParseError("name", doc.where(LocatedJson::join("/samples", k) + "/name"), "expected a string");
    names.push_back(name.get<std::string>());
  }
  return names;
}

inline StoredSample read_sample(const std::filesystem::path& dir, const std::string& name) {
  StoredSample s;
  s.name = name;
  s.image = read_pfm(dir / (name + ".image.pfm"));
  s.depth = read_pfm(dir / (name + ".depth.pfm"));
  for (auto& l : read_lane_set(dir / (name + ".lanes.json"))) s.lanes.push_back(std::move(l.lane));
  s.rig = CameraRig::from_config(Config::load(dir / (name + ".rig.cfg")));
  s.id = content_id(s.image, s.depth);
  if (s.image.c != 3 || s.depth.c != 1 || s.image.h != s.rig.image_h() || s.image.w != s.rig.image_w() ||
      s.depth.h != s.image.h || s.depth.w != s.image.w)
    throw FormatError("sample " + name + ": image " + s.image.shape_str() + " / depth " + s.depth.shape_str() +
                      " do not match the rig");
  return s;
}

inline std::vector<StoredSample> read_split(const std::filesystem::path& dir, std::size_t limit = 0) {
  std::vector<StoredSample> out;
  for (const auto& n : read_manifest(dir)) {
    if (limit && out.size() >= limit) break;
    out.push_back(read_sample(dir, n));
  }
  return out;
}

}  // namespace d3l
