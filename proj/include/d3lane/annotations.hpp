#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "d3lane/error.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/lane.hpp"

namespace d3l {

using Json = nlohmann::json;

// JSON document with byte offsets for every member and element, so schema
// violations can be reported at a location in the file. Offsets of members
// point at the key, offsets of array elements at the end of the element's
// first token, object_start at the opening brace.
class LocatedJson {
 public:
  static LocatedJson parse(std::string_view text, std::size_t base = 0) {
    LocatedJson out;
    out.base_ = base;
    try {
      out.doc_ = Json::parse(text.begin(), text.end());
    } catch (const Json::parse_error& e) {
      const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
      throw ParseError("", base + at, "malformed JSON");
    }
    Locator loc{&out, text.data()};
    Json::sax_parse(Counting{text.data(), text.data(), &loc.pos}, Counting{text.data() + text.size(), text.data(), nullptr},
                    &loc);
    return out;
  }

  const Json& root() const { return doc_; }

  std::size_t where(const std::string& ptr) const {
    std::string p = ptr;
    while (true) {
      if (auto it = offsets_.find(p); it != offsets_.end()) return base_ + it->second;
      if (p.empty()) return base_;
      p = p.substr(0, p.rfind('/'));
    }
  }
  std::size_t object_start(const std::string& ptr) const {
    auto it = starts_.find(ptr);
    return it != starts_.end() ? base_ + it->second : where(ptr);
  }

  const Json& at(const std::string& ptr) const { return doc_.at(Json::json_pointer(ptr)); }

  // Member `key` of the object at `obj`; a missing key is reported at the
  // object's opening brace.
  const Json& field(const std::string& obj, const std::string& key) const {
    const Json& o = at(obj);
    if (!o.is_object()) throw ParseError(leaf(obj), where(obj), "expected an object");
    auto it = o.find(key);
    if (it == o.end()) throw ParseError(key, object_start(obj), "missing required key");
    return *it;
  }
  bool has(const std::string& obj, const std::string& key) const {
    const Json& o = at(obj);
    return o.is_object() && o.contains(key);
  }

  double number(const std::string& ptr) const {
    const Json& v = at(ptr);
    if (!v.is_number()) throw ParseError(leaf(ptr), where(ptr), "expected a number");
    double d = v.get<double>();
    if (!std::isfinite(d)) throw ParseError(leaf(ptr), where(ptr), "non-finite number");
    return d;
  }
  long long integer(const std::string& ptr) const {
    const Json& v = at(ptr);
    if (!v.is_number_integer()) throw ParseError(leaf(ptr), where(ptr), "expected an integer");
    return v.get<long long>();
  }
  std::size_t array(const std::string& ptr, std::optional<std::size_t> size = std::nullopt) const {
    const Json& v = at(ptr);
    if (!v.is_array()) throw ParseError(leaf(ptr), where(ptr), "expected an array");
    if (size && v.size() != *size)
      throw ParseError(leaf(ptr), where(ptr), "expected " + std::to_string(*size) + " elements, got " + std::to_string(v.size()));
    return v.size();
  }

  static std::string leaf(const std::string& ptr) {
    auto p = ptr.rfind('/');
    return p == std::string::npos ? ptr : ptr.substr(p + 1);
  }
  static std::string join(const std::string& ptr, const std::string& key) { return ptr + "/" + key; }
  static std::string join(const std::string& ptr, std::size_t i) { return ptr + "/" + std::to_string(i); }

 private:
  // Forward iterator that publishes how many bytes the lexer has consumed.
  struct Counting {
    using iterator_category = std::forward_iterator_tag;
    using value_type = char;
    using difference_type = std::ptrdiff_t;
    using pointer = const char*;
    using reference = const char&;
    const char* p;
    const char* begin;
    std::size_t* pos;
    reference operator*() const { return *p; }
    Counting& operator++() {
      ++p;
      if (pos) *pos = static_cast<std::size_t>(p - begin);
      return *this;
    }
    Counting operator++(int) {
      Counting c = *this;
      ++*this;
      return c;
    }
    bool operator==(const Counting& o) const { return p == o.p; }
  };

  struct Frame {
    std::string path;
    bool is_array;
    std::size_t next = 0;
    std::string key;
  };

  struct Locator : nlohmann::json_sax<Json> {
    LocatedJson* out;
    const char* text;
    std::size_t pos = 0;
    std::vector<Frame> stack;

    Locator(LocatedJson* o, const char* t) : out(o), text(t) {}

    std::string value_path(std::size_t at) {
      if (stack.empty()) {
        out->offsets_.emplace("", at);
        return "";
      }
      Frame& f = stack.back();
      if (f.is_array) {
        std::string p = join(f.path, f.next++);
        out->offsets_.emplace(p, at);
        return p;
      }
      return join(f.path, f.key);
    }
    bool scalar() {
      value_path(pos);
      return true;
    }
    bool null() override { return scalar(); }
    bool boolean(bool) override { return scalar(); }
    bool number_integer(number_integer_t) override { return scalar(); }
    bool number_unsigned(number_unsigned_t) override { return scalar(); }
    bool number_float(number_float_t, const string_t&) override { return scalar(); }
    bool string(string_t&) override { return scalar(); }
    bool binary(binary_t&) override { return scalar(); }
    bool start_object(std::size_t) override {
      const std::size_t at = pos > 0 ? pos - 1 : 0;
      std::string p = value_path(at);
      out->starts_.emplace(p, at);
      stack.push_back({p, false, 0, {}});
      return true;
    }
    bool key(string_t& k) override {
      Frame& f = stack.back();
      // RFC 6901 escaping so paths match json_pointer syntax
      std::string esc;
      for (char ch : k) {
        if (ch == '~') esc += "~0";
        else if (ch == '/') esc += "~1";
        else esc += ch;
      }
      f.key = esc;
      const std::size_t len = k.size() + 2;
      out->offsets_.emplace(join(f.path, esc), pos >= len ? pos - len : 0);
      return true;
    }
    bool end_object() override {
      stack.pop_back();
      return true;
    }
    bool start_array(std::size_t) override {
      const std::size_t at = pos > 0 ? pos - 1 : 0;
      std::string p = value_path(at);
      out->starts_.emplace(p, at);
      stack.push_back({p, true, 0, {}});
      return true;
    }
    bool end_array() override {
      stack.pop_back();
      return true;
    }
    bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override { return false; }
  };

  Json doc_;
  std::map<std::string, std::size_t> offsets_, starts_;
  std::size_t base_ = 0;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Lane-set JSON
//   {"format": "d3lane.laneset", "version": 1,
//    "lanes": [{"score": 0.93, "category": null, "points": [[x, y, z], ...]}]}

inline constexpr const char* kLaneSetFormat = "d3lane.laneset";

inline std::string lane_set_to_json(const std::vector<ScoredLane>& lanes) {
  Json j;
  j["format"] = kLaneSetFormat;
  j["version"] = 1;
  j["lanes"] = Json::array();
  for (const auto& sl : lanes) {
    Json l;
    l["score"] = sl.score;
    l["category"] = sl.lane.category ? Json(*sl.lane.category) : Json(nullptr);
    Json pts = Json::array();
    for (const auto& p : sl.lane.points) pts.push_back({p.x(), p.y(), p.z()});
    l["points"] = std::move(pts);
    j["lanes"].push_back(std::move(l));
  }
  return j.dump(1) + "\n";
}

inline std::vector<ScoredLane> lane_set_from_json(std::string_view text) {
  auto doc = LocatedJson::parse(text);
  const auto& fmt = doc.field("", "format");
  if (!fmt.is_string() || fmt.get<std::string>() != kLaneSetFormat)
    throw ParseError("format", doc.where("/format"), std::string("expected \"") + kLaneSetFormat + "\"");
  doc.field("", "version");
  if (doc.integer("/version") != 1) throw ParseError("version", doc.where("/version"), "unsupported version");
  doc.field("", "lanes");
  std::vector<ScoredLane> out;
  const std::size_t n = doc.array("/lanes");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string lp = LocatedJson::join("/lanes", i);
    ScoredLane sl;
    doc.field(lp, "score");
    sl.score = doc.number(lp + "/score");
    if (doc.has(lp, "category") && !doc.at(lp + "/category").is_null())
      sl.lane.category = static_cast<int>(doc.integer(lp + "/category"));
    doc.field(lp, "points");
    const std::size_t m = doc.array(lp + "/points");
    for (std::size_t k = 0; k < m; ++k) {
      const std::string pp = LocatedJson::join(lp + "/points", k);
      doc.array(pp, 3);
      sl.lane.points.emplace_back(doc.number(pp + "/0"), doc.number(pp + "/1"), doc.number(pp + "/2"));
    }
    if (!sl.lane.valid())
      throw ParseError("points", doc.where(lp + "/points"), "lane needs >= 2 finite points with strictly increasing y");
    out.push_back(std::move(sl));
  }
  return out;
}

inline void write_lane_set(const std::filesystem::path& path, const std::vector<ScoredLane>& lanes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << lane_set_to_json(lanes);
}

inline std::vector<ScoredLane> read_lane_set(const std::filesystem::path& path) {
  return lane_set_from_json(read_text_file(path));
}

inline std::vector<ScoredLane> with_scores(const std::vector<Lane3D>& lanes, double score = 1.0) {
  std::vector<ScoredLane> out;
  for (const auto& l : lanes) out.push_back({l, score});
  return out;
}

// ---------------------------------------------------------------------------
// Dataset annotations

struct Annotation {
  std::vector<Lane3D> lanes;
  CameraRig rig = virtual_rig();
  int skipped_lanes = 0;  // lanes with < 2 usable points
};

namespace detail {

// Sorts by y and drops repeated y values so the polyline satisfies the Lane3D
// invariant; returns false when fewer than 2 points remain.
inline bool finalize_lane(Lane3D& lane) {
  std::stable_sort(lane.points.begin(), lane.points.end(), [](const Vec3& a, const Vec3& b) { return a.y() < b.y(); });
  std::vector<Vec3> kept;
  for (const auto& p : lane.points)
    if (kept.empty() || p.y() > kept.back().y()) kept.push_back(p);
  lane.points = std::move(kept);
  return lane.points.size() >= 2;
}

inline Mat3 read_matrix(const LocatedJson& doc, const std::string& ptr, int rows, int cols, Vec3* translation = nullptr) {
  doc.array(ptr, static_cast<std::size_t>(rows));
  Mat3 m = Mat3::Zero();
  for (int r = 0; r < rows; ++r) {
    const std::string rp = LocatedJson::join(ptr, static_cast<std::size_t>(r));
    doc.array(rp, static_cast<std::size_t>(cols));
    for (int c = 0; c < cols; ++c) {
      const double v = doc.number(LocatedJson::join(rp, static_cast<std::size_t>(c)));
      if (r < 3 && c < 3) m(r, c) = v;
      else if (c == 3 && r < 3 && translation) (*translation)(r) = v;
    }
  }
  return m;
}

// Nearest rotation (polar decomposition); annotation files carry extrinsics
// rounded to a few digits.
inline Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

}  // namespace detail

struct OpenLaneOptions {
  int image_h = 1280;
  int image_w = 1920;
  double min_visibility = 0.5;
};

// Road frame from the OpenLane vehicle frame (x forward, y left, z up).
inline Vec3 openlane_vehicle_to_road(const Vec3& v) { return Vec3(-v.y(), v.x(), v.z()); }

// OpenLane per-frame annotation. xyz arrays are 3 x N in the camera frame
// with Waymo axes (x forward, y left, z up); `extrinsic` maps camera to
// vehicle. The extrinsic's x/y translation is dropped so the road origin sits
// under the camera.
inline Annotation parse_openlane_text(std::string_view text, const OpenLaneOptions& opt = {}) {
  auto doc = LocatedJson::parse(text);
  doc.field("", "intrinsic");
  doc.field("", "extrinsic");
  doc.field("", "lane_lines");
  const Mat3 K = detail::read_matrix(doc, "/intrinsic", 3, 3);
  Vec3 t = Vec3::Zero();
  const Mat3 Re_raw = detail::read_matrix(doc, "/extrinsic", 4, 4, &t);
  const Mat3 Re = detail::orthonormalize(Re_raw);
  if ((Re - Re_raw).cwiseAbs().maxCoeff() > 1e-3)
    throw ParseError("extrinsic", doc.where("/extrinsic"), "rotation block is not orthonormal");
  t.x() = 0.0;
  t.y() = 0.0;
  if (!(t.z() > 0)) throw ParseError("extrinsic", doc.where("/extrinsic"), "camera height must be positive");

  Mat3 road_to_vehicle, waymo_to_optical;
  road_to_vehicle << 0, 1, 0, -1, 0, 0, 0, 0, 1;
  waymo_to_optical << 0, -1, 0, 0, 0, -1, 1, 0, 0;
  Annotation a;
  try {
    Mat3 Kc = K;
    Kc(1, 0) = Kc(2, 0) = Kc(2, 1) = 0.0;
    Kc(2, 2) = 1.0;
    a.rig = CameraRig(Kc, waymo_to_optical * Re.transpose() * road_to_vehicle, Vec3(0, 0, t.z()), opt.image_h,
                      opt.image_w);
  } catch (const ConfigError& e) {
    throw ParseError("intrinsic", doc.where("/intrinsic"), e.what());
  }

  const std::size_t n = doc.array("/lane_lines");
  for (std::size_t i = 0; i < n; ++i) {
    const std::string lp = LocatedJson::join("/lane_lines", i);
    doc.field(lp, "xyz");
    doc.field(lp, "visibility");
    doc.array(lp + "/xyz", 3);
    const std::size_t m = doc.array(lp + "/xyz/0");
    doc.array(lp + "/xyz/1", m);
    doc.array(lp + "/xyz/2", m);
    doc.array(lp + "/visibility", m);
    Lane3D lane;
    if (doc.has(lp, "category")) lane.category = static_cast<int>(doc.integer(lp + "/category"));
    for (std::size_t k = 0; k < m; ++k) {
      const std::string ks = "/" + std::to_string(k);
      if (doc.number(lp + "/visibility" + ks) < opt.min_visibility) continue;
      Vec3 pc(doc.number(lp + "/xyz/0" + ks), doc.number(lp + "/xyz/1" + ks), doc.number(lp + "/xyz/2" + ks));
      lane.points.push_back(openlane_vehicle_to_road(Re * pc + t));
    }
    if (detail::finalize_lane(lane)) a.lanes.push_back(std::move(lane));
    else ++a.skipped_lanes;
  }
  return a;
}

inline Annotation parse_openlane(const std::filesystem::path& path, const OpenLaneOptions& opt = {}) {
  return parse_openlane_text(read_text_file(path), opt);
}

struct ApolloOptions {
  double fx = 2015.0, fy = 2015.0, cx = 960.0, cy = 540.0;
  int image_h = 1080;
  int image_w = 1920;
  double min_visibility = 0.5;
};

// One Apollo 3D-lane record (a single line of the text-per-line file). Points
// are already in the road frame; cam_pitch is in radians, positive down.
inline Annotation parse_apollo_record(std::string_view text, std::size_t base = 0, const ApolloOptions& opt = {}) {
  auto doc = LocatedJson::parse(text, base);
  doc.field("", "cam_height");
  doc.field("", "cam_pitch");
  doc.field("", "laneLines");
  doc.field("", "laneLines_visibility");
  const double h = doc.number("/cam_height");
  const double pitch = doc.number("/cam_pitch");
  if (!(h > 0)) throw ParseError("cam_height", doc.where("/cam_height"), "must be positive");
  Annotation a;
  a.rig = CameraRig::from_angles(opt.fx, opt.fy, opt.cx, opt.cy, opt.image_h, opt.image_w,
                                 {0.0, rad2deg(pitch), 0.0}, Vec3(0, 0, h));
  const std::size_t n = doc.array("/laneLines");
  doc.array("/laneLines_visibility", n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string lp = LocatedJson::join("/laneLines", i);
    const std::string vp = LocatedJson::join("/laneLines_visibility", i);
    const std::size_t m = doc.array(lp);
    doc.array(vp, m);
    Lane3D lane;
    for (std::size_t k = 0; k < m; ++k) {
      const std::string pp = LocatedJson::join(lp, k);
      doc.array(pp, 3);
      if (doc.number(LocatedJson::join(vp, k)) < opt.min_visibility) continue;
      lane.points.emplace_back(doc.number(pp + "/0"), doc.number(pp + "/1"), doc.number(pp + "/2"));
    }
    if (detail::finalize_lane(lane)) a.lanes.push_back(std::move(lane));
    else ++a.skipped_lanes;
  }
  return a;
}

// Whole text-per-line file; blank lines are ignored. Error offsets are
// relative to the start of the file.
inline std::vector<Annotation> parse_apollo_text(std::string_view text, const ApolloOptions& opt = {}) {
  std::vector<Annotation> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) out.push_back(parse_apollo_record(line, start, opt));
    start = end + 1;
  }
  return out;
}

inline std::vector<Annotation> parse_apollo(const std::filesystem::path& path, const ApolloOptions& opt = {}) {
  return parse_apollo_text(read_text_file(path), opt);
}

}  // namespace d3l
