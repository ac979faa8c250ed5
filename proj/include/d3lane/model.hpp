#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "d3lane/annotations.hpp"
#include "d3lane/bevhead.hpp"
#include "d3lane/config.hpp"
#include "d3lane/crf.hpp"
#include "d3lane/data.hpp"
#include "d3lane/dataset.hpp"
#include "d3lane/distill.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/metrics.hpp"
#include "d3lane/network.hpp"
#include "d3lane/nn/optim.hpp"

namespace d3l {

struct RunConfig {
  Config source;  // the merged key = value document this was built from
  int image_h = 256, image_w = 512;
  std::set<Scale> scales{Scale::S32, Scale::S64};
  bool hdah_on = true;
  bool crf_on = true;
  double depth_weight = 1.0;
  NetworkConfig network;
  DistillConfig distill;
  StpConfig stp;
  HeadConfig head;
  HeadLossConfig loss;
  DecodeConfig decode;
  CrfConfig crf;
  BevGrid grid;
  EvalConfig eval;

  nn::AdamOptions adam;
  int steps = 2000;
  int batch = 1;
  int log_every = 10;
  double lr_final = 0.05;  // cosine decay from lr to lr * lr_final
  std::uint64_t seed = 1;

  std::string teacher = "synthetic";  // or "archive"
  std::uint64_t teacher_seed = 7;
  std::string teacher_archive;

  // HDAH mirrors every backbone level from S8 to the deepest STP input.
  std::set<Scale> hdah_levels() const {
    std::set<Scale> out;
    for (int s = 8; s <= stride_of(*scales.rbegin()); s *= 2) out.insert(static_cast<Scale>(s));
    return out;
  }

  static RunConfig from_config(const Config& c) {
    static const std::map<std::string, std::set<std::string>> known{
        {"model", {"image_h", "image_w", "scales", "hdah", "depth_weight"}},
        {"network", {"stem_channels", "stage_channels", "decoder_channels"}},
        {"distill", {"enabled", "loss", "weight", "scales", "teacher_channels"}},
        {"stp", {"channels", "groups", "downsample"}},
        {"head", {"embed_dim", "hidden", "coord_channels"}},
        {"loss", {"w_confidence", "w_offset", "w_height", "w_embedding", "margin", "pos_weight"}},
        {"decode", {"conf_threshold", "embed_threshold"}},
        {"crf", {"enabled", "w1", "w2", "w3", "sigma_color", "sigma_depth", "iterations", "neighborhood",
                 "region_floor", "max_region"}},
        {"grid", {"x_min", "x_max", "y_min", "y_max", "dx", "dy"}},
        {"eval", {"y_samples", "ap_thresholds", "point_threshold", "coverage_ratio", "min_covisible", "near_begin",
                  "near_end", "far_begin", "far_end", "score_threshold"}},
        {"train", {"lr", "clip", "steps", "batch", "log_every", "lr_final", "seed"}},
        {"teacher", {"kind", "seed", "archive"}},
    };
    // data.*, scene.* and ablate.* belong to the command line front end
    static const std::set<std::string> passthrough{"data", "scene", "ablate"};
    for (const auto& [k, v] : c.values()) {
      const auto dot = k.find('.');
      const auto sec = dot == std::string::npos ? k : k.substr(0, dot);
      if (passthrough.count(sec)) continue;
      auto it = known.find(sec);
      if (it == known.end() || dot == std::string::npos || !it->second.count(k.substr(dot + 1)))
        throw ConfigError(k, "unknown key");
    }
    RunConfig r;
    r.source = c;
    const auto m = c.subtree("model");
    r.image_h = m.get("image_h", r.image_h);
    r.image_w = m.get("image_w", r.image_w);
    if (m.has("scales")) {
      r.scales.clear();
      for (const auto& s : m.get_list("scales", {})) {
        try {
          r.scales.insert(parse_scale(s));
        } catch (const Error&) {
          throw ConfigError("model.scales", "unknown scale '" + s + "'");
        }
      }
    }
    if (r.scales.empty()) throw ConfigError("model.scales", "at least one scale required");
    r.hdah_on = m.get("hdah", r.hdah_on);
    r.depth_weight = m.get("depth_weight", r.depth_weight);
    if (!(r.depth_weight >= 0)) throw ConfigError("model.depth_weight", "must be >= 0");
    if (r.image_h % 128 != 0 || r.image_w % 128 != 0 || r.image_h <= 0 || r.image_w <= 0)
      throw ConfigError("model.image_h", "image size must be a positive multiple of 128");

    r.network = NetworkConfig::from_config(c.subtree("network"));
    const auto d = c.subtree("distill");
    r.distill = DistillConfig::from_config(d);
    if (!d.has("scales")) r.distill.scales = r.scales;
    for (Scale s : r.distill.scales)
      if (!r.scales.count(s)) throw ConfigError("distill.scales", to_string(s) + " is not an STP input scale");
    r.stp = StpConfig::from_config(c.subtree("stp"));
    r.head = HeadConfig::from_config(c.subtree("head"));
    r.loss = HeadLossConfig::from_config(c.subtree("loss"));
    r.decode = DecodeConfig::from_config(c.subtree("decode"));
    const auto k = c.subtree("crf");
    r.crf_on = k.get("enabled", r.crf_on);
    Config kp;
    for (const auto& [key, v] : k.values())
      if (key != "enabled") kp.set(key, v);
    r.crf = CrfConfig::from_config(kp);
    r.grid = BevGrid::from_config(c.subtree("grid"));
    r.eval = EvalConfig::from_config(c.subtree("eval"));

    const auto t = c.subtree("train");
    r.adam.lr = t.get("lr", r.adam.lr);
    r.adam.clip_norm = t.get("clip", r.adam.clip_norm);
    r.steps = t.get("steps", r.steps);
    r.batch = t.get("batch", r.batch);
    r.log_every = t.get("log_every", r.log_every);
    r.lr_final = t.get("lr_final", r.lr_final);
    r.seed = t.get("seed", r.seed);
    if (!(r.adam.lr > 0)) throw ConfigError("train.lr", "must be positive");
    if (r.steps < 0) throw ConfigError("train.steps", "must be >= 0");
    if (r.batch < 1) throw ConfigError("train.batch", "must be >= 1");
    if (r.log_every < 1) throw ConfigError("train.log_every", "must be >= 1");
    if (!(r.lr_final > 0 && r.lr_final <= 1)) throw ConfigError("train.lr_final", "must lie in (0, 1]");

    const auto te = c.subtree("teacher");
    r.teacher = te.get("kind", r.teacher);
    r.teacher_seed = te.get("seed", r.teacher_seed);
    r.teacher_archive = te.get("archive", r.teacher_archive);
    if (r.teacher != "synthetic" && r.teacher != "archive") throw ConfigError("teacher.kind", "expected synthetic or archive");
    if (r.teacher == "archive" && r.teacher_archive.empty()) throw ConfigError("teacher.archive", "required for kind=archive");
    return r;
  }
};

inline std::unique_ptr<TeacherFeatureSource> make_teacher(const RunConfig& cfg,
                                                          const std::filesystem::path& root = ".") {
  if (cfg.teacher == "archive") {
    std::filesystem::path p = cfg.teacher_archive;
    return std::make_unique<FileTeacher>(p.is_absolute() ? p : root / p);
  }
  return std::make_unique<SyntheticTeacher>(cfg.teacher_seed, cfg.distill.teacher_channels);
}

// Everything a training or evaluation step needs, computed once per sample.
struct PreparedSample {
  std::string name;
  Tensor<float> image;  // warped to the virtual rig
  Tensor<float> depth;  // warped normalized inverse depth
  std::vector<std::uint8_t> depth_mask;
  GtRasters gt;
  std::vector<Lane3D> lanes;
  TeacherMaps teacher;
  Tensor<float> color_bev, depth_bev;  // CRF pairwise inputs
};

inline Tensor<float> warp_image_to_virtual(const Tensor<float>& image, const CameraRig& rig, const RunConfig& cfg) {
  if (image.h != rig.image_h() || image.w != rig.image_w())
    throw ShapeError("image " + image.shape_str() + " does not match its rig");
  return warp_to_virtual(image, rig, virtual_rig(cfg.image_h, cfg.image_w));
}

// depth may be empty (no depth source): the CRF then sees a constant depth.
inline PreparedSample prepare_sample(const std::string& name, const Tensor<float>& image, const Tensor<float>& depth,
                                     const CameraRig& rig, const std::vector<Lane3D>& lanes, const RunConfig& cfg,
                                     const TeacherFeatureSource* teacher) {
  const CameraRig virt = virtual_rig(cfg.image_h, cfg.image_w);
  PreparedSample p;
  p.name = name;
  p.image = warp_image_to_virtual(image, rig, cfg);
  if (!depth.empty()) {
    Tensor<float> dm = concat_channels(depth, Tensor<float>(1, depth.h, depth.w, 1.0f));
    Tensor<float> w = warp_to_virtual(dm, rig, virt);
    auto [d, mask] = split_channels(w, 1);
    p.depth = std::move(d);
    p.depth_mask.resize(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) p.depth_mask[i] = mask.data[i] > 0.999f;
  } else {
    p.depth = Tensor<float>(1, cfg.image_h, cfg.image_w);
    p.depth_mask.assign(p.depth.size(), 0);
  }
  p.lanes = lanes;
  p.gt = rasterize_gt(lanes, cfg.grid);
  if (teacher && cfg.distill.enabled) p.teacher = teacher->features(p.image);
  p.color_bev = warp_fv_raster_to_bev(p.image, virt, cfg.grid).values;
  p.depth_bev = warp_fv_raster_to_bev(p.depth, virt, cfg.grid).values;
  return p;
}

inline PreparedSample prepare_sample(const StoredSample& s, const RunConfig& cfg, const TeacherFeatureSource* teacher) {
  return prepare_sample(s.name, s.image, s.depth, s.rig, s.lanes, cfg, teacher);
}

inline std::vector<PreparedSample> prepare_split(const std::vector<StoredSample>& split, const RunConfig& cfg,
                                                 const TeacherFeatureSource* teacher) {
  std::vector<PreparedSample> out;
  out.reserve(split.size());
  for (const auto& s : split) out.push_back(prepare_sample(s, cfg, teacher));
  return out;
}

struct StageTimes {
  double backbone = 0, hdah = 0, distill = 0, stp = 0, head = 0, crf = 0, decode = 0;
  long frames = 0;
};

template <class T>
class Model {
 public:
  struct Output {
    BevPrediction<T> pred;
    std::optional<Tensor<T>> depth;  // training mode with HDAH only
    FeaturePyramid<T> students;
  };

  explicit Model(const RunConfig& cfg) : cfg_(cfg) {
    nn::Rng rng(nn::mix_seed(cfg.seed, 101));
    backbone_ = Backbone<T>(cfg.network, rng);
    if (cfg.hdah_on) hdah_ = DepthAwareHead<T>(cfg.network, cfg.hdah_levels(), rng);
    if (cfg.distill.enabled) distiller_ = Distiller<T>(cfg.network, cfg.distill, rng);
    std::map<Scale, int> in;
    for (Scale s : cfg.scales)
      in[s] = cfg.network.channels(s) + (distilled(s) ? cfg.distill.teacher_channels : 0);
    stp_ = Stp<T>(in, cfg.image_h, cfg.image_w, cfg.grid, cfg.stp, rng);
    head_ = BevHead<T>(cfg.stp.channels, cfg.grid, cfg.head, rng);
  }

  const RunConfig& config() const { return cfg_; }
  StageTimes& times() { return times_; }

  Output forward(const Tensor<T>& image, bool training) {
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    auto lap = [&](double& acc) {
      const auto t1 = clock::now();
      acc += std::chrono::duration<double>(t1 - t0).count();
      t0 = t1;
    };
    Output out;
    FeaturePyramid<T> feats = backbone_.forward(image, cfg_.hdah_on ? cfg_.hdah_levels() : cfg_.scales);
    lap(times_.backbone);
    if (cfg_.hdah_on) {
      auto h = hdah_.forward(feats, training);
      feats = std::move(h.taps);
      if (h.depth) out.depth = std::move(h.depth->depth);
    }
    lap(times_.hdah);
    if (cfg_.distill.enabled) out.students = distiller_.forward(feats);
    FeaturePyramid<T> fused;
    for (Scale s : cfg_.scales) fused[s] = distilled(s) ? fuse(feats.at(s), out.students.at(s)) : feats.at(s);
    lap(times_.distill);
    Tensor<T> bev = stp_.forward(fused);
    lap(times_.stp);
    out.pred = head_.forward(bev);
    lap(times_.head);
    ++times_.frames;
    return out;
  }

  // g_depth may be null; g_students holds extra gradients on student outputs.
  void backward(const PredictionGrad<T>& g, const Tensor<T>* g_depth, const FeaturePyramid<T>& g_students) {
    FeaturePyramid<T> dfused = stp_.backward(head_.backward(g));
    FeaturePyramid<T> dfeats, dstud;
    for (auto& [s, d] : dfused) {
      if (!distilled(s)) {
        dfeats[s] = std::move(d);
        continue;
      }
      auto [a, b] = fuse_backward(d, cfg_.network.channels(s));
      dfeats[s] = std::move(a);
      dstud[s] = std::move(b);
    }
    for (const auto& [s, gs] : g_students) add_inplace(dstud.at(s), gs);
    if (!dstud.empty())
      for (auto& [s, d] : distiller_.backward(dstud)) add_inplace(dfeats.at(s), d);
    if (cfg_.hdah_on) dfeats = hdah_.backward(dfeats, g_depth);
    backbone_.backward(dfeats);
  }

  nn::ParamList<T> params() {
    auto p = backbone_.params();
    if (cfg_.hdah_on) nn::append(p, hdah_.params());
    if (cfg_.distill.enabled) nn::append(p, distiller_.params());
    nn::append(p, stp_.params());
    nn::append(p, head_.params());
    return p;
  }

  void save(const std::string& path) { nn::checkpoint::save(path, cfg_.source, params()); }

  static Model load(const std::string& path) {
    const Config c = nn::checkpoint::read_config(path);
    Model m(RunConfig::from_config(c));
    nn::checkpoint::load(path, m.params());
    return m;
  }

 private:
  bool distilled(Scale s) const { return cfg_.distill.enabled && cfg_.distill.scales.count(s); }

  RunConfig cfg_;
  Backbone<T> backbone_;
  DepthAwareHead<T> hdah_;
  Distiller<T> distiller_;
  Stp<T> stp_;
  BevHead<T> head_;
  StageTimes times_;
};

// ---------------------------------------------------------------------------
// Training

struct StepLosses {
  double total = 0, confidence = 0, offset = 0, height = 0, embedding = 0, depth = 0, distill = 0;
  void add(const StepLosses& o, double w) {
    total += w * o.total;
    confidence += w * o.confidence;
    offset += w * o.offset;
    height += w * o.height;
    embedding += w * o.embedding;
    depth += w * o.depth;
    distill += w * o.distill;
  }
};

struct StepRecord {
  int step = 0;
  StepLosses losses;
  double lr = 0, grad_norm = 0, wall = 0;
};

inline Json step_to_json(const StepRecord& r, bool deterministic) {
  return {{"step", r.step},
          {"total", r.losses.total},
          {"confidence", r.losses.confidence},
          {"offset", r.losses.offset},
          {"height", r.losses.height},
          {"embedding", r.losses.embedding},
          {"depth", r.losses.depth},
          {"distill", r.losses.distill},
          {"lr", r.lr},
          {"grad_norm", r.grad_norm},
          {"wall", deterministic ? 0.0 : r.wall}};
}

// Forward, losses and backward for one sample; gradients accumulate into the
// model parameters scaled by `scale`.
template <class T>
StepLosses accumulate_sample(Model<T>& model, const PreparedSample& s, double scale) {
  const RunConfig& cfg = model.config();
  auto out = model.forward(s.image.cast<T>(), true);
  StepLosses L;
  PredictionGrad<T> g;
  auto hl = head_losses(out.pred, HeadTargets<T>{&s.gt.confidence, &s.gt.offset, &s.gt.height, &s.gt.instance},
                        cfg.loss, &g);
  L.confidence = hl.confidence.value;
  L.offset = hl.offset.value;
  L.height = hl.height.value;
  L.embedding = hl.embedding.value;
  L.total = hl.total(cfg.loss);
  auto scale_all = [&](Tensor<T>& t, double w) {
    for (auto& v : t.data) v = static_cast<T>(v * w);
  };
  if (scale != 1.0)
    for (auto* t : {&g.confidence, &g.embedding, &g.x_offset, &g.height}) scale_all(*t, scale);

  std::optional<Tensor<T>> g_depth;
  if (out.depth) {
    Tensor<T> gd;
    auto dl = depth_supervision_loss(*out.depth, s.depth.cast<T>(), s.depth_mask, &gd);
    L.depth = dl.value;
    if (cfg.depth_weight > 0) {
      L.total += cfg.depth_weight * dl.value;
      scale_all(gd, cfg.depth_weight * scale);
      g_depth = std::move(gd);
    }
  }
  FeaturePyramid<T> g_students;
  for (const auto& [sc, st] : out.students) {
    auto it = s.teacher.find(teacher_tag_for(sc));
    if (it == s.teacher.end()) throw ConfigError("teacher.kind", std::string("teacher lacks tap ") + teacher_tag_for(sc));
    Tensor<T> gs;
    auto dl = distillation_loss(st, it->second.template cast<T>(), &gs);
    L.distill += dl.value;
    // weight 0 leaves the gradient path untouched rather than adding zeros
    if (cfg.distill.loss_enabled && cfg.distill.weight > 0) {
      L.total += cfg.distill.weight * dl.value;
      scale_all(gs, cfg.distill.weight * scale);
      g_students[sc] = std::move(gs);
    }
  }
  model.backward(g, g_depth ? &*g_depth : nullptr, g_students);
  return L;
}

inline double lr_scale_at(int step, const RunConfig& cfg) {
  if (cfg.steps <= 1) return 1.0;
  const double t = static_cast<double>(step) / (cfg.steps - 1);
  return cfg.lr_final + (1 - cfg.lr_final) * 0.5 * (1 + std::cos(M_PI * t));
}

struct TrainResult {
  std::vector<StepRecord> records;
  double seconds = 0;
};

// Deterministic for a fixed config: sample order is drawn from the run seed.
// `log` receives one JSON record per logged step.
template <class T>
TrainResult train_model(Model<T>& model, const std::vector<PreparedSample>& data, std::ostream* log = nullptr,
                        bool deterministic = true, const std::function<void(const StepRecord&)>& on_step = {}) {
  const RunConfig& cfg = model.config();
  if (data.empty()) throw ConfigError("data.train", "training set is empty");
  const auto start = std::chrono::steady_clock::now();
  auto params = model.params();
  nn::Adam<T> opt(params, cfg.adam);
  nn::Rng order_rng(nn::mix_seed(cfg.seed, 202));
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  TrainResult res;
  for (int step = 0; step < cfg.steps; ++step) {
    opt.zero_grad();
    StepLosses avg;
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t k = order.size(); k > 1; --k)
          std::swap(order[k - 1], order[static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<int>(k) - 1))]);
        cursor = 0;
      }
      const auto L = accumulate_sample(model, data[order[cursor++]], 1.0 / cfg.batch);
      avg.add(L, 1.0 / cfg.batch);
    }
    if (!std::isfinite(avg.total)) throw Error("non-finite training loss at step " + std::to_string(step));
    StepRecord rec;
    rec.step = step;
    rec.losses = avg;
    rec.grad_norm = opt.grad_norm();
    rec.lr = cfg.adam.lr * lr_scale_at(step, cfg);
    opt.step(lr_scale_at(step, cfg));
    rec.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.records.push_back(rec);
    if (log && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) *log << step_to_json(rec, deterministic).dump() << std::endl;
    if (on_step) on_step(rec);
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

// ---------------------------------------------------------------------------
// Inference and evaluation

template <class T>
std::vector<ScoredLane> infer_lanes(Model<T>& model, const PreparedSample& s, std::ostream* crf_log = nullptr,
                                    BevPrediction<T>* raw = nullptr) {
  const RunConfig& cfg = model.config();
  auto out = model.forward(s.image.cast<T>(), false);
  auto& times = model.times();
  auto t0 = std::chrono::steady_clock::now();
  BevPrediction<T> pred =
      cfg.crf_on ? refine_all_lanes(out.pred, s.color_bev, s.depth_bev, cfg.crf, cfg.decode, crf_log) : out.pred;
  auto t1 = std::chrono::steady_clock::now();
  times.crf += std::chrono::duration<double>(t1 - t0).count();
  auto lanes = decode_instances(pred, cfg.decode, cfg.grid);
  times.decode += std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  if (raw) *raw = std::move(pred);
  return lanes;
}

struct ModelEval {
  EvalResult result;
  std::vector<std::vector<ScoredLane>> predictions;
  StageTimes times;
};

template <class T>
ModelEval evaluate_model(Model<T>& model, const std::vector<PreparedSample>& data) {
  ModelEval ev;
  model.times() = {};
  std::vector<std::vector<Lane3D>> gts;
  std::vector<std::string> names;
  for (const auto& s : data) {
    ev.predictions.push_back(infer_lanes(model, s));
    gts.push_back(s.lanes);
    names.push_back(s.name);
  }
  ev.result = evaluate(ev.predictions, gts, model.config().eval, names);
  ev.times = model.times();
  return ev;
}

inline Json times_to_json(const StageTimes& t) {
  const double n = t.frames ? static_cast<double>(t.frames) : 1.0;
  return {{"frames", t.frames},
          {"ms_per_frame",
           {{"backbone", 1e3 * t.backbone / n},
            {"hdah", 1e3 * t.hdah / n},
            {"distill", 1e3 * t.distill / n},
            {"stp", 1e3 * t.stp / n},
            {"head", 1e3 * t.head / n},
            {"crf", 1e3 * t.crf / n},
            {"decode", 1e3 * t.decode / n}}}};
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationRow {
  std::string label;
  Config overrides;
};

inline std::vector<AblationRow> scale_rows() {
  std::vector<AblationRow> rows;
  for (const char* s : {"S8", "S16", "S32", "S64", "S128", "S32,S64", "S32,S64,S128"}) {
    AblationRow r;
    r.label = s;
    std::replace(r.label.begin(), r.label.end(), ',', '+');
    r.overrides.set("model.scales", std::string(s));
    rows.push_back(r);
  }
  return rows;
}

inline std::vector<AblationRow> module_rows() {
  const struct {
    bool h, f, c;
  } combos[] = {{true, false, false}, {false, true, false}, {true, true, false},
                {true, false, true},  {false, true, true},  {true, true, true}};
  std::vector<AblationRow> rows;
  for (const auto& k : combos) {
    AblationRow r;
    for (auto [on, name] : {std::pair{k.h, "HDAH"}, std::pair{k.f, "FDAF"}, std::pair{k.c, "CRF"}})
      if (on) r.label += (r.label.empty() ? "" : "+") + std::string(name);
    r.overrides.set("model.hdah", std::string(k.h ? "1" : "0"));
    r.overrides.set("distill.enabled", std::string(k.f ? "1" : "0"));
    r.overrides.set("crf.enabled", std::string(k.c ? "1" : "0"));
    rows.push_back(r);
  }
  return rows;
}

// Rows from a grid document: `ablate.rows = scales | modules | both`, or
// custom rows `ablate.row.<n>.label` / `ablate.row.<n>.set = key=value; ...`.
inline std::vector<AblationRow> ablation_rows(const Config& grid) {
  const auto a = grid.subtree("ablate");
  std::vector<AblationRow> rows;
  const std::string which = a.get<std::string>("rows", a.values().empty() ? "both" : "custom");
  if (which == "scales" || which == "both") rows = scale_rows();
  if (which == "modules" || which == "both")
    for (auto& r : module_rows()) rows.push_back(r);
  if (which != "scales" && which != "modules" && which != "both" && which != "custom")
    throw ConfigError("ablate.rows", "expected scales, modules, both or custom");
  std::map<int, AblationRow> custom;
  for (const auto& [k, v] : a.values()) {
    if (k.rfind("row.", 0) != 0) continue;
    const auto rest = k.substr(4);
    const auto dot = rest.find('.');
    int idx = 0;
    try {
      idx = std::stoi(rest.substr(0, dot));
    } catch (const std::exception&) {
      throw ConfigError("ablate." + k, "row index must be an integer");
    }
    const auto field = dot == std::string::npos ? "" : rest.substr(dot + 1);
    auto& row = custom[idx];
    if (field == "label") {
      row.label = v;
    } else if (field == "set") {
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ';')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("ablate." + k, "expected key=value items separated by ';'");
        row.overrides.set(Config::trim(item.substr(0, eq)), Config::trim(item.substr(eq + 1)));
      }
    } else {
      throw ConfigError("ablate." + k, "unknown row field");
    }
  }
  for (auto& [i, r] : custom) {
    if (r.label.empty()) r.label = "row" + std::to_string(i);
    rows.push_back(r);
  }
  if (rows.empty()) throw ConfigError("ablate.rows", "grid has no rows");
  return rows;
}

struct AblationOutcome {
  AblationRow row;
  EvalResult result;
  double train_seconds = 0;
  double final_loss = 0;
};

// Trains one model per row on `train` (base config + row overrides) and
// evaluates it on `eval`. Samples are re-prepared per row because the image
// size or teacher may change with the overrides.
inline std::vector<AblationOutcome> run_ablation(const Config& base, const std::vector<AblationRow>& rows,
                                                 const std::vector<StoredSample>& train,
                                                 const std::vector<StoredSample>& eval, std::ostream* progress = nullptr,
                                                 const std::filesystem::path& root = ".") {
  std::vector<AblationOutcome> out;
  for (const auto& row : rows) {
    Config c = base;
    c.merge(row.overrides);
    const RunConfig cfg = RunConfig::from_config(c);
    const auto teacher = make_teacher(cfg, root);
    const auto tr = prepare_split(train, cfg, teacher.get());
    const auto ev = &train == &eval ? tr : prepare_split(eval, cfg, nullptr);
    Model<float> model(cfg);
    const auto res = train_model(model, tr);
    AblationOutcome o;
    o.row = row;
    o.train_seconds = res.seconds;
    o.final_loss = res.records.empty() ? 0.0 : res.records.back().losses.total;
    o.result = evaluate_model(model, ev).result;
    if (progress)
      *progress << Json{{"row", row.label}, {"f1", o.result.f1()}, {"ap", o.result.ap}, {"final_loss", o.final_loss}}.dump()
                << std::endl;
    out.push_back(std::move(o));
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationOutcome>& outcomes) {
  std::vector<TableRow> rows;
  for (const auto& o : outcomes) rows.push_back({o.row.label, o.result});
  return format_table(rows);
}

}  // namespace d3l
