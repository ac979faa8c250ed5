// d3lane command line: gen-data, train, eval, infer, ablate, record-teacher, plot.
//
// Every command reads an optional key = value config (--config) and applies
// --set key=value overrides on top. Relative paths resolve against --root.
// Failures print one JSON line on stderr and exit nonzero.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "d3lane/dataset.hpp"
#include "d3lane/imageio.hpp"
#include "d3lane/model.hpp"
#include "d3lane/plot.hpp"

namespace fs = std::filesystem;
using namespace d3l;

namespace {

struct Common {
  std::string root = ".";
  std::string config;
  std::vector<std::string> sets;

  fs::path path(const std::string& p) const { return fs::path(p).is_absolute() ? fs::path(p) : fs::path(root) / p; }

  Config overrides() const {
    Config c;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError(kv, "override must look like key=value");
      c.set(Config::trim(kv.substr(0, eq)), Config::trim(kv.substr(eq + 1)));
    }
    return c;
  }

  Config load() const {
    Config c = config.empty() ? Config{} : Config::load(path(config));
    c.merge(overrides());
    return c;
  }
};

bool deterministic() {
  const char* v = std::getenv("D3LANE_DETERMINISTIC");
  return v && *v && std::string(v) != "0";
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_text(p, text);
}

std::vector<StoredSample> load_split(const Common& g, const std::string& dir, std::size_t limit) {
  if (dir.empty()) throw ConfigError("data", "no dataset directory given");
  return read_split(g.path(dir), limit);
}

// Inference-time sections may be changed on a trained checkpoint.
Config checkpoint_config(const std::string& path, const Config& overrides) {
  Config c = nn::checkpoint::read_config(path);
  for (const auto& [k, v] : overrides.values()) {
    const auto sec = k.substr(0, k.find('.'));
    if (sec != "eval" && sec != "decode" && sec != "crf" && sec != "data" && sec != "teacher")
      throw ConfigError(k, "cannot be changed on a trained checkpoint");
    c.set(k, v);
  }
  return c;
}

Model<float> load_model(const Common& g, const std::string& ckpt) {
  const auto path = g.path(ckpt).string();
  Model<float> m(RunConfig::from_config(checkpoint_config(path, g.load())));
  nn::checkpoint::load(path, m.params());
  return m;
}

Json report_json(const ModelEval* ev, const EvalResult& r) {
  Json j = eval_to_json(r);
  if (ev && !deterministic()) j["timing"] = times_to_json(ev->times);
  return j;
}

int cmd_gen_data(const Common& g, const std::string& out, std::size_t count, std::size_t first) {
  const Config c = g.load();
  const SceneConfig scene = SceneConfig::from_config(c.subtree("scene"));
  write_split(g.path(out), scene, count, first);
  std::cout << Json{{"written", count}, {"dir", out}}.dump() << "\n";
  return 0;
}

int cmd_train(const Common& g, std::string data, const std::string& out, std::string log, std::size_t limit) {
  const Config c = g.load();
  const RunConfig cfg = RunConfig::from_config(c);
  if (data.empty()) data = c.get<std::string>("data.train", "");
  const auto split = load_split(g, data, limit);
  const auto teacher = make_teacher(cfg, g.root);
  const auto prepared = prepare_split(split, cfg, teacher.get());
  Model<float> model(cfg);
  std::ofstream log_file;
  if (!log.empty()) {
    const auto lp = g.path(log);
    if (lp.has_parent_path()) fs::create_directories(lp.parent_path());
    log_file.open(lp);
    if (!log_file) throw Error("cannot write " + lp.string());
  }
  const auto res = train_model(model, prepared, log.empty() ? &std::cerr : &log_file, deterministic());
  const auto op = g.path(out);
  if (op.has_parent_path()) fs::create_directories(op.parent_path());
  model.save(op.string());
  Json summary{{"checkpoint", out}, {"steps", cfg.steps}, {"samples", prepared.size()}};
  if (!res.records.empty()) {
    summary["initial_loss"] = res.records.front().losses.total;
    summary["final_loss"] = res.records.back().losses.total;
  }
  if (!deterministic()) summary["seconds"] = res.seconds;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const Common& g, const std::string& ckpt, const std::string& preds_dir, std::string data,
             const std::string& json_out, std::size_t limit) {
  const Config c = g.load();
  if (data.empty()) data = c.get<std::string>("data.eval", "");
  const auto split = load_split(g, data, limit);
  std::vector<std::vector<Lane3D>> gts;
  std::vector<std::string> names;
  for (const auto& s : split) {
    gts.push_back(s.lanes);
    names.push_back(s.name);
  }
  EvalResult result;
  std::optional<ModelEval> ev;
  std::string label;
  if (!preds_dir.empty()) {
    if (!ckpt.empty()) throw ConfigError("checkpoint", "give either --checkpoint or --preds, not both");
    Config ec;
    for (const auto& [k, v] : c.subtree("eval").values()) ec.set(k, v);
    std::vector<std::vector<ScoredLane>> preds;
    for (const auto& n : names) preds.push_back(read_lane_set(g.path(preds_dir) / (n + ".lanes.json")));
    result = evaluate(preds, gts, EvalConfig::from_config(ec), names);
    label = fs::path(preds_dir).filename().string();
  } else {
    if (ckpt.empty()) throw ConfigError("checkpoint", "give --checkpoint or --preds");
    auto model = load_model(g, ckpt);
    ev = evaluate_model(model, prepare_split(split, model.config(), nullptr));
    result = ev->result;
    label = fs::path(ckpt).stem().string();
  }
  std::cout << format_table({{label, result}});
  if (!json_out.empty()) write_file(g.path(json_out), report_json(ev ? &*ev : nullptr, result).dump(1) + "\n");
  return 0;
}

int cmd_infer(const Common& g, const std::string& ckpt, const std::string& image, const std::string& depth,
              const std::string& rig_path, const std::string& out, const std::string& svg, const std::string& crf_log) {
  auto model = load_model(g, ckpt);
  const auto& cfg = model.config();
  const auto ip = g.path(image);
  const Tensor<float> img = ip.extension() == ".ppm" ? read_ppm(ip) : read_pfm(ip);
  const CameraRig rig = rig_path.empty() ? virtual_rig(img.h, img.w) : CameraRig::from_config(Config::load(g.path(rig_path)));
  const Tensor<float> dep = depth.empty() ? Tensor<float>{} : read_pfm(g.path(depth));
  const auto s = prepare_sample(fs::path(image).stem().string(), img, dep, rig, {}, cfg, nullptr);
  std::ofstream crf_file;
  if (!crf_log.empty()) crf_file.open(g.path(crf_log));
  const auto lanes = infer_lanes(model, s, crf_log.empty() ? nullptr : &crf_file);
  write_file(g.path(out), lane_set_to_json(lanes));
  if (!svg.empty()) write_file(g.path(svg), lanes_svg({}, lanes, {.title = s.name}));
  std::cout << Json{{"lanes", lanes.size()}, {"output", out}}.dump() << "\n";
  return 0;
}

int cmd_ablate(const Common& g, const std::string& grid, std::string train, std::string eval, const std::string& out,
               const std::string& json_out, std::size_t limit) {
  const Config base = g.load();
  Config gc = grid.empty() ? base : Config::load(g.path(grid));
  if (!grid.empty()) gc.merge(base);
  const auto rows = ablation_rows(gc);
  if (train.empty()) train = base.get<std::string>("data.train", "");
  if (eval.empty()) eval = base.get<std::string>("data.eval", train);
  Config run;
  for (const auto& [k, v] : base.values())
    if (k.rfind("ablate.", 0) != 0) run.set(k, v);
  const auto tr = load_split(g, train, limit);
  std::vector<StoredSample> ev;
  if (eval != train) ev = load_split(g, eval, limit);
  const auto outcomes = run_ablation(run, rows, tr, eval == train ? tr : ev, &std::cerr, g.root);
  const auto table = ablation_table(outcomes);
  std::cout << table;
  if (!out.empty()) write_file(g.path(out), table);
  if (!json_out.empty()) {
    Json j = Json::array();
    for (const auto& o : outcomes) {
      Json r = eval_to_json(o.result);
      r["label"] = o.row.label;
      r["overrides"] = o.row.overrides.to_string();
      r["final_loss"] = o.final_loss;
      j.push_back(r);
    }
    write_file(g.path(json_out), j.dump(1) + "\n");
  }
  return 0;
}

int cmd_record_teacher(const Common& g, std::string data, const std::string& out, std::size_t limit) {
  const Config c = g.load();
  RunConfig cfg = RunConfig::from_config(c);
  if (cfg.teacher != "synthetic") throw ConfigError("teacher.kind", "only the synthetic adapter can be recorded");
  if (data.empty()) data = c.get<std::string>("data.train", "");
  const auto split = load_split(g, data, limit);
  std::vector<Tensor<float>> images;
  for (const auto& s : split) images.push_back(warp_image_to_virtual(s.image, s.rig, cfg));
  SyntheticTeacher teacher(cfg.teacher_seed, cfg.distill.teacher_channels);
  const auto op = g.path(out);
  if (op.has_parent_path()) fs::create_directories(op.parent_path());
  const auto a = record_teacher_features(images, teacher, op);
  std::cout << Json{{"images", a.entries.size()}, {"archive", out}}.dump() << "\n";
  return 0;
}

int cmd_plot(const Common& g, const std::vector<std::string>& preds, const std::vector<std::string>& gts,
             const std::string& out, const std::string& title) {
  std::vector<ScoredLane> p;
  std::vector<Lane3D> t;
  for (const auto& f : preds)
    for (auto& l : read_lane_set(g.path(f))) p.push_back(std::move(l));
  for (const auto& f : gts)
    for (auto& l : read_lane_set(g.path(f))) t.push_back(std::move(l.lane));
  write_file(g.path(out), lanes_svg(t, p, {.title = title}));
  std::cout << Json{{"figure", out}, {"pred_lanes", p.size()}, {"gt_lanes", t.size()}}.dump() << "\n";
  return 0;
}

Json error_json(const char* kind, const std::string& message) { return {{"error", kind}, {"message", message}}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D lane detection pipeline"};
  app.require_subcommand(1);
  Common g;
  app.add_option("--root", g.root, "workspace root for relative paths");
  app.add_option("-c,--config", g.config, "key = value config file");
  app.add_option("-s,--set", g.sets, "override, key=value (repeatable)");

  std::string out, data, eval_data, log, ckpt, preds_dir, json_out, grid, image, depth, rig, svg, crf_log, title;
  std::size_t count = 32, first = 0, limit = 0;
  std::vector<std::string> pred_files, gt_files;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic scenes");
  gen->add_option("-o,--out", out, "output directory")->required();
  gen->add_option("-n,--count", count, "number of scenes");
  gen->add_option("--first", first, "index of the first scene");

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("-d,--data", data, "training split (default data.train)");
  train->add_option("-o,--out", out, "checkpoint path")->required();
  train->add_option("--log", log, "JSONL training log (default stderr)");
  train->add_option("--limit", limit, "use at most this many samples");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or a directory of lane sets");
  eval->add_option("--checkpoint", ckpt);
  eval->add_option("--preds", preds_dir, "directory of <name>.lanes.json predictions");
  eval->add_option("-d,--data", data, "evaluation split (default data.eval)");
  eval->add_option("--json", json_out, "write the JSON report here");
  eval->add_option("--limit", limit);

  auto* infer = app.add_subcommand("infer", "detect lanes in one image");
  infer->add_option("--checkpoint", ckpt)->required();
  infer->add_option("--image", image, "PFM or PPM image")->required();
  infer->add_option("--depth", depth, "optional PFM inverse depth for the CRF");
  infer->add_option("--rig", rig, "camera rig key = value file (default virtual rig)");
  infer->add_option("-o,--out", out, "lane-set JSON output")->required();
  infer->add_option("--svg", svg, "optional figure");
  infer->add_option("--crf-log", crf_log, "per-lane CRF free energy log");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate every row of an ablation grid");
  ablate->add_option("--grid", grid, "grid file (default: ablate.* keys of the config)");
  ablate->add_option("-d,--data", data, "training split (default data.train)");
  ablate->add_option("--eval-data", eval_data, "evaluation split (default data.eval, else the training split)");
  ablate->add_option("-o,--out", out, "write the table here");
  ablate->add_option("--json", json_out);
  ablate->add_option("--limit", limit);

  auto* rec = app.add_subcommand("record-teacher", "record teacher features for a split");
  rec->add_option("-d,--data", data);
  rec->add_option("-o,--out", out, "archive path")->required();
  rec->add_option("--limit", limit);

  auto* plot = app.add_subcommand("plot", "BEV and 3D figure from lane-set files");
  plot->add_option("--pred", pred_files, "predicted lane sets");
  plot->add_option("--gt", gt_files, "ground-truth lane sets");
  plot->add_option("-o,--out", out, "SVG output")->required();
  plot->add_option("--title", title);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_json("usage", e.what()).dump() << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(g, out, count, first);
    if (*train) return cmd_train(g, data, out, log, limit);
    if (*eval) return cmd_eval(g, ckpt, preds_dir, data, json_out, limit);
    if (*infer) return cmd_infer(g, ckpt, image, depth, rig, out, svg, crf_log);
    if (*ablate) return cmd_ablate(g, grid, data, eval_data, out, json_out, limit);
    if (*rec) return cmd_record_teacher(g, data, out, limit);
    if (*plot) return cmd_plot(g, pred_files, gt_files, out, title);
  } catch (const ConfigError& e) {
    Json j = error_json("config", e.what());
    j["key"] = e.key();
    std::cerr << j.dump() << "\n";
    return 2;
  } catch (const ParseError& e) {
    Json j = error_json("parse", e.what());
    j["key"] = e.key();
    j["byte"] = e.byte_offset();
    std::cerr << j.dump() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << error_json("format", e.what()).dump() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << error_json("runtime", e.what()).dump() << "\n";
    return 1;
  }
  return 1;
}
