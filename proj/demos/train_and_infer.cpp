// Small end-to-end run: generates a few low-resolution scenes, trains the full
// pipeline briefly, then decodes lanes for the first scene and writes a
// figure. Budget is tiny, so expect rough lanes.
//
//   train_and_infer [steps] [out.svg]

#include <cstdlib>
#include <iostream>

#include "d3lane/dataset.hpp"
#include "d3lane/model.hpp"
#include "d3lane/plot.hpp"

using namespace d3l;

int main(int argc, char** argv) {
  const int steps = argc > 1 ? std::atoi(argv[1]) : 300;
  const std::string svg = argc > 2 ? argv[2] : "train_and_infer.svg";

  Config c = Config::parse("model.image_h = 128\nmodel.image_w = 256\nloss.pos_weight = 10\nstp.downsample = 2\n");
  c.set("train.steps", steps);
  const RunConfig cfg = RunConfig::from_config(c);

  SceneConfig sc;
  sc.image_h = 128;
  sc.image_w = 256;
  sc.supersample = 1;
  const SyntheticTeacher teacher(cfg.teacher_seed, cfg.distill.teacher_channels);
  std::vector<PreparedSample> data;
  for (std::size_t i = 0; i < 4; ++i) {
    auto s = generate_scene(sc, i);
    data.push_back(prepare_sample(sample_name(i), s.image, s.depth, s.rig, s.lanes, cfg, &teacher));
  }

  Model<float> model(cfg);
  train_model(model, data, nullptr, true, [&](const StepRecord& r) {
    if (r.step % 50 == 0 || r.step + 1 == steps)
      std::cout << "step " << r.step << " loss " << r.losses.total << " (height " << r.losses.height << ")\n";
  });

  const auto ev = evaluate_model(model, data);
  std::cout << format_table({{"train set", ev.result}});
  write_text(svg, lanes_svg(data[0].lanes, ev.predictions[0], {.title = data[0].name}));
  std::cout << "figure: " << svg << "\n";
}
