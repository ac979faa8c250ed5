// Renders one synthetic scene, warps it to the virtual camera and into the
// BEV grid, and writes the three images plus the ground-truth figure.
//
//   scene_to_bev [out_dir] [seed]

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "d3lane/annotations.hpp"
#include "d3lane/data.hpp"
#include "d3lane/dataset.hpp"
#include "d3lane/geometry.hpp"
#include "d3lane/imageio.hpp"
#include "d3lane/plot.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path out = argc > 1 ? argv[1] : "scene_to_bev";
  d3l::SceneConfig sc;
  sc.seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
  fs::create_directories(out);

  const auto s = d3l::generate_scene(sc, 0);
  const auto virt = d3l::virtual_rig(sc.image_h, sc.image_w);
  const auto warped = d3l::warp_to_virtual(s.image, s.rig, virt);
  const auto grid = d3l::BevGrid{};
  const auto bev = d3l::warp_fv_raster_to_bev(warped, virt, grid);

  d3l::write_ppm(out / "image.ppm", s.image);
  d3l::write_ppm(out / "virtual.ppm", warped);
  d3l::write_ppm(out / "bev.ppm", bev.values);  // 200 x 40, far rows at the top
  d3l::write_text(out / "gt.svg", d3l::lanes_svg(s.lanes, {}, {.title = "ground truth, seed " + std::to_string(sc.seed)}));

  const auto r = s.rig.to_config();
  std::cout << "rig pitch " << r.get<std::string>("pitch_deg", "") << " deg, height " << r.get<std::string>("tz", "")
            << " m; " << s.lanes.size() << " lanes, slope amplitude " << s.params.amplitude << " m\n";
  for (std::size_t k = 0; k < s.lanes.size(); ++k) {
    const auto& l = s.lanes[k];
    std::cout << "  lane " << k << ": y " << l.y_begin() << ".." << l.y_end() << " m, z at far end "
              << l.points.back().z() << " m\n";
  }
  std::cout << "wrote " << out.string() << "/{image,virtual,bev}.ppm and gt.svg\n";
}
