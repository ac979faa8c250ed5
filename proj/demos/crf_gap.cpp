// A straight three-cell-wide lane with one weak cell in the middle, refined
// by the lane CRF. Prints the column through the gap before and after, and
// the free energy per sweep.

#include <iomanip>
#include <iostream>
#include <sstream>

#include "d3lane/crf.hpp"

using namespace d3l;

int main() {
  const int rows = 24, cols = 12;
  BevPrediction<float> p = BevPrediction<float>::zeros(rows, cols, 4);
  for (int r = 2; r < rows; ++r)
    for (int c = 4; c <= 6; ++c) p.confidence(0, r, c) = 0.9f;
  p.confidence(0, 12, 5) = 0.3f;  // the gap

  Tensor<float> color(3, rows, cols, 0.4f), depth(1, rows, cols, 0.2f);
  std::ostringstream log;
  const auto out = refine_all_lanes(p, color, depth, CrfConfig{}, DecodeConfig{}, &log);

  std::cout << std::fixed << std::setprecision(3) << "row  before  after   (column 5)\n";
  for (int r = 9; r <= 15; ++r)
    std::cout << std::setw(3) << r << "  " << p.confidence(0, r, 5) << "   " << out.confidence(0, r, 5)
              << (r == 12 ? "   <- gap" : "") << "\n";
  std::cout << "\n" << log.str();

  CrfConfig no_pairwise;
  no_pairwise.w2 = no_pairwise.w3 = 0;
  const auto flat = refine_all_lanes(p, color, depth, no_pairwise, DecodeConfig{});
  std::cout << "with w2 = w3 = 0 the gap stays at " << flat.confidence(0, 12, 5) << "\n";
}
