#include <gtest/gtest.h>

#include "d3lane/bevhead.hpp"
#include "d3lane/data.hpp"
#include "gradcheck.hpp"

using namespace d3l;

namespace {

BevGrid small_grid() { return BevGrid::make(-2.0, 2.0, 3.0, 11.0, 0.5, 0.5); }  // 16 x 8

Tensor<double> random_tensor(int c, int h, int w, nn::Rng& rng, double scale = 1.0) {
  Tensor<double> t(c, h, w);
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// Smooth scalar objective over every prediction field.
struct Projection {
  BevPrediction<double> w;
  explicit Projection(const BevPrediction<double>& shape, nn::Rng& rng) {
    w = shape;
    for (auto* t : {&w.confidence, &w.embedding, &w.x_offset, &w.height})
      for (auto& v : t->data) v = rng.normal();
  }
  double value(const BevPrediction<double>& p) const {
    double s = 0;
    for (std::size_t i = 0; i < p.confidence.size(); ++i) s += w.confidence.data[i] * p.confidence.data[i];
    for (std::size_t i = 0; i < p.embedding.size(); ++i) s += w.embedding.data[i] * p.embedding.data[i];
    for (std::size_t i = 0; i < p.x_offset.size(); ++i) s += w.x_offset.data[i] * p.x_offset.data[i];
    for (std::size_t i = 0; i < p.height.size(); ++i) s += w.height.data[i] * p.height.data[i];
    return s;
  }
  // gradient with the confidence entry expressed per logit
  PredictionGrad<double> grad(const BevPrediction<double>& p) const {
    auto g = w;
    for (std::size_t i = 0; i < p.confidence.size(); ++i) {
      const double c = p.confidence.data[i];
      g.confidence.data[i] = w.confidence.data[i] * c * (1 - c);
    }
    return g;
  }
};

Lane3D straight(double x, double z = 0.0) {
  Lane3D l;
  l.points = {Vec3(x, 0, z), Vec3(x, 120, z)};
  return l;
}

struct Targets {
  GtRasters g;
  HeadTargets<double> view() const { return {&g.confidence, &g.offset, &g.height, &g.instance}; }
};

BevPrediction<double> perfect_prediction(const GtRasters& g, int embed_dim) {
  auto p = BevPrediction<double>::zeros(g.confidence.h, g.confidence.w, embed_dim);
  const int n = g.confidence.h * g.confidence.w;
  for (int i = 0; i < n; ++i) {
    p.confidence.data[i] = g.confidence.data[i];
    p.x_offset.data[i] = g.offset.data[i];
    p.height.data[i] = g.height.data[i];
    if (g.instance[i] > 0) p.embedding.data[i] = 2.0 * g.instance[i];  // lanes 2 apart on axis 0
  }
  return p;
}

// Straightforward per-term reference of the head losses.
std::array<double, 4> reference_losses(const BevPrediction<double>& p, const GtRasters& g, double margin) {
  const int n = p.rows() * p.cols(), E = p.embedding.c;
  double bce = 0;
  for (int i = 0; i < n; ++i) {
    const double t = g.confidence.data[i], q = p.confidence.data[i];
    if (t > 0) bce -= t * std::log(q);
    if (t < 1) bce -= (1 - t) * std::log(1 - q);
  }
  bce /= n;
  double off = 0, hgt = 0;
  int npos = 0;
  int K = 0;
  for (int i = 0; i < n; ++i)
    if (g.instance[i] > 0) {
      off += std::abs(p.x_offset.data[i] - g.offset.data[i]);
      hgt += std::abs(p.height.data[i] - g.height.data[i]);
      ++npos;
      K = std::max(K, g.instance[i]);
    }
  std::vector<std::vector<double>> mu(K + 1, std::vector<double>(E, 0.0));
  std::vector<int> cnt(K + 1, 0);
  for (int i = 0; i < n; ++i)
    if (int k = g.instance[i]; k > 0) {
      ++cnt[k];
      for (int e = 0; e < E; ++e) mu[k][e] += p.embedding.data[e * n + i];
    }
  std::vector<int> present;
  for (int k = 1; k <= K; ++k)
    if (cnt[k] > 0) {
      present.push_back(k);
      for (int e = 0; e < E; ++e) mu[k][e] /= cnt[k];
    }
  double pull = 0;
  for (int i = 0; i < n; ++i)
    if (int k = g.instance[i]; k > 0)
      for (int e = 0; e < E; ++e) {
        const double d = p.embedding.data[e * n + i] - mu[k][e];
        pull += d * d / cnt[k];
      }
  pull /= present.size();
  double push = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < present.size(); ++a)
    for (std::size_t b = a + 1; b < present.size(); ++b) {
      double d2 = 0;
      for (int e = 0; e < E; ++e) d2 += std::pow(mu[present[a]][e] - mu[present[b]][e], 2);
      push += std::pow(std::max(0.0, margin - std::sqrt(d2)), 2);
      ++pairs;
    }
  if (pairs) push /= pairs;
  return {bce, off / npos, hgt / npos, pull + push};
}

}  // namespace

TEST(Stp, ProducesQuarterResolutionBevFromTwoScales) {
  nn::Rng rng(1);
  BevGrid grid;
  Stp<float> stp({{Scale::S32, 24}, {Scale::S64, 24}}, 256, 512, grid, StpConfig{}, rng);
  FeaturePyramid<float> in;
  in[Scale::S32] = Tensor<float>(24, 8, 16);
  in[Scale::S64] = Tensor<float>(24, 4, 8);
  for (auto& [s, t] : in)
    for (auto& v : t.data) v = static_cast<float>(rng.normal());
  auto bev = stp.forward(in);
  EXPECT_EQ(bev.c, 32);
  EXPECT_EQ(bev.h, 50);
  EXPECT_EQ(bev.w, 10);
  HeadConfig hc;
  BevHead<float> head(32, grid, hc, rng);
  auto p = head.forward(bev);
  EXPECT_EQ(p.rows(), 200);
  EXPECT_EQ(p.cols(), 40);
  EXPECT_EQ(p.embedding.c, 4);
  in[Scale::S64] = Tensor<float>(24, 8, 8);
  EXPECT_THROW(stp.forward(in), ShapeError);
  in.erase(Scale::S64);
  EXPECT_THROW(stp.forward(in), ConfigError);
  EXPECT_THROW(Stp<float>({{Scale::S32, 4}}, 256, 512, BevGrid::make(-10, 10, 3, 103, 0.5, 0.7), StpConfig{}, rng),
               ConfigError);
}

TEST(Stp, GradientsMatchFiniteDifferences) {
  nn::Rng rng(2);
  const BevGrid grid = small_grid();
  StpConfig cfg;
  cfg.channels = 8;
  cfg.groups = 2;
  Stp<double> stp({{Scale::S32, 3}, {Scale::S64, 2}}, 64, 128, grid, cfg, rng);
  gradcheck::jitter_biases(stp.params(), 3);
  for (auto* p : stp.params())
    if (p->name.find("view_bias") != std::string::npos)
      for (auto& v : p->value) v = rng.uniform(-0.2, 0.2);
  FeaturePyramid<double> in;
  in[Scale::S32] = random_tensor(3, 2, 4, rng);
  in[Scale::S64] = random_tensor(2, 1, 2, rng);
  const auto w = random_tensor(8, 4, 2, rng);
  auto loss = [&] {
    auto y = stp.forward(in);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w.data[i] * y.data[i];
    return s;
  };
  for (auto* p : stp.params()) p->zero_grad();
  loss();
  auto dx = stp.backward(w);
  auto r = gradcheck::check_params(stp.params(), loss, 6, 4);
  EXPECT_LT(r.max_rel_err, 1e-5) << r.worst;
  EXPECT_GT(r.checked, 20);
  for (auto s : {Scale::S32, Scale::S64}) {
    auto r2 = gradcheck::check_inputs(in[s].data, dx[s].data, loss, 8, 5);
    EXPECT_LT(r2.max_rel_err, 1e-5) << r2.worst;
  }
}

TEST(BevHead, GradientsMatchFiniteDifferences) {
  nn::Rng rng(6);
  const BevGrid grid = small_grid();
  HeadConfig hc;
  hc.hidden = 5;
  BevHead<double> head(4, grid, hc, rng);
  gradcheck::jitter_biases(head.params(), 7);
  auto x = random_tensor(4, 4, 2, rng);
  Projection proj(head.forward(x), rng);
  auto loss = [&] { return proj.value(head.forward(x)); };
  for (auto* p : head.params()) p->zero_grad();
  auto pred = head.forward(x);
  auto dx = head.backward(proj.grad(pred));
  auto r = gradcheck::check_params(head.params(), loss, 8, 8);
  EXPECT_LT(r.max_rel_err, 1e-5) << r.worst;
  auto r2 = gradcheck::check_inputs(x.data, dx.data, loss, 12, 9);
  EXPECT_LT(r2.max_rel_err, 1e-5) << r2.worst;
}

TEST(BevHead, OutputsStayInRangeOverRandomInputs) {
  nn::Rng rng(10);
  const BevGrid grid = small_grid();
  BevHead<float> head(4, grid, HeadConfig{}, rng);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor<float> x(4, 4, 2);
    const double scale = std::pow(10.0, rng.uniform(-2, 3));
    for (auto& v : x.data) v = static_cast<float>(scale * rng.normal());
    auto p = head.forward(x);
    for (float c : p.confidence.data) {
      ASSERT_GE(c, 0.0f);
      ASSERT_LE(c, 1.0f);
    }
    for (float o : p.x_offset.data) {
      ASSERT_GE(o, -0.5f);
      ASSERT_LE(o, 0.5f);
    }
    for (float h : p.height.data) ASSERT_TRUE(std::isfinite(h));
  }
}

TEST(HeadLosses, ZeroAtPerfectPrediction) {
  const BevGrid grid;
  Targets t{rasterize_gt({straight(-1.7, 0.4), straight(1.9, -0.2)}, grid)};
  auto p = perfect_prediction(t.g, 4);
  auto L = head_losses(p, t.view(), HeadLossConfig{});
  EXPECT_EQ(L.confidence.value, 0.0);
  EXPECT_EQ(L.offset.value, 0.0);
  EXPECT_EQ(L.height.value, 0.0);
  EXPECT_EQ(L.embedding.value, 0.0);
  EXPECT_FALSE(L.embedding.flagged);
}

TEST(HeadLosses, MatchScalarReference) {
  nn::Rng rng(12);
  const BevGrid grid = small_grid();
  Lane3D bent;
  bent.points = {Vec3(-1.2, 0, 0.1), Vec3(-0.6, 6, 0.3), Vec3(0.3, 12, -0.2)};
  Targets t{rasterize_gt({bent, straight(1.4, 0.2), straight(0.6)}, grid)};
  auto p = BevPrediction<double>::zeros(grid.rows, grid.cols, 3);
  for (auto& v : p.confidence.data) v = rng.uniform(0.02, 0.98);
  for (auto& v : p.embedding.data) v = 0.4 * rng.normal();
  for (auto& v : p.x_offset.data) v = rng.uniform(-0.5, 0.5);
  for (auto& v : p.height.data) v = rng.normal();
  HeadLossConfig cfg;
  cfg.margin = 1.5;
  auto L = head_losses(p, t.view(), cfg);
  auto ref = reference_losses(p, t.g, cfg.margin);
  EXPECT_NEAR(L.confidence.value, ref[0], 1e-12);
  EXPECT_NEAR(L.offset.value, ref[1], 1e-12);
  EXPECT_NEAR(L.height.value, ref[2], 1e-12);
  EXPECT_NEAR(L.embedding.value, ref[3], 1e-12);
  EXPECT_GT(ref[3], 0.0);
}

TEST(HeadLosses, GradientsMatchFiniteDifferences) {
  nn::Rng rng(13);
  const BevGrid grid = small_grid();
  Targets t{rasterize_gt({straight(-1.2, 0.3), straight(0.4, -0.1), straight(1.3)}, grid)};
  const int n = grid.cells(), E = 3;
  Buffer<double> logits(static_cast<std::size_t>(n));
  for (auto& v : logits) v = 2 * rng.normal();
  auto p = BevPrediction<double>::zeros(grid.rows, grid.cols, E);
  for (auto& v : p.embedding.data) v = 0.3 * rng.normal();
  for (auto& v : p.x_offset.data) v = rng.uniform(-0.5, 0.5);
  for (auto& v : p.height.data) v = rng.normal();
  HeadLossConfig cfg;
  cfg.w_confidence = 1.3;
  cfg.w_offset = 0.7;
  cfg.w_height = 0.9;
  cfg.w_embedding = 1.1;
  cfg.pos_weight = 2.5;
  auto sync = [&] {
    for (int i = 0; i < n; ++i) p.confidence.data[i] = nn::sigmoid(logits[static_cast<std::size_t>(i)]);
  };
  auto loss = [&] {
    sync();
    return head_losses(p, t.view(), cfg).total(cfg);
  };
  sync();
  PredictionGrad<double> g;
  head_losses(p, t.view(), cfg, &g);
  auto check = [&](Buffer<double>& x, const Buffer<double>& a, const char* what) {
    auto r = gradcheck::check_inputs(x, a, loss, 40, 14);
    EXPECT_LT(r.max_rel_err, 1e-5) << what << " " << r.worst;
    EXPECT_GT(r.checked, 10) << what;
  };
  check(logits, g.confidence.data, "confidence");
  check(p.embedding.data, g.embedding.data, "embedding");
  check(p.x_offset.data, g.x_offset.data, "offset");
  check(p.height.data, g.height.data, "height");
}

TEST(HeadLosses, NoPositivesFlagsInstanceTerms) {
  const BevGrid grid = small_grid();
  Targets t{rasterize_gt({}, grid)};
  auto p = BevPrediction<double>::zeros(grid.rows, grid.cols, 4);
  for (auto& v : p.confidence.data) v = 0.25;
  PredictionGrad<double> g;
  auto L = head_losses(p, t.view(), HeadLossConfig{}, &g);
  EXPECT_TRUE(L.embedding.flagged);
  EXPECT_TRUE(L.offset.flagged);
  EXPECT_EQ(L.embedding.value, 0.0);
  EXPECT_NEAR(L.confidence.value, -std::log(0.75), 1e-12);
  for (double v : g.embedding.data) EXPECT_EQ(v, 0.0);
}

TEST(Decode, RasterizedLaneRoundTrips) {
  const BevGrid grid;
  Lane3D lane;
  for (double y = 0; y <= 110; y += 1) lane.points.emplace_back(-3.0 + 0.02 * y + 1e-4 * y * y, y, 0.5 * std::sin(y / 20));
  auto g = rasterize_gt({lane}, grid);
  auto p = perfect_prediction(g, 4);
  auto out = decode_instances(p, DecodeConfig{}, grid);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].score, 1.0);
  EXPECT_EQ(static_cast<int>(out[0].lane.points.size()), g.positives());
  for (const auto& q : out[0].lane.points) {
    auto xz = lane.at(q.y());
    ASSERT_TRUE(xz);
    EXPECT_NEAR(q.x(), xz->x(), 1e-6);
    EXPECT_NEAR(q.z(), xz->y(), 1e-6);
  }
}

TEST(Decode, SeparatesTwoLanesByEmbedding) {
  const BevGrid grid;
  auto g = rasterize_gt({straight(-1.75, 0.1), straight(1.75, -0.1)}, grid);
  auto p = perfect_prediction(g, 4);
  // confidences below one and unequal so visitation order matters
  nn::Rng rng(15);
  for (int i = 0; i < grid.cells(); ++i)
    if (g.instance[static_cast<std::size_t>(i)] > 0) p.confidence.data[i] = rng.uniform(0.6, 0.99);
  auto out = decode_instances(p, DecodeConfig{}, grid);
  ASSERT_EQ(out.size(), 2u);
  std::vector<double> xs;
  for (const auto& l : out) {
    EXPECT_EQ(static_cast<int>(l.lane.points.size()), grid.rows);
    EXPECT_GT(l.score, 0.6);
    EXPECT_LT(l.score, 0.99);
    xs.push_back(l.lane.points.front().x());
    for (const auto& q : l.lane.points) EXPECT_NEAR(q.x(), l.lane.points.front().x(), 1e-6);
  }
  std::sort(xs.begin(), xs.end());
  EXPECT_NEAR(xs[0], -1.75, 1e-6);
  EXPECT_NEAR(xs[1], 1.75, 1e-6);
}

TEST(Decode, DropsSingleRowClustersAndSubThresholdCells) {
  const BevGrid grid = small_grid();
  auto p = BevPrediction<double>::zeros(grid.rows, grid.cols, 2);
  p.confidence(0, 3, 2) = 0.9;
  p.confidence(0, 3, 3) = 0.8;  // same row, same embedding: one-row cluster
  p.confidence(0, 7, 5) = 0.5;  // not above the threshold
  p.confidence(0, 8, 5) = 0.5;
  EXPECT_TRUE(decode_instances(p, DecodeConfig{}, grid).empty());
  p.confidence(0, 4, 3) = 0.7;
  auto out = decode_instances(p, DecodeConfig{}, grid);
  ASSERT_EQ(out.size(), 1u);
  ASSERT_EQ(out[0].lane.points.size(), 2u);
  EXPECT_DOUBLE_EQ(out[0].lane.points[0].x(), grid.center_x(2));  // row 3: highest confidence wins
  EXPECT_DOUBLE_EQ(out[0].score, (0.9 + 0.7) / 2);
}

TEST(Decode, InvariantToMonotoneConfidenceRescale) {
  const BevGrid grid;
  nn::Rng rng(16);
  auto p = BevPrediction<double>::zeros(grid.rows, grid.cols, 4);
  for (auto& v : p.confidence.data) v = rng.uniform();
  for (auto& v : p.embedding.data) v = 3 * rng.normal();
  for (auto& v : p.x_offset.data) v = rng.uniform(-0.5, 0.5);
  auto q = p;
  for (auto& v : q.confidence.data) v = v * v * v;
  DecodeConfig a, b;
  b.conf_threshold = std::pow(a.conf_threshold, 3);
  auto oa = decode_instances(p, a, grid);
  auto ob = decode_instances(q, b, grid);
  ASSERT_EQ(oa.size(), ob.size());
  EXPECT_GT(oa.size(), 1u);
  for (std::size_t k = 0; k < oa.size(); ++k) EXPECT_EQ(oa[k].lane.points, ob[k].lane.points);
}
