#include <random>

#include <gtest/gtest.h>

#include "d3lane/geometry.hpp"

using namespace d3l;

namespace {

CameraRig pitched_rig(double pitch, double height = 1.5, double yaw = 0.0, double roll = 0.0) {
  return CameraRig::from_angles(400, 410, 256, 128, 256, 512, {roll, pitch, yaw}, Vec3(0.2, -0.3, height));
}

// Marches along the viewing ray in coarse steps until it crosses z = 0,
// then refines the bracket by bisection.
std::optional<Vec3> ray_march(const Vec2& px, const CameraRig& rig) {
  Vec3 dir = rig.rotation().transpose() * (rig.intrinsics().inverse() * Vec3(px.x(), px.y(), 1.0));
  dir.normalize();
  const Vec3 o = rig.translation();
  double lo = 0.0, hi = -1.0;
  for (double s = 0.25; s < 5000.0; s += 0.25) {
    if ((o + s * dir).z() <= 0.0) {
      hi = s;
      lo = s - 0.25;
      break;
    }
  }
  if (hi < 0) return std::nullopt;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    ((o + mid * dir).z() > 0.0 ? lo : hi) = mid;
  }
  return o + 0.5 * (lo + hi) * dir;
}

CameraRig random_rig(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pitch(-2.0, 8.0), yaw(-4.0, 4.0), roll(-2.0, 2.0), h(1.2, 2.2),
      f(300, 500), off(-20, 20), txy(-0.5, 0.5);
  double fx = f(rng);
  return CameraRig::from_angles(fx, fx * 1.02, 256 + off(rng), 128 + off(rng), 256, 512,
                                {roll(rng), pitch(rng), yaw(rng)}, Vec3(txy(rng), txy(rng), h(rng)));
}

}  // namespace

TEST(CameraRig, RejectsInvalidParameters) {
  Mat3 K;
  K << 400, 0, 256, 0, 400, 128, 0, 0, 1;
  Mat3 R = pitched_rig(3).rotation();
  EXPECT_THROW(CameraRig(K, R, Vec3(0, 0, 0.0), 256, 512), ConfigError);
  EXPECT_THROW(CameraRig(K, R, Vec3(0, 0, -1.0), 256, 512), ConfigError);
  Mat3 bad = R;
  bad(0, 0) += 1e-3;
  EXPECT_THROW(CameraRig(K, bad, Vec3(0, 0, 1.5), 256, 512), ConfigError);
  Mat3 K2 = K;
  K2(1, 0) = 1.0;
  EXPECT_THROW(CameraRig(K2, R, Vec3(0, 0, 1.5), 256, 512), ConfigError);
  Mat3 K3 = K;
  K3(0, 0) = -1.0;
  EXPECT_THROW(CameraRig(K3, R, Vec3(0, 0, 1.5), 256, 512), ConfigError);
}

TEST(CameraRig, AnglesRoundTripThroughConfig) {
  auto rig = pitched_rig(4.5, 1.7, -2.0, 1.25);
  auto a = rig.angles();
  EXPECT_NEAR(a.pitch_deg, 4.5, 1e-9);
  EXPECT_NEAR(a.yaw_deg, -2.0, 1e-9);
  EXPECT_NEAR(a.roll_deg, 1.25, 1e-9);
  auto back = CameraRig::from_config(rig.to_config());
  EXPECT_LT((back.rotation() - rig.rotation()).norm(), 1e-12);
  EXPECT_LT((back.intrinsics() - rig.intrinsics()).norm(), 1e-12);
  EXPECT_LT((back.translation() - rig.translation()).norm(), 1e-12);
}

TEST(CameraRig, PositivePitchLooksDown) {
  auto rig = pitched_rig(10);
  Vec3 axis = rig.ray_direction(rig.intrinsics()(0, 2), rig.intrinsics()(1, 2));
  EXPECT_LT(axis.z(), 0.0);
  EXPECT_GT(axis.y(), 0.0);
}

TEST(RayGround, NadirCameraHitsPointBelow) {
  auto rig = CameraRig::from_angles(400, 400, 256, 128, 256, 512, {0, 90, 0}, Vec3(1.0, 2.0, 3.0));
  auto p = ray_ground_intersection(Vec2(256, 128), rig);
  ASSERT_TRUE(p);
  EXPECT_NEAR(p->x(), 1.0, 1e-12);
  EXPECT_NEAR(p->y(), 2.0, 1e-12);
  EXPECT_EQ(p->z(), 0.0);
}

TEST(RayGround, HorizonRowHasNoIntersection) {
  // Zero pitch: the horizon passes through the principal point row.
  auto rig = CameraRig::from_angles(400, 400, 256, 128, 256, 512, {0, 0, 0}, Vec3(0, 0, 1.5));
  EXPECT_FALSE(ray_ground_intersection(Vec2(100, 128), rig));
  EXPECT_FALSE(ray_ground_intersection(Vec2(100, 20), rig));
  EXPECT_TRUE(ray_ground_intersection(Vec2(100, 200), rig));
}

TEST(RayGround, MatchesRayMarchOracleAndReprojects) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> uu(0, 511), vv(0, 255);
  int checked = 0;
  for (int i = 0; i < 50; ++i) {
    auto rig = random_rig(rng);
    for (int k = 0; k < 20; ++k) {
      Vec2 px(uu(rng), vv(rng));
      auto p = ray_ground_intersection(px, rig);
      auto q = ray_march(px, rig);
      if (!p || !q || p->norm() > 4000) continue;
      EXPECT_LT((*p - *q).norm(), 1e-6) << "pixel " << px.transpose();
      auto back = rig.project(*p);
      ASSERT_TRUE(back);
      EXPECT_LT((*back - px).norm(), 1e-6);
      ++checked;
    }
  }
  EXPECT_GT(checked, 300);
}

TEST(GroundHomography, IdentityAndInverseComposition) {
  std::mt19937_64 rng(3);
  auto a = random_rig(rng), b = random_rig(rng);
  Mat3 I = ground_homography(a, a);
  EXPECT_LT((I / I(2, 2) - Mat3::Identity()).norm(), 1e-9);
  Mat3 C = ground_homography(a, b) * ground_homography(b, a);
  EXPECT_LT((C / C(2, 2) - Mat3::Identity()).norm(), 1e-9);
}

TEST(GroundHomography, TransfersGroundPointsAgainstRayOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uu(0, 511), vv(0, 255);
  for (int trial = 0; trial < 40; ++trial) {
    auto src = random_rig(rng), dst = random_rig(rng);
    Mat3 H = ground_homography(src, dst);
    int n = 0;
    while (n < 8) {
      Vec2 px(uu(rng), vv(rng));
      auto g = ray_march(px, src);
      if (!g || g->norm() > 300) continue;
      auto want = dst.project(*g);
      if (!want) continue;
      Vec3 h = H * Vec3(px.x(), px.y(), 1.0);
      Vec2 got(h.x() / h.z(), h.y() / h.z());
      EXPECT_LT((got - *want).norm(), 1e-6);
      ++n;
    }
  }
}

TEST(GroundHomography, CompositionProperty) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    auto a = random_rig(rng), b = random_rig(rng), c = random_rig(rng);
    Mat3 direct = ground_homography(a, c);
    Mat3 chained = ground_homography(b, c) * ground_homography(a, b);
    direct /= direct.norm();
    chained /= chained.norm();
    if (direct(2, 2) * chained(2, 2) < 0) chained = -chained;
    EXPECT_LT((direct - chained).norm(), 1e-8);
  }
}

TEST(WarpToVirtual, IdentityRigIsExactCopy) {
  auto rig = pitched_rig(3);
  Tensor<float> img(3, 256, 512);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> d(0, 1);
  for (auto& v : img.data) v = d(rng);
  auto out = warp_to_virtual(img, rig, rig);
  EXPECT_EQ(out.data, img.data);
  auto twice = warp_to_virtual(out, rig, rig);
  EXPECT_EQ(twice.data, img.data);
}

TEST(WarpToVirtual, SkyRegionIsFinite) {
  auto src = pitched_rig(1.0, 1.6, 2.0);
  auto virt = virtual_rig(256, 512);
  Tensor<float> img(3, 256, 512, 0.5f);
  auto out = warp_to_virtual(img, src, virt);
  EXPECT_TRUE(out.all_finite());
  EXPECT_THROW(warp_to_virtual(Tensor<float>(3, 100, 100), src, virt), ShapeError);
}

TEST(BevGrid, CornerCellAndRoundTrip) {
  auto g = BevGrid::make(-10, 10, 3, 103, 0.5, 0.5);
  EXPECT_EQ(g.rows, 200);
  EXPECT_EQ(g.cols, 40);
  Vec3 p = bev_cell_to_road(0, 0, g);
  EXPECT_DOUBLE_EQ(p.x(), -9.75);
  EXPECT_DOUBLE_EQ(p.y(), 3.25);
  EXPECT_EQ(p.z(), 0.0);
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) {
      Vec3 q = bev_cell_to_road(r, c, g);
      auto cell = road_to_bev_cell(q.x(), q.y(), g);
      ASSERT_TRUE(cell);
      EXPECT_EQ(*cell, (Cell{r, c}));
    }
  EXPECT_FALSE(road_to_bev_cell(11, 50, g));
  EXPECT_FALSE(road_to_bev_cell(0, 2.9, g));
  EXPECT_THROW(BevGrid::make(1, 0, 3, 103, 0.5, 0.5), ConfigError);
}

TEST(WarpFvToBev, ConstantRasterAndMonotoneColumns) {
  auto rig = virtual_rig(256, 512);
  BevGrid g;
  Tensor<double> cst(1, 256, 512, 0.75);
  auto b = warp_fv_raster_to_bev(cst, rig, g);
  int valid = 0;
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c)
      if (b.is_valid(r, c)) {
        EXPECT_EQ(b.values(0, r, c), 0.75);
        ++valid;
      }
  EXPECT_GT(valid, g.cells() / 2);

  Tensor<double> ucoord(1, 256, 512);
  for (int v = 0; v < 256; ++v)
    for (int u = 0; u < 512; ++u) ucoord(0, v, u) = u;
  auto bu = warp_fv_raster_to_bev(ucoord, rig, g);
  for (int r = 0; r < g.rows; ++r) {
    double prev = -1;
    for (int c = 0; c < g.cols; ++c) {
      if (!bu.is_valid(r, c)) continue;
      double want = rig.project(bev_cell_to_road(r, c, g))->x();
      EXPECT_NEAR(bu.values(0, r, c), want, 1e-9);
      EXPECT_GT(bu.values(0, r, c), prev);
      prev = bu.values(0, r, c);
    }
  }
}

TEST(WarpFvToBev, CellsBehindCameraAreInvalid) {
  auto rig = virtual_rig(256, 512);
  auto g = BevGrid::make(-5, 5, -20, 10, 0.5, 0.5);
  Tensor<float> cst(1, 256, 512, 1.0f);
  auto b = warp_fv_raster_to_bev(cst, rig, g);
  EXPECT_FALSE(b.is_valid(0, 10));  // y = -19.75, behind the camera
}
