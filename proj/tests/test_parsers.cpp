#include <gtest/gtest.h>

#include <filesystem>

#include "d3lane/annotations.hpp"

using namespace d3l;

namespace {

const std::filesystem::path kFixtures = D3LANE_FIXTURE_DIR;

std::string fixture_text(const std::string& rel) { return read_text_file(kFixtures / rel); }

// Runs `fn` expecting a ParseError and returns it.
template <class F>
ParseError expect_parse_error(F fn) {
  try {
    fn();
  } catch (const ParseError& e) {
    return e;
  }
  ADD_FAILURE() << "no ParseError thrown";
  return ParseError("", 0, "none");
}

}  // namespace

TEST(OpenLane, MinimalLaneRecoversEveryField) {
  auto a = parse_openlane(kFixtures / "openlane/minimal.json");
  ASSERT_EQ(a.lanes.size(), 1u);
  EXPECT_EQ(a.skipped_lanes, 0);
  const auto& l = a.lanes[0];
  ASSERT_EQ(l.points.size(), 3u);
  ASSERT_TRUE(l.category.has_value());
  EXPECT_EQ(*l.category, 1);
  // camera (x fwd, y left, z up) + translation (0, 0, 2) -> road (-y, x, z)
  const double xs[] = {5.0, 10.0, 20.0};
  for (int k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(l.points[k].x(), -1.0);
    EXPECT_DOUBLE_EQ(l.points[k].y(), xs[k]);
    EXPECT_DOUBLE_EQ(l.points[k].z(), 0.0);
  }
  EXPECT_DOUBLE_EQ(a.rig.intrinsics()(0, 0), 2083.0);
  EXPECT_DOUBLE_EQ(a.rig.intrinsics()(1, 2), 650.5);
  EXPECT_DOUBLE_EQ(a.rig.height(), 2.0);
  EXPECT_EQ(a.rig.image_h(), 1280);
  EXPECT_EQ(a.rig.image_w(), 1920);
}

TEST(OpenLane, InvisiblePointsDroppedAndEmptyLaneSkipped) {
  auto a = parse_openlane(kFixtures / "openlane/invisible_lane.json");
  ASSERT_EQ(a.lanes.size(), 1u);
  EXPECT_EQ(a.skipped_lanes, 1);
  ASSERT_EQ(a.lanes[0].points.size(), 3u);
  EXPECT_DOUBLE_EQ(a.lanes[0].points[2].y(), 20.0);
  EXPECT_NEAR(a.lanes[0].points[0].x(), 1.7, 1e-15);
}

TEST(OpenLane, ConversionEqualsHandComputedRigidTransform) {
  auto a = parse_openlane(kFixtures / "openlane/rotated_extrinsic.json");
  ASSERT_EQ(a.lanes.size(), 1u);
  const double c = 0.9950041653, s = 0.0998334166;
  const double cam[2][3] = {{12.0, 0.5, -1.0}, {30.0, 0.25, -2.5}};
  for (int k = 0; k < 2; ++k) {
    const double* p = cam[k];
    // vehicle = R p + (0, 0, 1.8); R is a rotation about y by 0.1 rad
    const double vx = c * p[0] + s * p[2];
    const double vy = p[1];
    const double vz = -s * p[0] + c * p[2] + 1.8;
    EXPECT_NEAR(a.lanes[0].points[k].x(), -vy, 1e-9);
    EXPECT_NEAR(a.lanes[0].points[k].y(), vx, 1e-9);
    EXPECT_NEAR(a.lanes[0].points[k].z(), vz, 1e-9);
  }
  // The rig must project those camera-frame points to K * (-y, -z, x).
  for (int k = 0; k < 2; ++k) {
    const double* p = cam[k];
    auto uv = a.rig.project(a.lanes[0].points[k]);
    ASSERT_TRUE(uv);
    EXPECT_NEAR(uv->x(), 2000.0 * (-p[1] / p[0]) + 960.0, 1e-5);
    EXPECT_NEAR(uv->y(), 2000.0 * (-p[2] / p[0]) + 640.0, 1e-5);
  }
}

TEST(OpenLane, MalformedFixturesFailWithLocatedErrors) {
  {
    auto text = fixture_text("openlane/missing_extrinsic.json");
    auto e = expect_parse_error([&] { parse_openlane_text(text); });
    EXPECT_EQ(e.key(), "extrinsic");
    EXPECT_EQ(e.byte_offset(), text.find('{'));
  }
  {
    auto text = fixture_text("openlane/xyz_wrong_type.json");
    auto e = expect_parse_error([&] { parse_openlane_text(text); });
    EXPECT_EQ(e.key(), "xyz");
    EXPECT_EQ(e.byte_offset(), text.find("\"xyz\""));
  }
  {
    auto text = fixture_text("openlane/ragged_xyz.json");
    auto e = expect_parse_error([&] { parse_openlane_text(text); });
    EXPECT_EQ(e.key(), "1");
    const auto xyz = text.find("\"xyz\"");
    EXPECT_GT(e.byte_offset(), xyz);
    EXPECT_LT(e.byte_offset(), text.find("[-2.0", xyz));
  }
  {
    auto text = fixture_text("openlane/missing_visibility.json");
    auto e = expect_parse_error([&] { parse_openlane_text(text); });
    EXPECT_EQ(e.key(), "visibility");
    EXPECT_EQ(e.byte_offset(), text.find("{\"category\""));
  }
  {
    auto text = fixture_text("openlane/truncated.json");
    auto e = expect_parse_error([&] { parse_openlane_text(text); });
    EXPECT_EQ(e.key(), "");
    EXPECT_EQ(e.byte_offset(), text.size());
  }
}

TEST(Apollo, RecordsParseWithExactFields) {
  auto recs = parse_apollo(kFixtures / "apollo/minimal.json");
  ASSERT_EQ(recs.size(), 2u);
  const auto& a = recs[0];
  ASSERT_EQ(a.lanes.size(), 2u);
  EXPECT_EQ(a.skipped_lanes, 0);
  EXPECT_DOUBLE_EQ(a.lanes[0].points[2].x(), -1.9);
  EXPECT_DOUBLE_EQ(a.lanes[0].points[2].y(), 20.0);
  EXPECT_DOUBLE_EQ(a.lanes[0].points[1].z(), 0.05);
  EXPECT_DOUBLE_EQ(a.rig.height(), 1.55);
  EXPECT_NEAR(a.rig.angles().pitch_deg, rad2deg(0.04), 1e-9);
  EXPECT_DOUBLE_EQ(a.rig.intrinsics()(0, 0), 2015.0);
  EXPECT_EQ(a.rig.image_h(), 1080);
  // second record: one lane keeps a single visible point and is skipped
  EXPECT_EQ(recs[1].lanes.size(), 1u);
  EXPECT_EQ(recs[1].skipped_lanes, 1);
  EXPECT_DOUBLE_EQ(recs[1].rig.height(), 1.6);
}

TEST(Apollo, PitchPositiveLooksDown) {
  auto recs = parse_apollo(kFixtures / "apollo/minimal.json");
  // A road point straight ahead at camera height would sit on the horizon
  // for zero pitch; pitching down moves it above the principal point.
  auto uv = recs[0].rig.project(Vec3(0.0, 1000.0, 0.0));
  ASSERT_TRUE(uv);
  EXPECT_LT(uv->y(), 540.0);
}

TEST(Apollo, MalformedFixturesFailWithLocatedErrors) {
  {
    auto text = fixture_text("apollo/missing_pitch.json");
    auto e = expect_parse_error([&] { parse_apollo_text(text); });
    EXPECT_EQ(e.key(), "cam_pitch");
    EXPECT_EQ(e.byte_offset(), 0u);
  }
  {
    auto text = fixture_text("apollo/visibility_mismatch.json");
    auto e = expect_parse_error([&] { parse_apollo_text(text); });
    EXPECT_EQ(e.key(), "0");
    EXPECT_EQ(e.byte_offset(), text.find("[1.0, 1.0, 1.0]"));
  }
  {
    auto text = fixture_text("apollo/bad_second_line.json");
    auto e = expect_parse_error([&] { parse_apollo_text(text); });
    const auto line2 = text.find('\n') + 1;
    EXPECT_EQ(e.key(), "0");
    EXPECT_GT(e.byte_offset(), line2);
    EXPECT_EQ(e.byte_offset(), text.find("[-1.8, 5.0]", line2));
  }
  {
    auto text = fixture_text("apollo/point_not_number.json");
    auto e = expect_parse_error([&] { parse_apollo_text(text); });
    EXPECT_EQ(e.key(), "1");
    const auto at = text.find("\"ten\"");
    EXPECT_GE(e.byte_offset(), at);
    EXPECT_LE(e.byte_offset(), at + 5);
  }
}

TEST(Parsers, EveryFixtureParsesOrFailsLocated) {
  int parsed = 0, failed = 0;
  for (const auto& dir : {"openlane", "apollo"}) {
    for (const auto& entry : std::filesystem::directory_iterator(kFixtures / dir)) {
      const auto text = read_text_file(entry.path());
      try {
        if (std::string(dir) == "openlane") parse_openlane_text(text);
        else parse_apollo_text(text);
        ++parsed;
      } catch (const ParseError& e) {
        EXPECT_LE(e.byte_offset(), text.size()) << entry.path();
        ++failed;
      }
    }
  }
  EXPECT_EQ(parsed, 4);
  EXPECT_EQ(failed, 9);
}

TEST(LaneSet, EmptyRoundTrip) {
  auto text = lane_set_to_json({});
  EXPECT_TRUE(lane_set_from_json(text).empty());
}

TEST(LaneSet, ThreeLaneRoundTripIsBitwise) {
  std::vector<ScoredLane> in;
  for (int k = 0; k < 3; ++k) {
    ScoredLane s;
    s.score = 0.1 + k / 3.0;
    if (k == 1) s.lane.category = 7;
    for (int i = 0; i < 5; ++i)
      s.lane.points.emplace_back(-3.7 + k * 3.51 + 1e-7 * i, 3.0 + i * 2.5 + 1.0 / 3.0, std::sin(i * 0.7) * 0.123456789);
    in.push_back(s);
  }
  auto text = lane_set_to_json(in);
  auto out = lane_set_from_json(text);
  ASSERT_EQ(out.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(out[k].score, in[k].score);
    EXPECT_EQ(out[k].lane.category, in[k].lane.category);
    ASSERT_EQ(out[k].lane.points.size(), in[k].lane.points.size());
    for (std::size_t i = 0; i < in[k].lane.points.size(); ++i) EXPECT_EQ(out[k].lane.points[i], in[k].lane.points[i]);
  }
  EXPECT_EQ(lane_set_to_json(out), text);
}

// Independent structural check written against the documented schema.
TEST(LaneSet, OutputSatisfiesSchema) {
  std::vector<ScoredLane> in(2);
  in[0].lane.points = {Vec3(0, 3, 0), Vec3(0.1, 10, 0.2)};
  in[1].lane.points = {Vec3(3, 4, 0), Vec3(3, 8, 0), Vec3(3.2, 30, -0.5)};
  in[1].lane.category = 2;
  auto j = Json::parse(lane_set_to_json(in));
  ASSERT_TRUE(j.is_object());
  EXPECT_EQ(j.size(), 3u);
  EXPECT_EQ(j["format"], "d3lane.laneset");
  EXPECT_EQ(j["version"], 1);
  ASSERT_TRUE(j["lanes"].is_array());
  for (const auto& l : j["lanes"]) {
    EXPECT_EQ(l.size(), 3u);
    EXPECT_TRUE(l["score"].is_number());
    EXPECT_TRUE(l["category"].is_null() || l["category"].is_number_integer());
    ASSERT_TRUE(l["points"].is_array());
    EXPECT_GE(l["points"].size(), 2u);
    double prev_y = -1e300;
    for (const auto& p : l["points"]) {
      ASSERT_TRUE(p.is_array());
      ASSERT_EQ(p.size(), 3u);
      for (const auto& v : p) EXPECT_TRUE(v.is_number());
      EXPECT_GT(p[1].get<double>(), prev_y);
      prev_y = p[1].get<double>();
    }
  }
}

TEST(LaneSet, RejectsBadDocuments) {
  auto e1 = expect_parse_error([] { lane_set_from_json(R"({"format": "other", "version": 1, "lanes": []})"); });
  EXPECT_EQ(e1.key(), "format");
  auto e2 = expect_parse_error(
      [] { lane_set_from_json(R"({"format": "d3lane.laneset", "version": 1, "lanes": [{"score": 1, "points": [[0,5,0],[0,4,0]]}]})"); });
  EXPECT_EQ(e2.key(), "points");
  auto e3 = expect_parse_error([] { lane_set_from_json(R"({"format": "d3lane.laneset", "version": 1})"); });
  EXPECT_EQ(e3.key(), "lanes");
  EXPECT_EQ(e3.byte_offset(), 0u);
}
