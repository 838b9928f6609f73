#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "scengen/scenario.hpp"
#include "testutil.hpp"

using namespace scengen;

namespace {

Scenario straight_scenario(int n_agents, int n_states) {
  Scenario sc;
  sc.dt = 0.5;
  sc.map = testutil::straight_map();
  for (int i = 0; i < n_agents; ++i) {
    AgentTrack a;
    a.id = i;
    a.is_av = (i == 0);
    const double y = (i % 2 == 0) ? -1.75 : 1.75;
    for (int s = 0; s < n_states; ++s)
      a.traj.states.push_back({5.0 + 10.0 * i + 4.0 * 0.5 * s, y, 0.0, 4.0});
    sc.agents.push_back(std::move(a));
  }
  return sc;
}

}  // namespace

TEST(SegmentLog, WindowCounts) {
  EXPECT_EQ(segment_log(straight_scenario(2, 41)).size(), 2u);
  EXPECT_EQ(segment_log(straight_scenario(2, 32)).size(), 2u);
  EXPECT_EQ(segment_log(straight_scenario(2, 40)).size(), 2u);
  EXPECT_EQ(segment_log(straight_scenario(2, 16)).size(), 1u);
  EXPECT_EQ(segment_log(straight_scenario(2, 15)).size(), 0u);
  // A lone agent never forms a window.
  EXPECT_EQ(segment_log(straight_scenario(1, 48)).size(), 0u);
}

TEST(SegmentLog, AgentsNeedFullCoverage) {
  Scenario sc = straight_scenario(2, 32);
  AgentTrack shorty;
  shorty.id = 9;
  for (int s = 0; s < 20; ++s)
    shorty.traj.states.push_back({1.0 * s, 0.0, 0.0, 2.0});
  sc.agents.push_back(shorty);

  const auto windows = segment_log(sc, 7);
  ASSERT_EQ(windows.size(), 2u);
  EXPECT_EQ(windows[0].agents.size(), 3u);  // covers steps 0..15
  EXPECT_EQ(windows[1].agents.size(), 2u);  // 20 < 32: dropped from window 1
  EXPECT_EQ(windows[0].scene_id, 7);
  EXPECT_EQ(windows[0].window_id, 0);
  EXPECT_EQ(windows[1].window_id, 1);
  EXPECT_EQ(windows[0].map, &sc.map);
}

TEST(SegmentLog, SplitsPastAndFuture) {
  const auto windows = segment_log(straight_scenario(2, 16));
  ASSERT_EQ(windows.size(), 1u);
  const WindowAgent& a = windows[0].agents[0];
  ASSERT_EQ(a.past.size(), static_cast<size_t>(kPastSteps));
  ASSERT_EQ(a.future.size(), static_cast<size_t>(kFutureSteps));
  // Oldest first: past[0] is the track's first state.
  EXPECT_DOUBLE_EQ(a.past[0].x, 5.0);
  EXPECT_DOUBLE_EQ(a.past.back().x, 5.0 + 4.0 * 0.5 * 3);
  EXPECT_DOUBLE_EQ(a.future[0].x, 5.0 + 4.0 * 0.5 * 4);
  // AV helpers
  EXPECT_EQ(windows[0].av_count(), 1);
  EXPECT_EQ(windows[0].av()->id, 0);
}

TEST(Polyline, ProjectionAndInterpolation) {
  const std::vector<Vec2> pts{{0, 0}, {10, 0}, {10, 5}};
  const auto pr = detail::project_to_polyline({3.0, 4.0}, pts);
  EXPECT_NEAR(pr.distance, 4.0, 1e-12);
  EXPECT_NEAR(pr.arc, 3.0, 1e-12);
  // Beyond the corner: nearest point on the vertical segment.
  const auto pr2 = detail::project_to_polyline({12.0, 2.0}, pts);
  EXPECT_NEAR(pr2.distance, 2.0, 1e-12);
  EXPECT_NEAR(pr2.arc, 12.0, 1e-12);

  EXPECT_NEAR(detail::polyline_length(pts), 15.0, 1e-12);

  Vec2 p;
  double th = 0.0;
  detail::polyline_at(pts, 12.0, &p, &th);
  EXPECT_NEAR(p.x, 10.0, 1e-12);
  EXPECT_NEAR(p.y, 2.0, 1e-12);
  EXPECT_NEAR(th, M_PI / 2.0, 1e-12);
  // Clamped past the end.
  detail::polyline_at(pts, 99.0, &p, &th);
  EXPECT_NEAR(p.y, 5.0, 1e-12);
}

TEST(LocalMapView, NearestLanesInAgentFrame) {
  LaneGraph map = testutil::straight_map();
  ScenarioWindow w = testutil::two_agent_window(map);
  const LocalMapView view = local_map_view(w, 0);

  // Two lanes exist; the two nearest slots are valid, the rest masked off.
  EXPECT_DOUBLE_EQ(view.mask[0], 1.0);
  EXPECT_DOUBLE_EQ(view.mask[1], 1.0);
  EXPECT_DOUBLE_EQ(view.mask[2], 0.0);
  EXPECT_DOUBLE_EQ(view.mask[3], 0.0);

  // Agent 0 drives lane 0 (y = -1.75) heading +x at anchor x = 16.
  // Slot 0 is its own lane: lateral offset 0, heading aligned.
  const double anchor_x = 10.0 + 8.0 * 0.5 * 3;
  for (int pnt = 0; pnt < LocalMapView::kPoints; ++pnt) {
    const size_t base = static_cast<size_t>(pnt) * LocalMapView::kFeat;
    EXPECT_NEAR(view.feats[base + 1], 0.0, 1e-9);  // on the centerline
    EXPECT_NEAR(view.feats[base + 2], 1.0, 1e-9);  // cos dtheta
    EXPECT_NEAR(view.feats[base + 3], 0.0, 1e-9);
  }
  // First sampled point sits kBack behind the projection (clamped at 0).
  const double expect_lo = std::max(0.0, anchor_x - LocalMapView::kBack);
  EXPECT_NEAR(view.feats[0], expect_lo - anchor_x, 1e-9);

  // Slot 1 is the other lane: lateral offset +3.5 in the agent frame.
  const size_t lane1 = static_cast<size_t>(LocalMapView::kPoints) * LocalMapView::kFeat;
  EXPECT_NEAR(view.feats[lane1 + 1], 3.5, 1e-9);

  // Zero-filled beyond the masked lanes.
  const size_t lane2 = 2 * lane1;
  for (size_t i = lane2; i < view.feats.size(); ++i)
    EXPECT_DOUBLE_EQ(view.feats[i], 0.0);

  EXPECT_THROW(local_map_view(w, 99), ValidationError);
}

TEST(ScenarioJson, RoundTripIsByteStable) {
  Scenario sc = straight_scenario(3, 32);
  const std::string once = scenario_to_json(sc).dump(1);
  const Scenario back = scenario_from_json(scenario_to_json(sc));
  EXPECT_EQ(scenario_to_json(back).dump(1), once);

  EXPECT_EQ(back.agents.size(), sc.agents.size());
  EXPECT_DOUBLE_EQ(back.dt, sc.dt);
  EXPECT_EQ(back.map.lanes.size(), sc.map.lanes.size());
  EXPECT_DOUBLE_EQ(back.agents[1].traj.states[5].x, sc.agents[1].traj.states[5].x);
  EXPECT_EQ(back.agents[0].is_av, true);
}

TEST(ScenarioJson, FileRoundTrip) {
  const std::string path = testing::TempDir() + "scene_rt.json";
  Scenario sc = straight_scenario(2, 16);
  save_scenario(sc, path);
  const Scenario back = load_scenario(path);
  EXPECT_EQ(scenario_to_json(back).dump(), scenario_to_json(sc).dump());
  // save/load/save writes identical bytes
  const std::string path2 = testing::TempDir() + "scene_rt2.json";
  save_scenario(back, path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  EXPECT_EQ(s1, s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST(ScenarioJson, MissingFieldsAreNamed) {
  nlohmann::json j = scenario_to_json(straight_scenario(2, 16));
  j.erase("dt");
  try {
    scenario_from_json(j);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("dt"), std::string::npos);
  }

  nlohmann::json j2 = scenario_to_json(straight_scenario(2, 16));
  j2["agents"][0].erase("states");
  EXPECT_THROW(scenario_from_json(j2), ValidationError);

  nlohmann::json j3 = scenario_to_json(straight_scenario(2, 16));
  j3["version"] = 99;
  EXPECT_THROW(scenario_from_json(j3), ValidationError);

  nlohmann::json j4 = scenario_to_json(straight_scenario(2, 16));
  j4["agents"][1]["id"] = j4["agents"][0]["id"];
  EXPECT_THROW(scenario_from_json(j4), ValidationError);  // duplicate ids
}

TEST(ScenarioJson, MalformedFileIsNamed) {
  const std::string path = testing::TempDir() + "scene_bad.json";
  std::ofstream(path) << "{ not json";
  EXPECT_THROW(load_scenario(path), ValidationError);
  EXPECT_THROW(load_scenario("/nonexistent/nope.json"), ValidationError);
  std::remove(path.c_str());
}
