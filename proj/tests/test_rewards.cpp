// Step-reward arithmetic: edge-triggered collision events, offroad penalty,
// and the closing-speed shaping term against hand closed forms.
#include <gtest/gtest.h>

#include "scengen/rewards.hpp"

#include "testutil.hpp"

namespace scengen {
namespace {

using namespace testutil;

// Two cars nose to tail on the x axis; gap is measured between footprints.
std::vector<AgentState> pair_at_gap(double gap, const VehicleGeometry& g) {
  return {{0.0, 0.0, 0.0, 0.0}, {g.length + gap, 0.0, 0.0, 0.0}};
}

TEST(Colliding, ThresholdAtFootprintContact) {
  VehicleGeometry g;
  auto touch = pair_at_gap(0.0, g);
  auto apart = pair_at_gap(0.4, g);
  EXPECT_TRUE(reward_detail::colliding(touch[0], g, touch[1], g));
  EXPECT_FALSE(reward_detail::colliding(apart[0], g, apart[1], g));
}

TEST(ClosingSpeed, AnalyticCases) {
  // Head-on: speeds add along the separation axis.
  AgentState a{0.0, 0.0, 0.0, 3.0};
  AgentState b{10.0, 0.0, M_PI, 2.0};
  EXPECT_NEAR(reward_detail::closing_speed(a, b), 5.0, 1e-12);

  // Receding flips the sign.
  AgentState c{10.0, 0.0, 0.0, 2.0};
  EXPECT_NEAR(reward_detail::closing_speed(a, c), 1.0, 1e-12);
  a.speed = 0.0;
  EXPECT_NEAR(reward_detail::closing_speed(a, c), -2.0, 1e-12);

  // Perpendicular motion has no radial component.
  AgentState up{0.0, 0.0, M_PI / 2.0, 3.0};
  AgentState still{10.0, 0.0, 0.0, 0.0};
  EXPECT_NEAR(reward_detail::closing_speed(up, still), 0.0, 1e-12);

  // Coincident centers are defined as zero.
  AgentState same{0.0, 0.0, 1.0, 5.0};
  EXPECT_DOUBLE_EQ(reward_detail::closing_speed(same, same), 0.0);
}

TEST(StepReward, NewAvCollisionPaysExactlyOne) {
  VehicleGeometry g;
  auto prev = pair_at_gap(0.5, g);
  auto cur = pair_at_gap(-0.1, g);
  std::vector<VehicleGeometry> geoms = {g, g};

  // Speeds are zero, so the shaping term contributes nothing.
  RewardTerms r = step_reward(prev, cur, geoms, {true, false}, nullptr);
  EXPECT_DOUBLE_EQ(r.r_adv, 1.0);
  EXPECT_DOUBLE_EQ(r.p_coll, 0.0);
  EXPECT_DOUBLE_EQ(r.total(), 1.0);
}

TEST(StepReward, PersistingCollisionPaysOnce) {
  VehicleGeometry g;
  auto overlap = pair_at_gap(-0.1, g);
  std::vector<VehicleGeometry> geoms = {g, g};

  RewardTerms r = step_reward(overlap, overlap, geoms, {true, false}, nullptr);
  EXPECT_DOUBLE_EQ(r.r_adv, 0.0);
  EXPECT_DOUBLE_EQ(r.p_coll, 0.0);
}

TEST(StepReward, BvBvCollisionIsPenalized) {
  VehicleGeometry g;
  auto prev = pair_at_gap(0.5, g);
  auto cur = pair_at_gap(-0.1, g);
  std::vector<VehicleGeometry> geoms = {g, g};

  RewardTerms r = step_reward(prev, cur, geoms, {false, false}, nullptr);
  EXPECT_DOUBLE_EQ(r.r_adv, 0.0);  // no AV anywhere, shaping is zero too
  EXPECT_DOUBLE_EQ(r.p_coll, 1.0);
  EXPECT_DOUBLE_EQ(r.total(), -1.0);
}

TEST(StepReward, BvOffroadPaysHalfOnceAndIgnoresAv) {
  LaneGraph map = straight_map();  // drivable |y| <= 7
  VehicleGeometry g;
  std::vector<VehicleGeometry> geoms = {g, g};
  std::vector<bool> av_first = {true, false};

  std::vector<AgentState> on = {{50.0, 0.0, 0.0, 0.0}, {80.0, 0.0, 0.0, 0.0}};
  std::vector<AgentState> bv_off = {{50.0, 0.0, 0.0, 0.0}, {80.0, 12.0, 0.0, 0.0}};
  std::vector<AgentState> av_off = {{50.0, 12.0, 0.0, 0.0}, {80.0, 0.0, 0.0, 0.0}};

  RewardTerms r = step_reward(on, bv_off, geoms, av_first, &map);
  EXPECT_DOUBLE_EQ(r.p_coll, 0.5);

  // Already offroad: edge-triggered, no further penalty.
  RewardTerms r2 = step_reward(bv_off, bv_off, geoms, av_first, &map);
  EXPECT_DOUBLE_EQ(r2.p_coll, 0.0);

  // The AV going offroad is the planner's problem, not the guide's.
  RewardTerms r3 = step_reward(on, av_off, geoms, av_first, &map);
  EXPECT_DOUBLE_EQ(r3.p_coll, 0.0);

  // Without a map the offroad term is skipped entirely.
  RewardTerms r4 = step_reward(on, bv_off, geoms, av_first, nullptr);
  EXPECT_DOUBLE_EQ(r4.p_coll, 0.0);
}

TEST(StepReward, ClosingSpeedShapingValue) {
  VehicleGeometry g;
  std::vector<VehicleGeometry> geoms = {g, g};

  // BV at the origin drives straight at a stopped AV 20 m ahead at 4 m/s:
  // shaping = 0.1 * 4 / 10.
  std::vector<AgentState> cur = {{20.0, 0.0, 0.0, 0.0}, {0.0, 0.0, 0.0, 4.0}};
  RewardTerms r = step_reward(cur, cur, geoms, {true, false}, nullptr);
  EXPECT_NEAR(r.r_adv, 0.1 * 4.0 / 10.0, 1e-12);

  // Receding BV clamps to zero.
  std::vector<AgentState> away = {{20.0, 0.0, 0.0, 0.0}, {0.0, 0.0, M_PI, 4.0}};
  RewardTerms r2 = step_reward(away, away, geoms, {true, false}, nullptr);
  EXPECT_DOUBLE_EQ(r2.r_adv, 0.0);
}

TEST(StepReward, ShapingUsesNearestAv) {
  VehicleGeometry g;
  std::vector<VehicleGeometry> geoms = {g, g, g};
  std::vector<bool> is_av = {false, true, true};

  // The BV approaches both AVs, but its nearest AV (5 m ahead) is pulling
  // away faster than the BV closes, so the clamped shaping term is zero.
  // Scoring against the far, stopped AV instead would pay 0.04.
  std::vector<AgentState> cur = {{0.0, 0.0, 0.0, 4.0},
                                 {5.0, 0.0, 0.0, 6.0},
                                 {100.0, 0.0, 0.0, 0.0}};
  RewardTerms r = step_reward(cur, cur, geoms, is_av, nullptr);
  EXPECT_DOUBLE_EQ(r.r_adv, 0.0);

  // Slow the near AV down and the shaping reappears: closing 4 - 1 = 3.
  cur[1].speed = 1.0;
  RewardTerms r2 = step_reward(cur, cur, geoms, is_av, nullptr);
  EXPECT_NEAR(r2.r_adv, 0.1 * 3.0 / 10.0, 1e-12);
}

TEST(StepReward, MaxShapingOverBvs) {
  VehicleGeometry g;
  std::vector<VehicleGeometry> geoms = {g, g, g};
  std::vector<bool> is_av = {true, false, false};

  // Two BVs approach the AV at 2 and 7 m/s; the fastest one sets the term.
  std::vector<AgentState> cur = {{0.0, 0.0, 0.0, 0.0},
                                 {30.0, 0.0, M_PI, 2.0},
                                 {0.0, 30.0, -M_PI / 2.0, 7.0}};
  RewardTerms r = step_reward(cur, cur, geoms, is_av, nullptr);
  EXPECT_NEAR(r.r_adv, 0.1 * 7.0 / 10.0, 1e-12);
}

TEST(StepReward, MismatchedArraysThrow) {
  VehicleGeometry g;
  auto two = pair_at_gap(1.0, g);
  std::vector<AgentState> one = {two[0]};
  std::vector<VehicleGeometry> geoms = {g, g};
  EXPECT_THROW(step_reward(one, two, geoms, {true, false}, nullptr),
               ValidationError);
  EXPECT_THROW(step_reward(two, two, {g}, {true, false}, nullptr),
               ValidationError);
  EXPECT_THROW(step_reward(two, two, geoms, {true}, nullptr), ValidationError);
}

}  // namespace
}  // namespace scengen
