#pragma once

#include "scengen/geometry.hpp"

// Step reward for the adversarial guide: rewards newly created AV collisions
// plus a small closing-speed shaping term, penalizes background vehicles
// colliding with each other or leaving the road. Events are edge-triggered:
// a condition pays out only on the step where it first becomes true.

namespace scengen {

struct RewardTerms {
  double r_adv = 0.0;   // adversarial reward
  double p_coll = 0.0;  // behavioral penalty (positive magnitude)
  double total() const { return r_adv - p_coll; }
};

namespace reward_detail {

inline bool colliding(const AgentState& a, const VehicleGeometry& ga,
                      const AgentState& b, const VehicleGeometry& gb) {
  return footprint_distance(a, ga, b, gb) <= 0.0;
}

// Rate of decrease of center distance; positive when approaching.
inline double closing_speed(const AgentState& a, const AgentState& b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double d = std::sqrt(dx * dx + dy * dy);
  if (d < 1e-9) return 0.0;
  const double rvx = a.speed * std::cos(a.heading) - b.speed * std::cos(b.heading);
  const double rvy = a.speed * std::sin(a.heading) - b.speed * std::sin(b.heading);
  return (rvx * dx + rvy * dy) / d;
}

}  // namespace reward_detail

// Reward for the transition prev -> cur. `map` may be null to skip offroad
// penalties. All agent vectors must be index-aligned.
inline RewardTerms step_reward(const std::vector<AgentState>& prev,
                               const std::vector<AgentState>& cur,
                               const std::vector<VehicleGeometry>& geoms,
                               const std::vector<bool>& is_av,
                               const LaneGraph* map) {
  const size_t n = cur.size();
  if (prev.size() != n || geoms.size() != n || is_av.size() != n)
    throw ValidationError("step_reward: mismatched agent arrays");

  bool new_av_collision = false;
  bool new_bv_collision = false;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      const bool now = reward_detail::colliding(cur[i], geoms[i], cur[j], geoms[j]);
      if (!now) continue;
      const bool before =
          reward_detail::colliding(prev[i], geoms[i], prev[j], geoms[j]);
      if (before) continue;
      const int avs = (is_av[i] ? 1 : 0) + (is_av[j] ? 1 : 0);
      if (avs == 1) new_av_collision = true;
      if (avs == 0) new_bv_collision = true;
    }
  }

  bool new_bv_offroad = false;
  if (map) {
    for (size_t i = 0; i < n; ++i) {
      if (is_av[i]) continue;
      if (offroad_depth(cur[i], geoms[i], *map) > 0.0 &&
          offroad_depth(prev[i], geoms[i], *map) <= 0.0)
        new_bv_offroad = true;
    }
  }

  // Shaping: fastest approach of any BV toward its nearest AV, normalized by
  // 10 m/s and weighted 0.1.
  double best_closing = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (is_av[i]) continue;
    double nearest = std::numeric_limits<double>::infinity();
    size_t nearest_av = n;
    for (size_t j = 0; j < n; ++j) {
      if (!is_av[j]) continue;
      const double d = dist(cur[i].pos(), cur[j].pos());
      if (d < nearest) {
        nearest = d;
        nearest_av = j;
      }
    }
    if (nearest_av == n) continue;
    best_closing =
        std::max(best_closing, reward_detail::closing_speed(cur[i], cur[nearest_av]));
  }

  RewardTerms r;
  r.r_adv = (new_av_collision ? 1.0 : 0.0) + 0.1 * std::max(0.0, best_closing) / 10.0;
  r.p_coll = (new_bv_collision ? 1.0 : 0.0) + (new_bv_offroad ? 0.5 : 0.0);
  return r;
}

}  // namespace scengen
