#pragma once

#include "scengen/scenario.hpp"

// Synthetic log generation: three map templates (straight corridor, curved
// corridor, four-way intersection) populated with IDM car-following plus
// pure-pursuit steering. Crossing routes brake for a virtual stop line when
// conflicting traffic will occupy the junction first. Logs are guaranteed
// collision-free; scenes that fail that check are re-placed and eventually
// skipped.

namespace scengen {

struct IdmParams {
  double v0 = 12.0;  // free-flow speed
  double T = 1.5;    // time headway
  double a = 1.5;    // max comfortable accel
  double b = 2.0;    // comfortable decel
  double s0 = 2.0;   // jam distance
};

struct SynthConfig {
  int scenes = 200;
  int agents_min = 4;
  int agents_max = 12;
  double duration = 20.0;
  double dt = 0.5;
  IdmParams idm;
  double speed_min = 2.0;
  double speed_max = 10.0;
  ActionLimits limits;
};

namespace synth_detail {

struct Route {
  std::vector<int> lane_ids;
  std::vector<Vec2> pts;
  std::vector<double> cum;  // cumulative arclength per point
  double length = 0.0;
};

struct Conflict {
  int route_a = 0, route_b = 0;
  double arc_a = 0.0, arc_b = 0.0;  // conflict-point arclengths
};

struct MapTemplate {
  LaneGraph map;
  std::vector<Route> routes;
  std::vector<Conflict> conflicts;
};

inline void finish_route(Route& r) {
  r.cum.assign(r.pts.size(), 0.0);
  for (size_t i = 1; i < r.pts.size(); ++i)
    r.cum[i] = r.cum[i - 1] + dist(r.pts[i - 1], r.pts[i]);
  r.length = r.cum.empty() ? 0.0 : r.cum.back();
}

inline Route make_route(const LaneGraph& map, const std::vector<int>& lane_ids) {
  Route r;
  r.lane_ids = lane_ids;
  for (int id : lane_ids) {
    const Lane* lane = map.lane_by_id(id);
    for (const auto& p : lane->points) {
      if (!r.pts.empty() && dist(r.pts.back(), p) < 1e-9) continue;
      r.pts.push_back(p);
    }
  }
  finish_route(r);
  return r;
}

inline Vec2 route_point(const Route& r, double s) {
  s = std::clamp(s, 0.0, r.length);
  for (size_t i = 1; i < r.pts.size(); ++i) {
    if (s <= r.cum[i]) {
      const double seg = r.cum[i] - r.cum[i - 1];
      const double t = seg > 0.0 ? (s - r.cum[i - 1]) / seg : 0.0;
      return r.pts[i - 1] + t * (r.pts[i] - r.pts[i - 1]);
    }
  }
  return r.pts.back();
}

inline double route_heading(const Route& r, double s) {
  s = std::clamp(s, 0.0, r.length);
  for (size_t i = 1; i < r.pts.size(); ++i) {
    if (s <= r.cum[i] || i + 1 == r.pts.size()) {
      const Vec2 d = r.pts[i] - r.pts[i - 1];
      return std::atan2(d.y, d.x);
    }
  }
  return 0.0;
}

struct RouteProjection {
  double arc = 0.0;
  double lateral = 0.0;
};

inline RouteProjection project_to_route(const Route& r, Vec2 p) {
  RouteProjection best;
  best.lateral = std::numeric_limits<double>::infinity();
  for (size_t i = 1; i < r.pts.size(); ++i) {
    const ClosestPoint c = closest_on_segment(p, r.pts[i - 1], r.pts[i]);
    if (c.distance < best.lateral) {
      best.lateral = c.distance;
      best.arc = r.cum[i - 1] + dist(r.pts[i - 1], c.point);
    }
  }
  return best;
}

inline std::vector<Vec2> arc_points(Vec2 center, double radius, double a0,
                                    double a1, double step_deg = 5.0) {
  std::vector<Vec2> pts;
  const int n = std::max(2, static_cast<int>(std::ceil(std::abs(a1 - a0) /
                                                       (step_deg * kPi / 180.0))) +
                                1);
  for (int i = 0; i < n; ++i) {
    const double a = a0 + (a1 - a0) * i / (n - 1);
    pts.push_back({center.x + radius * std::cos(a),
                   center.y + radius * std::sin(a)});
  }
  return pts;
}

// Corridor polygon around a centerline: left offsets forward, right offsets
// back. Valid (simple) while the half width stays well under the turn radius.
inline Polygon corridor(const std::vector<Vec2>& center, double half_width) {
  Polygon poly;
  const size_t n = center.size();
  std::vector<Vec2> normals(n);
  for (size_t i = 0; i < n; ++i) {
    Vec2 d{};
    if (i > 0) d = d + (center[i] - center[i - 1]);
    if (i + 1 < n) d = d + (center[i + 1] - center[i]);
    const double len = norm(d);
    normals[i] = len > 0.0 ? Vec2{-d.y / len, d.x / len} : Vec2{0.0, 1.0};
  }
  for (size_t i = 0; i < n; ++i) poly.pts.push_back(center[i] + half_width * normals[i]);
  for (size_t i = n; i-- > 0;) poly.pts.push_back(center[i] - half_width * normals[i]);
  return poly;
}

inline MapTemplate make_straight_template() {
  MapTemplate t;
  const double L = 175.0;
  auto add_lane = [&](int id, double y, bool eastbound) {
    Lane lane;
    lane.id = id;
    lane.width = 3.5;
    const double step = 10.0;
    for (double x = -L; x <= L + 1e-9; x += step)
      lane.points.push_back({eastbound ? x : -x, y});
    t.map.lanes.push_back(std::move(lane));
  };
  add_lane(0, 0.0, true);
  add_lane(1, 3.5, true);
  add_lane(2, 7.0, false);
  add_lane(3, 10.5, false);
  Polygon band;
  band.pts = {{-L, -1.75}, {L, -1.75}, {L, 12.25}, {-L, 12.25}};
  t.map.drivable.push_back(band);
  for (int id = 0; id < 4; ++id) t.routes.push_back(make_route(t.map, {id}));
  return t;
}

inline MapTemplate make_curve_template() {
  MapTemplate t;
  const double leg = 150.0;
  int next_id = 0;
  for (double radius : {40.0, 43.5}) {
    Lane lane;
    lane.id = next_id++;
    lane.width = 3.5;
    for (double x = -leg; x < -1e-9; x += 10.0) lane.points.push_back({x, -radius});
    for (const auto& p : arc_points({0.0, 0.0}, radius, -0.5 * kPi, 0.0))
      lane.points.push_back(p);
    for (double y = 10.0; y <= leg + 1e-9; y += 10.0)
      lane.points.push_back({radius, y});
    t.map.lanes.push_back(std::move(lane));
  }
  std::vector<Vec2> mid;
  for (double x = -leg; x < -1e-9; x += 10.0) mid.push_back({x, -41.75});
  for (const auto& p : arc_points({0.0, 0.0}, 41.75, -0.5 * kPi, 0.0))
    mid.push_back(p);
  for (double y = 10.0; y <= leg + 1e-9; y += 10.0) mid.push_back({41.75, y});
  t.map.drivable.push_back(corridor(mid, 5.25));
  for (int id = 0; id < 2; ++id) t.routes.push_back(make_route(t.map, {id}));
  return t;
}

inline MapTemplate make_intersection_template() {
  MapTemplate t;
  const double box = 7.0;      // junction half size
  const double lane_off = 1.75;
  const double arm_in = 150.0, arm_out = 230.0;

  auto rot = [](Vec2 p, int quarter) {
    for (int i = 0; i < quarter; ++i) p = {-p.y, p.x};
    return p;
  };
  int next_id = 0;
  // Per approach (quarter turns of the eastbound set): approach lane,
  // straight/right/left connectors, and the exit lanes they feed.
  struct ApproachIds {
    int approach, exit_e, conn_s, conn_r, conn_l;
  };
  std::vector<ApproachIds> ids(4);
  auto add_lane = [&](const std::vector<Vec2>& pts, int quarter) {
    Lane lane;
    const int id = next_id++;
    lane.id = id;
    lane.width = 3.5;
    for (const auto& p : pts) lane.points.push_back(rot(p, quarter));
    t.map.lanes.push_back(std::move(lane));
    return id;
  };
  for (int q = 0; q < 4; ++q) {
    std::vector<Vec2> approach, exit_pts;
    for (double x = -box - arm_in; x <= -box + 1e-9; x += 10.0)
      approach.push_back({x, -lane_off});
    for (double x = box; x <= box + arm_out + 1e-9; x += 10.0)
      exit_pts.push_back({x, -lane_off});
    ids[q].approach = add_lane(approach, q);
    ids[q].exit_e = add_lane(exit_pts, q);
    ids[q].conn_s = add_lane({{-box, -lane_off}, {box, -lane_off}}, q);
    ids[q].conn_r = add_lane(
        arc_points({-box, -box}, box - lane_off, 0.5 * kPi, 0.0), q);
    ids[q].conn_l = add_lane(
        arc_points({-box, box}, box + lane_off, -0.5 * kPi, 0.0), q);
  }
  // Successors: approach -> connectors -> exits. Right turn from quarter q
  // exits the q+3 arm's eastbound-rotated exit; left turn exits q+1.
  for (int q = 0; q < 4; ++q) {
    auto& lane = t.map.lanes;
    auto find = [&](int id) -> Lane& {
      for (auto& l : lane)
        if (l.id == id) return l;
      throw ValidationError("make_intersection_template: internal id");
    };
    find(ids[q].approach).successors = {ids[q].conn_s, ids[q].conn_r, ids[q].conn_l};
    find(ids[q].conn_s).successors = {ids[q].exit_e};
    find(ids[q].conn_r).successors = {ids[(q + 3) % 4].exit_e};
    find(ids[q].conn_l).successors = {ids[(q + 1) % 4].exit_e};
    t.routes.push_back(make_route(t.map, {ids[q].approach, ids[q].conn_s, ids[q].exit_e}));
    t.routes.push_back(
        make_route(t.map, {ids[q].approach, ids[q].conn_r, ids[(q + 3) % 4].exit_e}));
    t.routes.push_back(
        make_route(t.map, {ids[q].approach, ids[q].conn_l, ids[(q + 1) % 4].exit_e}));
  }
  const double span = box + std::max(arm_in, arm_out) + 12.0;
  Polygon horizontal, vertical;
  horizontal.pts = {{-span, -5.25}, {span, -5.25}, {span, 5.25}, {-span, 5.25}};
  vertical.pts = {{-5.25, -span}, {5.25, -span}, {5.25, span}, {-5.25, span}};
  t.map.drivable.push_back(horizontal);
  t.map.drivable.push_back(vertical);
  return t;
}

// Crossing-route conflicts: closest approach below threshold between routes
// sharing no lane, recorded with both arclengths.
inline void find_conflicts(MapTemplate& t, double threshold = 2.5) {
  const double step = 1.0;
  std::vector<std::vector<std::pair<Vec2, double>>> samples(t.routes.size());
  for (size_t r = 0; r < t.routes.size(); ++r)
    for (double s = 0.0; s <= t.routes[r].length; s += step)
      samples[r].push_back({route_point(t.routes[r], s), s});
  for (size_t a = 0; a < t.routes.size(); ++a) {
    for (size_t b = a + 1; b < t.routes.size(); ++b) {
      bool share = false;
      for (int la : t.routes[a].lane_ids)
        for (int lb : t.routes[b].lane_ids)
          if (la == lb) share = true;
      if (share) continue;
      double best = std::numeric_limits<double>::infinity();
      double sa = 0.0, sb = 0.0;
      for (const auto& [pa, aa] : samples[a])
        for (const auto& [pb, bb] : samples[b]) {
          const double d = dist(pa, pb);
          if (d < best) {
            best = d;
            sa = aa;
            sb = bb;
          }
        }
      if (best < threshold)
        t.conflicts.push_back({static_cast<int>(a), static_cast<int>(b), sa, sb});
    }
  }
}

inline const std::vector<MapTemplate>& templates() {
  static const std::vector<MapTemplate> all = [] {
    std::vector<MapTemplate> v;
    v.push_back(make_straight_template());
    v.push_back(make_curve_template());
    v.push_back(make_intersection_template());
    for (auto& t : v) find_conflicts(t);
    return v;
  }();
  return all;
}

inline double idm_accel(const IdmParams& p, double v, double v0, double gap,
                        double dv) {
  const double free_term = 1.0 - std::pow(std::max(v, 0.0) / v0, 4.0);
  if (gap <= 0.1) return -1e9;  // emergency, clamped later
  const double s_star =
      p.s0 + std::max(0.0, v * p.T + v * dv / (2.0 * std::sqrt(p.a * p.b)));
  return p.a * (free_term - (s_star / gap) * (s_star / gap));
}

inline double pure_pursuit_steer(const AgentState& s, Vec2 target,
                                 double wheelbase, double lookahead) {
  const double dx = target.x - s.x, dy = target.y - s.y;
  const double lx = std::cos(s.heading) * dx + std::sin(s.heading) * dy;
  const double ly = -std::sin(s.heading) * dx + std::cos(s.heading) * dy;
  const double d = std::max(1e-6, std::sqrt(lx * lx + ly * ly));
  const double sin_alpha = ly / d;
  return std::atan(2.0 * wheelbase * sin_alpha / std::max(lookahead, 1.0));
}

}  // namespace synth_detail

// Generates cfg.scenes scenarios, cycling the three map templates. A scene
// whose rollout produces any footprint contact is re-placed up to 100 times,
// then skipped (counted in *skipped if given). Fully deterministic in seed.
inline std::vector<Scenario> synth_generate(const SynthConfig& cfg,
                                            uint64_t seed, int* skipped = nullptr) {
  using namespace synth_detail;
  if (cfg.scenes < 0) throw ValidationError("synth_generate: negative scene count");
  if (cfg.agents_min < 1 || cfg.agents_max < cfg.agents_min)
    throw ValidationError("synth_generate: bad agent count range");
  if (!(cfg.dt > 0.0) || !(cfg.duration > 0.0))
    throw ValidationError("synth_generate: dt and duration must be positive");

  const auto& temps = templates();
  const int steps = static_cast<int>(std::llround(cfg.duration / cfg.dt));
  std::vector<Scenario> out;
  int skip_count = 0;

  for (int scene = 0; scene < cfg.scenes; ++scene) {
    Rng rng(seed, "data", static_cast<uint64_t>(scene));
    const MapTemplate& temp = temps[static_cast<size_t>(scene) % temps.size()];

    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      const int n = cfg.agents_min + rng.uniform_int(cfg.agents_max - cfg.agents_min + 1);

      struct Veh {
        int route = 0;
        double arc = 0.0;
        double v0 = 12.0;
        VehicleGeometry geom;
        AgentState state;
      };
      std::vector<Veh> vehs;
      bool placed_all = true;
      for (int i = 0; i < n; ++i) {
        bool ok = false;
        for (int tr = 0; tr < 100 && !ok; ++tr) {
          Veh v;
          v.route = rng.uniform_int(static_cast<int>(temp.routes.size()));
          const Route& r = temp.routes[static_cast<size_t>(v.route)];
          const double hi = std::min(120.0, r.length - 250.0);
          if (hi <= 5.0) continue;
          v.arc = rng.uniform(5.0, hi);
          v.v0 = cfg.idm.v0 * rng.uniform(0.75, 1.0);
          v.geom.length = rng.uniform(4.2, 5.0);
          v.geom.width = rng.uniform(1.85, 2.05);
          v.geom.wheelbase = 0.6 * v.geom.length;
          const Vec2 p = route_point(r, v.arc);
          v.state = {p.x, p.y, route_heading(r, v.arc),
                     rng.uniform(cfg.speed_min, cfg.speed_max)};
          ok = true;
          for (const auto& other : vehs)
            if (footprint_distance(v.state, v.geom, other.state, other.geom) < 1.0)
              ok = false;
          if (ok) vehs.push_back(v);
        }
        if (!ok) {
          placed_all = false;
          break;
        }
      }
      if (!placed_all) continue;

      Scenario sc;
      sc.dt = cfg.dt;
      sc.map = temp.map;
      const int av_index = rng.uniform_int(n);
      for (int i = 0; i < n; ++i) {
        AgentTrack a;
        a.id = i;
        a.geom = vehs[static_cast<size_t>(i)].geom;
        a.is_av = (i == av_index);
        a.traj.states.push_back(vehs[static_cast<size_t>(i)].state);
        sc.agents.push_back(std::move(a));
      }

      bool collision = false;
      for (int step = 0; step < steps && !collision; ++step) {
        // Arc positions refresh by projection so steering error is absorbed.
        for (auto& v : vehs)
          v.arc = project_to_route(temp.routes[static_cast<size_t>(v.route)],
                                   v.state.pos())
                      .arc;

        std::vector<Action> actions(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
          Veh& me = vehs[static_cast<size_t>(i)];
          const Route& r = temp.routes[static_cast<size_t>(me.route)];

          // Leader: any vehicle laterally within 2 m of my route and ahead.
          double gap = 1e9, lead_v = 0.0;
          for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const Veh& other = vehs[static_cast<size_t>(j)];
            const auto proj = project_to_route(r, other.state.pos());
            if (proj.lateral > 2.0) continue;
            const double ahead = proj.arc - me.arc;
            if (ahead <= 0.0) continue;
            const double g = ahead - 0.5 * (me.geom.length + other.geom.length);
            if (g < gap) {
              gap = g;
              lead_v = other.state.speed;
            }
          }
          double accel = idm_accel(cfg.idm, me.state.speed, me.v0, gap,
                                   me.state.speed - lead_v);

          // Conflict yielding: brake for a virtual stop line when crossing
          // traffic reaches the conflict point first. Ties yield to the
          // lower agent index.
          for (const auto& c : temp.conflicts) {
            int my_side = -1;
            if (c.route_a == me.route) my_side = 0;
            if (c.route_b == me.route) my_side = 1;
            if (my_side < 0) continue;
            const double my_conflict = my_side == 0 ? c.arc_a : c.arc_b;
            const double my_dist = my_conflict - me.arc;
            if (my_dist <= 0.0 || my_dist > 40.0) continue;
            for (int j = 0; j < n; ++j) {
              if (j == i) continue;
              const Veh& other = vehs[static_cast<size_t>(j)];
              const int other_route = my_side == 0 ? c.route_b : c.route_a;
              if (other.route != other_route) continue;
              const double other_conflict = my_side == 0 ? c.arc_b : c.arc_a;
              const double other_dist = other_conflict - other.arc;
              if (other_dist < -8.0 || other_dist > 40.0) continue;
              const double t_me = my_dist / std::max(me.state.speed, 0.5);
              const double t_other = other_dist / std::max(other.state.speed, 0.5);
              const bool i_yields =
                  t_other < t_me + 1.5 && !(t_me < t_other + 1.5 && i < j);
              if (!i_yields) continue;
              const double stop_gap =
                  my_dist - 5.0 - 0.5 * me.geom.length;
              accel = std::min(accel,
                               idm_accel(cfg.idm, me.state.speed, me.v0,
                                         std::max(stop_gap, 0.05),
                                         me.state.speed));
            }
          }

          const double lookahead = std::max(4.0, 1.0 * me.state.speed);
          const Vec2 target = route_point(r, me.arc + lookahead);
          actions[static_cast<size_t>(i)] = {
              std::clamp(accel, -cfg.limits.a_max, cfg.limits.a_max),
              pure_pursuit_steer(me.state, target, me.geom.wheelbase, lookahead)};
        }
        for (int i = 0; i < n; ++i) {
          Veh& me = vehs[static_cast<size_t>(i)];
          me.state = bicycle_step(me.state, actions[static_cast<size_t>(i)],
                                  me.geom, cfg.dt, cfg.limits);
          sc.agents[static_cast<size_t>(i)].traj.states.push_back(me.state);
        }
        for (int i = 0; i < n && !collision; ++i)
          for (int j = i + 1; j < n && !collision; ++j)
            if (footprint_distance(vehs[static_cast<size_t>(i)].state,
                                   vehs[static_cast<size_t>(i)].geom,
                                   vehs[static_cast<size_t>(j)].state,
                                   vehs[static_cast<size_t>(j)].geom) <= 0.0)
              collision = true;
      }
      if (collision) continue;

      out.push_back(std::move(sc));
      done = true;
    }
    if (!done) ++skip_count;
  }
  if (skipped) *skipped = skip_count;
  return out;
}

}  // namespace scengen
