#pragma once

#include <fstream>
#include <optional>

#include "json.hpp"
#include "scengen/geometry.hpp"

namespace scengen {

inline constexpr int kPastSteps = 4;    // 2 s of context at 2 Hz
inline constexpr int kFutureSteps = 12;  // 6 s horizon at 2 Hz
inline constexpr int kWindowSteps = kPastSteps + kFutureSteps;

struct AgentTrack {
  int id = 0;
  VehicleGeometry geom;
  bool is_av = false;
  Trajectory traj;
};

struct Scenario {
  double dt = 0.5;
  LaneGraph map;
  std::vector<AgentTrack> agents;
};

struct WindowAgent {
  int id = 0;
  VehicleGeometry geom;
  bool is_av = false;
  std::vector<AgentState> past;    // kPastSteps states, oldest first
  std::vector<AgentState> future;  // kFutureSteps states; empty at inference
};

// A fixed-length slice of a log. The map is shared with the owning scenario.
struct ScenarioWindow {
  double dt = 0.5;
  const LaneGraph* map = nullptr;
  std::vector<WindowAgent> agents;
  int scene_id = -1;
  int window_id = -1;

  const WindowAgent* av() const {
    for (const auto& a : agents)
      if (a.is_av) return &a;
    return nullptr;
  }
  int av_count() const {
    int c = 0;
    for (const auto& a : agents) c += a.is_av ? 1 : 0;
    return c;
  }
};

// Non-overlapping 16-step windows; an agent joins a window only if its track
// covers the whole span. Windows with fewer than two agents are dropped, and
// logs shorter than one window yield an empty list.
inline std::vector<ScenarioWindow> segment_log(const Scenario& sc,
                                               int scene_id = -1) {
  std::vector<ScenarioWindow> out;
  size_t max_len = 0;
  for (const auto& a : sc.agents) max_len = std::max(max_len, a.traj.states.size());
  const int n_windows = static_cast<int>(max_len) / kWindowSteps;
  for (int w = 0; w < n_windows; ++w) {
    ScenarioWindow win;
    win.dt = sc.dt;
    win.map = &sc.map;
    win.scene_id = scene_id;
    win.window_id = w;
    const size_t start = static_cast<size_t>(w) * kWindowSteps;
    for (const auto& a : sc.agents) {
      if (a.traj.states.size() < start + kWindowSteps) continue;
      WindowAgent wa;
      wa.id = a.id;
      wa.geom = a.geom;
      wa.is_av = a.is_av;
      wa.past.assign(a.traj.states.begin() + static_cast<long>(start),
                     a.traj.states.begin() + static_cast<long>(start + kPastSteps));
      wa.future.assign(
          a.traj.states.begin() + static_cast<long>(start + kPastSteps),
          a.traj.states.begin() + static_cast<long>(start + kWindowSteps));
      win.agents.push_back(std::move(wa));
    }
    if (win.agents.size() >= 2) out.push_back(std::move(win));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Local map view: the 4 nearest lanes (centerline distance at the agent's
// last past state, ties broken by lane id), each resampled to 10 points at
// uniform arc length over a [-30 m, +60 m] window around the agent's
// projection, expressed in the agent frame as (x, y, cos h, sin h), plus a
// validity mask. Missing lanes are zero-filled with mask 0.
// ---------------------------------------------------------------------------

struct LocalMapView {
  static constexpr int kLanes = 4;
  static constexpr int kPoints = 10;
  static constexpr int kFeat = 4;
  static constexpr int kBack = 30;   // metres of lane kept behind the agent
  static constexpr int kAhead = 60;  // metres kept ahead

  std::vector<double> feats;  // kLanes * kPoints * kFeat
  std::vector<double> mask;   // kLanes

  LocalMapView()
      : feats(static_cast<size_t>(kLanes) * kPoints * kFeat, 0.0),
        mask(kLanes, 0.0) {}
};

namespace detail {

struct PolylineProjection {
  double distance = 0.0;
  double arc = 0.0;  // arclength of the closest point
};

inline PolylineProjection project_to_polyline(Vec2 p,
                                              const std::vector<Vec2>& pts) {
  PolylineProjection best;
  best.distance = std::numeric_limits<double>::infinity();
  double arc = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    const double seg_len = dist(pts[i], pts[i + 1]);
    const ClosestPoint c = closest_on_segment(p, pts[i], pts[i + 1]);
    if (c.distance < best.distance) {
      best.distance = c.distance;
      best.arc = arc + dist(pts[i], c.point);
    }
    arc += seg_len;
  }
  return best;
}

inline double polyline_length(const std::vector<Vec2>& pts) {
  double len = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) len += dist(pts[i], pts[i + 1]);
  return len;
}

// Point and tangent angle at a given arclength, clamped to the ends.
inline void polyline_at(const std::vector<Vec2>& pts, double s, Vec2* point,
                        double* heading) {
  double arc = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    const double seg = dist(pts[i], pts[i + 1]);
    if (s <= arc + seg || i + 2 == pts.size()) {
      const double t = seg > 0.0 ? std::clamp((s - arc) / seg, 0.0, 1.0) : 0.0;
      *point = pts[i] + t * (pts[i + 1] - pts[i]);
      const Vec2 d = pts[i + 1] - pts[i];
      *heading = std::atan2(d.y, d.x);
      return;
    }
    arc += seg;
  }
  *point = pts.empty() ? Vec2{} : pts.back();
  *heading = 0.0;
}

}  // namespace detail

inline LocalMapView local_map_view(const ScenarioWindow& w, int agent_id) {
  const WindowAgent* agent = nullptr;
  for (const auto& a : w.agents)
    if (a.id == agent_id) agent = &a;
  if (!agent)
    throw ValidationError("local_map_view: agent " + std::to_string(agent_id) +
                          " not in window");
  if (!w.map) throw ValidationError("local_map_view: window has no map");
  if (agent->past.empty())
    throw ValidationError("local_map_view: agent has no past states");

  const AgentState& anchor = agent->past.back();
  const Vec2 pos = anchor.pos();

  struct Ranked {
    double distance;
    int lane_id;
    const Lane* lane;
    double arc;
  };
  std::vector<Ranked> ranked;
  for (const auto& lane : w.map->lanes) {
    if (lane.points.size() < 2) continue;
    const auto proj = detail::project_to_polyline(pos, lane.points);
    ranked.push_back({proj.distance, lane.id, &lane, proj.arc});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.lane_id < b.lane_id;
  });

  LocalMapView view;
  const double ch = std::cos(anchor.heading), sh = std::sin(anchor.heading);
  const int n_take = std::min<int>(LocalMapView::kLanes, static_cast<int>(ranked.size()));
  for (int l = 0; l < n_take; ++l) {
    const Lane& lane = *ranked[static_cast<size_t>(l)].lane;
    const double total = detail::polyline_length(lane.points);
    const double lo = std::clamp(ranked[static_cast<size_t>(l)].arc - LocalMapView::kBack, 0.0, total);
    const double hi = std::clamp(ranked[static_cast<size_t>(l)].arc + LocalMapView::kAhead, 0.0, total);
    view.mask[static_cast<size_t>(l)] = 1.0;
    for (int p = 0; p < LocalMapView::kPoints; ++p) {
      const double s = lo + (hi - lo) * p / (LocalMapView::kPoints - 1);
      Vec2 pt;
      double th = 0.0;
      detail::polyline_at(lane.points, s, &pt, &th);
      const double dx = pt.x - pos.x, dy = pt.y - pos.y;
      const size_t base =
          (static_cast<size_t>(l) * LocalMapView::kPoints + p) * LocalMapView::kFeat;
      view.feats[base + 0] = ch * dx + sh * dy;
      view.feats[base + 1] = -sh * dx + ch * dy;
      view.feats[base + 2] = std::cos(th - anchor.heading);
      view.feats[base + 3] = std::sin(th - anchor.heading);
    }
  }
  return view;
}

// ---------------------------------------------------------------------------
// Scenario JSON. Field layout:
// { "version": 1, "dt": number,
//   "map": { "lanes": [ { "id", "width", "points": [[x,y],...],
//                         "successors": [id,...] } ],
//            "drivable": [ [[x,y],...], ... ] },
//   "agents": [ { "id", "length", "width", "wheelbase", "is_av",
//                 "states": [[x,y,heading,speed],...] } ] }
// ---------------------------------------------------------------------------

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& j,
                                     const std::string& key,
                                     const std::string& where) {
  if (!j.contains(key))
    throw ValidationError("scenario: missing field \"" + key + "\" in " + where);
  return j.at(key);
}

inline double require_number(const nlohmann::json& j, const std::string& key,
                             const std::string& where) {
  const auto& v = require(j, key, where);
  if (!v.is_number())
    throw ValidationError("scenario: field \"" + key + "\" in " + where +
                          " must be a number");
  return v.get<double>();
}

// Proper-crossing check between non-adjacent edges; shared endpoints allowed.
inline bool polygon_self_intersects(const Polygon& poly) {
  const auto& v = poly.pts;
  const size_t n = v.size();
  auto cross = [](Vec2 o, Vec2 a, Vec2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  auto proper = [&](Vec2 a, Vec2 b, Vec2 c, Vec2 d) {
    const double d1 = cross(a, b, c), d2 = cross(a, b, d);
    const double d3 = cross(c, d, a), d4 = cross(c, d, b);
    return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
  };
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      // Skip adjacent edges (sharing a vertex), including the wrap pair.
      if (j == i || j == (i + 1) % n || (j + 1) % n == i) continue;
      if (proper(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n])) return true;
    }
  }
  return false;
}

}  // namespace detail

inline nlohmann::json scenario_to_json(const Scenario& sc) {
  nlohmann::json j;
  j["version"] = 1;
  j["dt"] = sc.dt;
  nlohmann::json lanes = nlohmann::json::array();
  for (const auto& l : sc.map.lanes) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : l.points) pts.push_back({p.x, p.y});
    lanes.push_back({{"id", l.id},
                     {"width", l.width},
                     {"points", pts},
                     {"successors", l.successors}});
  }
  nlohmann::json drivable = nlohmann::json::array();
  for (const auto& poly : sc.map.drivable) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : poly.pts) pts.push_back({p.x, p.y});
    drivable.push_back(pts);
  }
  j["map"] = {{"lanes", lanes}, {"drivable", drivable}};
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : sc.agents) {
    nlohmann::json states = nlohmann::json::array();
    for (const auto& s : a.traj.states)
      states.push_back({s.x, s.y, s.heading, s.speed});
    agents.push_back({{"id", a.id},
                      {"length", a.geom.length},
                      {"width", a.geom.width},
                      {"wheelbase", a.geom.wheelbase},
                      {"is_av", a.is_av},
                      {"states", states}});
  }
  j["agents"] = agents;
  return j;
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::require;
  using detail::require_number;
  Scenario sc;
  const int version = static_cast<int>(require_number(j, "version", "scenario"));
  if (version != 1)
    throw ValidationError("scenario: unsupported version " +
                          std::to_string(version));
  sc.dt = require_number(j, "dt", "scenario");
  if (!(sc.dt > 0.0)) throw ValidationError("scenario: dt must be positive");

  const auto& map = require(j, "map", "scenario");
  for (const auto& lj : require(map, "lanes", "map")) {
    Lane lane;
    lane.id = static_cast<int>(require_number(lj, "id", "lane"));
    lane.width = require_number(lj, "width", "lane");
    if (!(lane.width > 0.0))
      throw ValidationError("scenario: lane width must be positive (lane " +
                            std::to_string(lane.id) + ")");
    for (const auto& pj : require(lj, "points", "lane")) {
      if (!pj.is_array() || pj.size() != 2)
        throw ValidationError("scenario: lane points must be [x,y] pairs (lane " +
                              std::to_string(lane.id) + ")");
      lane.points.push_back({pj[0].get<double>(), pj[1].get<double>()});
    }
    if (lane.points.size() < 2)
      throw ValidationError("scenario: lane " + std::to_string(lane.id) +
                            " needs at least 2 points");
    for (const auto& sj : require(lj, "successors", "lane"))
      lane.successors.push_back(sj.get<int>());
    sc.map.lanes.push_back(std::move(lane));
  }
  for (const auto& lane : sc.map.lanes)
    for (int succ : lane.successors)
      if (!sc.map.lane_by_id(succ))
        throw ValidationError("scenario: lane " + std::to_string(lane.id) +
                              " references unknown successor " +
                              std::to_string(succ));
  {
    std::vector<int> ids;
    for (const auto& lane : sc.map.lanes) ids.push_back(lane.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw ValidationError("scenario: duplicate lane ids");
  }
  for (const auto& polyj : require(map, "drivable", "map")) {
    Polygon poly;
    for (const auto& pj : polyj) {
      if (!pj.is_array() || pj.size() != 2)
        throw ValidationError("scenario: drivable points must be [x,y] pairs");
      poly.pts.push_back({pj[0].get<double>(), pj[1].get<double>()});
    }
    if (poly.pts.size() < 3)
      throw ValidationError("scenario: drivable polygon needs >= 3 points");
    if (detail::polygon_self_intersects(poly))
      throw ValidationError("scenario: drivable polygon self-intersects");
    sc.map.drivable.push_back(std::move(poly));
  }

  std::vector<int> agent_ids;
  for (const auto& aj : require(j, "agents", "scenario")) {
    AgentTrack a;
    a.id = static_cast<int>(require_number(aj, "id", "agent"));
    a.geom.length = require_number(aj, "length", "agent");
    a.geom.width = require_number(aj, "width", "agent");
    a.geom.wheelbase = require_number(aj, "wheelbase", "agent");
    if (!(a.geom.length > 0.0) || !(a.geom.width > 0.0) ||
        !(a.geom.wheelbase > 0.0))
      throw ValidationError("scenario: agent " + std::to_string(a.id) +
                            " has non-positive dimensions");
    const auto& av_flag = require(aj, "is_av", "agent");
    if (!av_flag.is_boolean())
      throw ValidationError("scenario: field \"is_av\" must be a boolean (agent " +
                            std::to_string(a.id) + ")");
    a.is_av = av_flag.get<bool>();
    for (const auto& sj : require(aj, "states", "agent")) {
      if (!sj.is_array() || sj.size() != 4)
        throw ValidationError(
            "scenario: agent states must be [x,y,heading,speed] (agent " +
            std::to_string(a.id) + ")");
      AgentState s{sj[0].get<double>(), sj[1].get<double>(), sj[2].get<double>(),
                   sj[3].get<double>()};
      if (!s.finite())
        throw ValidationError("scenario: non-finite state in agent " +
                              std::to_string(a.id));
      if (s.speed < 0.0)
        throw ValidationError("scenario: negative speed in agent " +
                              std::to_string(a.id));
      s.heading = wrap_angle(s.heading);
      a.traj.states.push_back(s);
    }
    agent_ids.push_back(a.id);
    sc.agents.push_back(std::move(a));
  }
  std::sort(agent_ids.begin(), agent_ids.end());
  if (std::adjacent_find(agent_ids.begin(), agent_ids.end()) != agent_ids.end())
    throw ValidationError("scenario: duplicate agent ids");
  return sc;
}

// Sorted keys and a fixed indent make saves byte-stable: save/load/save is
// an identity on files this writer produced.
inline void save_scenario(const Scenario& sc, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ValidationError("save_scenario: cannot open " + path);
  f << scenario_to_json(sc).dump(1) << "\n";
  if (!f) throw ValidationError("save_scenario: write failed for " + path);
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("load_scenario: cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded())
    throw ValidationError("load_scenario: malformed JSON in " + path);
  return scenario_from_json(j);
}

}  // namespace scengen
