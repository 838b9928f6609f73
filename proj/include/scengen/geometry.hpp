#pragma once

#include <algorithm>
#include <array>
#include <limits>
#include <vector>

#include "scengen/common.hpp"

namespace scengen {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::sqrt(a.x * a.x + a.y * a.y); }
inline double dist(Vec2 a, Vec2 b) { return norm(a - b); }

struct AgentState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // radians, (-pi, pi]
  double speed = 0.0;    // m/s, non-negative

  Vec2 pos() const { return {x, y}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading) &&
           std::isfinite(speed);
  }
};

struct Action {
  double accel = 0.0;  // m/s^2
  double steer = 0.0;  // rad, front-wheel angle
};

struct ActionLimits {
  double a_max = 6.0;
  double steer_max = 0.7;
};

struct VehicleGeometry {
  double length = 4.5;
  double width = 2.0;
  double wheelbase = 2.8;
};

struct Trajectory {
  std::vector<AgentState> states;
};

struct Lane {
  int id = 0;
  double width = 3.5;
  std::vector<Vec2> points;     // centerline polyline, >= 2 points
  std::vector<int> successors;  // lane ids
};

struct Polygon {
  std::vector<Vec2> pts;  // closed implicitly (last connects to first)
};

struct LaneGraph {
  std::vector<Lane> lanes;
  std::vector<Polygon> drivable;  // union of simple polygons

  const Lane* lane_by_id(int id) const {
    for (const auto& l : lanes)
      if (l.id == id) return &l;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Kinematic bicycle step.
//
// v' = max(0, v + a*dt), heading rate uses the *pre-update* speed, and the
// position advances with the midpoint speed (v+v')/2 along the midpoint
// heading (theta+theta')/2. The midpoint form tracks a fine-substep Euler
// integration of the continuous model to ~1e-4 m over dt=0.5 at urban speeds;
// advancing along either endpoint heading alone does not.
// ---------------------------------------------------------------------------

inline Action clamp_action(const Action& u, const ActionLimits& lim,
                           bool* clamped = nullptr) {
  Action c = u;
  bool hit = false;
  if (c.accel > lim.a_max) { c.accel = lim.a_max; hit = true; }
  if (c.accel < -lim.a_max) { c.accel = -lim.a_max; hit = true; }
  if (c.steer > lim.steer_max) { c.steer = lim.steer_max; hit = true; }
  if (c.steer < -lim.steer_max) { c.steer = -lim.steer_max; hit = true; }
  if (clamped) *clamped = hit;
  return c;
}

inline AgentState bicycle_step(const AgentState& s, const Action& u_raw,
                               const VehicleGeometry& geom, double dt,
                               const ActionLimits& lim = {},
                               bool* clamped = nullptr) {
  if (!s.finite() || !std::isfinite(u_raw.accel) || !std::isfinite(u_raw.steer))
    throw ValidationError("bicycle_step: non-finite state or action");
  if (!(dt > 0.0)) throw ValidationError("bicycle_step: dt must be positive");
  if (!(geom.wheelbase > 0.0))
    throw ValidationError("bicycle_step: wheelbase must be positive");

  const Action u = clamp_action(u_raw, lim, clamped);
  const double v2 = std::max(0.0, s.speed + u.accel * dt);
  const double dth = (s.speed / geom.wheelbase) * std::tan(u.steer) * dt;
  const double vm = 0.5 * (s.speed + v2);
  const double hm = s.heading + 0.5 * dth;

  AgentState n;
  n.x = s.x + vm * std::cos(hm) * dt;
  n.y = s.y + vm * std::sin(hm) * dt;
  n.heading = wrap_angle(s.heading + dth);
  n.speed = v2;
  return n;
}

// Next state plus d(next)/d(x, y, heading, speed, accel, steer), rows in
// state order (x, y, heading, speed). Clamped action coordinates get zero
// columns: the clamp is flat there.
struct BicycleJacobian {
  AgentState next;
  // J[out][in], out in {x,y,h,v}, in in {x,y,h,v,a,steer}
  std::array<std::array<double, 6>, 4> J{};
};

inline BicycleJacobian bicycle_step_jacobian(const AgentState& s,
                                             const Action& u_raw,
                                             const VehicleGeometry& geom,
                                             double dt,
                                             const ActionLimits& lim = {}) {
  BicycleJacobian out;
  out.next = bicycle_step(s, u_raw, geom, dt, lim);

  const Action u = clamp_action(u_raw, lim);
  const bool a_free = (u_raw.accel > -lim.a_max && u_raw.accel < lim.a_max);
  const bool d_free = (u_raw.steer > -lim.steer_max && u_raw.steer < lim.steer_max);

  const double L = geom.wheelbase;
  const double tan_d = std::tan(u.steer);
  const double sec2 = 1.0 + tan_d * tan_d;

  const bool moving = (s.speed + u.accel * dt) > 0.0;
  const double dv2_dv = moving ? 1.0 : 0.0;
  const double dv2_da = moving && a_free ? dt : 0.0;

  const double ddth_dv = tan_d * dt / L;
  const double ddth_dd = d_free ? s.speed * dt * sec2 / L : 0.0;

  const double v2 = std::max(0.0, s.speed + u.accel * dt);
  const double vm = 0.5 * (s.speed + v2);
  const double dvm_dv = 0.5 * (1.0 + dv2_dv);
  const double dvm_da = 0.5 * dv2_da;

  const double dth = (s.speed / L) * tan_d * dt;
  const double hm = s.heading + 0.5 * dth;
  const double ch = std::cos(hm), sh = std::sin(hm);

  auto& J = out.J;
  // x' row
  J[0][0] = 1.0;
  J[0][2] = -vm * sh * dt;
  J[0][3] = (dvm_dv * ch - vm * sh * 0.5 * ddth_dv) * dt;
  J[0][4] = dvm_da * ch * dt;
  J[0][5] = -vm * sh * 0.5 * ddth_dd * dt;
  // y' row
  J[1][1] = 1.0;
  J[1][2] = vm * ch * dt;
  J[1][3] = (dvm_dv * sh + vm * ch * 0.5 * ddth_dv) * dt;
  J[1][4] = dvm_da * sh * dt;
  J[1][5] = vm * ch * 0.5 * ddth_dd * dt;
  // heading' row (wrap is identity in the derivative)
  J[2][2] = 1.0;
  J[2][3] = ddth_dv;
  J[2][5] = ddth_dd;
  // speed' row
  J[3][3] = dv2_dv;
  J[3][4] = dv2_da;
  return out;
}

// ---------------------------------------------------------------------------
// Disc decomposition. A footprint of length l, width w becomes
// k = ceil(l/w) discs of radius w/2 spaced evenly along the heading axis
// between -(l-w)/2 and +(l-w)/2.
// ---------------------------------------------------------------------------

inline int disc_count(const VehicleGeometry& g) {
  if (!(g.length > 0.0) || !(g.width > 0.0))
    throw ValidationError("disc_count: non-positive vehicle dimensions");
  return std::max(1, static_cast<int>(std::ceil(g.length / g.width - 1e-12)));
}

inline double disc_radius(const VehicleGeometry& g) { return 0.5 * g.width; }

inline double disc_offset(const VehicleGeometry& g, int i) {
  const int k = disc_count(g);
  if (k == 1) return 0.0;
  const double half = 0.5 * (g.length - g.width);
  return -half + (2.0 * half) * i / (k - 1);
}

inline Vec2 disc_center(const AgentState& s, const VehicleGeometry& g, int i) {
  const double off = disc_offset(g, i);
  return {s.x + off * std::cos(s.heading), s.y + off * std::sin(s.heading)};
}

// Signed clearance: min over disc pairs of center distance minus radius sum.
// Negative means overlap (collision).
inline double footprint_distance(const AgentState& sa, const VehicleGeometry& ga,
                                 const AgentState& sb, const VehicleGeometry& gb) {
  const int ka = disc_count(ga), kb = disc_count(gb);
  const double rsum = disc_radius(ga) + disc_radius(gb);
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < ka; ++i) {
    const Vec2 ca = disc_center(sa, ga, i);
    for (int j = 0; j < kb; ++j) {
      const double d = dist(ca, disc_center(sb, gb, j)) - rsum;
      if (d < best) best = d;
    }
  }
  return best;
}

struct FootprintDistanceGrad {
  double value = 0.0;
  std::array<double, 3> da{};  // d/d(ax, ay, a_heading)
  std::array<double, 3> db{};
};

// Gradient of footprint_distance at the first-encountered minimal disc pair.
// Coincident disc centers get a zero (sub)gradient.
inline FootprintDistanceGrad footprint_distance_grad(
    const AgentState& sa, const VehicleGeometry& ga, const AgentState& sb,
    const VehicleGeometry& gb) {
  const int ka = disc_count(ga), kb = disc_count(gb);
  const double rsum = disc_radius(ga) + disc_radius(gb);
  FootprintDistanceGrad out;
  out.value = std::numeric_limits<double>::infinity();
  int bi = 0, bj = 0;
  for (int i = 0; i < ka; ++i) {
    const Vec2 ca = disc_center(sa, ga, i);
    for (int j = 0; j < kb; ++j) {
      const double d = dist(ca, disc_center(sb, gb, j)) - rsum;
      if (d < out.value) {
        out.value = d;
        bi = i;
        bj = j;
      }
    }
  }
  const Vec2 ca = disc_center(sa, ga, bi);
  const Vec2 cb = disc_center(sb, gb, bj);
  const Vec2 diff = ca - cb;
  const double n = norm(diff);
  if (n <= 1e-12) return out;
  const Vec2 u = (1.0 / n) * diff;
  const double offa = disc_offset(ga, bi), offb = disc_offset(gb, bj);
  out.da = {u.x, u.y,
            dot(u, {-offa * std::sin(sa.heading), offa * std::cos(sa.heading)})};
  out.db = {-u.x, -u.y,
            -dot(u, {-offb * std::sin(sb.heading), offb * std::cos(sb.heading)})};
  return out;
}

// ---------------------------------------------------------------------------
// Point vs polygon union.
// ---------------------------------------------------------------------------

inline bool point_in_polygon(Vec2 p, const Polygon& poly) {
  bool in = false;
  const auto& v = poly.pts;
  const size_t n = v.size();
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    if ((v[i].y > p.y) != (v[j].y > p.y)) {
      const double t = (p.y - v[i].y) / (v[j].y - v[i].y);
      if (p.x < v[i].x + t * (v[j].x - v[i].x)) in = !in;
    }
  }
  return in;
}

struct ClosestPoint {
  double distance = 0.0;
  Vec2 point{};  // closest boundary point; equals the query when inside
};

inline ClosestPoint closest_on_segment(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec2 q = a + t * ab;
  return {dist(p, q), q};
}

// Distance from p to the drivable union: 0 inside any polygon, otherwise the
// min distance to any polygon boundary.
inline ClosestPoint distance_to_drivable(Vec2 p, const LaneGraph& map) {
  if (map.drivable.empty())
    throw ValidationError("distance_to_drivable: map has no drivable polygons");
  ClosestPoint best;
  best.distance = std::numeric_limits<double>::infinity();
  for (const auto& poly : map.drivable) {
    if (poly.pts.size() < 3)
      throw ValidationError("distance_to_drivable: degenerate drivable polygon");
    if (point_in_polygon(p, poly)) return {0.0, p};
    const size_t n = poly.pts.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
      const ClosestPoint c = closest_on_segment(p, poly.pts[j], poly.pts[i]);
      if (c.distance < best.distance) best = c;
    }
  }
  return best;
}

// Escape distance of the footprint outside the drivable union: max over discs
// of max(0, distance(center, union) - radius). Zero on-road by construction.
inline double offroad_depth(const AgentState& s, const VehicleGeometry& g,
                            const LaneGraph& map) {
  const int k = disc_count(g);
  const double r = disc_radius(g);
  double worst = 0.0;
  for (int i = 0; i < k; ++i) {
    const ClosestPoint c = distance_to_drivable(disc_center(s, g, i), map);
    worst = std::max(worst, std::max(0.0, c.distance - r));
  }
  return worst;
}

struct OffroadDepthGrad {
  double value = 0.0;
  std::array<double, 3> ds{};  // d/d(x, y, heading)
};

inline OffroadDepthGrad offroad_depth_grad(const AgentState& s,
                                           const VehicleGeometry& g,
                                           const LaneGraph& map) {
  const int k = disc_count(g);
  const double r = disc_radius(g);
  OffroadDepthGrad out;
  int bi = -1;
  Vec2 bq{};
  for (int i = 0; i < k; ++i) {
    const ClosestPoint c = distance_to_drivable(disc_center(s, g, i), map);
    const double escape = std::max(0.0, c.distance - r);
    if (escape > out.value) {
      out.value = escape;
      bi = i;
      bq = c.point;
    }
  }
  if (bi < 0) return out;  // fully on-road (or within radius), flat region
  const Vec2 c = disc_center(s, g, bi);
  const Vec2 diff = c - bq;
  const double n = norm(diff);
  if (n <= 1e-12) return out;
  const Vec2 u = (1.0 / n) * diff;
  const double off = disc_offset(g, bi);
  out.ds = {u.x, u.y,
            dot(u, {-off * std::sin(s.heading), off * std::cos(s.heading)})};
  return out;
}

// ---------------------------------------------------------------------------
// Time-to-collision under constant-velocity extrapolation, scanned at
// scan_dt and capped. Returns the cap when no contact occurs.
// ---------------------------------------------------------------------------

inline double time_to_collision(const AgentState& sa, const VehicleGeometry& ga,
                                const AgentState& sb, const VehicleGeometry& gb,
                                double cap = 10.0, double scan_dt = 0.1) {
  if (!(cap > 0.0) || !(scan_dt > 0.0))
    throw ValidationError("time_to_collision: cap and scan_dt must be positive");
  // Coarse reject: even head-on at combined speed the footprints cannot touch.
  const double extent = 0.5 * (ga.length + gb.length) + ga.width + gb.width;
  if (dist(sa.pos(), sb.pos()) > (sa.speed + sb.speed) * cap + extent)
    return cap;
  const Vec2 va{sa.speed * std::cos(sa.heading), sa.speed * std::sin(sa.heading)};
  const Vec2 vb{sb.speed * std::cos(sb.heading), sb.speed * std::sin(sb.heading)};
  const int steps = static_cast<int>(std::floor(cap / scan_dt + 1e-9));
  for (int i = 0; i <= steps; ++i) {
    const double t = i * scan_dt;
    AgentState ea = sa, eb = sb;
    ea.x += va.x * t;
    ea.y += va.y * t;
    eb.x += vb.x * t;
    eb.y += vb.y * t;
    if (footprint_distance(ea, ga, eb, gb) <= 0.0) return std::min(t, cap);
  }
  return cap;
}

inline double relative_speed(const AgentState& a, const AgentState& b) {
  const double dvx = a.speed * std::cos(a.heading) - b.speed * std::cos(b.heading);
  const double dvy = a.speed * std::sin(a.heading) - b.speed * std::sin(b.heading);
  return std::sqrt(dvx * dvx + dvy * dvy);
}

}  // namespace scengen
