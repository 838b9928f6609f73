#pragma once

#include "scengen/geometry.hpp"
#include "scengen/tensor.hpp"

// Tape ops wrapping the geometry kernels. Forward passes call the plain
// functions; backward passes replay the analytic Jacobians captured at
// forward time.

namespace scengen::ad {

// states [n x 4] (x, y, heading, speed), actions [n x 2] (accel, steer)
// -> next states [n x 4] through the kinematic bicycle model.
inline Tensor bicycle_op(const Tensor& states, const Tensor& actions,
                         const std::vector<VehicleGeometry>& geoms, double dt,
                         const ActionLimits& lim = {}) {
  Tape& t = detail::same_tape(states, actions);
  const int n = states.rows();
  if (states.cols() != 4 || actions.cols() != 2 || actions.rows() != n)
    throw ValidationError("bicycle_op: expected states [n x 4], actions [n x 2]");
  if (geoms.size() != static_cast<size_t>(n))
    throw ValidationError("bicycle_op: one geometry per agent required");

  Tensor out = t.alloc(n, 4);
  auto jacs = std::make_shared<std::vector<BicycleJacobian>>();
  jacs->reserve(static_cast<size_t>(n));
  {
    const auto& sv = t.node(states.id()).val;
    const auto& av = t.node(actions.id()).val;
    auto& ov = t.node(out.id()).val;
    for (int i = 0; i < n; ++i) {
      const AgentState s{sv[4 * i + 0], sv[4 * i + 1], sv[4 * i + 2],
                         sv[4 * i + 3]};
      const Action u{av[2 * i + 0], av[2 * i + 1]};
      jacs->push_back(bicycle_step_jacobian(s, u, geoms[static_cast<size_t>(i)],
                                            dt, lim));
      const AgentState& nx = jacs->back().next;
      ov[4 * i + 0] = nx.x;
      ov[4 * i + 1] = nx.y;
      ov[4 * i + 2] = nx.heading;
      ov[4 * i + 3] = nx.speed;
    }
  }
  const int sid = states.id(), aid = actions.id();
  t.node(out.id()).backward = [sid, aid, jacs, n](Tape& tp, int oid) {
    tp.ensure_grad(sid);
    tp.ensure_grad(aid);
    Node& o = tp.node(oid);
    auto& gs = tp.node(sid).grad;
    auto& ga = tp.node(aid).grad;
    for (int i = 0; i < n; ++i) {
      const auto& J = (*jacs)[static_cast<size_t>(i)].J;
      for (int r = 0; r < 4; ++r) {
        const double g = o.grad[static_cast<size_t>(4 * i + r)];
        if (g == 0.0) continue;
        for (int c = 0; c < 4; ++c) gs[static_cast<size_t>(4 * i + c)] += g * J[r][c];
        ga[static_cast<size_t>(2 * i + 0)] += g * J[r][4];
        ga[static_cast<size_t>(2 * i + 1)] += g * J[r][5];
      }
    }
  };
  return out;
}

// Mean over unordered agent pairs of hinge(margin - footprint_distance)^2.
// Zero (with zero gradient) when fewer than two agents.
inline Tensor collision_hinge_penalty(const Tensor& states,
                                      const std::vector<VehicleGeometry>& geoms,
                                      double margin) {
  Tape& t = *states.tape();
  const int n = states.rows();
  if (states.cols() != 4)
    throw ValidationError("collision_hinge_penalty: states must be [n x 4]");
  if (geoms.size() != static_cast<size_t>(n))
    throw ValidationError("collision_hinge_penalty: one geometry per agent");

  Tensor out = t.alloc(1, 1);
  struct PairGrad {
    int i, j;
    double coeff;  // d(pen)/d(distance) already including the pair mean
    std::array<double, 3> gi, gj;
  };
  auto pairs = std::make_shared<std::vector<PairGrad>>();
  const int npairs = n * (n - 1) / 2;
  {
    const auto& sv = t.node(states.id()).val;
    double pen = 0.0;
    for (int i = 0; i < n; ++i) {
      const AgentState si{sv[4 * i], sv[4 * i + 1], sv[4 * i + 2], sv[4 * i + 3]};
      for (int j = i + 1; j < n; ++j) {
        const AgentState sj{sv[4 * j], sv[4 * j + 1], sv[4 * j + 2],
                            sv[4 * j + 3]};
        const auto fg = footprint_distance_grad(si, geoms[static_cast<size_t>(i)],
                                                sj, geoms[static_cast<size_t>(j)]);
        const double h = margin - fg.value;
        if (h > 0.0) {
          pen += h * h;
          pairs->push_back({i, j, -2.0 * h / npairs, fg.da, fg.db});
        }
      }
    }
    t.node(out.id()).val[0] = npairs > 0 ? pen / npairs : 0.0;
  }
  const int sid = states.id();
  t.node(out.id()).backward = [sid, pairs](Tape& tp, int oid) {
    tp.ensure_grad(sid);
    const double g = tp.node(oid).grad[0];
    auto& gs = tp.node(sid).grad;
    for (const auto& p : *pairs) {
      for (int c = 0; c < 3; ++c) {
        gs[static_cast<size_t>(4 * p.i + c)] += g * p.coeff * p.gi[static_cast<size_t>(c)];
        gs[static_cast<size_t>(4 * p.j + c)] += g * p.coeff * p.gj[static_cast<size_t>(c)];
      }
    }
  };
  return out;
}

// Mean over agents of offroad_depth^2.
inline Tensor offroad_sq_penalty(const Tensor& states,
                                 const std::vector<VehicleGeometry>& geoms,
                                 const LaneGraph& map) {
  Tape& t = *states.tape();
  const int n = states.rows();
  if (states.cols() != 4)
    throw ValidationError("offroad_sq_penalty: states must be [n x 4]");
  if (geoms.size() != static_cast<size_t>(n))
    throw ValidationError("offroad_sq_penalty: one geometry per agent");

  Tensor out = t.alloc(1, 1);
  struct AgentGrad {
    int i;
    double coeff;
    std::array<double, 3> gi;
  };
  auto grads = std::make_shared<std::vector<AgentGrad>>();
  {
    const auto& sv = t.node(states.id()).val;
    double pen = 0.0;
    for (int i = 0; i < n; ++i) {
      const AgentState si{sv[4 * i], sv[4 * i + 1], sv[4 * i + 2], sv[4 * i + 3]};
      const auto og = offroad_depth_grad(si, geoms[static_cast<size_t>(i)], map);
      if (og.value > 0.0) {
        pen += og.value * og.value;
        grads->push_back({i, 2.0 * og.value / n, og.ds});
      }
    }
    t.node(out.id()).val[0] = pen / n;
  }
  const int sid = states.id();
  t.node(out.id()).backward = [sid, grads](Tape& tp, int oid) {
    tp.ensure_grad(sid);
    const double g = tp.node(oid).grad[0];
    auto& gs = tp.node(sid).grad;
    for (const auto& a : *grads)
      for (int c = 0; c < 3; ++c)
        gs[static_cast<size_t>(4 * a.i + c)] += g * a.coeff * a.gi[static_cast<size_t>(c)];
  };
  return out;
}

}  // namespace scengen::ad
