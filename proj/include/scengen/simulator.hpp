#pragma once

#include "scengen/diffusion.hpp"
#include "scengen/rewards.hpp"
#include "scengen/synth.hpp"

// Closed-loop episode runner. Background vehicles follow trajectories drawn
// from the diffusion model (replanned on a fixed period) or replayed from
// logs; the single AV is driven by a pluggable planner under a wall-clock
// compute budget.

namespace scengen {

struct PlannerObservation {
  AgentState self;
  VehicleGeometry self_geom;
  std::vector<AgentState> others;
  std::vector<VehicleGeometry> other_geoms;
  const LaneGraph* map = nullptr;
  double dt = 0.5;
};

class Planner {
 public:
  virtual ~Planner() = default;
  virtual void reset() {}
  virtual Action act(const PlannerObservation& obs) = 0;
  virtual std::string name() const = 0;
  // True when the planner hit a degraded fallback at least once.
  virtual bool warning() const { return false; }
};

// Lane-following planner: pure pursuit along the closest lane chain, IDM
// against the nearest leader in the corridor, plus a constant-velocity
// emergency brake check over the next second.
class RuleBasedPlanner : public Planner {
 public:
  IdmParams idm;
  ActionLimits limits;
  double corridor_halfwidth = 2.0;
  double emergency_margin = 0.5;
  double offmap_distance = 20.0;

  void reset() override { warned_ = false; }
  std::string name() const override { return "rule_based"; }
  bool warning() const override { return warned_; }

  Action act(const PlannerObservation& obs) override {
    if (!obs.map || obs.map->lanes.empty()) {
      warned_ = true;
      return {0.0, 0.0};
    }
    // Closest lane by centerline distance.
    const Lane* best = nullptr;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& l : obs.map->lanes) {
      const auto pr = detail::project_to_polyline(obs.self.pos(), l.points);
      if (pr.distance < best_d) {
        best_d = pr.distance;
        best = &l;
      }
    }
    if (!best || best_d > offmap_distance) {
      warned_ = true;
      return {0.0, 0.0};
    }

    // Chain successors, preferring the smallest heading change at each
    // junction, until ~120 m of path is available.
    std::vector<Vec2> path = best->points;
    const Lane* cur = best;
    for (int hops = 0; hops < 6 && detail::polyline_length(path) <
                                       detail::project_to_polyline(obs.self.pos(), path).arc + 120.0;
         ++hops) {
      const Lane* next = nullptr;
      double best_turn = std::numeric_limits<double>::infinity();
      const Vec2 end = cur->points.back();
      const Vec2 pen = cur->points[cur->points.size() - 2];
      const double out_heading = std::atan2(end.y - pen.y, end.x - pen.x);
      for (int sid : cur->successors) {
        const Lane* cand_ptr = obs.map->lane_by_id(sid);
        if (!cand_ptr) continue;
        const Lane& cand = *cand_ptr;
        const Vec2 a = cand.points[0], b = cand.points[1];
        const double in_heading = std::atan2(b.y - a.y, b.x - a.x);
        const double turn = std::fabs(wrap_angle(in_heading - out_heading));
        if (turn < best_turn) {
          best_turn = turn;
          next = &cand;
        }
      }
      if (!next) break;
      for (const auto& p : next->points)
        if (dist(path.back(), p) > 1e-9) path.push_back(p);
      cur = next;
    }

    const auto me = detail::project_to_polyline(obs.self.pos(), path);

    // IDM leader: nearest agent ahead of us within the corridor.
    double gap = std::numeric_limits<double>::infinity();
    double lead_speed = 0.0;
    for (size_t i = 0; i < obs.others.size(); ++i) {
      const auto pr = detail::project_to_polyline(obs.others[i].pos(), path);
      if (pr.distance > corridor_halfwidth) continue;
      const double ahead = pr.arc - me.arc;
      if (ahead <= 0.0) continue;
      const double g = ahead - 0.5 * (obs.self_geom.length + obs.other_geoms[i].length);
      if (g < gap) {
        gap = g;
        lead_speed = obs.others[i].speed;
      }
    }
    double accel = std::isfinite(gap)
                       ? synth_detail::idm_accel(idm, obs.self.speed, idm.v0, gap,
                                                 obs.self.speed - lead_speed)
                       : idm.a * (1.0 - std::pow(std::max(obs.self.speed, 0.0) / idm.v0, 4.0));

    // Emergency stop if any constant-velocity extrapolation comes within
    // the margin during the next second.
    bool emergency = false;
    for (size_t i = 0; i < obs.others.size() && !emergency; ++i) {
      for (int k = 1; k <= 10 && !emergency; ++k) {
        const double tau = 0.1 * k;
        AgentState a = obs.self, b = obs.others[i];
        a.x += a.speed * std::cos(a.heading) * tau;
        a.y += a.speed * std::sin(a.heading) * tau;
        b.x += b.speed * std::cos(b.heading) * tau;
        b.y += b.speed * std::sin(b.heading) * tau;
        emergency = footprint_distance(a, obs.self_geom, b, obs.other_geoms[i]) <
                    emergency_margin;
      }
    }
    if (emergency) accel = -limits.a_max;

    const double lookahead = std::max(4.0, obs.self.speed);
    Vec2 target;
    double target_heading = 0.0;
    detail::polyline_at(path, me.arc + lookahead, &target, &target_heading);
    const double steer = synth_detail::pure_pursuit_steer(
        obs.self, target, obs.self_geom.wheelbase, lookahead);
    return clamp_action({accel, steer}, limits);
  }

 private:
  bool warned_ = false;
};

// Replays a recorded state sequence by inverting the bicycle model each
// step; emits zero actions once the log is exhausted.
class ReplayPlanner : public Planner {
 public:
  explicit ReplayPlanner(std::vector<AgentState> targets)
      : targets_(std::move(targets)) {}

  void reset() override { step_ = 0; }
  std::string name() const override { return "replay"; }

  Action act(const PlannerObservation& obs) override {
    if (step_ >= targets_.size()) return {0.0, 0.0};
    const AgentState& to = targets_[step_++];
    const double dt = obs.dt;
    const double a = (to.speed - obs.self.speed) / dt;
    double steer = 0.0;
    const double vdt = obs.self.speed * dt;
    if (vdt > 1e-9) {
      const double dth = wrap_angle(to.heading - obs.self.heading);
      steer = std::atan(dth * obs.self_geom.wheelbase / vdt);
    }
    return {a, steer};
  }

 private:
  std::vector<AgentState> targets_;
  size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

enum class GenMode { kReplay, kDiffusion, kGuided };

inline std::string gen_mode_name(GenMode m) {
  switch (m) {
    case GenMode::kReplay: return "replay";
    case GenMode::kDiffusion: return "diffusion";
    case GenMode::kGuided: return "guided";
  }
  return "?";
}

struct EpisodeConfig {
  int horizon = kFutureSteps;
  int replan_period = 4;
  double planner_budget_ms = 50.0;
  // When set, BV plans are replayed to their full length before replanning.
  bool full_horizon_playback = false;
};

struct CollisionEvent {
  int a = 0, b = 0;       // agent ids, a < b by array index
  int step = 0;           // 1-based step at which contact first occurs
  double rel_speed = 0.0;
  std::string kind;       // "av_bv" | "bv_bv"
};

struct EpisodeLog {
  int scene_id = 0;
  int window_id = 0;
  double dt = 0.5;
  std::string mode;
  std::string planner;
  std::string termination;  // "horizon" | "av_collision" | "planner_timeout"
  bool av_collision = false;
  bool planner_warning = false;
  double reward_sum = 0.0;
  std::vector<int> agent_ids;
  std::vector<bool> is_av;
  std::vector<VehicleGeometry> geoms;
  std::vector<std::vector<AgentState>> states;  // [step][agent], step 0 initial
  std::vector<CollisionEvent> events;
  std::vector<int> offroad_agents;  // ids ever offroad during the episode, sorted
};

struct EpisodeHooks {
  // After each replan: planning step index, features, encoded context, and
  // the latent the BVs will execute.
  std::function<void(int, const WindowFeatures&, const ContextSnapshot&,
                     const std::vector<double>&)>
      on_replan;
  // After each simulation step: step index (1-based), states, reward terms.
  std::function<void(int, const std::vector<AgentState>&, const RewardTerms&)>
      on_step;
};

// Runs one closed-loop episode from a window's past. The window must contain
// exactly one AV. In replay mode the window's future drives the BVs (and
// must be present); otherwise `model` samples BV futures every
// replan_period steps, optionally steered by `guide` in guided mode.
inline EpisodeLog run_episode(const ScenarioWindow& w, Planner& planner,
                              const DiffusionModel* model, GenMode mode,
                              GuideHook* guide, const EpisodeConfig& ec,
                              Rng& rng, const EpisodeHooks* hooks = nullptr) {
  if (w.av_count() != 1)
    throw ValidationError("run_episode: window must contain exactly one AV");
  if (ec.horizon < 1 || ec.replan_period < 1)
    throw ValidationError("run_episode: bad horizon or replan period");
  if (mode != GenMode::kReplay && !model)
    throw ValidationError("run_episode: generation mode needs a model");
  if (mode == GenMode::kGuided && !guide)
    throw ValidationError("run_episode: guided mode needs a guide hook");
  const int n = static_cast<int>(w.agents.size());
  int av = 0;
  for (int i = 0; i < n; ++i)
    if (w.agents[static_cast<size_t>(i)].is_av) av = i;

  EpisodeLog log;
  log.scene_id = w.scene_id;
  log.window_id = w.window_id;
  log.dt = w.dt;
  log.mode = gen_mode_name(mode);
  log.planner = planner.name();
  for (const auto& a : w.agents) {
    log.agent_ids.push_back(a.id);
    log.is_av.push_back(a.is_av);
    log.geoms.push_back(a.geom);
  }

  // Rolling history per agent; last entry is the current state.
  std::vector<std::vector<AgentState>> hist(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    hist[static_cast<size_t>(i)] = w.agents[static_cast<size_t>(i)].past;
  auto current = [&](int i) { return hist[static_cast<size_t>(i)].back(); };

  std::vector<AgentState> cur(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) cur[static_cast<size_t>(i)] = current(i);
  log.states.push_back(cur);

  std::vector<bool> is_av_flags(log.is_av.begin(), log.is_av.end());

  // BV plan: [agent][offset] states to follow after the latest replan.
  std::vector<std::vector<AgentState>> plan(static_cast<size_t>(n));
  if (mode == GenMode::kReplay) {
    for (int i = 0; i < n; ++i) {
      if (w.agents[static_cast<size_t>(i)].future.empty())
        throw ValidationError("run_episode: replay mode needs logged futures");
      plan[static_cast<size_t>(i)] = w.agents[static_cast<size_t>(i)].future;
    }
  }

  planner.reset();
  std::vector<std::vector<bool>> touching(
      static_cast<size_t>(n), std::vector<bool>(static_cast<size_t>(n), false));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      touching[static_cast<size_t>(i)][static_cast<size_t>(j)] =
          footprint_distance(cur[static_cast<size_t>(i)], log.geoms[static_cast<size_t>(i)],
                             cur[static_cast<size_t>(j)], log.geoms[static_cast<size_t>(j)]) <= 0.0;

  int plan_offset = 0;
  std::vector<bool> offroad_seen(static_cast<size_t>(n), false);
  log.termination = "horizon";
  for (int step = 0; step < ec.horizon; ++step) {
    // Replan BV futures.
    const bool need_replan =
        mode != GenMode::kReplay &&
        (step == 0 || plan_offset >= kFutureSteps ||
         (!ec.full_horizon_playback && step % ec.replan_period == 0));
    if (need_replan) {
      ScenarioWindow rw;
      rw.dt = w.dt;
      rw.map = w.map;
      rw.scene_id = w.scene_id;
      rw.window_id = w.window_id;
      for (int i = 0; i < n; ++i) {
        const auto& h = hist[static_cast<size_t>(i)];
        WindowAgent a;
        a.id = w.agents[static_cast<size_t>(i)].id;
        a.geom = w.agents[static_cast<size_t>(i)].geom;
        a.is_av = w.agents[static_cast<size_t>(i)].is_av;
        a.past.assign(h.end() - kPastSteps, h.end());
        rw.agents.push_back(std::move(a));
      }
      const WindowFeatures feats = build_features(rw);
      const DiffusionModel::SampleResult sample = model->sample_rollout(
          feats, rng, mode == GenMode::kGuided ? guide : nullptr);
      for (int i = 0; i < n; ++i) plan[static_cast<size_t>(i)] = sample.traj[static_cast<size_t>(i)];
      plan_offset = 0;
      if (hooks && hooks->on_replan)
        hooks->on_replan(step, feats, model->snapshot(feats), sample.z0);
    }

    // AV action under the compute budget.
    PlannerObservation obs;
    obs.self = cur[static_cast<size_t>(av)];
    obs.self_geom = log.geoms[static_cast<size_t>(av)];
    obs.map = w.map;
    obs.dt = w.dt;
    for (int i = 0; i < n; ++i) {
      if (i == av) continue;
      obs.others.push_back(cur[static_cast<size_t>(i)]);
      obs.other_geoms.push_back(log.geoms[static_cast<size_t>(i)]);
    }
    Stopwatch sw;
    const Action av_action = clamp_action(planner.act(obs), ActionLimits{});
    if (sw.ms() > ec.planner_budget_ms) {
      log.termination = "planner_timeout";
      break;
    }

    // Advance.
    std::vector<AgentState> next(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (i == av) {
        next[static_cast<size_t>(i)] =
            bicycle_step(cur[static_cast<size_t>(i)], av_action,
                         log.geoms[static_cast<size_t>(i)], w.dt);
      } else {
        const auto& p = plan[static_cast<size_t>(i)];
        if (plan_offset >= static_cast<int>(p.size()))
          throw ValidationError("run_episode: BV plan exhausted");
        next[static_cast<size_t>(i)] = p[static_cast<size_t>(plan_offset)];
      }
    }
    ++plan_offset;

    // Events: first-contact collisions this step.
    bool av_hit = false;
    for (int i = 0; i < n; ++i) {
      for (int j = i + 1; j < n; ++j) {
        const bool now =
            footprint_distance(next[static_cast<size_t>(i)], log.geoms[static_cast<size_t>(i)],
                               next[static_cast<size_t>(j)], log.geoms[static_cast<size_t>(j)]) <= 0.0;
        const bool before = touching[static_cast<size_t>(i)][static_cast<size_t>(j)];
        touching[static_cast<size_t>(i)][static_cast<size_t>(j)] = now;
        if (!now || before) continue;
        CollisionEvent ev;
        ev.a = log.agent_ids[static_cast<size_t>(i)];
        ev.b = log.agent_ids[static_cast<size_t>(j)];
        ev.step = step + 1;
        ev.rel_speed = relative_speed(next[static_cast<size_t>(i)], next[static_cast<size_t>(j)]);
        const int avs = (log.is_av[static_cast<size_t>(i)] ? 1 : 0) +
                        (log.is_av[static_cast<size_t>(j)] ? 1 : 0);
        ev.kind = avs == 1 ? "av_bv" : "bv_bv";
        if (avs == 1) av_hit = true;
        log.events.push_back(ev);
      }
    }

    const RewardTerms r = step_reward(cur, next, log.geoms, is_av_flags, w.map);
    log.reward_sum += r.total();

    if (w.map) {
      for (int i = 0; i < n; ++i) {
        if (offroad_seen[static_cast<size_t>(i)]) continue;
        if (offroad_depth(next[static_cast<size_t>(i)], log.geoms[static_cast<size_t>(i)], *w.map) > 0.0)
          offroad_seen[static_cast<size_t>(i)] = true;
      }
    }

    for (int i = 0; i < n; ++i) {
      hist[static_cast<size_t>(i)].push_back(next[static_cast<size_t>(i)]);
      cur[static_cast<size_t>(i)] = next[static_cast<size_t>(i)];
    }
    log.states.push_back(cur);
    if (hooks && hooks->on_step) hooks->on_step(step + 1, cur, r);

    if (av_hit) {
      log.av_collision = true;
      log.termination = "av_collision";
      break;
    }
  }
  log.planner_warning = planner.warning();
  for (int i = 0; i < n; ++i)
    if (offroad_seen[static_cast<size_t>(i)])
      log.offroad_agents.push_back(log.agent_ids[static_cast<size_t>(i)]);
  std::sort(log.offroad_agents.begin(), log.offroad_agents.end());
  return log;
}

// ---------------------------------------------------------------------------
// Episode log serialization
// ---------------------------------------------------------------------------

inline nlohmann::json episode_to_json(const EpisodeLog& log) {
  nlohmann::json agents = nlohmann::json::array();
  for (size_t i = 0; i < log.agent_ids.size(); ++i) {
    agents.push_back({{"id", log.agent_ids[i]},
                      {"is_av", static_cast<bool>(log.is_av[i])},
                      {"length", log.geoms[i].length},
                      {"width", log.geoms[i].width},
                      {"wheelbase", log.geoms[i].wheelbase}});
  }
  nlohmann::json states = nlohmann::json::array();
  for (const auto& row : log.states) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& s : row) r.push_back({s.x, s.y, s.heading, s.speed});
    states.push_back(std::move(r));
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : log.events)
    events.push_back({{"a", e.a}, {"b", e.b}, {"step", e.step},
                      {"rel_speed", e.rel_speed}, {"kind", e.kind}});
  return {{"version", 1},
          {"scene_id", log.scene_id},
          {"window_id", log.window_id},
          {"dt", log.dt},
          {"mode", log.mode},
          {"planner", log.planner},
          {"termination", log.termination},
          {"av_collision", log.av_collision},
          {"planner_warning", log.planner_warning},
          {"reward_sum", log.reward_sum},
          {"agents", agents},
          {"states", states},
          {"events", events},
          {"offroad_agents", log.offroad_agents}};
}

inline EpisodeLog episode_from_json(const nlohmann::json& j) {
  auto require = [&j](const char* key) -> const nlohmann::json& {
    if (!j.contains(key))
      throw ValidationError(std::string("episode log: missing field '") + key + "'");
    return j.at(key);
  };
  EpisodeLog log;
  if (require("version").get<int>() != 1)
    throw ValidationError("episode log: unsupported version");
  log.scene_id = require("scene_id").get<int>();
  log.window_id = require("window_id").get<int>();
  log.dt = require("dt").get<double>();
  log.mode = require("mode").get<std::string>();
  log.planner = require("planner").get<std::string>();
  log.termination = require("termination").get<std::string>();
  log.av_collision = require("av_collision").get<bool>();
  log.planner_warning = require("planner_warning").get<bool>();
  log.reward_sum = require("reward_sum").get<double>();
  for (const auto& a : require("agents")) {
    log.agent_ids.push_back(a.at("id").get<int>());
    log.is_av.push_back(a.at("is_av").get<bool>());
    log.geoms.push_back({a.at("length").get<double>(), a.at("width").get<double>(),
                         a.at("wheelbase").get<double>()});
  }
  for (const auto& row : require("states")) {
    if (row.size() != log.agent_ids.size())
      throw ValidationError("episode log: ragged state row");
    std::vector<AgentState> r;
    for (const auto& s : row) {
      if (!s.is_array() || s.size() != 4)
        throw ValidationError("episode log: state must be [x, y, heading, speed]");
      r.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>(),
                   s[3].get<double>()});
    }
    log.states.push_back(std::move(r));
  }
  for (const auto& e : require("events")) {
    log.events.push_back({e.at("a").get<int>(), e.at("b").get<int>(),
                          e.at("step").get<int>(), e.at("rel_speed").get<double>(),
                          e.at("kind").get<std::string>()});
  }
  for (const auto& a : require("offroad_agents")) log.offroad_agents.push_back(a.get<int>());
  return log;
}

inline void save_episode(const std::string& path, const EpisodeLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("save_episode: cannot open " + path);
  out << episode_to_json(log).dump(1) << "\n";
}

inline EpisodeLog load_episode(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("load_episode: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_episode: " + path + ": " + e.what());
  }
  return episode_from_json(j);
}

// Per-step trajectory table, one row per (step, agent).
inline void save_episode_csv(const std::string& path, const EpisodeLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("save_episode_csv: cannot open " + path);
  out << "step,agent_id,is_av,x,y,heading,speed\n";
  for (size_t t = 0; t < log.states.size(); ++t) {
    for (size_t i = 0; i < log.states[t].size(); ++i) {
      const AgentState& s = log.states[t][i];
      out << t << "," << log.agent_ids[i] << "," << (log.is_av[i] ? 1 : 0) << ","
          << fmt_g(s.x) << "," << fmt_g(s.y) << "," << fmt_g(s.heading) << ","
          << fmt_g(s.speed) << "\n";
    }
  }
}

}  // namespace scengen
