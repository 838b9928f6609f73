#pragma once

#include <memory>

#include "scengen/simulator.hpp"

// Learned adversarial reward guide. A Q network scores executed latent
// "actions" against encoded scene contexts; its gradient with respect to the
// latents steers the reverse diffusion toward AV-critical futures. Trained
// with one-step TD on replayed logs first, then adapted online during
// guided warm-up episodes.

namespace scengen {

class QNetwork {
 public:
  int dh = 0, dz = 0, hidden = 0;
  ad::ParameterStore params;

  QNetwork(int dh_, int dz_, int hidden_)
      : dh(dh_),
        dz(dz_),
        hidden(hidden_),
        state_mlp_(params, "q.state", {dh_ + dz_ + 1, hidden_, hidden_}),
        inter_(params, "q.inter", hidden_, kEdgeFeat),
        value_mlp_(params, "q.value", {hidden_ + dz_, hidden_, 1}, true) {}

  void init(Rng& rng) { params.init_values(rng); }

  void copy_values_from(const QNetwork& other) {
    const auto& src = other.params.all();
    const auto& dst = params.all();
    if (src.size() != dst.size())
      throw ValidationError("QNetwork: parameter layout mismatch");
    for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
  }

  // Per-agent interaction-aware state encoding [n x hidden].
  ad::Tensor encode_state(ad::Tape& t, const ContextSnapshot& ctx) const {
    std::vector<double> in(static_cast<size_t>(ctx.n) * (dh + dz + 1));
    for (int i = 0; i < ctx.n; ++i) {
      double* row = in.data() + static_cast<size_t>(i) * (dh + dz + 1);
      std::copy_n(ctx.h.data() + static_cast<size_t>(i) * dh, dh, row);
      std::copy_n(ctx.z.data() + static_cast<size_t>(i) * dz, dz, row + dh);
      row[dh + dz] = ctx.roles[static_cast<size_t>(i)];
    }
    ad::Tensor x = t.constant(ctx.n, dh + dz + 1, in);
    ad::Tensor aux;
    if (ctx.n > 1)
      aux = t.constant(static_cast<int>(ctx.src.size()), kEdgeFeat, ctx.edge_aux);
    return inter_(t, ad::silu_t(state_mlp_(t, x)), {}, aux);
  }

  // Q(s, mu) = sum over BVs of the per-agent value head. `mu` is [n x dz].
  ad::Tensor q_tape(ad::Tape& t, const ContextSnapshot& ctx,
                    const ad::Tensor& mu) const {
    return q_from_encoding(t, encode_state(t, ctx), ctx, mu);
  }

  ad::Tensor q_from_encoding(ad::Tape& t, const ad::Tensor& se,
                             const ContextSnapshot& ctx, const ad::Tensor& mu) const {
    if (mu.rows() != ctx.n || mu.cols() != dz)
      throw ValidationError("QNetwork: action latent shape mismatch");
    ad::Tensor per_agent = value_mlp_(t, ad::concat_cols(se, mu));
    return ad::weighted_sum(per_agent, ctx.bv_mask);
  }

  double j_value(const ContextSnapshot& ctx, const std::vector<double>& mu) const {
    ad::Tape t;
    ad::Tensor m = t.constant(ctx.n, dz, mu);
    return q_tape(t, ctx, m).val()[0];
  }

 private:
  nn::Mlp state_mlp_;
  nn::InteractionNet inter_;
  nn::Mlp value_mlp_;
};

// Guidance hook backed by a Q network. prepare() caches the state encoding;
// guidance() differentiates Q with respect to the latents only. No
// randomness is consumed anywhere on this path.
class RewardGuide : public GuideHook {
 public:
  RewardGuide(const QNetwork& q, double scale) : q_(&q), scale_(scale) {}

  void prepare(const ContextSnapshot& ctx) override {
    ctx_ = ctx;
    ad::Tape t;
    se_vals_ = q_->encode_state(t, ctx).val();
  }

  void guidance(const std::vector<double>& mu,
                std::vector<double>& g_out) const override {
    if (ctx_.n == 0)
      throw ValidationError("RewardGuide: guidance before prepare");
    ad::Tape t;
    ad::Tensor mu_t = t.constant(ctx_.n, q_->dz, mu);
    ad::Tensor se = t.constant(ctx_.n, q_->hidden, se_vals_);
    ad::Tensor j = q_->q_from_encoding(t, se, ctx_, mu_t);
    t.backward(j);
    g_out = t.grad_of(mu_t);
  }

  double scale() const override { return scale_; }

 private:
  const QNetwork* q_;
  double scale_;
  ContextSnapshot ctx_;
  std::vector<double> se_vals_;
};

// ---------------------------------------------------------------------------
// Experience replay
// ---------------------------------------------------------------------------

struct Experience {
  ContextSnapshot s;
  std::vector<double> a;  // executed latents, n x dz
  double r = 0.0;         // reward accumulated over the control chunk
  ContextSnapshot s_next;
  std::vector<double> next_center;  // latents executed at s_next
  bool done = false;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity = 10000) : capacity_(capacity) {
    if (capacity_ == 0) throw ValidationError("ReplayBuffer: zero capacity");
  }

  void push(Experience e) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(e));
    } else {
      items_[head_] = std::move(e);
      head_ = (head_ + 1) % capacity_;
    }
  }

  size_t size() const { return items_.size(); }
  const Experience& at(size_t i) const { return items_[i]; }

  // Uniform sample of k indices, with replacement.
  std::vector<size_t> sample(Rng& rng, size_t k) const {
    if (items_.empty()) throw ValidationError("ReplayBuffer: sampling empty buffer");
    std::vector<size_t> idx(k);
    for (auto& i : idx)
      i = static_cast<size_t>(rng.uniform_int(static_cast<int>(items_.size())));
    return idx;
  }

 private:
  size_t capacity_;
  size_t head_ = 0;
  std::vector<Experience> items_;
};

// ---------------------------------------------------------------------------
// TD learning
// ---------------------------------------------------------------------------

struct QLearnConfig {
  double lr = 1e-3;
  double gamma = 0.9;
  int batch = 32;
  int candidates = 16;      // next-action argmax candidates
  double cand_sigma = 0.1;  // perturbation around the stored next center
  int target_sync = 100;    // updates between target refreshes
  int pretrain_epochs = 20;
  int updates_per_episode = 4;
};

// One-step TD target: r, plus the discounted best next-action value over
// the stored center and `candidates - 1` Gaussian perturbations of it.
inline double td_target(const QNetwork& target, const Experience& e,
                        const QLearnConfig& cfg, Rng& rng) {
  if (e.done) return e.r;
  double best = -std::numeric_limits<double>::infinity();
  std::vector<double> cand(e.next_center.size());
  for (int c = 0; c < cfg.candidates; ++c) {
    for (size_t i = 0; i < cand.size(); ++i)
      cand[i] = c == 0 ? e.next_center[i]
                       : e.next_center[i] + cfg.cand_sigma * rng.normal();
    best = std::max(best, target.j_value(e.s_next, cand));
  }
  return e.r + cfg.gamma * best;
}

// Online Q with a lagged target copy and an Adam state bound to the online
// parameters.
class QLearner {
 public:
  QNetwork online;
  QNetwork target;
  QLearnConfig cfg;

  QLearner(int dh, int dz, int hidden, const QLearnConfig& c, Rng& rng)
      : online(dh, dz, hidden), target(dh, dz, hidden), cfg(c) {
    online.init(rng);
    target.copy_values_from(online);
    opt_ = nn::Adam::over(online.params, cfg.lr);
  }

  int updates() const { return updates_; }

  // One minibatch TD update; returns the batch MSE loss.
  double update(const ReplayBuffer& buffer, Rng& rng) {
    if (buffer.size() < 2)
      throw ValidationError("QLearner: need at least 2 experiences");
    const size_t bn = std::min<size_t>(static_cast<size_t>(cfg.batch), buffer.size());
    const std::vector<size_t> idx = buffer.sample(rng, bn);
    tape_.clear();
    opt_.zero_grads();
    ad::Tensor acc = tape_.alloc(1, 1);
    for (size_t i : idx) {
      const Experience& e = buffer.at(i);
      const double y = td_target(target, e, cfg, rng);
      ad::Tensor mu = tape_.constant(e.s.n, online.dz, e.a);
      ad::Tensor q = online.q_tape(tape_, e.s, mu);
      ad::Tensor d = ad::add_scalar(q, -y);
      acc = ad::add(acc, ad::square_t(d));
    }
    ad::Tensor loss = ad::scale(acc, 1.0 / static_cast<double>(bn));
    const double lv = loss.val()[0];
    if (!std::isfinite(lv)) throw DivergenceError("QLearner: TD loss diverged");
    tape_.backward(loss);
    opt_.step();
    ++updates_;
    if (updates_ % cfg.target_sync == 0) target.copy_values_from(online);
    return lv;
  }

 private:
  nn::Adam opt_;
  ad::Tape tape_;
  int updates_ = 0;
};

// ---------------------------------------------------------------------------
// Experience collection
// ---------------------------------------------------------------------------

// Assembles chunk experiences from episode hooks: one experience per replan
// segment, rewarded with the sum of step rewards inside the segment. The
// final segment of an episode is terminal.
class ExperienceCollector {
 public:
  explicit ExperienceCollector(ReplayBuffer& buffer) : buffer_(&buffer) {}

  EpisodeHooks hooks() {
    EpisodeHooks h;
    h.on_replan = [this](int, const WindowFeatures&, const ContextSnapshot& snap,
                         const std::vector<double>& z0) {
      if (open_) {
        pending_.s_next = snap;
        pending_.next_center = z0;
        pending_.done = false;
        buffer_->push(pending_);
      }
      pending_ = Experience{};
      pending_.s = snap;
      pending_.a = z0;
      open_ = true;
    };
    h.on_step = [this](int, const std::vector<AgentState>&, const RewardTerms& r) {
      if (open_) pending_.r += r.total();
    };
    return h;
  }

  // Call after run_episode returns to close the trailing segment.
  void finish() {
    if (!open_) return;
    pending_.s_next = pending_.s;
    pending_.next_center = pending_.a;
    pending_.done = true;
    buffer_->push(pending_);
    open_ = false;
    pending_ = Experience{};
  }

 private:
  ReplayBuffer* buffer_;
  Experience pending_;
  bool open_ = false;
};

// ---------------------------------------------------------------------------
// Pretraining on logs
// ---------------------------------------------------------------------------

struct PretrainRow {
  int epoch = 0;
  double loss = 0.0;
};

// Builds experiences from logged windows without touching the planner: a
// random agent plays the AV role and replays its log, the BVs follow prior
// latents (z ~ N(0, I)) decoded against the current context, and each
// replan chunk becomes one experience. Then runs TD epochs over the buffer.
inline std::vector<PretrainRow> pretrain_on_logs(
    QLearner& learner, const DiffusionModel& model,
    const std::vector<ScenarioWindow>& windows, ReplayBuffer& buffer,
    uint64_t seed) {
  if (windows.empty()) throw ValidationError("pretrain_on_logs: no windows");
  Rng collect_rng(seed, "qpre/collect");

  for (size_t wi = 0; wi < windows.size(); ++wi) {
    const ScenarioWindow& base = windows[wi];
    if (base.agents.front().future.empty())
      throw ValidationError("pretrain_on_logs: windows need logged futures");
    const int n = static_cast<int>(base.agents.size());
    const int av = collect_rng.uniform_int(n);

    std::vector<std::vector<AgentState>> hist(static_cast<size_t>(n));
    std::vector<VehicleGeometry> geoms;
    std::vector<bool> is_av(static_cast<size_t>(n), false);
    is_av[static_cast<size_t>(av)] = true;
    for (int i = 0; i < n; ++i) {
      hist[static_cast<size_t>(i)] = base.agents[static_cast<size_t>(i)].past;
      geoms.push_back(base.agents[static_cast<size_t>(i)].geom);
    }
    std::vector<AgentState> cur(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) cur[static_cast<size_t>(i)] = hist[static_cast<size_t>(i)].back();

    Experience pending;
    bool open = false;
    std::vector<std::vector<AgentState>> plan(static_cast<size_t>(n));
    int plan_offset = 0;
    bool ended_early = false;

    for (int step = 0; step < kFutureSteps && !ended_early; ++step) {
      if (step % 4 == 0) {
        ScenarioWindow rw;
        rw.dt = base.dt;
        rw.map = base.map;
        rw.scene_id = base.scene_id;
        rw.window_id = base.window_id;
        for (int i = 0; i < n; ++i) {
          WindowAgent a;
          a.id = base.agents[static_cast<size_t>(i)].id;
          a.geom = geoms[static_cast<size_t>(i)];
          a.is_av = (i == av);
          const auto& h = hist[static_cast<size_t>(i)];
          a.past.assign(h.end() - kPastSteps, h.end());
          rw.agents.push_back(std::move(a));
        }
        const WindowFeatures feats = build_features(rw);
        const ContextSnapshot snap = model.snapshot(feats);
        std::vector<double> z(static_cast<size_t>(n) * model.cfg.dz);
        collect_rng.fill_normal(z);
        const auto sample = model.decode_given(feats, snap.h, z);
        for (int i = 0; i < n; ++i) plan[static_cast<size_t>(i)] = sample.traj[static_cast<size_t>(i)];
        plan_offset = 0;
        if (open) {
          pending.s_next = snap;
          pending.next_center = z;
          pending.done = false;
          buffer.push(pending);
        }
        pending = Experience{};
        pending.s = snap;
        pending.a = z;
        open = true;
      }

      std::vector<AgentState> next(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        next[static_cast<size_t>(i)] =
            i == av ? base.agents[static_cast<size_t>(i)].future[static_cast<size_t>(step)]
                    : plan[static_cast<size_t>(i)][static_cast<size_t>(plan_offset)];
      }
      ++plan_offset;

      const RewardTerms r = step_reward(cur, next, geoms, is_av, base.map);
      pending.r += r.total();

      for (int i = 0; i < n; ++i) {
        hist[static_cast<size_t>(i)].push_back(next[static_cast<size_t>(i)]);
        cur[static_cast<size_t>(i)] = next[static_cast<size_t>(i)];
      }
      // AV collision ends the episode, matching the closed-loop runner.
      for (int i = 0; i < n && !ended_early; ++i)
        if (i != av &&
            footprint_distance(cur[static_cast<size_t>(av)], geoms[static_cast<size_t>(av)],
                               cur[static_cast<size_t>(i)], geoms[static_cast<size_t>(i)]) <= 0.0)
          ended_early = true;
    }
    if (open) {
      pending.s_next = pending.s;
      pending.next_center = pending.a;
      pending.done = true;
      buffer.push(pending);
    }
  }

  std::vector<PretrainRow> rows;
  Rng update_rng(seed, "qpre/update");
  const int per_epoch =
      std::max<int>(1, static_cast<int>(buffer.size()) / learner.cfg.batch);
  for (int epoch = 1; epoch <= learner.cfg.pretrain_epochs; ++epoch) {
    double sum = 0.0;
    for (int u = 0; u < per_epoch; ++u) sum += learner.update(buffer, update_rng);
    rows.push_back({epoch, sum / per_epoch});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Online warm-up
// ---------------------------------------------------------------------------

struct WarmupRow {
  int episode = 0;
  int steps = 0;
  bool av_collision = false;
  double reward_sum = 0.0;
  double loss = 0.0;
};

// Builds the AV planner for one episode window. Replay planners are bound
// to a specific logged future, so construction is per-window.
using PlannerFactory = std::function<std::unique_ptr<Planner>(const ScenarioWindow&)>;

inline PlannerFactory rule_based_factory() {
  return [](const ScenarioWindow&) { return std::make_unique<RuleBasedPlanner>(); };
}

inline PlannerFactory replay_factory() {
  return [](const ScenarioWindow& w) -> std::unique_ptr<Planner> {
    for (const auto& a : w.agents)
      if (a.is_av) {
        if (a.future.empty())
          throw ValidationError("replay planner: window lacks an AV future");
        return std::make_unique<ReplayPlanner>(a.future);
      }
    throw ValidationError("replay planner: window has no AV");
  };
}

// Runs guided episodes against the planner, feeding chunk experiences into
// the buffer and applying a few TD updates after each episode. The diffusion
// model is never modified here.
inline std::vector<WarmupRow> warmup_adapt(
    const DiffusionModel& model, QLearner& learner, ReplayBuffer& buffer,
    const std::vector<ScenarioWindow>& windows, const PlannerFactory& make_planner,
    double guide_scale, int episodes, uint64_t seed,
    const EpisodeConfig& ec = {}) {
  if (windows.empty()) throw ValidationError("warmup_adapt: no windows");
  std::vector<WarmupRow> rows;
  Rng update_rng(seed, "warmup/update");
  for (int ep = 0; ep < episodes; ++ep) {
    const ScenarioWindow& w = windows[static_cast<size_t>(ep) % windows.size()];
    RewardGuide guide(learner.online, guide_scale);
    ExperienceCollector collector(buffer);
    EpisodeHooks hooks = collector.hooks();
    Rng ep_rng(seed, "warmup/episode", static_cast<uint64_t>(ep));
    std::unique_ptr<Planner> planner = make_planner(w);
    const EpisodeLog log = run_episode(w, *planner, &model, GenMode::kGuided,
                                       &guide, ec, ep_rng, &hooks);
    collector.finish();
    WarmupRow row;
    row.episode = ep + 1;
    row.steps = static_cast<int>(log.states.size()) - 1;
    row.av_collision = log.av_collision;
    row.reward_sum = log.reward_sum;
    double loss_sum = 0.0;
    for (int u = 0; u < learner.cfg.updates_per_episode; ++u)
      loss_sum += learner.update(buffer, update_rng);
    row.loss = loss_sum / learner.cfg.updates_per_episode;
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json qnet_meta(const QNetwork& q) {
  return {{"model", "qnet"}, {"dh", q.dh}, {"dz", q.dz}, {"hidden", q.hidden}};
}

}  // namespace scengen
