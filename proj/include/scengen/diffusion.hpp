#pragma once

#include "scengen/geometry_ops.hpp"
#include "scengen/nn.hpp"
#include "scengen/scenario.hpp"

// Latent diffusion over per-agent future latents. An interaction-aware
// encoder maps past + map context to a scene encoding h and a conditional
// prior latent z. A denoiser predicts the forward noise on latents, and a
// GRU decoder rolls latents out to kinematically feasible trajectories
// through the bicycle model. Sampling runs the reverse chain on the latents
// and can be steered by an external guidance hook.

namespace scengen {

struct ModelConfig {
  int dz = 16;
  int dh = 64;
  int hidden = 64;
  int K = 20;
  double beta_start = 1e-4;
  // Chosen so alpha_bar(K) ~ 0.02 at K = 20: the reverse chain then really
  // starts from (near) unit noise, matching the N(0, I) sampling entry point.
  double beta_end = 0.35;
  // Plain ELBO weight. Lower values let the joint stage trade KL for noise
  // loss by encoding the future deterministically, which wrecks prior-chain
  // sampling on held-out contexts.
  double beta_kl = 1.0;
  double collision_margin = 0.5;
  ActionLimits limits;
  bool sample_z_prior = false;  // inference: sample the prior instead of its mean
};

// Forward-process schedule. beta(k) and alpha_bar(k) are 1-indexed;
// alpha_bar(0) = 1 so the final reverse step is deterministic.
struct NoiseSchedule {
  int K = 0;
  std::vector<double> beta;       // beta[k-1]
  std::vector<double> alpha_bar;  // alpha_bar[k-1]

  double beta_at(int k) const { return beta[static_cast<size_t>(k - 1)]; }
  double alpha_bar_at(int k) const {
    return k == 0 ? 1.0 : alpha_bar[static_cast<size_t>(k - 1)];
  }
  // Reverse-step variance for the k -> k-1 transition.
  double sigma2(int k) const {
    return (1.0 - alpha_bar_at(k - 1)) / (1.0 - alpha_bar_at(k)) * beta_at(k);
  }
};

inline NoiseSchedule make_schedule(int K, double beta_start, double beta_end) {
  if (K < 1) throw ValidationError("make_schedule: K must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.K = K;
  s.beta.resize(static_cast<size_t>(K));
  s.alpha_bar.resize(static_cast<size_t>(K));
  double prod = 1.0;
  for (int k = 1; k <= K; ++k) {
    const double b =
        K > 1 ? beta_start + (beta_end - beta_start) * (k - 1) / (K - 1)
              : beta_start;
    s.beta[static_cast<size_t>(k - 1)] = b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(k - 1)] = prod;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Feature extraction. All per-agent features are expressed in the agent's
// anchor frame (its last observed state), so the networks see only relative
// geometry; inter-agent geometry enters through per-edge features.
// ---------------------------------------------------------------------------

inline constexpr int kStateFeat = 5;   // (0.1x, 0.1y, cos, sin, 0.1v)
inline constexpr int kEdgeFeat = 6;
inline constexpr int kAgentFeat =
    kPastSteps * kStateFeat + 3 +
    LocalMapView::kLanes * (LocalMapView::kPoints * LocalMapView::kFeat + 1);

struct WindowFeatures {
  int n = 0;
  double dt = 0.5;
  const LaneGraph* map = nullptr;
  std::vector<double> agent_in;   // n x kAgentFeat
  std::vector<double> future_in;  // n x (kFutureSteps * kStateFeat); may be empty
  std::vector<int> src, dst;      // complete digraph edge lists
  std::vector<double> edge_aux;   // E x kEdgeFeat at the anchor states
  std::vector<double> roles;      // 1 for the AV
  std::vector<double> bv_mask;    // 1 for background vehicles
  std::vector<AgentState> anchors;
  std::vector<VehicleGeometry> geoms;
  std::vector<int> agent_ids;
  // Ground-truth future in world coordinates, [step][agent], empty at inference.
  std::vector<std::vector<AgentState>> gt_future;
};

namespace feat_detail {

inline void local_state(const AgentState& anchor, const AgentState& s,
                        double* out) {
  const double ch = std::cos(anchor.heading), sh = std::sin(anchor.heading);
  const double dx = s.x - anchor.x, dy = s.y - anchor.y;
  out[0] = 0.1 * (ch * dx + sh * dy);
  out[1] = 0.1 * (-sh * dx + ch * dy);
  out[2] = std::cos(s.heading - anchor.heading);
  out[3] = std::sin(s.heading - anchor.heading);
  out[4] = 0.1 * s.speed;
}

inline void edge_features(const AgentState& src_s, const AgentState& dst_s,
                          double* out) {
  const double ch = std::cos(dst_s.heading), sh = std::sin(dst_s.heading);
  const double dx = src_s.x - dst_s.x, dy = src_s.y - dst_s.y;
  out[0] = 0.1 * (ch * dx + sh * dy);
  out[1] = 0.1 * (-sh * dx + ch * dy);
  out[2] = std::cos(src_s.heading - dst_s.heading);
  out[3] = std::sin(src_s.heading - dst_s.heading);
  out[4] = 0.1 * (src_s.speed - dst_s.speed);
  out[5] = 0.1 * std::sqrt(dx * dx + dy * dy + 1e-6);
}

}  // namespace feat_detail

inline WindowFeatures build_features(const ScenarioWindow& w) {
  if (w.agents.size() < 1)
    throw ValidationError("build_features: window has no agents");
  for (const auto& a : w.agents) {
    if (a.past.size() != static_cast<size_t>(kPastSteps))
      throw ValidationError("build_features: agent " + std::to_string(a.id) +
                            " lacks a full past");
    if (!a.future.empty() && a.future.size() != static_cast<size_t>(kFutureSteps))
      throw ValidationError("build_features: agent " + std::to_string(a.id) +
                            " has a partial future");
  }
  WindowFeatures f;
  f.n = static_cast<int>(w.agents.size());
  f.dt = w.dt;
  f.map = w.map;
  f.agent_in.assign(static_cast<size_t>(f.n) * kAgentFeat, 0.0);
  const bool with_future = !w.agents.front().future.empty();
  for (const auto& a : w.agents)
    if (a.future.empty() != !with_future)
      throw ValidationError("build_features: mixed future availability");
  if (with_future)
    f.future_in.assign(static_cast<size_t>(f.n) * kFutureSteps * kStateFeat, 0.0);

  for (int i = 0; i < f.n; ++i) {
    const WindowAgent& a = w.agents[static_cast<size_t>(i)];
    const AgentState& anchor = a.past.back();
    double* row = f.agent_in.data() + static_cast<size_t>(i) * kAgentFeat;
    for (int p = 0; p < kPastSteps; ++p)
      feat_detail::local_state(anchor, a.past[static_cast<size_t>(p)],
                               row + p * kStateFeat);
    double* g = row + kPastSteps * kStateFeat;
    g[0] = 0.2 * a.geom.length;
    g[1] = 0.2 * a.geom.width;
    g[2] = 0.2 * a.geom.wheelbase;
    const LocalMapView view = local_map_view(w, a.id);
    double* m = g + 3;
    for (int l = 0; l < LocalMapView::kLanes; ++l) {
      for (int p = 0; p < LocalMapView::kPoints; ++p) {
        const size_t src_base =
            (static_cast<size_t>(l) * LocalMapView::kPoints + p) * LocalMapView::kFeat;
        const size_t dst_base =
            static_cast<size_t>(l) * (LocalMapView::kPoints * LocalMapView::kFeat + 1) +
            static_cast<size_t>(p) * LocalMapView::kFeat;
        m[dst_base + 0] = 0.1 * view.feats[src_base + 0];
        m[dst_base + 1] = 0.1 * view.feats[src_base + 1];
        m[dst_base + 2] = view.feats[src_base + 2];
        m[dst_base + 3] = view.feats[src_base + 3];
      }
      m[static_cast<size_t>(l) * (LocalMapView::kPoints * LocalMapView::kFeat + 1) +
        LocalMapView::kPoints * LocalMapView::kFeat] = view.mask[static_cast<size_t>(l)];
    }
    if (with_future) {
      double* fr = f.future_in.data() +
                   static_cast<size_t>(i) * kFutureSteps * kStateFeat;
      for (int s = 0; s < kFutureSteps; ++s)
        feat_detail::local_state(anchor, a.future[static_cast<size_t>(s)],
                                 fr + s * kStateFeat);
    }
    f.roles.push_back(a.is_av ? 1.0 : 0.0);
    f.bv_mask.push_back(a.is_av ? 0.0 : 1.0);
    f.anchors.push_back(anchor);
    f.geoms.push_back(a.geom);
    f.agent_ids.push_back(a.id);
  }
  nn::InteractionNet::edge_lists(f.n, f.src, f.dst);
  f.edge_aux.assign(f.src.size() * kEdgeFeat, 0.0);
  for (size_t e = 0; e < f.src.size(); ++e)
    feat_detail::edge_features(f.anchors[static_cast<size_t>(f.src[e])],
                               f.anchors[static_cast<size_t>(f.dst[e])],
                               f.edge_aux.data() + e * kEdgeFeat);
  if (with_future) {
    f.gt_future.assign(static_cast<size_t>(kFutureSteps), {});
    for (int s = 0; s < kFutureSteps; ++s)
      for (const auto& a : w.agents)
        f.gt_future[static_cast<size_t>(s)].push_back(a.future[static_cast<size_t>(s)]);
  }
  return f;
}

// Plain-value context snapshot for guidance and Q-learning: everything a
// reward model needs to score latents against a scene.
struct ContextSnapshot {
  int n = 0;
  std::vector<double> h;         // n x dh
  std::vector<double> z;         // n x dz (conditional prior latent)
  std::vector<double> roles;     // 1 for the AV
  std::vector<double> bv_mask;   // 1 for BVs
  std::vector<int> src, dst;
  std::vector<double> edge_aux;  // E x kEdgeFeat
};

// Guidance hook used by the sampler. prepare() is called once per replan
// with the encoded scene; guidance() must fill d(J)/d(mu) for a flat
// [n x dz] mu. Implementations must not consume any randomness.
struct GuideHook {
  virtual ~GuideHook() = default;
  virtual void prepare(const ContextSnapshot& ctx) = 0;
  virtual void guidance(const std::vector<double>& mu,
                        std::vector<double>& g_out) const = 0;
  virtual double scale() const = 0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct LossParts {
  double recon = 0.0, kl = 0.0, noise = 0.0, pcoll = 0.0, total = 0.0;
};

class DiffusionModel {
 public:
  ModelConfig cfg;
  NoiseSchedule sched;
  ad::ParameterStore params;

  explicit DiffusionModel(const ModelConfig& c = {})
      : cfg(c),
        sched(make_schedule(c.K, c.beta_start, c.beta_end)),
        enc_mlp_(params, "enc.mlp", {kAgentFeat, c.hidden, c.dh}),
        enc_inter_(params, "enc.inter", c.dh, kEdgeFeat),
        enc_z_head_(params, "enc.zhead", c.dh, c.dz),
        post_mlp_(params, "post.mlp",
                  {c.dh + kFutureSteps * kStateFeat, c.hidden, c.hidden}),
        post_mean_(params, "post.mean", c.hidden, c.dz),
        post_logvar_(params, "post.logvar", c.hidden, c.dz, ad::Init::kFanIn,
                     ad::Init::kConstant, -4.0),
        den_time_(params, "den.time", c.dh, c.dh),
        den_lift_(params, "den.lift", 2 * c.dz, c.hidden),
        den_ada1_(params, "den.ada1", c.hidden, c.dh, c.dh),
        den_lin1_(params, "den.lin1", c.hidden, c.hidden),
        den_ada2_(params, "den.ada2", c.hidden, c.dh, c.dh),
        den_lin2_(params, "den.lin2", c.hidden, c.hidden),
        den_out_(params, "den.out", c.hidden, c.dz, ad::Init::kZeros),
        dec_h0_(params, "dec.h0", c.dh, c.hidden),
        dec_gru_(params, "dec.gru", c.dz + kStateFeat, c.hidden),
        dec_inter_(params, "dec.inter", c.hidden, kEdgeFeat),
        dec_head_(params, "dec.head", {c.hidden, c.hidden, 2}, true) {
    if (c.dh % 8 != 0 || c.hidden % 8 != 0)
      throw ValidationError("DiffusionModel: widths must be divisible by 8");
  }

  void init(Rng& rng) { params.init_values(rng); }

  struct Context {
    ad::Tensor h;        // [n x dh]
    ad::Tensor z_prior;  // [n x dz]
  };

  Context encode(ad::Tape& t, const WindowFeatures& f) const {
    ad::Tensor x = t.constant(f.n, kAgentFeat, f.agent_in);
    ad::Tensor mlp_out = enc_mlp_(t, x);
    ad::Tensor aux;
    if (f.n > 1) aux = t.constant(static_cast<int>(f.src.size()), kEdgeFeat, f.edge_aux);
    ad::Tensor h = enc_inter_(t, ad::silu_t(mlp_out), {}, aux);
    ad::Tensor z = enc_z_head_(t, h);
    return {h, z};
  }

  // Posterior over z given the ground-truth future; mean and clamped logvar.
  std::pair<ad::Tensor, ad::Tensor> posterior(ad::Tape& t,
                                              const WindowFeatures& f,
                                              const ad::Tensor& h) const {
    if (f.future_in.empty())
      throw ValidationError("posterior: window has no future states");
    ad::Tensor fut = t.constant(f.n, kFutureSteps * kStateFeat, f.future_in);
    ad::Tensor hidden = ad::silu_t(post_mlp_(t, ad::concat_cols(h, fut)));
    ad::Tensor mean = post_mean_(t, hidden);
    ad::Tensor logvar = ad::clamp_t(post_logvar_(t, hidden), -10.0, 4.0);
    return {mean, logvar};
  }

  static ad::Tensor reparam_sample(ad::Tape& t, const ad::Tensor& mean,
                                   const ad::Tensor& logvar, Rng& rng) {
    std::vector<double> eta(static_cast<size_t>(mean.size()));
    rng.fill_normal(eta);
    ad::Tensor e = t.constant(mean.rows(), mean.cols(), eta);
    return ad::add(mean, ad::mul(ad::exp_t(ad::scale(logvar, 0.5)), e));
  }

  // Closed-form forward diffusion of z0 to step k with given unit noise.
  ad::Tensor q_forward(ad::Tape& t, const ad::Tensor& z0, int k,
                       const std::vector<double>& eta) const {
    check_k(k);
    const double ab = sched.alpha_bar_at(k);
    std::vector<double> scaled(eta.size());
    const double s = std::sqrt(1.0 - ab);
    for (size_t i = 0; i < eta.size(); ++i) scaled[i] = s * eta[i];
    ad::Tensor e = t.constant(z0.rows(), z0.cols(), scaled);
    return ad::add(ad::scale(z0, std::sqrt(ab)), e);
  }

  ad::Tensor predict_noise(ad::Tape& t, const ad::Tensor& zk, int k,
                           const ad::Tensor& z_prior, const ad::Tensor& h) const {
    check_k(k);
    const int n = zk.rows();
    ad::Tensor phi = t.constant(1, cfg.dh, nn::sinusoidal_embed(k, cfg.dh));
    ad::Tensor t_feat = ad::repeat_row(ad::silu_t(den_time_(t, phi)), n);
    ad::Tensor x = den_lift_(t, ad::concat_cols(zk, z_prior));
    x = ad::silu_t(den_lin1_(t, den_ada1_(t, x, h, t_feat)));
    x = ad::silu_t(den_lin2_(t, den_ada2_(t, x, h, t_feat)));
    return den_out_(t, x);
  }

  // Posterior moments of the reverse transition k -> k-1 given predicted
  // noise; plain arithmetic on flat vectors.
  void reverse_moments(const std::vector<double>& zk, int k,
                       const std::vector<double>& eps_hat,
                       std::vector<double>& mu, double& sigma2_out) const {
    check_k(k);
    const double ab_k = sched.alpha_bar_at(k);
    const double ab_p = sched.alpha_bar_at(k - 1);
    const double c0 = std::sqrt(ab_p) / std::sqrt(ab_k);
    const double c1 = -std::sqrt(ab_p) * std::sqrt(1.0 - ab_k) / std::sqrt(ab_k) +
                      std::sqrt(1.0 - ab_p);
    mu.resize(zk.size());
    for (size_t i = 0; i < zk.size(); ++i) mu[i] = c0 * zk[i] + c1 * eps_hat[i];
    sigma2_out = sched.sigma2(k);
  }

  // Decoded world-frame states per future step, differentiable through the
  // bicycle model, the GRU, and the interaction net.
  std::vector<ad::Tensor> decode(ad::Tape& t, const WindowFeatures& f,
                                 const ad::Tensor& z0, const ad::Tensor& h) const {
    const int n = f.n;
    std::vector<double> init(static_cast<size_t>(n) * 4);
    std::vector<double> anchor_cols(static_cast<size_t>(n) * 4);
    for (int i = 0; i < n; ++i) {
      const AgentState& a = f.anchors[static_cast<size_t>(i)];
      init[4 * static_cast<size_t>(i) + 0] = a.x;
      init[4 * static_cast<size_t>(i) + 1] = a.y;
      init[4 * static_cast<size_t>(i) + 2] = a.heading;
      init[4 * static_cast<size_t>(i) + 3] = a.speed;
      anchor_cols[4 * static_cast<size_t>(i) + 0] = a.x;
      anchor_cols[4 * static_cast<size_t>(i) + 1] = a.y;
      anchor_cols[4 * static_cast<size_t>(i) + 2] = std::cos(a.heading);
      anchor_cols[4 * static_cast<size_t>(i) + 3] = std::sin(a.heading);
    }
    ad::Tensor states = t.constant(n, 4, init);
    ad::Tensor anchors = t.constant(n, 4, anchor_cols);
    std::vector<double> anchor_heading(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      anchor_heading[static_cast<size_t>(i)] = f.anchors[static_cast<size_t>(i)].heading;
    ad::Tensor anchor_th = t.constant(n, 1, anchor_heading);

    ad::Tensor g = ad::tanh_t(dec_h0_(t, h));
    std::vector<ad::Tensor> out;
    out.reserve(kFutureSteps);
    for (int step = 0; step < kFutureSteps; ++step) {
      ad::Tensor feats = local_feats(t, states, anchors, anchor_th);
      g = dec_gru_.step(t, ad::concat_cols(z0, feats), g);
      ad::Tensor mix;
      if (n > 1) {
        ad::Tensor aux = edge_aux_t(t, states);
        mix = dec_inter_(t, g, {}, aux);
      } else {
        mix = dec_inter_(t, g);
      }
      ad::Tensor raw = dec_head_(t, mix);
      ad::Tensor accel = ad::scale(ad::tanh_t(ad::slice_cols(raw, 0, 1)), cfg.limits.a_max);
      ad::Tensor steer = ad::scale(ad::tanh_t(ad::slice_cols(raw, 1, 1)), cfg.limits.steer_max);
      states = ad::bicycle_op(states, ad::concat_cols(accel, steer), f.geoms,
                              f.dt, cfg.limits);
      out.push_back(states);
    }
    return out;
  }

  // ------------------------------------------------------------------
  // Losses
  // ------------------------------------------------------------------

  // Reconstruction decodes a reparameterised posterior sample, not the mean:
  // the decoder must stay sane over the posterior spread because sampling
  // feeds it reverse-chain latents, never exact posterior means.
  ad::Tensor elbo_loss(ad::Tape& t, const WindowFeatures& f, Rng& rng,
                       LossParts* parts = nullptr) const {
    Context ctx = encode(t, f);
    auto [mean, logvar] = posterior(t, f, ctx.h);
    ad::Tensor z0 = reparam_sample(t, mean, logvar, rng);
    ad::Tensor recon = recon_loss(t, f, decode(t, f, z0, ctx.h));
    ad::Tensor kl = kl_loss(t, mean, logvar, ctx.z_prior, f.n);
    ad::Tensor total = ad::add(recon, ad::scale(kl, cfg.beta_kl));
    if (parts) {
      parts->recon = recon.val()[0];
      parts->kl = kl.val()[0];
      parts->total = total.val()[0];
    }
    return total;
  }

  ad::Tensor noise_loss(ad::Tape& t, const WindowFeatures& f, Rng& rng,
                        LossParts* parts = nullptr) const {
    Context ctx = encode(t, f);
    auto [mean, logvar] = posterior(t, f, ctx.h);
    ad::Tensor z0 = reparam_sample(t, mean, logvar, rng);
    ad::Tensor loss = noise_loss_from(t, f.n, z0, ctx.z_prior, ctx.h, rng);
    if (parts) {
      parts->noise = loss.val()[0];
      parts->total = loss.val()[0];
    }
    return loss;
  }

  // Noise loss given prepared (z0, z_prior, h); shared by the cached
  // stage-1b path and the joint stage.
  ad::Tensor noise_loss_from(ad::Tape& t, int n, const ad::Tensor& z0,
                             const ad::Tensor& z_prior, const ad::Tensor& h,
                             Rng& rng) const {
    const int k = 1 + rng.uniform_int(sched.K);
    std::vector<double> eta(static_cast<size_t>(n) * cfg.dz);
    rng.fill_normal(eta);
    ad::Tensor zk = q_forward(t, z0, k, eta);
    ad::Tensor eps_hat = predict_noise(t, zk, k, z_prior, h);
    ad::Tensor eta_t = t.constant(n, cfg.dz, eta);
    ad::Tensor d = ad::sub(eps_hat, eta_t);
    return ad::scale(ad::sum_all(ad::square_t(d)), 1.0 / n);
  }

  ad::Tensor joint_loss(ad::Tape& t, const WindowFeatures& f, Rng& rng,
                        LossParts* parts = nullptr) const {
    Context ctx = encode(t, f);
    auto [mean, logvar] = posterior(t, f, ctx.h);
    ad::Tensor z0 = reparam_sample(t, mean, logvar, rng);
    std::vector<ad::Tensor> decoded = decode(t, f, z0, ctx.h);
    ad::Tensor recon = recon_loss(t, f, decoded);
    ad::Tensor kl = kl_loss(t, mean, logvar, ctx.z_prior, f.n);
    ad::Tensor noise = noise_loss_from(t, f.n, z0, ctx.z_prior, ctx.h, rng);
    ad::Tensor pcoll = collision_penalty(t, f, decoded);
    ad::Tensor total =
        ad::add(ad::add(recon, ad::scale(kl, cfg.beta_kl)), ad::add(noise, pcoll));
    if (parts) {
      parts->recon = recon.val()[0];
      parts->kl = kl.val()[0];
      parts->noise = noise.val()[0];
      parts->pcoll = pcoll.val()[0];
      parts->total = total.val()[0];
    }
    return total;
  }

  // Mean over decoded steps of collision hinge + offroad penalties.
  ad::Tensor collision_penalty(ad::Tape& t, const WindowFeatures& f,
                               const std::vector<ad::Tensor>& decoded) const {
    ad::Tensor acc = t.alloc(1, 1);
    for (const auto& st : decoded) {
      ad::Tensor pen = ad::collision_hinge_penalty(st, f.geoms, cfg.collision_margin);
      if (f.map) pen = ad::add(pen, ad::offroad_sq_penalty(st, f.geoms, *f.map));
      acc = ad::add(acc, pen);
    }
    return ad::scale(acc, 1.0 / static_cast<double>(decoded.size()));
  }

  // ------------------------------------------------------------------
  // Plain-value inference paths
  // ------------------------------------------------------------------

  ContextSnapshot snapshot(const WindowFeatures& f) const {
    ad::Tape t;
    Context ctx = encode(t, f);
    ContextSnapshot s;
    s.n = f.n;
    s.h = ctx.h.val();
    s.z = ctx.z_prior.val();
    s.roles = f.roles;
    s.bv_mask = f.bv_mask;
    s.src = f.src;
    s.dst = f.dst;
    s.edge_aux = f.edge_aux;
    return s;
  }

  struct SampleResult {
    // [agent][step] world states over the future horizon.
    std::vector<std::vector<AgentState>> traj;
    std::vector<double> z0;  // final latents, n x dz
  };

  // Reverse diffusion from pure noise, then decode. The guide, when present,
  // shifts each reverse mean by scale * Sigma * grad J before noise is added;
  // the k=1 step has Sigma = 0, where the guide uses the k=2 variance as a
  // floor. Draw order is fixed and guidance consumes no randomness, so a
  // zero-scale or zero-gradient guide reproduces the unguided sample exactly.
  SampleResult sample_rollout(const WindowFeatures& f, Rng& rng,
                              GuideHook* guide = nullptr) const {
    const int n = f.n;
    const size_t nz = static_cast<size_t>(n) * cfg.dz;
    std::vector<double> z(nz);
    rng.fill_normal(z);

    ad::Tape t;
    std::vector<double> h_vals, zp_vals;
    {
      Context ctx = encode(t, f);
      h_vals = ctx.h.val();
      zp_vals = ctx.z_prior.val();
      if (cfg.sample_z_prior) {
        for (auto& v : zp_vals) v += rng.normal();
      }
    }
    if (guide) {
      ContextSnapshot snap;
      snap.n = n;
      snap.h = h_vals;
      snap.z = zp_vals;
      snap.roles = f.roles;
      snap.bv_mask = f.bv_mask;
      snap.src = f.src;
      snap.dst = f.dst;
      snap.edge_aux = f.edge_aux;
      guide->prepare(snap);
    }

    std::vector<double> mu, g;
    for (int k = sched.K; k >= 1; --k) {
      t.clear();
      ad::Tensor h = t.constant(n, cfg.dh, h_vals);
      ad::Tensor zp = t.constant(n, cfg.dz, zp_vals);
      ad::Tensor zk = t.constant(n, cfg.dz, z);
      ad::Tensor eps = predict_noise(t, zk, k, zp, h);
      double s2 = 0.0;
      reverse_moments(z, k, eps.val(), mu, s2);
      if (guide) {
        const double s2_eff = s2 > 0.0 ? s2 : sched.sigma2(2);
        guide->guidance(mu, g);
        if (g.size() != nz)
          throw ValidationError("sample_rollout: guidance gradient size mismatch");
        const double gs = guide->scale();
        for (size_t i = 0; i < nz; ++i) mu[i] += gs * s2_eff * g[i];
      }
      if (s2 > 0.0) {
        const double sd = std::sqrt(s2);
        for (size_t i = 0; i < nz; ++i) z[i] = mu[i] + sd * rng.normal();
      } else {
        z = mu;
      }
    }

    t.clear();
    ad::Tensor h = t.constant(n, cfg.dh, h_vals);
    ad::Tensor z0 = t.constant(n, cfg.dz, z);
    std::vector<ad::Tensor> states = decode(t, f, z0, h);
    SampleResult res;
    res.z0 = z;
    res.traj.assign(static_cast<size_t>(n), {});
    for (int i = 0; i < n; ++i) res.traj[static_cast<size_t>(i)].reserve(states.size());
    for (const auto& st : states) {
      const auto& v = st.val();
      for (int i = 0; i < n; ++i)
        res.traj[static_cast<size_t>(i)].push_back(
            {v[4 * static_cast<size_t>(i)], v[4 * static_cast<size_t>(i) + 1],
             v[4 * static_cast<size_t>(i) + 2], v[4 * static_cast<size_t>(i) + 3]});
    }
    return res;
  }

  // Decode a given latent against a snapshotted context (plain values).
  SampleResult decode_given(const WindowFeatures& f,
                            const std::vector<double>& h_vals,
                            const std::vector<double>& z0_vals) const {
    if (h_vals.size() != static_cast<size_t>(f.n) * cfg.dh ||
        z0_vals.size() != static_cast<size_t>(f.n) * cfg.dz)
      throw ValidationError("decode_given: context size mismatch");
    ad::Tape t;
    ad::Tensor h = t.constant(f.n, cfg.dh, h_vals);
    ad::Tensor z0 = t.constant(f.n, cfg.dz, z0_vals);
    std::vector<ad::Tensor> states = decode(t, f, z0, h);
    SampleResult res;
    res.z0 = z0_vals;
    res.traj.assign(static_cast<size_t>(f.n), {});
    for (const auto& st : states) {
      const auto& v = st.val();
      for (int i = 0; i < f.n; ++i)
        res.traj[static_cast<size_t>(i)].push_back(
            {v[4 * static_cast<size_t>(i)], v[4 * static_cast<size_t>(i) + 1],
             v[4 * static_cast<size_t>(i) + 2], v[4 * static_cast<size_t>(i) + 3]});
    }
    return res;
  }

 private:
  void check_k(int k) const {
    if (k < 1 || k > sched.K)
      throw ValidationError("diffusion step k out of range: " + std::to_string(k));
  }

  // Current states -> per-agent local features in the anchor frame.
  ad::Tensor local_feats(ad::Tape& t, const ad::Tensor& states,
                         const ad::Tensor& anchors, const ad::Tensor& anchor_th) const {
    ad::Tensor x = ad::slice_cols(states, 0, 1);
    ad::Tensor y = ad::slice_cols(states, 1, 1);
    ad::Tensor th = ad::slice_cols(states, 2, 1);
    ad::Tensor v = ad::slice_cols(states, 3, 1);
    ad::Tensor ax = ad::slice_cols(anchors, 0, 1);
    ad::Tensor ay = ad::slice_cols(anchors, 1, 1);
    ad::Tensor ca = ad::slice_cols(anchors, 2, 1);
    ad::Tensor sa = ad::slice_cols(anchors, 3, 1);
    ad::Tensor dx = ad::sub(x, ax);
    ad::Tensor dy = ad::sub(y, ay);
    ad::Tensor lx = ad::add(ad::mul(ca, dx), ad::mul(sa, dy));
    ad::Tensor ly = ad::sub(ad::mul(ca, dy), ad::mul(sa, dx));
    ad::Tensor dth = ad::sub(th, anchor_th);
    return ad::concat_cols({ad::scale(lx, 0.1), ad::scale(ly, 0.1), ad::cos_t(dth),
                            ad::sin_t(dth), ad::scale(v, 0.1)});
  }

  // Differentiable edge features from current states, receiver frame.
  ad::Tensor edge_aux_t(ad::Tape& t, const ad::Tensor& states) const {
    const int n = states.rows();
    std::vector<int> src, dst;
    nn::InteractionNet::edge_lists(n, src, dst);
    ad::Tensor x = ad::slice_cols(states, 0, 1);
    ad::Tensor y = ad::slice_cols(states, 1, 1);
    ad::Tensor th = ad::slice_cols(states, 2, 1);
    ad::Tensor v = ad::slice_cols(states, 3, 1);
    ad::Tensor sx = ad::gather_rows(x, src), dx_ = ad::gather_rows(x, dst);
    ad::Tensor sy = ad::gather_rows(y, src), dy_ = ad::gather_rows(y, dst);
    ad::Tensor sth = ad::gather_rows(th, src), dth_ = ad::gather_rows(th, dst);
    ad::Tensor sv = ad::gather_rows(v, src), dv_ = ad::gather_rows(v, dst);
    ad::Tensor ddx = ad::sub(sx, dx_);
    ad::Tensor ddy = ad::sub(sy, dy_);
    ad::Tensor cd = ad::cos_t(dth_), sd = ad::sin_t(dth_);
    ad::Tensor rel_x = ad::add(ad::mul(cd, ddx), ad::mul(sd, ddy));
    ad::Tensor rel_y = ad::sub(ad::mul(cd, ddy), ad::mul(sd, ddx));
    ad::Tensor hd = ad::sub(sth, dth_);
    ad::Tensor dv = ad::sub(sv, dv_);
    ad::Tensor d2 = ad::add_scalar(ad::add(ad::square_t(ddx), ad::square_t(ddy)), 1e-6);
    return ad::concat_cols({ad::scale(rel_x, 0.1), ad::scale(rel_y, 0.1),
                            ad::cos_t(hd), ad::sin_t(hd), ad::scale(dv, 0.1),
                            ad::scale(ad::sqrt_t(d2), 0.1)});
  }

  ad::Tensor recon_loss(ad::Tape& t, const WindowFeatures& f,
                        const std::vector<ad::Tensor>& decoded) const {
    ad::Tensor acc = t.alloc(1, 1);
    for (size_t s = 0; s < decoded.size(); ++s) {
      std::vector<double> gx(static_cast<size_t>(f.n) * 2), gh(static_cast<size_t>(f.n));
      for (int i = 0; i < f.n; ++i) {
        gx[2 * static_cast<size_t>(i)] = f.gt_future[s][static_cast<size_t>(i)].x;
        gx[2 * static_cast<size_t>(i) + 1] = f.gt_future[s][static_cast<size_t>(i)].y;
        gh[static_cast<size_t>(i)] = f.gt_future[s][static_cast<size_t>(i)].heading;
      }
      ad::Tensor pos_err =
          ad::sub(ad::slice_cols(decoded[s], 0, 2), t.constant(f.n, 2, gx));
      acc = ad::add(acc, ad::sum_all(ad::square_t(pos_err)));
      ad::Tensor dth =
          ad::sub(ad::slice_cols(decoded[s], 2, 1), t.constant(f.n, 1, gh));
      // 1 - cos(dtheta), smooth and wrap-safe
      acc = ad::add(acc, ad::sum_all(ad::add_scalar(ad::neg(ad::cos_t(dth)), 1.0)));
    }
    return ad::scale(acc, 1.0 / (static_cast<double>(f.n) * decoded.size()));
  }

  // KL(N(mean, e^logvar) || N(z_prior, I)) summed over coords, meaned over
  // agents.
  ad::Tensor kl_loss(ad::Tape& t, const ad::Tensor& mean, const ad::Tensor& logvar,
                     const ad::Tensor& z_prior, int n) const {
    ad::Tensor dm = ad::sub(mean, z_prior);
    ad::Tensor inner = ad::add(ad::add(ad::exp_t(logvar), ad::square_t(dm)),
                               ad::add_scalar(ad::neg(logvar), -1.0));
    return ad::scale(ad::sum_all(inner), 0.5 / n);
  }

  nn::Mlp enc_mlp_;
  nn::InteractionNet enc_inter_;
  nn::Linear enc_z_head_;
  nn::Mlp post_mlp_;
  nn::Linear post_mean_, post_logvar_;
  nn::Linear den_time_, den_lift_;
  nn::AdaGn den_ada1_;
  nn::Linear den_lin1_;
  nn::AdaGn den_ada2_;
  nn::Linear den_lin2_;
  nn::Linear den_out_;
  nn::Linear dec_h0_;
  nn::GruCell dec_gru_;
  nn::InteractionNet dec_inter_;
  nn::Mlp dec_head_;
};

// ---------------------------------------------------------------------------
// Training: stage 1a fits encoder/posterior/decoder on the ELBO, stage 1b
// fits the denoiser on the noise objective with the rest frozen (their
// outputs cached), stage 2 fine-tunes everything jointly with the collision
// penalty added.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 5e-4;
  int batch = 8;
  int epochs_elbo = 30;
  int epochs_noise = 30;
  int epochs_joint = 20;
};

struct TrainLogRow {
  std::string stage;
  int epoch = 0;
  double recon = 0.0, kl = 0.0, noise = 0.0, pcoll = 0.0, total = 0.0;
};

inline std::vector<TrainLogRow> train_diffusion(
    DiffusionModel& model, const std::vector<ScenarioWindow>& windows,
    const TrainConfig& tc, uint64_t seed) {
  if (windows.empty())
    throw ValidationError("train_diffusion: empty training set");
  if (tc.batch < 1) throw ValidationError("train_diffusion: batch must be >= 1");

  std::vector<WindowFeatures> feats;
  feats.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.agents.front().future.empty())
      throw ValidationError("train_diffusion: training windows need futures");
    feats.push_back(build_features(w));
  }

  std::vector<TrainLogRow> log;
  ad::Tape tape;
  std::vector<size_t> order(feats.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto check_finite = [](double v, const std::string& where) {
    if (!std::isfinite(v))
      throw DivergenceError("train_diffusion: loss diverged at " + where);
  };

  // Stage 1a: ELBO.
  {
    nn::Adam opt = nn::Adam::over_prefixes(model.params, {"enc.", "post.", "dec."}, tc.lr);
    Rng rng(seed, "train/elbo");
    for (int epoch = 1; epoch <= tc.epochs_elbo; ++epoch) {
      rng.shuffle(order);
      LossParts epoch_sum;
      int batches = 0;
      for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tc.batch)) {
        const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(tc.batch));
        tape.clear();
        opt.zero_grads();
        ad::Tensor acc = tape.alloc(1, 1);
        LossParts batch_parts;
        for (size_t i = b0; i < b1; ++i) {
          LossParts p;
          acc = ad::add(acc, model.elbo_loss(tape, feats[order[i]], rng, &p));
          batch_parts.recon += p.recon;
          batch_parts.kl += p.kl;
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        ad::Tensor loss = ad::scale(acc, inv);
        check_finite(loss.val()[0], "elbo epoch " + std::to_string(epoch));
        tape.backward(loss);
        opt.step();
        epoch_sum.recon += batch_parts.recon * inv;
        epoch_sum.kl += batch_parts.kl * inv;
        epoch_sum.total += loss.val()[0];
        ++batches;
      }
      log.push_back({"elbo", epoch, epoch_sum.recon / batches, epoch_sum.kl / batches,
                     0.0, 0.0, epoch_sum.total / batches});
    }
  }

  // Stage 1b: noise objective, encoder and posterior frozen and cached.
  {
    struct Cached {
      std::vector<double> h, zp, mean, logvar;
      int n = 0;
    };
    std::vector<Cached> cache;
    cache.reserve(feats.size());
    for (const auto& f : feats) {
      tape.clear();
      DiffusionModel::Context ctx = model.encode(tape, f);
      auto [mean, logvar] = model.posterior(tape, f, ctx.h);
      cache.push_back({ctx.h.val(), ctx.z_prior.val(), mean.val(), logvar.val(), f.n});
    }
    nn::Adam opt = nn::Adam::over_prefixes(model.params, {"den."}, tc.lr);
    Rng rng(seed, "train/noise");
    for (int epoch = 1; epoch <= tc.epochs_noise; ++epoch) {
      rng.shuffle(order);
      double epoch_total = 0.0;
      int batches = 0;
      for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tc.batch)) {
        const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(tc.batch));
        tape.clear();
        opt.zero_grads();
        ad::Tensor acc = tape.alloc(1, 1);
        for (size_t i = b0; i < b1; ++i) {
          const Cached& c = cache[order[i]];
          std::vector<double> z0(c.mean.size());
          for (size_t j = 0; j < z0.size(); ++j)
            z0[j] = c.mean[j] + std::exp(0.5 * c.logvar[j]) * rng.normal();
          ad::Tensor z0_t = tape.constant(c.n, model.cfg.dz, z0);
          ad::Tensor h = tape.constant(c.n, model.cfg.dh, c.h);
          ad::Tensor zp = tape.constant(c.n, model.cfg.dz, c.zp);
          acc = ad::add(acc, model.noise_loss_from(tape, c.n, z0_t, zp, h, rng));
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        ad::Tensor loss = ad::scale(acc, inv);
        check_finite(loss.val()[0], "noise epoch " + std::to_string(epoch));
        tape.backward(loss);
        opt.step();
        epoch_total += loss.val()[0];
        ++batches;
      }
      log.push_back({"noise", epoch, 0.0, 0.0, epoch_total / batches, 0.0,
                     epoch_total / batches});
    }
  }

  // Stage 2: joint objective with collision penalty.
  {
    nn::Adam opt = nn::Adam::over(model.params, tc.lr);
    Rng rng(seed, "train/joint");
    for (int epoch = 1; epoch <= tc.epochs_joint; ++epoch) {
      rng.shuffle(order);
      LossParts epoch_sum;
      int batches = 0;
      for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(tc.batch)) {
        const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(tc.batch));
        tape.clear();
        opt.zero_grads();
        ad::Tensor acc = tape.alloc(1, 1);
        LossParts bp;
        for (size_t i = b0; i < b1; ++i) {
          LossParts p;
          acc = ad::add(acc, model.joint_loss(tape, feats[order[i]], rng, &p));
          bp.recon += p.recon;
          bp.kl += p.kl;
          bp.noise += p.noise;
          bp.pcoll += p.pcoll;
        }
        const double inv = 1.0 / static_cast<double>(b1 - b0);
        ad::Tensor loss = ad::scale(acc, inv);
        check_finite(loss.val()[0], "joint epoch " + std::to_string(epoch));
        tape.backward(loss);
        opt.step();
        epoch_sum.recon += bp.recon * inv;
        epoch_sum.kl += bp.kl * inv;
        epoch_sum.noise += bp.noise * inv;
        epoch_sum.pcoll += bp.pcoll * inv;
        epoch_sum.total += loss.val()[0];
        ++batches;
      }
      log.push_back({"joint", epoch, epoch_sum.recon / batches,
                     epoch_sum.kl / batches, epoch_sum.noise / batches,
                     epoch_sum.pcoll / batches, epoch_sum.total / batches});
    }
  }
  return log;
}

inline nlohmann::json diffusion_meta(const DiffusionModel& m) {
  return {{"model", "diffusion"}, {"dz", m.cfg.dz}, {"dh", m.cfg.dh},
          {"hidden", m.cfg.hidden}, {"K", m.cfg.K}};
}

}  // namespace scengen
