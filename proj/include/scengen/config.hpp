#pragma once

#include "scengen/diffusion.hpp"
#include "scengen/guide.hpp"
#include "scengen/synth.hpp"
#include "scengen/version.hpp"

// Run configuration: one JSON document holding every tunable, validated
// strictly (unknown keys are rejected, recursively). Each pipeline stage
// writes the resolved config next to its outputs so a run is reproducible
// from that file alone.

namespace scengen {

struct EvalSection {
  int samples_per_window = 10;
  int episodes = 100;
  double holdout_fraction = 0.2;
};

struct GuideSection {
  QLearnConfig q;
  double scale = 1.0;
};

struct SimSection {
  EpisodeConfig episode;
};

struct RunConfig {
  uint64_t seed = 7;
  std::string preset = "desk";
  SynthConfig data;
  ModelConfig model;
  TrainConfig train;
  GuideSection guide;
  SimSection sim;
  EvalSection eval;
};

// The paper-scale preset: longer schedules, same architecture.
inline void apply_preset(RunConfig& cfg, const std::string& name) {
  if (name == "desk") {
    cfg.preset = "desk";
    return;
  }
  if (name == "paper") {
    cfg.preset = "paper";
    cfg.train.epochs_elbo = 200;
    cfg.train.epochs_noise = 200;
    cfg.train.epochs_joint = 200;
    cfg.guide.q.pretrain_epochs = 100;
    return;
  }
  throw ValidationError("unknown preset '" + name + "' (desk|paper)");
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"preset", c.preset},
      {"data",
       {{"scenes", c.data.scenes},
        {"agents_min", c.data.agents_min},
        {"agents_max", c.data.agents_max},
        {"duration", c.data.duration},
        {"dt", c.data.dt},
        {"speed_min", c.data.speed_min},
        {"speed_max", c.data.speed_max}}},
      {"model",
       {{"dz", c.model.dz},
        {"dh", c.model.dh},
        {"hidden", c.model.hidden},
        {"K", c.model.K},
        {"beta_start", c.model.beta_start},
        {"beta_end", c.model.beta_end},
        {"beta_kl", c.model.beta_kl},
        {"collision_margin", c.model.collision_margin},
        {"a_max", c.model.limits.a_max},
        {"steer_max", c.model.limits.steer_max},
        {"sample_z_prior", c.model.sample_z_prior}}},
      {"train",
       {{"lr", c.train.lr},
        {"batch", c.train.batch},
        {"epochs_elbo", c.train.epochs_elbo},
        {"epochs_noise", c.train.epochs_noise},
        {"epochs_joint", c.train.epochs_joint}}},
      {"guide",
       {{"lr", c.guide.q.lr},
        {"gamma", c.guide.q.gamma},
        {"batch", c.guide.q.batch},
        {"candidates", c.guide.q.candidates},
        {"cand_sigma", c.guide.q.cand_sigma},
        {"target_sync", c.guide.q.target_sync},
        {"pretrain_epochs", c.guide.q.pretrain_epochs},
        {"updates_per_episode", c.guide.q.updates_per_episode},
        {"scale", c.guide.scale}}},
      {"sim",
       {{"horizon", c.sim.episode.horizon},
        {"replan_period", c.sim.episode.replan_period},
        {"planner_budget_ms", c.sim.episode.planner_budget_ms},
        {"full_horizon_playback", c.sim.episode.full_horizon_playback}}},
      {"eval",
       {{"samples_per_window", c.eval.samples_per_window},
        {"episodes", c.eval.episodes},
        {"holdout_fraction", c.eval.holdout_fraction}}}};
}

namespace config_detail {

inline void reject_unknown(const nlohmann::json& input,
                           const nlohmann::json& reference,
                           const std::string& prefix) {
  for (const auto& [key, value] : input.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!reference.contains(key))
      throw ValidationError("config: unknown key '" + path + "'");
    if (value.is_object() && reference.at(key).is_object())
      reject_unknown(value, reference.at(key), path);
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out,
          const std::string& prefix) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("config: bad value for '" + prefix + key + "'");
  }
}

}  // namespace config_detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config: root must be an object");
  RunConfig c;
  nlohmann::json reference = config_to_json(c);
  // Resolved configs round-trip: the provenance stamp is accepted, ignored.
  reference["tool"] = nullptr;
  reference["tool_version"] = nullptr;
  config_detail::reject_unknown(j, reference, "");
  namespace cd = config_detail;
  cd::read(j, "seed", c.seed, "");
  std::string preset = c.preset;
  cd::read(j, "preset", preset, "");
  apply_preset(c, preset);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    cd::read(d, "scenes", c.data.scenes, "data.");
    cd::read(d, "agents_min", c.data.agents_min, "data.");
    cd::read(d, "agents_max", c.data.agents_max, "data.");
    cd::read(d, "duration", c.data.duration, "data.");
    cd::read(d, "dt", c.data.dt, "data.");
    cd::read(d, "speed_min", c.data.speed_min, "data.");
    cd::read(d, "speed_max", c.data.speed_max, "data.");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    cd::read(m, "dz", c.model.dz, "model.");
    cd::read(m, "dh", c.model.dh, "model.");
    cd::read(m, "hidden", c.model.hidden, "model.");
    cd::read(m, "K", c.model.K, "model.");
    cd::read(m, "beta_start", c.model.beta_start, "model.");
    cd::read(m, "beta_end", c.model.beta_end, "model.");
    cd::read(m, "beta_kl", c.model.beta_kl, "model.");
    cd::read(m, "collision_margin", c.model.collision_margin, "model.");
    cd::read(m, "a_max", c.model.limits.a_max, "model.");
    cd::read(m, "steer_max", c.model.limits.steer_max, "model.");
    cd::read(m, "sample_z_prior", c.model.sample_z_prior, "model.");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cd::read(t, "lr", c.train.lr, "train.");
    cd::read(t, "batch", c.train.batch, "train.");
    cd::read(t, "epochs_elbo", c.train.epochs_elbo, "train.");
    cd::read(t, "epochs_noise", c.train.epochs_noise, "train.");
    cd::read(t, "epochs_joint", c.train.epochs_joint, "train.");
  }
  if (j.contains("guide")) {
    const auto& g = j.at("guide");
    cd::read(g, "lr", c.guide.q.lr, "guide.");
    cd::read(g, "gamma", c.guide.q.gamma, "guide.");
    cd::read(g, "batch", c.guide.q.batch, "guide.");
    cd::read(g, "candidates", c.guide.q.candidates, "guide.");
    cd::read(g, "cand_sigma", c.guide.q.cand_sigma, "guide.");
    cd::read(g, "target_sync", c.guide.q.target_sync, "guide.");
    cd::read(g, "pretrain_epochs", c.guide.q.pretrain_epochs, "guide.");
    cd::read(g, "updates_per_episode", c.guide.q.updates_per_episode, "guide.");
    cd::read(g, "scale", c.guide.scale, "guide.");
  }
  if (j.contains("sim")) {
    const auto& s = j.at("sim");
    cd::read(s, "horizon", c.sim.episode.horizon, "sim.");
    cd::read(s, "replan_period", c.sim.episode.replan_period, "sim.");
    cd::read(s, "planner_budget_ms", c.sim.episode.planner_budget_ms, "sim.");
    cd::read(s, "full_horizon_playback", c.sim.episode.full_horizon_playback, "sim.");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    cd::read(e, "samples_per_window", c.eval.samples_per_window, "eval.");
    cd::read(e, "episodes", c.eval.episodes, "eval.");
    cd::read(e, "holdout_fraction", c.eval.holdout_fraction, "eval.");
  }

  if (c.data.scenes < 1) throw ValidationError("config: data.scenes must be >= 1");
  if (c.data.agents_min < 2 || c.data.agents_max < c.data.agents_min)
    throw ValidationError("config: need 2 <= data.agents_min <= data.agents_max");
  if (c.model.K < 1) throw ValidationError("config: model.K must be >= 1");
  if (c.train.batch < 1) throw ValidationError("config: train.batch must be >= 1");
  if (!(c.eval.holdout_fraction > 0.0) || !(c.eval.holdout_fraction < 1.0))
    throw ValidationError("config: eval.holdout_fraction must be in (0, 1)");
  if (c.eval.samples_per_window < 1)
    throw ValidationError("config: eval.samples_per_window must be >= 1");
  if (c.sim.episode.horizon < 1 || c.sim.episode.replan_period < 1)
    throw ValidationError("config: sim horizon and replan_period must be >= 1");
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("config file not found: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

// Written into every output directory.
inline void write_resolved_config(const std::string& dir, const RunConfig& cfg) {
  nlohmann::json j = config_to_json(cfg);
  j["tool"] = kToolName;
  j["tool_version"] = kToolVersion;
  std::ofstream out(dir + "/resolved_config.json", std::ios::binary);
  if (!out)
    throw ValidationError("cannot write resolved config in " + dir);
  out << j.dump(1) << "\n";
}

}  // namespace scengen
