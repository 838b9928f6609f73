// Command-line front end: synthetic data generation, the three training
// stages, scenario generation, closed-loop rollouts, metric evaluation, and
// report rendering. One binary, one subcommand per pipeline stage, all
// randomness derived from the configured root seed.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "scengen/config.hpp"
#include "scengen/metrics.hpp"

namespace fs = std::filesystem;
using namespace scengen;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string preset;
  int64_t seed = -1;
  bool seed_set = false;
};

void add_common(CLI::App* sub, CommonOpts& c) {
  sub->add_option("--config", c.config_path, "run configuration JSON");
  sub->add_option("--preset", c.preset, "desk|paper preset override");
  sub->add_option("--seed", c.seed, "root seed override")
      ->each([&c](const std::string&) { c.seed_set = true; });
}

RunConfig resolve_config(const CommonOpts& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  if (!c.preset.empty()) apply_preset(cfg, c.preset);
  if (c.seed_set) {
    if (c.seed < 0) throw ValidationError("--seed must be non-negative");
    cfg.seed = static_cast<uint64_t>(c.seed);
  }
  return cfg;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw ValidationError("missing " + what + ": " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ValidationError("cannot create directory " + dir);
}

std::vector<std::string> sorted_json_files(const std::string& dir) {
  std::vector<std::string> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json")
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<Scenario> load_corpus(const std::string& data_dir) {
  require_file(data_dir, "data directory");
  const std::string scene_dir =
      fs::is_directory(data_dir + "/scenes") ? data_dir + "/scenes" : data_dir;
  const std::vector<std::string> files = sorted_json_files(scene_dir);
  if (files.empty())
    throw ValidationError("no scenario JSON files under " + scene_dir);
  std::vector<Scenario> corpus;
  corpus.reserve(files.size());
  for (const auto& f : files) corpus.push_back(load_scenario(f));
  return corpus;
}

struct SplitWindows {
  // Windows hold pointers into the corpus; keep it alive alongside them.
  std::shared_ptr<std::vector<Scenario>> corpus;
  std::vector<ScenarioWindow> train;
  std::vector<ScenarioWindow> holdout;
};

SplitWindows split_windows(const std::string& data_dir, double holdout_fraction) {
  SplitWindows sw;
  sw.corpus = std::make_shared<std::vector<Scenario>>(load_corpus(data_dir));
  const int n = static_cast<int>(sw.corpus->size());
  int n_hold = n >= 2 ? std::max(1, static_cast<int>(std::lround(n * holdout_fraction)))
                      : 0;
  if (n >= 2 && n_hold >= n) n_hold = n - 1;
  for (int i = 0; i < n; ++i) {
    std::vector<ScenarioWindow> w = segment_log((*sw.corpus)[static_cast<size_t>(i)], i);
    auto& dst = (n >= 2 && i >= n - n_hold) ? sw.holdout : sw.train;
    for (auto& win : w) dst.push_back(std::move(win));
  }
  if (n == 1) sw.holdout = sw.train;  // single-scene smoke runs reuse the scene
  if (sw.train.empty())
    throw ValidationError("corpus produced no training windows (logs too short?)");
  if (sw.holdout.empty())
    throw ValidationError("corpus produced no held-out windows");
  return sw;
}

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::string zero_pad(int v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%0*d", width, v);
  return buf;
}

DiffusionModel load_diffusion(const RunConfig& cfg, const std::string& path) {
  require_file(path, "diffusion checkpoint");
  DiffusionModel model(cfg.model);
  const nlohmann::json meta = scengen::nn::load_checkpoint(model.params, path);
  if (!meta.contains("model") || meta.at("model") != "diffusion")
    throw ValidationError("checkpoint is not a diffusion model: " + path);
  return model;
}

void load_qnet(QNetwork& q, const std::string& path) {
  require_file(path, "Q checkpoint");
  const nlohmann::json meta = scengen::nn::load_checkpoint(q.params, path);
  if (!meta.contains("model") || meta.at("model") != "qnet")
    throw ValidationError("checkpoint is not a Q network: " + path);
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << "stage,epoch,recon,kl,noise,pcoll,total\n";
  for (const auto& r : rows)
    out << r.stage << "," << r.epoch << "," << fmt_g(r.recon) << "," << fmt_g(r.kl)
        << "," << fmt_g(r.noise) << "," << fmt_g(r.pcoll) << "," << fmt_g(r.total)
        << "\n";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void cmd_synth_data(const RunConfig& cfg, const std::string& out_dir) {
  ensure_dir(out_dir + "/scenes");
  int skipped = 0;
  const std::vector<Scenario> scenes = synth_generate(cfg.data, cfg.seed, &skipped);
  for (size_t i = 0; i < scenes.size(); ++i)
    save_scenario(scenes[i],
                  out_dir + "/scenes/scene_" + zero_pad(static_cast<int>(i), 6) + ".json");
  write_resolved_config(out_dir, cfg);
  std::cout << "wrote " << scenes.size() << " scenes to " << out_dir << "/scenes";
  if (skipped > 0) std::cout << " (" << skipped << " skipped)";
  std::cout << "\n";
}

void cmd_train_diffusion(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir) {
  ensure_dir(out_dir);
  SplitWindows sw = split_windows(data_dir, cfg.eval.holdout_fraction);
  DiffusionModel model(cfg.model);
  Rng init_rng(cfg.seed, "init/diffusion");
  model.init(init_rng);
  const std::vector<TrainLogRow> rows =
      train_diffusion(model, sw.train, cfg.train, cfg.seed);
  scengen::nn::save_checkpoint(model.params, out_dir + "/diffusion.ckpt", diffusion_meta(model));
  write_train_log(out_dir + "/train_log.csv", rows);
  write_resolved_config(out_dir, cfg);
  std::cout << "trained on " << sw.train.size() << " windows ("
            << sw.holdout.size() << " held out); final total loss "
            << fmt_g(rows.back().total) << "\n";
}

void cmd_train_reward(const RunConfig& cfg, const std::string& data_dir,
                      const std::string& diffusion_ckpt, const std::string& out_dir) {
  ensure_dir(out_dir);
  SplitWindows sw = split_windows(data_dir, cfg.eval.holdout_fraction);
  const DiffusionModel model = load_diffusion(cfg, diffusion_ckpt);
  Rng init_rng(cfg.seed, "init/qnet");
  QLearner learner(cfg.model.dh, cfg.model.dz, cfg.model.hidden, cfg.guide.q, init_rng);
  ReplayBuffer buffer;
  const std::vector<PretrainRow> rows =
      pretrain_on_logs(learner, model, sw.train, buffer, cfg.seed);
  scengen::nn::save_checkpoint(learner.online.params, out_dir + "/qnet.ckpt",
                  qnet_meta(learner.online));
  std::ofstream log(out_dir + "/pretrain_log.csv", std::ios::binary);
  if (!log) throw ValidationError("cannot write pretrain log");
  log << "epoch,loss\n";
  for (const auto& r : rows) log << r.epoch << "," << fmt_g(r.loss) << "\n";
  write_resolved_config(out_dir, cfg);
  std::cout << "pretrained Q on " << buffer.size() << " experiences; final loss "
            << fmt_g(rows.back().loss) << "\n";
}

void cmd_warmup(const RunConfig& cfg, const std::string& data_dir,
                const std::string& diffusion_ckpt, const std::string& q_ckpt,
                const std::string& out_dir, const std::string& planner_kind,
                int episodes) {
  ensure_dir(out_dir);
  if (episodes < 1) throw ValidationError("warmup: episodes must be >= 1");
  SplitWindows sw = split_windows(data_dir, cfg.eval.holdout_fraction);
  const DiffusionModel model = load_diffusion(cfg, diffusion_ckpt);
  Rng init_rng(cfg.seed, "init/qnet");
  QLearner learner(cfg.model.dh, cfg.model.dz, cfg.model.hidden, cfg.guide.q, init_rng);
  load_qnet(learner.online, q_ckpt);
  learner.target.copy_values_from(learner.online);

  PlannerFactory factory;
  if (planner_kind == "rule") {
    factory = rule_based_factory();
  } else if (planner_kind == "replay") {
    factory = replay_factory();
  } else {
    throw ValidationError("unknown planner '" + planner_kind + "' (rule|replay)");
  }
  ReplayBuffer buffer;
  const std::vector<WarmupRow> rows =
      warmup_adapt(model, learner, buffer, sw.holdout, factory, cfg.guide.scale,
                   episodes, cfg.seed, cfg.sim.episode);
  scengen::nn::save_checkpoint(learner.online.params, out_dir + "/qnet.ckpt",
                  qnet_meta(learner.online));
  std::ofstream log(out_dir + "/warmup_log.csv", std::ios::binary);
  if (!log) throw ValidationError("cannot write warmup log");
  log << "episode,steps,av_collision,reward_sum,loss\n";
  for (const auto& r : rows)
    log << r.episode << "," << r.steps << "," << (r.av_collision ? 1 : 0) << ","
        << fmt_g(r.reward_sum) << "," << fmt_g(r.loss) << "\n";
  write_resolved_config(out_dir, cfg);
  int hits = 0;
  for (const auto& r : rows) hits += r.av_collision ? 1 : 0;
  std::cout << "warm-up: " << hits << "/" << episodes << " AV-collision episodes\n";
}

nlohmann::json sample_set_to_json(const ScenarioWindow& w,
                                  const std::vector<DiffusionModel::SampleResult>& samples) {
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : w.agents)
    agents.push_back({{"id", a.id},
                      {"is_av", a.is_av},
                      {"length", a.geom.length},
                      {"width", a.geom.width},
                      {"wheelbase", a.geom.wheelbase}});
  auto traj_json = [](const std::vector<std::vector<AgentState>>& traj) {
    nlohmann::json t = nlohmann::json::array();
    for (const auto& agent : traj) {
      nlohmann::json row = nlohmann::json::array();
      for (const auto& s : agent) row.push_back({s.x, s.y, s.heading, s.speed});
      t.push_back(std::move(row));
    }
    return t;
  };
  nlohmann::json ss = nlohmann::json::array();
  for (const auto& s : samples) ss.push_back(traj_json(s.traj));
  std::vector<std::vector<AgentState>> gt;
  for (const auto& a : w.agents) gt.push_back(a.future);
  return {{"version", 1},
          {"scene_id", w.scene_id},
          {"window_id", w.window_id},
          {"dt", w.dt},
          {"agents", agents},
          {"samples", ss},
          {"gt", traj_json(gt)}};
}

void cmd_generate(const RunConfig& cfg, const std::string& data_dir,
                  const std::string& diffusion_ckpt, const std::string& q_ckpt,
                  bool guided, int samples, const std::string& out_dir, int workers) {
  ensure_dir(out_dir + "/samples");
  if (samples < 1) throw ValidationError("generate: samples must be >= 1");
  SplitWindows sw = split_windows(data_dir, cfg.eval.holdout_fraction);
  const DiffusionModel model = load_diffusion(cfg, diffusion_ckpt);
  QNetwork qnet(cfg.model.dh, cfg.model.dz, cfg.model.hidden);
  if (guided) {
    if (q_ckpt.empty())
      throw ValidationError("generate: --guided requires --q checkpoint");
    load_qnet(qnet, q_ckpt);
  }
  const int n_windows = static_cast<int>(sw.holdout.size());
  parallel_for(n_windows, workers, [&](int wi) {
    const ScenarioWindow& w = sw.holdout[static_cast<size_t>(wi)];
    const WindowFeatures feats = build_features(w);
    std::vector<DiffusionModel::SampleResult> results;
    results.reserve(static_cast<size_t>(samples));
    for (int si = 0; si < samples; ++si) {
      Rng rng(cfg.seed, "sample",
              static_cast<uint64_t>(wi) * static_cast<uint64_t>(samples) +
                  static_cast<uint64_t>(si));
      RewardGuide guide(qnet, cfg.guide.scale);
      results.push_back(model.sample_rollout(feats, rng, guided ? &guide : nullptr));
    }
    std::ofstream out(out_dir + "/samples/window_" + zero_pad(wi, 5) + ".json",
                      std::ios::binary);
    if (!out) throw ValidationError("generate: cannot write sample file");
    out << sample_set_to_json(w, results).dump(1) << "\n";
  });
  write_resolved_config(out_dir, cfg);
  std::cout << "generated " << samples << " samples for " << n_windows
            << " windows\n";
}

void cmd_rollout(const RunConfig& cfg, const std::string& data_dir,
                 const std::string& mode_name, const std::string& diffusion_ckpt,
                 const std::string& q_ckpt, const std::string& planner_kind,
                 int episodes, const std::string& out_dir, int workers) {
  ensure_dir(out_dir + "/episodes");
  if (episodes < 1) throw ValidationError("rollout: episodes must be >= 1");
  GenMode mode;
  if (mode_name == "replay") {
    mode = GenMode::kReplay;
  } else if (mode_name == "diffusion") {
    mode = GenMode::kDiffusion;
  } else if (mode_name == "guided") {
    mode = GenMode::kGuided;
  } else {
    throw ValidationError("unknown mode '" + mode_name + "' (replay|diffusion|guided)");
  }
  SplitWindows sw = split_windows(data_dir, cfg.eval.holdout_fraction);

  std::unique_ptr<DiffusionModel> model;
  if (mode != GenMode::kReplay)
    model = std::make_unique<DiffusionModel>(load_diffusion(cfg, diffusion_ckpt));
  std::unique_ptr<QNetwork> qnet;
  if (mode == GenMode::kGuided) {
    qnet = std::make_unique<QNetwork>(cfg.model.dh, cfg.model.dz, cfg.model.hidden);
    load_qnet(*qnet, q_ckpt);
  }
  PlannerFactory factory;
  if (planner_kind == "rule") {
    factory = rule_based_factory();
  } else if (planner_kind == "replay") {
    factory = replay_factory();
  } else {
    throw ValidationError("unknown planner '" + planner_kind + "' (rule|replay)");
  }

  parallel_for(episodes, workers, [&](int e) {
    const ScenarioWindow& w = sw.holdout[static_cast<size_t>(e) % sw.holdout.size()];
    Rng rng(cfg.seed, "episode", static_cast<uint64_t>(e));
    std::unique_ptr<Planner> planner = factory(w);
    std::unique_ptr<RewardGuide> guide;
    if (mode == GenMode::kGuided)
      guide = std::make_unique<RewardGuide>(*qnet, cfg.guide.scale);
    EpisodeLog log = run_episode(w, *planner, model.get(), mode, guide.get(),
                                 cfg.sim.episode, rng);
    save_episode(out_dir + "/episodes/episode_" + zero_pad(e, 5) + ".json", log);
  });
  write_resolved_config(out_dir, cfg);
  std::cout << "rolled out " << episodes << " episodes in " << mode_name
            << " mode\n";
}

void eval_episode_dir(const std::string& dir, std::vector<MetricRow>& rows) {
  const std::vector<std::string> files = sorted_json_files(dir + "/episodes");
  if (files.empty())
    throw ValidationError("no episode logs under " + dir + "/episodes");
  std::vector<EpisodeLog> logs;
  logs.reserve(files.size());
  for (const auto& f : files) logs.push_back(load_episode(f));
  const std::string tag = fs::path(dir).filename().string();

  const CollisionRates cr = collision_rates(logs);
  rows.push_back({tag, "av_cr", cr.av_cr});
  rows.push_back({tag, "veh_cr", cr.veh_cr});
  rows.push_back({tag, "env_cr", cr.env_cr});

  double acc_sum = 0.0, jerk_sum = 0.0;
  int comfort_n = 0;
  for (const auto& log : logs) {
    int av = -1;
    for (size_t i = 0; i < log.is_av.size(); ++i)
      if (log.is_av[i]) av = static_cast<int>(i);
    if (av < 0 || log.states.size() < 3) continue;
    std::vector<double> speeds;
    for (const auto& row : log.states) speeds.push_back(row[static_cast<size_t>(av)].speed);
    const ComfortStats c = comfort(speeds, log.dt);
    acc_sum += c.mean_abs_accel;
    jerk_sum += c.mean_abs_jerk;
    ++comfort_n;
  }
  if (comfort_n > 0) {
    rows.push_back({tag, "comfort_accel", acc_sum / comfort_n});
    rows.push_back({tag, "comfort_jerk", jerk_sum / comfort_n});
  }
  if (const auto cv = collision_velocity(logs))
    rows.push_back({tag, "coll_vel", *cv});
}

void eval_sample_dir(const std::string& dir, std::vector<MetricRow>& rows) {
  const std::vector<std::string> files = sorted_json_files(dir + "/samples");
  if (files.empty())
    throw ValidationError("no sample sets under " + dir + "/samples");
  const std::string tag = fs::path(dir).filename().string();

  Histogram vel_gen{HistogramSpec::velocity()}, vel_gt{HistogramSpec::velocity()};
  Histogram acc_gen{HistogramSpec::acceleration()}, acc_gt{HistogramSpec::acceleration()};
  Histogram ttc_gen{HistogramSpec::ttc()}, ttc_gt{HistogramSpec::ttc()};
  double fdd_sum = 0.0, sfde_sum = 0.0, bv_cr_sum = 0.0;
  int fdd_n = 0;

  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bad sample file " + f + ": " + e.what());
    }
    const double dt = j.at("dt").get<double>();
    std::vector<VehicleGeometry> geoms;
    std::vector<bool> is_av;
    for (const auto& a : j.at("agents")) {
      geoms.push_back({a.at("length").get<double>(), a.at("width").get<double>(),
                       a.at("wheelbase").get<double>()});
      is_av.push_back(a.at("is_av").get<bool>());
    }
    auto parse_traj = [](const nlohmann::json& t) {
      std::vector<std::vector<AgentState>> traj;
      for (const auto& agent : t) {
        std::vector<AgentState> row;
        for (const auto& s : agent)
          row.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>(),
                         s[3].get<double>()});
        traj.push_back(std::move(row));
      }
      return traj;
    };
    SampleSet ss;
    for (const auto& s : j.at("samples")) ss.samples.push_back(parse_traj(s));
    ss.gt = parse_traj(j.at("gt"));

    if (ss.samples.size() >= 2) {
      fdd_sum += fdd(ss);
      ++fdd_n;
    }
    sfde_sum += min_sfde(ss);
    bv_cr_sum += sample_bv_collision_rate(ss.samples, geoms, is_av);

    for (const auto& sample : ss.samples)
      for (const auto& traj : sample) add_motion_stats(vel_gen, acc_gen, traj, dt);
    for (const auto& traj : ss.gt) add_motion_stats(vel_gt, acc_gt, traj, dt);
    const size_t horizon = ss.gt.front().size();
    for (size_t t = 0; t < horizon; ++t) {
      std::vector<AgentState> slice_gt;
      for (const auto& traj : ss.gt) slice_gt.push_back(traj[t]);
      add_ttc_stats(ttc_gt, slice_gt, geoms);
      for (const auto& sample : ss.samples) {
        std::vector<AgentState> slice;
        for (const auto& traj : sample) slice.push_back(traj[t]);
        add_ttc_stats(ttc_gen, slice, geoms);
      }
    }
  }

  const double n_files = static_cast<double>(files.size());
  if (fdd_n > 0) rows.push_back({tag, "fdd", fdd_sum / fdd_n});
  rows.push_back({tag, "min_sfde", sfde_sum / n_files});
  rows.push_back({tag, "bv_bv_sample_cr", bv_cr_sum / n_files});
  rows.push_back({tag, "jsd_velocity", jsd(vel_gen, vel_gt)});
  rows.push_back({tag, "jsd_acceleration", jsd(acc_gen, acc_gt)});
  rows.push_back({tag, "jsd_ttc", jsd(ttc_gen, ttc_gt)});
}

void cmd_eval(const RunConfig& cfg, const std::vector<std::string>& episode_dirs,
              const std::vector<std::string>& sample_dirs, const std::string& out_dir) {
  if (episode_dirs.empty() && sample_dirs.empty())
    throw ValidationError("eval: need at least one --episodes or --samples dir");
  ensure_dir(out_dir);
  std::vector<MetricRow> rows;
  for (const auto& d : episode_dirs) eval_episode_dir(d, rows);
  for (const auto& d : sample_dirs) eval_sample_dir(d, rows);
  write_metrics_csv(out_dir + "/metrics.csv", rows);
  write_metrics_json(out_dir + "/metrics.json", rows);
  write_resolved_config(out_dir, cfg);
  std::cout << "wrote " << rows.size() << " metric rows to " << out_dir << "\n";
}

void cmd_report(const std::string& metrics_path, const std::string& out_path) {
  require_file(metrics_path, "metrics JSON");
  std::ifstream in(metrics_path, std::ios::binary);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad metrics JSON: ") + e.what());
  }
  std::vector<MetricRow> rows;
  for (const auto& [exp, metrics] : j.items())
    for (const auto& [metric, value] : metrics.items())
      rows.push_back({exp, metric, value.get<double>()});
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + out_path);
  out << metrics_markdown(rows);
  std::cout << "wrote report to " << out_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"guided-diffusion traffic scenario generator"};
  app.require_subcommand(1);

  CommonOpts common;

  // synth-data
  auto* sd = app.add_subcommand("synth-data", "generate a synthetic log corpus");
  std::string sd_out;
  add_common(sd, common);
  sd->add_option("--out", sd_out, "output directory")->required();
  sd->callback([&] { cmd_synth_data(resolve_config(common), sd_out); });

  // train-diffusion
  auto* td = app.add_subcommand("train-diffusion", "train the trajectory model");
  std::string td_data, td_out;
  add_common(td, common);
  td->add_option("--data", td_data, "scenario corpus directory")->required();
  td->add_option("--out", td_out, "output directory")->required();
  td->callback([&] { cmd_train_diffusion(resolve_config(common), td_data, td_out); });

  // train-reward
  auto* tr = app.add_subcommand("train-reward", "pretrain the Q reward model");
  std::string tr_data, tr_diff, tr_out;
  add_common(tr, common);
  tr->add_option("--data", tr_data, "scenario corpus directory")->required();
  tr->add_option("--diffusion", tr_diff, "diffusion checkpoint")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->callback([&] {
    cmd_train_reward(resolve_config(common), tr_data, tr_diff, tr_out);
  });

  // warmup
  auto* wu = app.add_subcommand("warmup", "adapt the Q model in closed loop");
  std::string wu_data, wu_diff, wu_q, wu_out, wu_planner = "rule";
  int wu_episodes = 90;
  add_common(wu, common);
  wu->add_option("--data", wu_data, "scenario corpus directory")->required();
  wu->add_option("--diffusion", wu_diff, "diffusion checkpoint")->required();
  wu->add_option("--q", wu_q, "pretrained Q checkpoint")->required();
  wu->add_option("--out", wu_out, "output directory")->required();
  wu->add_option("--planner", wu_planner, "rule|replay");
  wu->add_option("--episodes", wu_episodes, "warm-up episode count");
  wu->callback([&] {
    cmd_warmup(resolve_config(common), wu_data, wu_diff, wu_q, wu_out, wu_planner,
               wu_episodes);
  });

  // generate
  auto* ge = app.add_subcommand("generate", "sample joint futures per window");
  std::string ge_data, ge_diff, ge_q, ge_out;
  bool ge_guided = false;
  int ge_samples = -1, ge_workers = 1;
  add_common(ge, common);
  ge->add_option("--data", ge_data, "scenario corpus directory")->required();
  ge->add_option("--diffusion", ge_diff, "diffusion checkpoint")->required();
  ge->add_option("--q", ge_q, "Q checkpoint (for --guided)");
  ge->add_flag("--guided", ge_guided, "steer sampling with the Q guide");
  ge->add_option("--samples", ge_samples, "samples per window");
  ge->add_option("--workers", ge_workers, "parallel workers");
  ge->add_option("--out", ge_out, "output directory")->required();
  ge->callback([&] {
    RunConfig cfg = resolve_config(common);
    const int n = ge_samples > 0 ? ge_samples : cfg.eval.samples_per_window;
    cmd_generate(cfg, ge_data, ge_diff, ge_q, ge_guided, n, ge_out, ge_workers);
  });

  // rollout
  auto* ro = app.add_subcommand("rollout", "run closed-loop episodes");
  std::string ro_data, ro_mode, ro_diff, ro_q, ro_out, ro_planner = "rule";
  int ro_episodes = -1, ro_workers = 1;
  add_common(ro, common);
  ro->add_option("--data", ro_data, "scenario corpus directory")->required();
  ro->add_option("--mode", ro_mode, "replay|diffusion|guided")->required();
  ro->add_option("--diffusion", ro_diff, "diffusion checkpoint");
  ro->add_option("--q", ro_q, "Q checkpoint (guided mode)");
  ro->add_option("--planner", ro_planner, "rule|replay");
  ro->add_option("--episodes", ro_episodes, "episode count");
  ro->add_option("--workers", ro_workers, "parallel workers");
  ro->add_option("--out", ro_out, "output directory")->required();
  ro->callback([&] {
    RunConfig cfg = resolve_config(common);
    const int n = ro_episodes > 0 ? ro_episodes : cfg.eval.episodes;
    cmd_rollout(cfg, ro_data, ro_mode, ro_diff, ro_q, ro_planner, n, ro_out,
                ro_workers);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "compute metrics over runs");
  std::vector<std::string> ev_episodes, ev_samples;
  std::string ev_out;
  add_common(ev, common);
  ev->add_option("--episodes", ev_episodes, "rollout output directory (repeatable)");
  ev->add_option("--samples", ev_samples, "generate output directory (repeatable)");
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->callback([&] {
    cmd_eval(resolve_config(common), ev_episodes, ev_samples, ev_out);
  });

  // report
  auto* rp = app.add_subcommand("report", "render metrics JSON as Markdown");
  std::string rp_metrics, rp_out;
  rp->add_option("--metrics", rp_metrics, "metrics.json from eval")->required();
  rp->add_option("--out", rp_out, "output Markdown path")->required();
  rp->callback([&] { cmd_report(rp_metrics, rp_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
