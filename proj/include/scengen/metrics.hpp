#pragma once

#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "scengen/simulator.hpp"

// Evaluation metrics over sample sets and episode logs: sample diversity and
// accuracy, motion-statistic histogram divergences, collision and offroad
// rates, comfort, and collision severity. All pure functions.

namespace scengen {

// N generated joint futures for one window plus the logged ground truth.
// samples[sample][agent][step]; gt[agent][step].
struct SampleSet {
  std::vector<std::vector<std::vector<AgentState>>> samples;
  std::vector<std::vector<AgentState>> gt;
};

namespace metric_detail {

inline void check_sample_set(const SampleSet& ss, bool need_gt) {
  if (ss.samples.empty()) throw ValidationError("sample set: no samples");
  const size_t n = ss.samples.front().size();
  if (n == 0) throw ValidationError("sample set: no agents");
  for (const auto& s : ss.samples) {
    if (s.size() != n) throw ValidationError("sample set: agent count varies");
    for (const auto& tr : s)
      if (tr.empty()) throw ValidationError("sample set: empty trajectory");
  }
  if (need_gt) {
    if (ss.gt.size() != n)
      throw ValidationError("sample set: ground truth agent count mismatch");
    for (const auto& tr : ss.gt)
      if (tr.empty()) throw ValidationError("sample set: empty ground truth");
  }
}

}  // namespace metric_detail

// Final displacement diversity: per agent, the maximum pairwise distance
// between final positions across samples; meaned over agents.
inline double fdd(const SampleSet& ss) {
  metric_detail::check_sample_set(ss, false);
  if (ss.samples.size() < 2)
    throw ValidationError("fdd: need at least 2 samples");
  const size_t n = ss.samples.front().size();
  double agent_sum = 0.0;
  for (size_t a = 0; a < n; ++a) {
    double best = 0.0;
    for (size_t i = 0; i < ss.samples.size(); ++i)
      for (size_t j = i + 1; j < ss.samples.size(); ++j)
        best = std::max(best, dist(ss.samples[i][a].back().pos(), 
                                  ss.samples[j][a].back().pos()));
    agent_sum += best;
  }
  return agent_sum / static_cast<double>(n);
}

// Scene-level minimum final displacement error: min over samples of the
// mean-over-agents final-position error versus ground truth.
inline double min_sfde(const SampleSet& ss) {
  metric_detail::check_sample_set(ss, true);
  const size_t n = ss.samples.front().size();
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : ss.samples) {
    double err = 0.0;
    for (size_t a = 0; a < n; ++a)
      err += dist(s[a].back().pos(), ss.gt[a].back().pos());
    best = std::min(best, err / static_cast<double>(n));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

struct HistogramSpec {
  std::string quantity;
  double lo = 0.0, hi = 1.0;
  int bins = 1;

  static HistogramSpec velocity() { return {"velocity", 0.0, 25.0, 50}; }
  static HistogramSpec acceleration() { return {"acceleration", -8.0, 8.0, 64}; }
  static HistogramSpec ttc() { return {"ttc", 0.0, 10.0, 40}; }

  bool operator==(const HistogramSpec& o) const {
    return quantity == o.quantity && lo == o.lo && hi == o.hi && bins == o.bins;
  }
};

struct Histogram {
  HistogramSpec spec;
  std::vector<double> counts;

  explicit Histogram(const HistogramSpec& s = {}) : spec(s) {
    if (spec.bins < 1 || !(spec.hi > spec.lo))
      throw ValidationError("Histogram: bad spec");
    counts.assign(static_cast<size_t>(spec.bins), 0.0);
  }

  // Out-of-range values are clipped into the end bins.
  void add(double v, double weight = 1.0) {
    if (!std::isfinite(v)) throw ValidationError("Histogram: non-finite value");
    const double w = (spec.hi - spec.lo) / spec.bins;
    int b = static_cast<int>(std::floor((v - spec.lo) / w));
    b = std::max(0, std::min(spec.bins - 1, b));
    counts[static_cast<size_t>(b)] += weight;
  }

  double mass() const {
    double s = 0.0;
    for (double c : counts) s += c;
    return s;
  }
};

// Jensen-Shannon divergence in nats between two normalized histograms with
// identical specs; bounded by ln 2.
inline double jsd(const Histogram& p, const Histogram& q) {
  if (!(p.spec == q.spec)) throw ValidationError("jsd: histogram specs differ");
  const double mp = p.mass(), mq = q.mass();
  if (!(mp > 0.0) || !(mq > 0.0))
    throw ValidationError("jsd: zero-mass histogram");
  double d = 0.0;
  for (size_t i = 0; i < p.counts.size(); ++i) {
    const double pi = p.counts[i] / mp;
    const double qi = q.counts[i] / mq;
    const double mi = 0.5 * (pi + qi);
    if (pi > 0.0) d += 0.5 * pi * std::log(pi / mi);
    if (qi > 0.0) d += 0.5 * qi * std::log(qi / mi);
  }
  return d;
}

// Accumulates per-step speeds and forward-difference accelerations of one
// trajectory into velocity/acceleration histograms.
inline void add_motion_stats(Histogram& vel, Histogram& acc,
                             const std::vector<AgentState>& traj, double dt) {
  if (dt <= 0.0) throw ValidationError("add_motion_stats: dt must be positive");
  for (const auto& s : traj) vel.add(s.speed);
  for (size_t t = 0; t + 1 < traj.size(); ++t)
    acc.add((traj[t + 1].speed - traj[t].speed) / dt);
}

// Accumulates pairwise TTC values for one time slice. Capped values land in
// the top bin, keeping "no interaction" mass explicit.
inline void add_ttc_stats(Histogram& ttc_hist,
                          const std::vector<AgentState>& states,
                          const std::vector<VehicleGeometry>& geoms,
                          double cap = 10.0) {
  for (size_t i = 0; i < states.size(); ++i)
    for (size_t j = i + 1; j < states.size(); ++j)
      ttc_hist.add(time_to_collision(states[i], geoms[i], states[j], geoms[j], cap));
}

// ---------------------------------------------------------------------------
// Episode-log metrics
// ---------------------------------------------------------------------------

// Percentages. veh_cr: BVs involved in a BV-BV collision over total BVs;
// env_cr: BVs ever offroad over total BVs; av_cr: episodes with an AV
// collision over episodes.
struct CollisionRates {
  double env_cr = 0.0;
  double veh_cr = 0.0;
  double av_cr = 0.0;
};

inline CollisionRates collision_rates(const std::vector<EpisodeLog>& logs) {
  if (logs.empty()) throw ValidationError("collision_rates: no episodes");
  size_t total_bvs = 0, bv_collided = 0, bv_offroad = 0, av_hits = 0;
  for (const auto& log : logs) {
    std::set<int> collided;
    for (const auto& e : log.events) {
      if (e.kind != "bv_bv") continue;
      collided.insert(e.a);
      collided.insert(e.b);
    }
    std::set<int> offroad(log.offroad_agents.begin(), log.offroad_agents.end());
    for (size_t i = 0; i < log.agent_ids.size(); ++i) {
      if (log.is_av[i]) continue;
      ++total_bvs;
      if (collided.count(log.agent_ids[i])) ++bv_collided;
      if (offroad.count(log.agent_ids[i])) ++bv_offroad;
    }
    if (log.av_collision) ++av_hits;
  }
  CollisionRates r;
  if (total_bvs > 0) {
    r.veh_cr = 100.0 * static_cast<double>(bv_collided) / static_cast<double>(total_bvs);
    r.env_cr = 100.0 * static_cast<double>(bv_offroad) / static_cast<double>(total_bvs);
  }
  r.av_cr = 100.0 * static_cast<double>(av_hits) / static_cast<double>(logs.size());
  return r;
}

// Fraction (percent) of BVs involved in at least one BV-BV footprint overlap
// anywhere in a sampled joint future, over all samples.
inline double sample_bv_collision_rate(
    const std::vector<std::vector<std::vector<AgentState>>>& samples,
    const std::vector<VehicleGeometry>& geoms, const std::vector<bool>& is_av) {
  if (samples.empty()) throw ValidationError("sample_bv_collision_rate: no samples");
  size_t total = 0, hit = 0;
  for (const auto& sample : samples) {
    if (sample.size() != geoms.size() || sample.size() != is_av.size())
      throw ValidationError("sample_bv_collision_rate: agent count mismatch");
    std::vector<bool> involved(sample.size(), false);
    const size_t horizon = sample.front().size();
    for (size_t t = 0; t < horizon; ++t) {
      for (size_t i = 0; i < sample.size(); ++i) {
        if (is_av[i]) continue;
        for (size_t j = i + 1; j < sample.size(); ++j) {
          if (is_av[j]) continue;
          if (footprint_distance(sample[i][t], geoms[i], sample[j][t], geoms[j]) <= 0.0) {
            involved[i] = true;
            involved[j] = true;
          }
        }
      }
    }
    for (size_t i = 0; i < sample.size(); ++i) {
      if (is_av[i]) continue;
      ++total;
      if (involved[i]) ++hit;
    }
  }
  if (total == 0) return 0.0;
  return 100.0 * static_cast<double>(hit) / static_cast<double>(total);
}

// Mean |accel| and mean |jerk| of a speed profile: accel by central
// differences, jerk by differences of the accel sequence.
struct ComfortStats {
  double mean_abs_accel = 0.0;
  double mean_abs_jerk = 0.0;
};

inline ComfortStats comfort(const std::vector<double>& speeds, double dt) {
  if (speeds.size() < 3)
    throw ValidationError("comfort: need at least 3 speed samples");
  if (dt <= 0.0) throw ValidationError("comfort: dt must be positive");
  std::vector<double> accel;
  for (size_t t = 1; t + 1 < speeds.size(); ++t)
    accel.push_back((speeds[t + 1] - speeds[t - 1]) / (2.0 * dt));
  double sa = 0.0;
  for (double a : accel) sa += std::fabs(a);
  ComfortStats c;
  c.mean_abs_accel = sa / static_cast<double>(accel.size());
  if (accel.size() >= 2) {
    double sj = 0.0;
    for (size_t t = 1; t < accel.size(); ++t)
      sj += std::fabs((accel[t] - accel[t - 1]) / dt);
    c.mean_abs_jerk = sj / static_cast<double>(accel.size() - 1);
  }
  return c;
}

// Mean relative speed at impact over AV collision events; absent when the
// logs contain none.
inline std::optional<double> collision_velocity(const std::vector<EpisodeLog>& logs) {
  double sum = 0.0;
  size_t count = 0;
  for (const auto& log : logs)
    for (const auto& e : log.events)
      if (e.kind == "av_bv") {
        sum += e.rel_speed;
        ++count;
      }
  if (count == 0) return std::nullopt;
  return sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Report writers
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string experiment;
  std::string metric;
  double value = 0.0;
};

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("write_metrics_csv: cannot open " + path);
  out << "experiment,metric,value\n";
  for (const auto& r : rows)
    out << r.experiment << "," << r.metric << "," << fmt_g(r.value) << "\n";
}

inline nlohmann::json metrics_to_json(const std::vector<MetricRow>& rows) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& r : rows) j[r.experiment][r.metric] = r.value;
  return j;
}

inline void write_metrics_json(const std::string& path,
                               const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("write_metrics_json: cannot open " + path);
  out << metrics_to_json(rows).dump(1) << "\n";
}

// Markdown pivot: experiments as rows, metrics as columns, "-" for absent.
inline std::string metrics_markdown(const std::vector<MetricRow>& rows) {
  std::vector<std::string> experiments, metrics;
  std::map<std::string, std::map<std::string, double>> table;
  for (const auto& r : rows) {
    if (!table.count(r.experiment)) experiments.push_back(r.experiment);
    bool seen = false;
    for (const auto& m : metrics) seen = seen || m == r.metric;
    if (!seen) metrics.push_back(r.metric);
    table[r.experiment][r.metric] = r.value;
  }
  std::ostringstream md;
  md << "| experiment |";
  for (const auto& m : metrics) md << " " << m << " |";
  md << "\n|---|";
  for (size_t i = 0; i < metrics.size(); ++i) md << "---|";
  md << "\n";
  for (const auto& e : experiments) {
    md << "| " << e << " |";
    for (const auto& m : metrics) {
      const auto& row = table[e];
      const auto it = row.find(m);
      if (it == row.end()) {
        md << " - |";
      } else {
        md << " " << fmt_g(it->second) << " |";
      }
    }
    md << "\n";
  }
  return md.str();
}

}  // namespace scengen
