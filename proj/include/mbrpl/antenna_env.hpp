#ifndef MBRPL_ANTENNA_ENV_HPP
#define MBRPL_ANTENNA_ENV_HPP

#include <array>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "mbrpl/mdp_core.hpp"
#include "mbrpl/radio_sim.hpp"

namespace mbrpl::env {

using mdp::Transition;

inline constexpr int kObsDim = 4;  // tilt, cov, cap, qual
inline constexpr int kActDim = 1;  // delta tilt (degrees)
inline constexpr double kMaxDeltaTiltDeg = 1.0;

enum Kpi : int { kCov = 0, kCap = 1, kQual = 2 };

/// Affine KPI standardisation frozen after calibration, with symmetric clipping.
struct KpiNormalizer {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
  double clip_sigmas = 3.0;

  double normalize(int kpi, double value) const {
    const double z = (value - mean[kpi]) / std[kpi];
    return std::clamp(z, -clip_sigmas, clip_sigmas);
  }

  /// Fits mean/std from raw samples, one vector per KPI.
  static KpiNormalizer fit(const std::array<std::vector<double>, 3>& samples, double clip_sigmas) {
    KpiNormalizer n;
    n.clip_sigmas = clip_sigmas;
    for (int k = 0; k < 3; ++k) {
      const auto& xs = samples[k];
      if (xs.size() < 2) throw ConfigError("KpiNormalizer::fit: too few samples");
      double m = 0.0;
      for (double x : xs) m += x;
      m /= static_cast<double>(xs.size());
      double v = 0.0;
      for (double x : xs) v += (x - m) * (x - m);
      const double s = std::sqrt(v / static_cast<double>(xs.size() - 1));
      if (!(s >= 1e-9))
        throw ConfigError("KpiNormalizer::fit: degenerate standard deviation for KPI " +
                          std::to_string(k));
      n.mean[k] = m;
      n.std[k] = s;
    }
    return n;
  }
};

struct EnvConfig {
  int n_rings = 1;
  int n_users = 1000;
  int building_count = 40;
  bool buildings_enabled = true;
  int episode_length = 500;
  int calibration_samples = 200;
  double clip_sigmas = 3.0;
  radio::PropagationConfig propagation;
  radio::LayoutOptions layout;

  void validate() const {
    if (episode_length <= 0) throw ConfigError("EnvConfig: episode_length must be positive");
    if (n_rings < 0 || n_users < 0 || building_count < 0)
      throw ConfigError("EnvConfig: negative size parameter");
    if (calibration_samples < 100)
      throw ConfigError("EnvConfig: calibration_samples must be >= 100");
    if (!(clip_sigmas > 0)) throw ConfigError("EnvConfig: clip_sigmas must be positive");
    propagation.validate();
  }
};

/// Raw KPI samples from random-tilt network evaluations on a fixed link table.
inline std::array<std::vector<double>, 3> collect_kpi_samples(const radio::LinkTable& links,
                                                              int n_samples, Rng& rng,
                                                              const radio::PropagationConfig& pc) {
  std::array<std::vector<double>, 3> samples;
  std::vector<double> tilts(static_cast<std::size_t>(links.n_cells));
  for (int i = 0; i < n_samples; ++i) {
    for (auto& w : tilts) w = uniform(rng, radio::kMinTiltDeg, radio::kMaxTiltDeg);
    for (const auto& k : radio::cell_kpis(links, tilts, pc)) {
      if (k.empty()) continue;
      samples[kCov].push_back(k.cov);
      samples[kCap].push_back(k.cap);
      samples[kQual].push_back(k.qual);
    }
  }
  return samples;
}

/// Estimates KPI statistics from `n_samples` random-tilt network evaluations on
/// the layout generated from `seed`.
inline KpiNormalizer calibrate_normalizer(const EnvConfig& cfg, std::uint64_t seed, int n_samples) {
  if (n_samples < 100) throw ConfigError("calibrate_normalizer: n_samples must be >= 100");
  const auto layout =
      radio::generate_layout(seed, cfg.n_rings, cfg.n_users, cfg.building_count, cfg.layout);
  const auto links = radio::build_link_table(layout, cfg.propagation, cfg.buildings_enabled);
  Rng rng(derive_seed(seed, 0xCA11));
  return KpiNormalizer::fit(collect_kpi_samples(links, n_samples, rng, cfg.propagation),
                            cfg.clip_sigmas);
}

/// Reward of a transition, read off the normalised KPI fields of the next state.
inline double reward_from_next_state(const Vec& next_state) {
  return next_state(1) + next_state(2) + next_state(3);
}

/// Parameter-shared multi-agent antenna tilt environment: one agent per antenna,
/// one Transition per antenna per step.
class AntennaEnv {
 public:
  explicit AntennaEnv(EnvConfig cfg, std::optional<KpiNormalizer> normalizer = std::nullopt)
      : cfg_(std::move(cfg)), fixed_normalizer_(std::move(normalizer)) {
    cfg_.validate();
  }

  const EnvConfig& config() const { return cfg_; }
  const radio::NetworkLayout& layout() const { return layout_; }
  const radio::LinkTable& links() const { return links_; }
  const KpiNormalizer& normalizer() const { return normalizer_; }
  const std::vector<double>& tilts() const { return tilts_; }
  const std::vector<radio::CellKpis>& raw_kpis() const { return kpis_; }
  int n_agents() const { return static_cast<int>(tilts_.size()); }
  int episode_step() const { return episode_step_; }
  std::int64_t global_step() const { return global_step_; }

  /// New world from `seed`: layout, normaliser (unless injected), random tilts.
  std::vector<Vec> reset(std::uint64_t seed) {
    layout_ = radio::generate_layout(seed, cfg_.n_rings, cfg_.n_users, cfg_.building_count,
                                     cfg_.layout);
    links_ = radio::build_link_table(layout_, cfg_.propagation, cfg_.buildings_enabled);
    if (fixed_normalizer_) {
      normalizer_ = *fixed_normalizer_;
    } else {
      Rng cal(derive_seed(seed, 0xCA11));
      normalizer_ = KpiNormalizer::fit(
          collect_kpi_samples(links_, cfg_.calibration_samples, cal, cfg_.propagation),
          cfg_.clip_sigmas);
    }
    tilts_ = radio::tilts_of(layout_);
    tilt_rng_.seed(derive_seed(seed, 0x7117));
    global_step_ = 0;
    episode_step_ = 0;
    refresh();
    return observations();
  }

  /// Starts a new episode on the same world with fresh uniform tilts.
  std::vector<Vec> begin_episode() {
    for (auto& w : tilts_) w = uniform(tilt_rng_, radio::kMinTiltDeg, radio::kMaxTiltDeg);
    episode_step_ = 0;
    refresh();
    return observations();
  }

  /// Restarts the tilt stream from `seed` and begins a new episode.
  std::vector<Vec> reseed_tilts(std::uint64_t seed) {
    tilt_rng_.seed(seed);
    return begin_episode();
  }

  std::vector<Transition> step(std::span<const double> delta_tilts) {
    if (static_cast<int>(delta_tilts.size()) != n_agents())
      throw ConfigError("AntennaEnv::step: expected " + std::to_string(n_agents()) +
                        " actions, got " + std::to_string(delta_tilts.size()));
    auto before = observations();
    std::vector<double> applied(delta_tilts.size());
    for (std::size_t i = 0; i < delta_tilts.size(); ++i) {
      const double dw = std::isfinite(delta_tilts[i])
                            ? std::clamp(delta_tilts[i], -kMaxDeltaTiltDeg, kMaxDeltaTiltDeg)
                            : 0.0;
      applied[i] = dw;
      tilts_[i] = std::clamp(tilts_[i] + dw, radio::kMinTiltDeg, radio::kMaxTiltDeg);
    }
    refresh();
    ++global_step_;
    ++episode_step_;
    auto after = observations();
    const bool done = episode_step_ >= cfg_.episode_length;
    std::vector<Transition> out;
    out.reserve(before.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      Transition t;
      t.state = std::move(before[i]);
      t.action = Vec::Constant(1, applied[i]);
      t.next_state = after[i];
      t.reward = reward_from_next_state(t.next_state);
      t.done = done;
      t.agent_id = static_cast<int>(i);
      t.step = global_step_;
      out.push_back(std::move(t));
    }
    return out;
  }

  /// Observation of one antenna from the current KPIs.
  Vec observation(int i) const {
    Vec o(kObsDim);
    const auto& k = kpis_[static_cast<std::size_t>(i)];
    o(0) = tilts_[static_cast<std::size_t>(i)];
    if (k.empty()) {
      o(1) = o(2) = o(3) = -normalizer_.clip_sigmas;
    } else {
      o(1) = normalizer_.normalize(kCov, k.cov);
      o(2) = normalizer_.normalize(kCap, k.cap);
      o(3) = normalizer_.normalize(kQual, k.qual);
    }
    return o;
  }

  std::vector<Vec> observations() const {
    std::vector<Vec> out;
    for (int i = 0; i < n_agents(); ++i) out.push_back(observation(i));
    return out;
  }

  /// Per-dimension observation bounds (tilt range, normalised KPI clip range).
  Vec state_min() const {
    Vec v(kObsDim);
    v << radio::kMinTiltDeg, -cfg_.clip_sigmas, -cfg_.clip_sigmas, -cfg_.clip_sigmas;
    return v;
  }
  Vec state_max() const {
    Vec v(kObsDim);
    v << radio::kMaxTiltDeg, cfg_.clip_sigmas, cfg_.clip_sigmas, cfg_.clip_sigmas;
    return v;
  }

 private:
  void refresh() { kpis_ = radio::cell_kpis(links_, tilts_, cfg_.propagation); }

  EnvConfig cfg_;
  std::optional<KpiNormalizer> fixed_normalizer_;
  KpiNormalizer normalizer_;
  radio::NetworkLayout layout_;
  radio::LinkTable links_;
  std::vector<double> tilts_;
  std::vector<radio::CellKpis> kpis_;
  Rng tilt_rng_;
  std::int64_t global_step_ = 0;
  int episode_step_ = 0;
};

/// CSV per-step log: step,agent_id,tilt,cov,cap,qual,reward (next-state values).
inline void write_step_log_header(std::ostream& os) {
  os << "step,agent_id,tilt,cov,cap,qual,reward\n";
}

inline void write_step_log(std::ostream& os, std::span<const Transition> ts) {
  for (const auto& t : ts)
    os << t.step << ',' << t.agent_id << ',' << t.next_state(0) << ',' << t.next_state(1) << ','
       << t.next_state(2) << ',' << t.next_state(3) << ',' << t.reward << '\n';
}

}  // namespace mbrpl::env

#endif  // MBRPL_ANTENNA_ENV_HPP
