#ifndef MBRPL_MODEL_LEARNING_HPP
#define MBRPL_MODEL_LEARNING_HPP

#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "mbrpl/agents.hpp"
#include "mbrpl/antenna_env.hpp"
#include "mbrpl/approximators.hpp"
#include "mbrpl/mdp_core.hpp"

namespace mbrpl::model {

using agents::ResidualPolicy;
using agents::SacAgent;
using mdp::Batch;
using mdp::ReplayBuffer;

struct ModelConfig {
  std::vector<int> hidden{64, 64, 64};
  double lr = 1e-3;
  int loss_samples = 10;
  double log_var_min = -20.0;
  double log_var_max = 2.0;
};

/// Diagonal Gaussian next-state model. Internally works on states scaled to
/// the unit box, s_n = (s - s_min) / (s_max - s_min); the network predicts the
/// change of s_n and a log-variance in that space.
class GaussianDynamicsModel {
 public:
  struct Prediction {
    nn::Mlp::Cache cache;
    Mat mean_n;       // d x n, normalised
    Mat log_var_n;    // d x n, clamped
    Mat clamp_mask;   // 1 where log_var was inside the bounds
  };

  GaussianDynamicsModel(int state_dim, int action_dim, Vec s_min, Vec s_max, ModelConfig cfg,
                        std::uint64_t seed)
      : d_(state_dim), k_(action_dim), s_min_(std::move(s_min)), s_max_(std::move(s_max)),
        cfg_(std::move(cfg)) {
    if (s_min_.size() != d_ || s_max_.size() != d_)
      throw ConfigError("GaussianDynamicsModel: bound dimension mismatch");
    if (!((s_max_ - s_min_).array() > 0.0).all())
      throw ConfigError("GaussianDynamicsModel: s_max must exceed s_min elementwise");
    if (cfg_.loss_samples < 1) throw ConfigError("GaussianDynamicsModel: loss_samples must be >= 1");
    range_ = s_max_ - s_min_;
    Rng init(seed);
    std::vector<int> sizes{d_ + k_};
    sizes.insert(sizes.end(), cfg_.hidden.begin(), cfg_.hidden.end());
    sizes.push_back(2 * d_);
    net_ = nn::Mlp(sizes, init);
    opt_ = nn::Adam(net_.n_params(), cfg_.lr);
  }

  int state_dim() const { return d_; }
  int action_dim() const { return k_; }
  const Vec& s_min() const { return s_min_; }
  const Vec& s_max() const { return s_max_; }
  const Vec& range() const { return range_; }
  const ModelConfig& config() const { return cfg_; }
  const nn::Mlp& network() const { return net_; }
  nn::Mlp& mutable_network() { return net_; }
  nn::Adam& optimizer() { return opt_; }

  /// Every forward evaluation (training or generation) counts as one call.
  std::uint64_t call_count() const { return calls_; }

  Mat normalize(const Mat& states) const {
    return (states.colwise() - s_min_).array().colwise() / range_.array();
  }
  Mat denormalize(const Mat& states_n) const {
    return (states_n.array().colwise() * range_.array()).matrix().colwise() + s_min_;
  }

  Prediction predict(const Mat& states, const Mat& actions, bool keep_cache = false) const {
    if (states.rows() != d_ || actions.rows() != k_ || states.cols() != actions.cols())
      throw ConfigError("GaussianDynamicsModel::predict: dimension mismatch");
    ++calls_;
    Prediction p;
    const Mat s_n = normalize(states);
    Mat in(d_ + k_, states.cols());
    in << s_n, actions;
    const Mat out = net_.forward(in, keep_cache ? &p.cache : nullptr);
    p.mean_n = s_n + out.topRows(d_);
    const Mat raw = out.bottomRows(d_);
    p.log_var_n = raw.cwiseMax(cfg_.log_var_min).cwiseMin(cfg_.log_var_max);
    p.clamp_mask =
        ((raw.array() >= cfg_.log_var_min) && (raw.array() <= cfg_.log_var_max)).cast<double>().matrix();
    return p;
  }

  /// Predicted mean next state in raw units.
  Mat mean(const Mat& states, const Mat& actions) const {
    return denormalize(predict(states, actions).mean_n);
  }

  /// One draw per column, clipped to [s_min, s_max].
  Mat sample(const Mat& states, const Mat& actions, Rng& rng) const {
    const auto p = predict(states, actions);
    const Mat eps = standard_normal(rng, d_, states.cols());
    const Mat s_n = p.mean_n + (0.5 * p.log_var_n.array()).exp().matrix().cwiseProduct(eps);
    const Mat s = denormalize(s_n);
    return s.cwiseMax(s_min_.replicate(1, s.cols())).cwiseMin(s_max_.replicate(1, s.cols()));
  }

 private:
  int d_, k_;
  Vec s_min_, s_max_, range_;
  ModelConfig cfg_;
  nn::Mlp net_;
  nn::Adam opt_;
  mutable std::uint64_t calls_ = 0;
};

/// Standard-normal noise for the loss: one d x n matrix per sample.
inline std::vector<Mat> draw_loss_noise(const GaussianDynamicsModel& m, Eigen::Index n, Rng& rng) {
  std::vector<Mat> noise;
  for (int j = 0; j < m.config().loss_samples; ++j) noise.push_back(standard_normal(rng, m.state_dim(), n));
  return noise;
}

/// L = 1/(B d) sum || s_true / range - mean_j(s_gen_j) / range ||^2 with
/// s_gen_j = mu + sigma * eps_j reparameterised; adds dL/dparams to grad.
inline double model_loss(const GaussianDynamicsModel& m, const Mat& states, const Mat& actions,
                         const Mat& next_states, const std::vector<Mat>& noise, Vec* grad) {
  if (noise.empty()) throw ConfigError("model_loss: no noise samples");
  const auto p = m.predict(states, actions, grad != nullptr);
  const Mat sigma = (0.5 * p.log_var_n.array()).exp().matrix();
  Mat eps_bar = Mat::Zero(sigma.rows(), sigma.cols());
  for (const auto& e : noise) eps_bar += e;
  eps_bar /= static_cast<double>(noise.size());
  const Mat gen_bar_n = p.mean_n + sigma.cwiseProduct(eps_bar);
  const Mat target_n = m.normalize(next_states);
  const Mat diff = target_n - gen_bar_n;
  const double scale = 1.0 / static_cast<double>(states.cols() * m.state_dim());
  const double loss = diff.squaredNorm() * scale;
  if (!std::isfinite(loss)) throw NumericalError("model_loss: non-finite loss");
  if (grad) {
    const Mat d_gen = -2.0 * scale * diff;
    const Mat d_log_var =
        d_gen.cwiseProduct(eps_bar).cwiseProduct(0.5 * sigma).cwiseProduct(p.clamp_mask);
    Mat d_out(2 * m.state_dim(), states.cols());
    d_out << d_gen, d_log_var;
    m.network().backward(p.cache, d_out, *grad);
  }
  return loss;
}

inline double model_loss(const GaussianDynamicsModel& m, const Batch& b, Rng& rng, Vec* grad) {
  return model_loss(m, b.states, b.actions, b.next_states, draw_loss_noise(m, b.size(), rng), grad);
}

/// One Adam step on the loss over a fresh buffer batch.
inline double model_train_step(GaussianDynamicsModel& m, const Batch& b, Rng& rng) {
  Vec grad = Vec::Zero(m.network().n_params());
  const double loss = model_loss(m, b, rng, &grad);
  m.optimizer().step(m.mutable_network().params(), grad, "dynamics_model");
  return loss;
}

inline double model_train_step(GaussianDynamicsModel& m, const ReplayBuffer& buf,
                               std::size_t batch_size, Rng& rng) {
  return model_train_step(m, buf.sample_batch(batch_size, rng), rng);
}

/// One-step prediction error of the mean in normalised units (root mean square over all entries).
inline double normalized_rmse(const GaussianDynamicsModel& m, const Batch& b) {
  const Mat diff = m.normalize(m.mean(b.states, b.actions)) - m.normalize(b.next_states);
  return std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
}

// --- Rollout policy learning -------------------------------------------------

using RewardFn = std::function<double(const Vec& s, const Vec& a, const Vec& s_next)>;

/// Reward function of the antenna environment in rollout form.
inline RewardFn antenna_reward() {
  return [](const Vec&, const Vec&, const Vec& s_next) { return env::reward_from_next_state(s_next); };
}

struct RolloutConfig {
  int horizon = 10;
  int batch = 128;
};

struct RolloutReport {
  int sac_updates = 0;
  long transitions_used = 0;  // real + generated samples consumed by SAC updates
  long generated = 0;
  bool truncated = false;
  double critic_loss = 0.0;  // averaged over updates
  double actor_loss = std::numeric_limits<double>::quiet_NaN();
  double alpha = 0.0;
};

/// One real batch followed by horizon-1 model-generated batches, one SAC update
/// each. Without a model the horizon collapses to 1.
inline RolloutReport rollout_policy_learning_step(const GaussianDynamicsModel* model,
                                                  ResidualPolicy& policy, const ReplayBuffer& buf,
                                                  const RolloutConfig& cfg, const RewardFn& reward,
                                                  Rng& rng, std::ostream* diag = nullptr) {
  if (cfg.horizon < 1 || cfg.batch < 1) throw ConfigError("rollout: horizon and batch must be >= 1");
  const int horizon = model ? cfg.horizon : 1;
  RolloutReport rep;
  Batch b = buf.sample_batch(static_cast<std::size_t>(cfg.batch), rng);
  double actor_sum = 0.0;
  int actor_n = 0;
  for (int tau = 0; tau < horizon; ++tau) {
    if (tau > 0) {
      Batch g;
      g.states = b.next_states;
      g.actions = policy.act_batch(g.states, rng);
      g.next_states = model->sample(g.states, g.actions, rng);
      if (!all_finite(g.next_states)) {
        rep.truncated = true;
        if (diag) *diag << "rollout truncated at tau=" << tau << ": non-finite model state\n";
        break;
      }
      g.rewards.resize(g.states.cols());
      for (Eigen::Index j = 0; j < g.states.cols(); ++j)
        g.rewards(j) = reward(g.states.col(j), g.actions.col(j), g.next_states.col(j));
      g.dones = Vec::Zero(g.states.cols());
      rep.generated += g.size();
      b = std::move(g);
    }
    const auto losses = policy.update(b);
    ++rep.sac_updates;
    rep.transitions_used += b.size();
    rep.critic_loss += 0.5 * (losses.critic1 + losses.critic2);
    rep.alpha = losses.alpha;
    if (losses.actor_updated) {
      actor_sum += losses.actor;
      ++actor_n;
    }
  }
  rep.critic_loss /= rep.sac_updates;
  if (actor_n) rep.actor_loss = actor_sum / actor_n;
  return rep;
}

// --- Training loop -------------------------------------------------------------

enum class Method { Sac, Dqn, Srpl, Mbsac, Mbrpl };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::Sac: return "sac";
    case Method::Dqn: return "dqn";
    case Method::Srpl: return "srpl";
    case Method::Mbsac: return "mbsac";
    case Method::Mbrpl: return "mbrpl";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::Sac, Method::Dqn, Method::Srpl, Method::Mbsac, Method::Mbrpl})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "' (expected sac, dqn, srpl, mbsac or mbrpl)");
}

inline bool uses_baseline(Method m) { return m == Method::Srpl || m == Method::Mbrpl; }
inline bool uses_model(Method m) { return m == Method::Mbsac || m == Method::Mbrpl; }

struct TrainConfig {
  Method method = Method::Mbrpl;
  long total_steps = 10000;
  long learning_starts = 100;
  std::size_t buffer_capacity = 10000;
  int batch = 128;
  int model_batch = 128;
  int horizon = 10;
  long cbi_steps = 0;
  double init_sigma0 = 0.1;
  agents::SacConfig sac;
  agents::DqnConfig dqn;
  ModelConfig model;
  std::string checkpoint_dir;  // empty: no checkpoints
  long checkpoint_every = 500;

  void validate() const {
    if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
    if (learning_starts < 0) throw ConfigError("learning_starts must be >= 0");
    if (buffer_capacity < 1) throw ConfigError("buffer_capacity must be >= 1");
    if (batch < 1 || model_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (cbi_steps < 0) throw ConfigError("cbi_steps must be >= 0");
    if (!(init_sigma0 > 0)) throw ConfigError("init_sigma0 must be positive");
    if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  }
};

/// One row of the training log. `reward` is the mean per-antenna reward of the step.
struct StepRecord {
  long step = 0;
  long episode = 0;
  double reward = 0.0;
  double running_avg100 = 0.0;
  double avg5 = 0.0;
  double model_loss = std::numeric_limits<double>::quiet_NaN();
  double critic_loss = std::numeric_limits<double>::quiet_NaN();
  double actor_loss = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
};

inline void write_train_log_header(std::ostream& os) {
  os << "step,episode,reward,env_reward_running_avg,reward_avg5,model_loss,critic_loss,actor_loss,"
        "alpha\n";
}

inline void write_train_log_row(std::ostream& os, const StepRecord& r) {
  os << r.step << ',' << r.episode << ',' << r.reward << ',' << r.running_avg100 << ',' << r.avg5
     << ',' << r.model_loss << ',' << r.critic_loss << ',' << r.actor_loss << ',' << r.alpha << '\n';
}

struct TrainResult {
  std::vector<StepRecord> log;
  std::uint64_t model_calls = 0;
  std::uint64_t baseline_queries = 0;  // queries made after initialisation
  std::uint64_t insert_count = 0;
  std::vector<mdp::Transition> real_transitions;  // only filled when requested
  nn::Mlp final_actor;
};

/// Per-step hooks for tests: actions emitted, and the policy in effect.
struct TrainHooks {
  std::function<void(long step, const std::vector<Vec>& states, const std::vector<Vec>& actions,
                     const ResidualPolicy&)>
      on_act;
  bool record_transitions = false;
};

/// Trailing-window mean.
class RunningMean {
 public:
  explicit RunningMean(std::size_t window) : window_(window) {}
  double push(double v) {
    buf_.push_back(v);
    sum_ += v;
    if (buf_.size() > window_) {
      sum_ -= buf_.front();
      buf_.pop_front();
    }
    return sum_ / static_cast<double>(buf_.size());
  }

 private:
  std::size_t window_;
  std::deque<double> buf_;
  double sum_ = 0.0;
};

namespace detail {

inline void save_actor(const std::string& dir, const std::string& name, const nn::Mlp& actor) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  actor.save_file((std::filesystem::path(dir) / name).string());
}

inline TrainResult train_dqn(env::AntennaEnv& environment, const TrainConfig& cfg, std::uint64_t seed,
                             const TrainHooks& hooks) {
  agents::DqnAgent agent(env::kObsDim, cfg.dqn, derive_seed(seed, 11));
  ReplayBuffer buf(cfg.buffer_capacity);
  Rng act_rng(derive_seed(seed, 12)), sample_rng(derive_seed(seed, 13));
  RunningMean r100(100), r5(5);
  TrainResult res;
  auto states = environment.observations();
  long episode = 0;
  for (long t = 1; t <= cfg.total_steps; ++t) {
    std::vector<double> deltas;
    for (const auto& s : states) deltas.push_back(agents::DqnAgent::kActions[agent.act(s, t - 1, act_rng)]);
    auto ts = environment.step(deltas);
    StepRecord rec;
    rec.step = t;
    rec.episode = episode;
    for (auto& tr : ts) {
      rec.reward += tr.reward / static_cast<double>(ts.size());
      if (hooks.record_transitions) res.real_transitions.push_back(tr);
      buf.push(tr);
    }
    if (t > cfg.learning_starts) rec.critic_loss = agent.update(buf.sample_batch(cfg.batch, sample_rng));
    rec.running_avg100 = r100.push(rec.reward);
    rec.avg5 = r5.push(rec.reward);
    res.log.push_back(rec);
    if (ts.front().done) {
      states = environment.begin_episode();
      ++episode;
    } else {
      states = environment.observations();
    }
  }
  res.insert_count = buf.insert_count();
  return res;
}

}  // namespace detail

/// Seed of the stream that draws every environment action of a policy-gradient run.
inline std::uint64_t action_stream_seed(std::uint64_t seed) { return derive_seed(seed, 24); }

/// Runs one seed of the chosen method on `environment` (already reset).
/// Baselines are ignored by methods that do not use one.
inline TrainResult train(env::AntennaEnv& environment, const TrainConfig& cfg,
                         std::shared_ptr<const agents::BaselinePolicy> baseline, std::uint64_t seed,
                         const TrainHooks& hooks = {}, std::ostream* diag = nullptr) {
  cfg.validate();
  if (environment.n_agents() == 0) throw ConfigError("train: environment was not reset");
  if (cfg.method == Method::Dqn) return detail::train_dqn(environment, cfg, seed, hooks);
  if (uses_baseline(cfg.method) && !baseline)
    throw ConfigError("method " + to_string(cfg.method) + " requires a baseline policy");
  if (!uses_baseline(cfg.method)) baseline.reset();
  const std::uint64_t queries_at_init = baseline ? baseline->query_count() : 0;

  SacAgent agent(env::kObsDim, env::kActDim, cfg.sac, derive_seed(seed, 21));
  if (baseline) {
    Rng init(derive_seed(seed, 22));
    agents::init_near_zero(agent.mutable_actor(), init, cfg.init_sigma0);
  }
  ResidualPolicy policy(agent, baseline, baseline ? cfg.cbi_steps : 0);
  GaussianDynamicsModel model(env::kObsDim, env::kActDim, environment.state_min(),
                              environment.state_max(), cfg.model, derive_seed(seed, 23));
  const bool with_model = uses_model(cfg.method);
  ReplayBuffer buf(cfg.buffer_capacity);
  Rng act_rng(action_stream_seed(seed)), model_rng(derive_seed(seed, 25)), roll_rng(derive_seed(seed, 26));
  const RolloutConfig rc{cfg.horizon, cfg.batch};
  const RewardFn reward = antenna_reward();
  RunningMean r100(100), r5(5);
  TrainResult res;
  auto states = environment.observations();
  long episode = 0;
  try {
    for (long t = 1; t <= cfg.total_steps; ++t) {
      std::vector<Vec> actions;
      std::vector<double> deltas;
      for (const auto& s : states) {
        actions.push_back(policy.act(s, act_rng).action);
        deltas.push_back(actions.back()(0) * env::kMaxDeltaTiltDeg);
      }
      if (hooks.on_act) hooks.on_act(t, states, actions, policy);
      auto ts = environment.step(deltas);
      policy.observe_env_steps(1);
      StepRecord rec;
      rec.step = t;
      rec.episode = episode;
      for (auto& tr : ts) {
        rec.reward += tr.reward / static_cast<double>(ts.size());
        if (hooks.record_transitions) res.real_transitions.push_back(tr);
        buf.push(tr);
      }
      if (t > cfg.learning_starts) {
        if (with_model) rec.model_loss = model_train_step(model, buf, cfg.model_batch, model_rng);
        const auto rep =
            rollout_policy_learning_step(with_model ? &model : nullptr, policy, buf, rc, reward, roll_rng, diag);
        rec.critic_loss = rep.critic_loss;
        rec.actor_loss = rep.actor_loss;
        rec.alpha = rep.alpha;
      }
      rec.running_avg100 = r100.push(rec.reward);
      rec.avg5 = r5.push(rec.reward);
      res.log.push_back(rec);
      if (t % cfg.checkpoint_every == 0)
        detail::save_actor(cfg.checkpoint_dir, "actor_step" + std::to_string(t) + ".txt", agent.actor());
      if (ts.front().done) {
        states = environment.begin_episode();
        ++episode;
      } else {
        states = environment.observations();
      }
    }
  } catch (const NumericalError&) {
    detail::save_actor(cfg.checkpoint_dir, "actor_crash.txt", agent.actor());
    throw;
  }
  res.model_calls = model.call_count();
  res.baseline_queries = baseline ? baseline->query_count() - queries_at_init : 0;
  res.insert_count = buf.insert_count();
  res.final_actor = agent.actor();
  return res;
}

}  // namespace mbrpl::model

#endif  // MBRPL_MODEL_LEARNING_HPP
