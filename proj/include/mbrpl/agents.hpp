#ifndef MBRPL_AGENTS_HPP
#define MBRPL_AGENTS_HPP

#include <array>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mbrpl/approximators.hpp"
#include "mbrpl/mdp_core.hpp"

namespace mbrpl::agents {

using mdp::Batch;

// --- Baselines ----------------------------------------------------------------

/// Terms a baseline contributes to the composed policy, per sample (k x n).
/// Pre-squash terms shift the correction's Gaussian mean and add to its
/// variance; the post-squash term is added to the squashed correction, after
/// which the action is clamped to [-1, 1].
struct ActionPrior {
  Mat pre_shift;
  Mat pre_var;
  Mat post_shift;
};

/// Opaque action supplier used as the fixed part of a residual policy.
class BaselinePolicy {
 public:
  virtual ~BaselinePolicy() = default;
  virtual int action_dim() const = 0;
  virtual ActionPrior prior(const Mat& states) const = 0;
  /// The baseline's own action in the normalised action box.
  virtual Vec act(const Vec& state, Rng& rng) const = 0;

  /// Number of prior()/act() calls so far (ablation accounting).
  std::uint64_t query_count() const { return queries_; }

 protected:
  mutable std::uint64_t queries_ = 0;
};

enum class BaselineMode { Mean, Stochastic };

/// Frozen tanh-Gaussian actor (typically a pretrained SAC policy). Exposes its
/// pre-squash mean, so composition happens in pre-squash space.
class ActorBaseline final : public BaselinePolicy {
 public:
  ActorBaseline(nn::Mlp actor, BaselineMode mode) : actor_(std::move(actor)), mode_(mode) {
    if (actor_.output_dim() % 2 != 0) throw ConfigError("ActorBaseline: actor output must be 2k");
  }

  static std::shared_ptr<ActorBaseline> load(const std::string& path, BaselineMode mode) {
    return std::make_shared<ActorBaseline>(nn::Mlp::load_file(path), mode);
  }

  int action_dim() const override { return actor_.output_dim() / 2; }
  BaselineMode mode() const { return mode_; }
  const nn::Mlp& network() const { return actor_; }

  /// Parameters of a baseline are never trained.
  [[noreturn]] nn::Mlp& mutable_network() {
    throw std::logic_error("ActorBaseline: frozen baseline refuses parameter updates");
  }

  ActionPrior prior(const Mat& states) const override {
    ++queries_;
    const auto head = nn::split_gaussian_head(actor_.forward(states));
    ActionPrior p;
    p.pre_shift = head.mean;
    if (mode_ == BaselineMode::Stochastic) p.pre_var = (2.0 * head.log_std.array()).exp().matrix();
    return p;
  }

  Vec act(const Vec& state, Rng& rng) const override {
    ++queries_;
    const auto head = nn::split_gaussian_head(actor_.forward(Mat(state)));
    Vec u = head.mean.col(0);
    if (mode_ == BaselineMode::Stochastic)
      for (Eigen::Index i = 0; i < u.size(); ++i) u(i) += std::exp(head.log_std(i, 0)) * standard_normal(rng);
    return u.array().tanh().matrix();
  }

 private:
  nn::Mlp actor_;
  BaselineMode mode_;
};

/// Deterministic controller given as a function of the state; its action is
/// added after squashing.
class FunctionBaseline final : public BaselinePolicy {
 public:
  FunctionBaseline(int action_dim, std::function<Vec(const Vec&)> fn)
      : dim_(action_dim), fn_(std::move(fn)) {}

  int action_dim() const override { return dim_; }

  ActionPrior prior(const Mat& states) const override {
    ++queries_;
    ActionPrior p;
    p.post_shift.resize(dim_, states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j) p.post_shift.col(j) = fn_(states.col(j));
    return p;
  }

  Vec act(const Vec& state, Rng&) const override {
    ++queries_;
    return fn_(state).cwiseMax(-1.0).cwiseMin(1.0);
  }

 private:
  int dim_;
  std::function<Vec(const Vec&)> fn_;
};

// --- SAC -----------------------------------------------------------------------

struct SacConfig {
  std::vector<int> hidden{64, 64, 64};
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double alpha0 = 1.0;
  bool learn_alpha = true;
  double target_entropy = -1.0;
  double gamma = 0.9;
  double tau = 5e-3;
  int target_update_period = 2;  // soft update every other critic update
  bool tie_critic_init = false;
};

struct SacLosses {
  double critic1 = 0.0;
  double critic2 = 0.0;
  double actor = std::numeric_limits<double>::quiet_NaN();  // NaN when the actor was frozen
  double alpha_loss = 0.0;
  double alpha = 0.0;
  double mean_log_prob = 0.0;
  bool actor_updated = false;
};

/// Output of the composed (baseline + correction) tanh-Gaussian policy for a batch.
struct PolicySample {
  nn::Mlp::Cache cache;
  nn::GaussianHead head;
  nn::SquashedSample squashed;
  Mat action;       // final action in [-1, 1]
  Mat action_mask;  // 1 where the post-squash clamp was inactive
};

inline Mat concat_rows(const Mat& a, const Mat& b) {
  Mat out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

/// Soft actor-critic with twin critics, target critics and learned entropy
/// temperature. The actor can be composed with a baseline (residual policy),
/// in which case it learns the correction term.
class SacAgent {
 public:
  SacAgent(int obs_dim, int act_dim, SacConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), obs_dim_(obs_dim), act_dim_(act_dim), rng_(seed) {
    Rng init(derive_seed(seed, 1));
    auto sizes = [&](int in, int out) {
      std::vector<int> s{in};
      s.insert(s.end(), cfg_.hidden.begin(), cfg_.hidden.end());
      s.push_back(out);
      return s;
    };
    actor_ = nn::Mlp(sizes(obs_dim, 2 * act_dim), init);
    q1_ = nn::Mlp(sizes(obs_dim + act_dim, 1), init);
    q2_ = cfg_.tie_critic_init ? q1_ : nn::Mlp(sizes(obs_dim + act_dim, 1), init);
    q1_target_ = q1_;
    q2_target_ = q2_;
    log_alpha_ = Vec::Constant(1, std::log(std::max(cfg_.alpha0, 1e-300)));
    actor_opt_ = nn::Adam(actor_.n_params(), cfg_.actor_lr);
    q1_opt_ = nn::Adam(q1_.n_params(), cfg_.critic_lr);
    q2_opt_ = nn::Adam(q2_.n_params(), cfg_.critic_lr);
    alpha_opt_ = nn::Adam(1, cfg_.alpha_lr);
  }

  const SacConfig& config() const { return cfg_; }
  int obs_dim() const { return obs_dim_; }
  int act_dim() const { return act_dim_; }
  double alpha() const { return cfg_.alpha0 == 0.0 && !cfg_.learn_alpha ? 0.0 : std::exp(log_alpha_(0)); }
  long update_count() const { return updates_; }

  const nn::Mlp& actor() const { return actor_; }
  nn::Mlp& mutable_actor() { return actor_; }
  const nn::Mlp& critic1() const { return q1_; }
  const nn::Mlp& critic2() const { return q2_; }
  nn::Mlp& mutable_critic1() { return q1_; }
  nn::Mlp& mutable_critic2() { return q2_; }
  const nn::Mlp& target1() const { return q1_target_; }
  const nn::Mlp& target2() const { return q2_target_; }

  /// Composed policy on a batch with explicit reparameterisation noise.
  PolicySample sample_policy(const Mat& states, const Mat& eps,
                             const BaselinePolicy* baseline) const {
    PolicySample ps;
    ps.head = nn::split_gaussian_head(actor_.forward(states, &ps.cache));
    std::optional<ActionPrior> prior;
    if (baseline) prior = baseline->prior(states);
    const Mat* var = prior && prior->pre_var.size() ? &prior->pre_var : nullptr;
    const Mat* shift = prior && prior->pre_shift.size() ? &prior->pre_shift : nullptr;
    ps.squashed = nn::squashed_sample(ps.head.mean, ps.head.log_std, eps, var, shift);
    if (prior && prior->post_shift.size()) {
      const Mat raw = ps.squashed.action + prior->post_shift;
      ps.action = raw.cwiseMax(-1.0).cwiseMin(1.0);
      ps.action_mask = (raw.array().abs() < 1.0).cast<double>().matrix();
    } else {
      ps.action = ps.squashed.action;
      ps.action_mask = Mat::Ones(ps.action.rows(), ps.action.cols());
    }
    return ps;
  }

  PolicySample sample_policy(const Mat& states, Rng& rng, const BaselinePolicy* baseline) const {
    return sample_policy(states, standard_normal(rng, act_dim_, states.cols()), baseline);
  }

  /// Deterministic action: squashed mean of the composed policy.
  Mat mean_action(const Mat& states, const BaselinePolicy* baseline) const {
    return sample_policy(states, Mat::Zero(act_dim_, states.cols()), baseline).action;
  }

  // --- Losses (exposed for gradient verification) ----------------------------

  /// Soft Bellman targets y = r + gamma (1 - done)(min Q'(s',a') - alpha log pi(a'|s')).
  Vec critic_targets(const Batch& b, const Mat& eps_next, const BaselinePolicy* baseline) const {
    const auto next = sample_policy(b.next_states, eps_next, baseline);
    const Mat in = concat_rows(b.next_states, next.action);
    const Eigen::RowVectorXd qmin =
        q1_target_.forward(in).row(0).cwiseMin(q2_target_.forward(in).row(0));
    const Eigen::RowVectorXd soft = qmin - alpha() * next.squashed.log_prob;
    Vec y(b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i)
      y(i) = b.rewards(i) + cfg_.gamma * (1.0 - b.dones(i)) * soft(i);
    return y;
  }

  /// Mean squared error of a critic against fixed targets; adds dL/dparams to grad.
  static double critic_loss(const nn::Mlp& q, const Batch& b, const Vec& y, Vec* grad) {
    nn::Mlp::Cache cache;
    const Mat in = concat_rows(b.states, b.actions);
    const Eigen::RowVectorXd pred = q.forward(in, grad ? &cache : nullptr).row(0);
    const Eigen::RowVectorXd diff = pred - y.transpose();
    const double n = static_cast<double>(b.size());
    if (grad) q.backward(cache, Mat(2.0 * diff / n), *grad);
    return diff.squaredNorm() / n;
  }

  /// Entropy-regularised actor objective mean(alpha log pi - min(Q1,Q2)); adds
  /// dL/dactor_params to grad.
  double actor_loss(const Mat& states, const Mat& eps, const BaselinePolicy* baseline, Vec* grad,
                    double* mean_logp = nullptr) const {
    const auto ps = sample_policy(states, eps, baseline);
    const Mat in = concat_rows(states, ps.action);
    nn::Mlp::Cache c1, c2;
    const Eigen::RowVectorXd v1 = q1_.forward(in, &c1).row(0);
    const Eigen::RowVectorXd v2 = q2_.forward(in, &c2).row(0);
    const double n = static_cast<double>(states.cols());
    const double a = alpha();
    double loss = 0.0;
    Mat g1 = Mat::Zero(1, states.cols()), g2 = Mat::Zero(1, states.cols());
    for (Eigen::Index i = 0; i < states.cols(); ++i) {
      const bool first = v1(i) <= v2(i);
      loss += a * ps.squashed.log_prob(i) - (first ? v1(i) : v2(i));
      (first ? g1 : g2)(0, i) = -1.0 / n;
    }
    if (mean_logp) *mean_logp = ps.squashed.log_prob.mean();
    if (grad) {
      Vec scratch1 = Vec::Zero(q1_.n_params()), scratch2 = Vec::Zero(q2_.n_params());
      const Mat din = q1_.backward(c1, g1, scratch1) + q2_.backward(c2, g2, scratch2);
      const Mat d_action = din.bottomRows(act_dim_).cwiseProduct(ps.action_mask);
      const Eigen::RowVectorXd d_logp = Eigen::RowVectorXd::Constant(states.cols(), a / n);
      Mat d_mean, d_log_std;
      nn::squashed_backward(ps.squashed, d_action, d_logp, d_mean, d_log_std);
      d_log_std = d_log_std.cwiseProduct(ps.head.clamp_mask);
      actor_.backward(ps.cache, concat_rows(d_mean, d_log_std), *grad);
    }
    return loss / n;
  }

  /// One SAC update. With `train_actor` false only critics, temperature and
  /// targets move (critic burn-in).
  SacLosses update(const Batch& b, const BaselinePolicy* baseline, bool train_actor) {
    if (b.size() == 0) throw ConfigError("SacAgent::update: empty batch");
    SacLosses out;
    const Vec y = critic_targets(b, standard_normal(rng_, act_dim_, b.size()), baseline);
    Vec g1 = Vec::Zero(q1_.n_params()), g2 = Vec::Zero(q2_.n_params());
    out.critic1 = critic_loss(q1_, b, y, &g1);
    out.critic2 = critic_loss(q2_, b, y, &g2);
    check_finite(out.critic1, "critic1 loss");
    check_finite(out.critic2, "critic2 loss");
    q1_opt_.step(q1_.params(), g1, "critic1");
    q2_opt_.step(q2_.params(), g2, "critic2");

    const Mat eps = standard_normal(rng_, act_dim_, b.size());
    double mean_logp = 0.0;
    if (train_actor) {
      Vec ga = Vec::Zero(actor_.n_params());
      out.actor = actor_loss(b.states, eps, baseline, &ga, &mean_logp);
      check_finite(out.actor, "actor loss");
      actor_opt_.step(actor_.params(), ga, "actor");
      out.actor_updated = true;
    } else {
      mean_logp = sample_policy(b.states, eps, baseline).squashed.log_prob.mean();
    }
    out.mean_log_prob = mean_logp;

    if (cfg_.learn_alpha) {
      const double residual = mean_logp + cfg_.target_entropy;
      out.alpha_loss = -log_alpha_(0) * residual;
      Vec ga = Vec::Constant(1, -residual);
      alpha_opt_.step(log_alpha_, ga, "log_alpha");
    }
    out.alpha = alpha();

    ++updates_;
    if (updates_ % cfg_.target_update_period == 0) {
      q1_target_.soft_update_from(q1_, cfg_.tau);
      q2_target_.soft_update_from(q2_, cfg_.tau);
    }
    return out;
  }

 private:
  static void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericalError(std::string("SacAgent: non-finite ") + what);
  }

  SacConfig cfg_;
  int obs_dim_;
  int act_dim_;
  Rng rng_;
  nn::Mlp actor_, q1_, q2_, q1_target_, q2_target_;
  Vec log_alpha_;
  nn::Adam actor_opt_, q1_opt_, q2_opt_, alpha_opt_;
  long updates_ = 0;
};

/// Residual initialisation: the correction's final layer starts near zero so
/// the composed policy follows the baseline. The log-std rows get bias log(sigma0).
inline void init_near_zero(nn::Mlp& actor, Rng& rng, double sigma0 = 0.1) {
  const int last = actor.n_layers() - 1;
  auto W = actor.weight(last);
  auto b = actor.bias(last);
  const auto k = W.rows() / 2;
  for (Eigen::Index i = 0; i < W.rows(); ++i) {
    for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = uniform(rng, -1e-3, 1e-3);
    b(i) = i < k ? uniform(rng, -1e-3, 1e-3) : std::log(sigma0);
  }
}

// --- Residual policy -------------------------------------------------------------

struct ResidualAction {
  Vec action;
  double log_prob;  // NaN for a bypassed (baseline) action
};

/// Which parts of a SAC update run at the current point of training.
struct UpdateSet {
  bool critic = true;
  bool alpha = true;
  bool actor = true;
};

/// Baseline + trainable Gaussian correction with critic burn-in. Without a
/// baseline this is a plain SAC policy.
class ResidualPolicy {
 public:
  ResidualPolicy(SacAgent& correction, std::shared_ptr<const BaselinePolicy> baseline,
                 long cbi_steps)
      : agent_(&correction), baseline_(std::move(baseline)), cbi_steps_(cbi_steps) {
    if (cbi_steps < 0) throw ConfigError("ResidualPolicy: cbi_steps must be >= 0");
  }

  SacAgent& agent() { return *agent_; }
  const SacAgent& agent() const { return *agent_; }
  const BaselinePolicy* baseline() const { return baseline_.get(); }
  long cbi_steps() const { return cbi_steps_; }
  long steps_seen() const { return steps_seen_; }
  void observe_env_steps(long n = 1) { steps_seen_ += n; }
  bool in_burn_in() const { return baseline_ && steps_seen_ < cbi_steps_; }

  UpdateSet burn_in_gate() const { return {true, true, !in_burn_in()}; }

  ResidualAction act(const Vec& state, Rng& rng) const {
    if (in_burn_in()) return {baseline_->act(state, rng), std::numeric_limits<double>::quiet_NaN()};
    const auto ps = agent_->sample_policy(Mat(state), rng, baseline_.get());
    return {ps.action.col(0), ps.squashed.log_prob(0)};
  }

  Mat act_batch(const Mat& states, Rng& rng) const {
    if (in_burn_in()) {
      Mat out(baseline_->action_dim(), states.cols());
      for (Eigen::Index j = 0; j < states.cols(); ++j) out.col(j) = baseline_->act(states.col(j), rng);
      return out;
    }
    return agent_->sample_policy(states, rng, baseline_.get()).action;
  }

  /// Pre-squash Gaussian of the composed policy at one state: mean and variance.
  std::pair<Vec, Vec> distribution(const Vec& state) const {
    const auto head = nn::split_gaussian_head(agent_->actor().forward(Mat(state)));
    Vec mean = head.mean.col(0);
    Vec var = (2.0 * head.log_std.col(0).array()).exp().matrix();
    if (baseline_) {
      const auto p = baseline_->prior(Mat(state));
      if (p.pre_shift.size()) mean += p.pre_shift.col(0);
      if (p.pre_var.size()) var += p.pre_var.col(0);
      if (p.post_shift.size()) mean = (mean.array().tanh() + p.post_shift.col(0).array()).atanh().matrix();
    }
    return {mean, var};
  }

  SacLosses update(const Batch& b) {
    const auto gate = burn_in_gate();
    return agent_->update(b, baseline_.get(), gate.actor);
  }

 private:
  SacAgent* agent_;
  std::shared_ptr<const BaselinePolicy> baseline_;
  long cbi_steps_;
  long steps_seen_ = 0;
};

// --- DQN -----------------------------------------------------------------------

struct DqnConfig {
  std::vector<int> hidden{64, 64, 64};
  double lr = 3e-4;
  double gamma = 0.9;
  double tau = 5e-3;
  double eps0 = 1.0;
  double eps_final = 0.01;
  long decay_steps = 3000;
};

/// Deep Q-learning over the discrete tilt increments {-1, 0, +1} degrees.
class DqnAgent {
 public:
  static constexpr std::array<double, 3> kActions{-1.0, 0.0, 1.0};

  DqnAgent(int obs_dim, DqnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    Rng init(derive_seed(seed, 2));
    std::vector<int> s{obs_dim};
    s.insert(s.end(), cfg_.hidden.begin(), cfg_.hidden.end());
    s.push_back(static_cast<int>(kActions.size()));
    q_ = nn::Mlp(s, init);
    target_ = q_;
    opt_ = nn::Adam(q_.n_params(), cfg_.lr);
  }

  const nn::Mlp& q() const { return q_; }
  nn::Mlp& mutable_q() { return q_; }
  const nn::Mlp& target() const { return target_; }
  const DqnConfig& config() const { return cfg_; }

  /// Linear decay from eps0 to eps_final over decay_steps.
  double epsilon(long step) const {
    if (step >= cfg_.decay_steps) return cfg_.eps_final;
    const double f = static_cast<double>(step) / static_cast<double>(cfg_.decay_steps);
    return cfg_.eps0 + f * (cfg_.eps_final - cfg_.eps0);
  }

  /// argmax with ties to the lowest index.
  static int argmax(const Vec& q) {
    int best = 0;
    for (int i = 1; i < q.size(); ++i)
      if (q(i) > q(best)) best = i;
    return best;
  }

  int greedy(const Vec& state) const { return argmax(q_.forward(state)); }

  int act(const Vec& state, long step, Rng& rng) const {
    if (uniform(rng, 0.0, 1.0) < epsilon(step))
      return std::uniform_int_distribution<int>(0, static_cast<int>(kActions.size()) - 1)(rng);
    return greedy(state);
  }

  static int index_of(double delta) {
    for (std::size_t i = 0; i < kActions.size(); ++i)
      if (delta == kActions[i]) return static_cast<int>(i);
    throw ConfigError("DqnAgent: action " + std::to_string(delta) + " is not in {-1, 0, 1}");
  }

  /// Targets r + gamma (1 - done) max_a Q'(s', a).
  Vec targets(const Batch& b) const {
    const Mat qn = target_.forward(b.next_states);
    Vec y(b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i)
      y(i) = b.rewards(i) + cfg_.gamma * (1.0 - b.dones(i)) * qn.col(i).maxCoeff();
    return y;
  }

  double loss(const Batch& b, const Vec& y, Vec* grad) const {
    nn::Mlp::Cache cache;
    const Mat q = q_.forward(b.states, grad ? &cache : nullptr);
    Mat g = Mat::Zero(q.rows(), q.cols());
    const double n = static_cast<double>(b.size());
    double l = 0.0;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      const int a = index_of(b.actions(0, i));
      const double d = q(a, i) - y(i);
      l += d * d;
      g(a, i) = 2.0 * d / n;
    }
    if (grad) q_.backward(cache, g, *grad);
    return l / n;
  }

  double update(const Batch& b) {
    const Vec y = targets(b);
    Vec grad = Vec::Zero(q_.n_params());
    const double l = loss(b, y, &grad);
    if (!std::isfinite(l)) throw NumericalError("DqnAgent: non-finite loss");
    opt_.step(q_.params(), grad, "dqn_q");
    target_.soft_update_from(q_, cfg_.tau);
    return l;
  }

 private:
  DqnConfig cfg_;
  nn::Mlp q_, target_;
  nn::Adam opt_;
};

}  // namespace mbrpl::agents

#endif  // MBRPL_AGENTS_HPP
