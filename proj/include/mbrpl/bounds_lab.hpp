#ifndef MBRPL_BOUNDS_LAB_HPP
#define MBRPL_BOUNDS_LAB_HPP

#include <algorithm>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "mbrpl/mdp_core.hpp"

namespace mbrpl::bounds {

using mdp::FiniteMDP;
using mdp::TabularPolicy;

inline constexpr double kBoundTolerance = 1e-9;

/// Symmetric Dirichlet(concentration) draw of length n.
inline Vec dirichlet(Rng& rng, int n, double concentration = 1.0) {
  std::gamma_distribution<double> g(concentration, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  const double s = v.sum();
  if (!(s > 0.0)) throw NumericalError("dirichlet: degenerate draw");
  return v / s;
}

/// Normalised (base + weight * Dirichlet noise); full support whenever base has it.
inline Vec perturb(Rng& rng, const Vec& base, double weight) {
  if (weight == 0.0) return base;
  Vec v = base + weight * dirichlet(rng, static_cast<int>(base.size()));
  return v / v.sum();
}

/// M_b uses kernel P0, M uses kernel P1; both share r, gamma, rho0.
struct MdpPair {
  FiniteMDP M;   // P1
  FiniteMDP Mb;  // P0
  double epsilon = 0.0;  // max_{s,a} KL(P0(s,a) || P1(s,a))
};

struct PolicyPair {
  TabularPolicy pi_b;
  TabularPolicy pi;
  double epsilon_pi = 0.0;  // max_s KL(pi(s) || pi_b(s))
};

inline double max_kernel_kl(const FiniteMDP& p0, const FiniteMDP& p1) {
  double eps = 0.0;
  for (int s = 0; s < p0.n_states; ++s)
    for (int a = 0; a < p0.n_actions; ++a) eps = std::max(eps, mdp::kl_categorical(p0.row(s, a), p1.row(s, a)));
  return eps;
}

inline double max_policy_kl(const TabularPolicy& pi, const TabularPolicy& pi_b) {
  double eps = 0.0;
  for (Eigen::Index s = 0; s < pi.probs.rows(); ++s)
    eps = std::max(eps, mdp::kl_categorical(pi.probs.row(s).transpose(), pi_b.probs.row(s).transpose()));
  return eps;
}

inline MdpPair random_mdp_pair(std::uint64_t seed, int n_states, int n_actions, double perturbation,
                               double gamma) {
  if (!(perturbation >= 0.0)) throw ConfigError("random_mdp_pair: perturbation must be >= 0");
  if (n_states < 1 || n_actions < 1) throw ConfigError("random_mdp_pair: empty state or action set");
  Rng rng(seed);
  MdpPair pair;
  pair.Mb = FiniteMDP::zeros(n_states, n_actions, gamma);
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) {
      const Vec row = dirichlet(rng, n_states);
      for (int sn = 0; sn < n_states; ++sn) pair.Mb.p(s, a, sn) = row(sn);
    }
  // r(s, a, s') = r(s, a): the bounds assume rewards independent of the successor.
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) {
      const double r = uniform(rng, 0.0, 1.0);
      for (int sn = 0; sn < n_states; ++sn) pair.Mb.reward(s, a, sn) = r;
    }
  pair.Mb.rho0 = dirichlet(rng, n_states);
  pair.M = pair.Mb;
  for (int s = 0; s < n_states; ++s)
    for (int a = 0; a < n_actions; ++a) {
      const Vec row = perturb(rng, pair.Mb.row(s, a), perturbation);
      for (int sn = 0; sn < n_states; ++sn) pair.M.p(s, a, sn) = row(sn);
    }
  pair.epsilon = max_kernel_kl(pair.Mb, pair.M);
  return pair;
}

inline TabularPolicy random_policy(Rng& rng, int n_states, int n_actions) {
  TabularPolicy pi{Mat(n_states, n_actions)};
  for (int s = 0; s < n_states; ++s) pi.probs.row(s) = dirichlet(rng, n_actions).transpose();
  return pi;
}

inline PolicyPair random_policy_pair(std::uint64_t seed, int n_states, int n_actions, double perturbation) {
  Rng rng(seed);
  PolicyPair pp;
  pp.pi_b = random_policy(rng, n_states, n_actions);
  pp.pi = pp.pi_b;
  for (int s = 0; s < n_states; ++s)
    pp.pi.probs.row(s) = perturb(rng, pp.pi_b.probs.row(s).transpose(), perturbation).transpose();
  pp.epsilon_pi = max_policy_kl(pp.pi, pp.pi_b);
  return pp;
}

inline void require_certifiable(const MdpPair& pair) {
  if (!pair.M.rewards_in_unit_interval() || !pair.Mb.rewards_in_unit_interval())
    throw ConfigError("bounds check: rewards must lie in [0,1]");
  if (!std::isfinite(pair.epsilon)) throw ConfigError("bounds check: kernel KL is infinite");
}

struct Lemma1Result {
  double lhs = 0.0;        // |rho0 . (V0 - V1)|
  double pointwise = 0.0;  // max_s |V0(s) - V1(s)|
  double bound = 0.0;
  bool holds = false;
  bool holds_pointwise = false;
};

/// sqrt(2 eps) gamma / (1 - gamma) * max_s V0(s).
inline double lemma1_bound(double epsilon, double gamma, double v0_sup) {
  return std::sqrt(2.0 * epsilon) * gamma / (1.0 - gamma) * v0_sup;
}

inline Lemma1Result lemma1_check(const MdpPair& pair, const TabularPolicy& pi) {
  require_certifiable(pair);
  const auto v0 = mdp::value_of_policy(pair.Mb, pi);
  const auto v1 = mdp::value_of_policy(pair.M, pi);
  Lemma1Result r;
  r.lhs = std::abs(v0.at_rho0 - v1.at_rho0);
  r.pointwise = (v0.v - v1.v).cwiseAbs().maxCoeff();
  r.bound = lemma1_bound(pair.epsilon, pair.Mb.gamma, v0.v.cwiseAbs().maxCoeff());
  r.holds = r.lhs <= r.bound + kBoundTolerance;
  r.holds_pointwise = r.pointwise <= r.bound + kBoundTolerance;
  return r;
}

struct Lemma2Result {
  double lhs = 0.0;  // V_M^pi(rho0)
  double rhs = 0.0;
  bool holds = false;
};

/// V_b - sqrt(2)/(1-gamma) (sqrt(eps_pi)/(1-gamma) + gamma sqrt(eps0) v_sup).
inline double lemma2_rhs(double v_b, double epsilon_pi, double epsilon0, double gamma, double v_sup) {
  return v_b - std::sqrt(2.0) / (1.0 - gamma) *
                   (std::sqrt(epsilon_pi) / (1.0 - gamma) + gamma * std::sqrt(epsilon0) * v_sup);
}

inline Lemma2Result lemma2_check(const MdpPair& pair, const PolicyPair& pp) {
  require_certifiable(pair);
  if (!std::isfinite(pp.epsilon_pi)) throw ConfigError("lemma2_check: policy KL is infinite");
  const auto vb = mdp::value_of_policy(pair.Mb, pp.pi_b);
  const auto v = mdp::value_of_policy(pair.M, pp.pi);
  Lemma2Result r;
  r.lhs = v.at_rho0;
  r.rhs = lemma2_rhs(vb.at_rho0, pp.epsilon_pi, pair.epsilon, pair.Mb.gamma, vb.v.cwiseAbs().maxCoeff());
  r.holds = r.lhs >= r.rhs - kBoundTolerance;
  return r;
}

/// V0 - V1 from the recursion dV = (r0_pi - r1_pi) + gamma (P0_pi - P1_pi) V0 + gamma P1_pi dV,
/// iterated to a fixed point.
inline Vec expansion_delta_v(const MdpPair& pair, const TabularPolicy& pi, int max_iter = 100000) {
  const auto [P0, r0] = mdp::induced_chain(pair.Mb, pi);
  const auto [P1, r1] = mdp::induced_chain(pair.M, pi);
  const Vec v0 = mdp::value_of_policy(pair.Mb, pi).v;
  const double g = pair.Mb.gamma;
  const Vec drive = (r0 - r1) + g * (P0 - P1) * v0;
  Vec dv = drive;
  for (int i = 0; i < max_iter; ++i) {
    const Vec next = drive + g * P1 * dv;
    const double change = (next - dv).cwiseAbs().maxCoeff();
    dv = next;
    if (change == 0.0) break;
  }
  return dv;
}

/// MDP pair where Lemma 1 fails when rewards depend on the next state:
/// under P0 every transition lands in the zero-reward state, so V0 = 0 and
/// the bound is 0, while P1 moves `delta` mass onto a reward-1 successor.
inline std::pair<MdpPair, TabularPolicy> next_state_reward_counterexample(double delta, double gamma) {
  MdpPair pair;
  pair.Mb = FiniteMDP::zeros(2, 1, gamma);
  pair.Mb.rho0 << 1.0, 0.0;
  for (int s = 0; s < 2; ++s) {
    pair.Mb.p(s, 0, 0) = 1.0;
    pair.Mb.reward(s, 0, 1) = 1.0;
  }
  pair.M = pair.Mb;
  for (int s = 0; s < 2; ++s) {
    pair.M.p(s, 0, 0) = 1.0 - delta;
    pair.M.p(s, 0, 1) = delta;
  }
  pair.epsilon = max_kernel_kl(pair.Mb, pair.M);
  return {pair, TabularPolicy::uniform(2, 1)};
}

// --- Randomised certification ---------------------------------------------------

struct CertificationSummary {
  int instances = 0;
  int violations = 0;
  int pointwise_violations = 0;
  double min_slack = std::numeric_limits<double>::infinity();
};

struct FamilyOptions {
  int max_states = 8;
  int max_actions = 4;
  std::vector<double> gammas{0.5, 0.9, 0.95};
  double max_perturbation = 1.0;
};

namespace detail {
struct Instance {
  int n_states, n_actions;
  double gamma, perturbation, policy_perturbation;
  std::uint64_t mdp_seed, policy_seed;
};

inline Instance draw_instance(Rng& rng, const FamilyOptions& f) {
  Instance in;
  in.n_states = std::uniform_int_distribution<int>(1, f.max_states)(rng);
  in.n_actions = std::uniform_int_distribution<int>(1, f.max_actions)(rng);
  in.gamma = f.gammas[std::uniform_int_distribution<std::size_t>(0, f.gammas.size() - 1)(rng)];
  in.perturbation = uniform(rng, 0.0, f.max_perturbation);
  in.policy_perturbation = uniform(rng, 0.0, f.max_perturbation);
  in.mdp_seed = rng();
  in.policy_seed = rng();
  return in;
}
}  // namespace detail

inline CertificationSummary certify_lemma1(std::uint64_t seed, int n_instances, const FamilyOptions& f = {}) {
  Rng rng(seed);
  CertificationSummary out;
  for (int i = 0; i < n_instances; ++i) {
    const auto in = detail::draw_instance(rng, f);
    const auto pair = random_mdp_pair(in.mdp_seed, in.n_states, in.n_actions, in.perturbation, in.gamma);
    Rng prng(in.policy_seed);
    const auto r = lemma1_check(pair, random_policy(prng, in.n_states, in.n_actions));
    ++out.instances;
    out.violations += !r.holds;
    out.pointwise_violations += !r.holds_pointwise;
    out.min_slack = std::min(out.min_slack, r.bound - r.pointwise);
  }
  return out;
}

inline CertificationSummary certify_lemma2(std::uint64_t seed, int n_instances, const FamilyOptions& f = {}) {
  Rng rng(seed);
  CertificationSummary out;
  for (int i = 0; i < n_instances; ++i) {
    const auto in = detail::draw_instance(rng, f);
    const auto pair = random_mdp_pair(in.mdp_seed, in.n_states, in.n_actions, in.perturbation, in.gamma);
    const auto pp = random_policy_pair(in.policy_seed, in.n_states, in.n_actions, in.policy_perturbation);
    const auto r = lemma2_check(pair, pp);
    ++out.instances;
    out.violations += !r.holds;
    out.min_slack = std::min(out.min_slack, r.lhs - r.rhs);
  }
  return out;
}

// --- Tightness report --------------------------------------------------------------

struct TightnessRow {
  std::string lemma;
  double perturbation = 0.0;
  double epsilon = 0.0;
  double lhs = 0.0;
  double bound = 0.0;
  double slack = 0.0;
};

struct TightnessOptions {
  std::vector<double> perturbations{0.0, 0.001, 0.01, 0.05, 0.1, 0.3, 1.0};
  int instances_per_level = 50;
  int n_states = 5;
  int n_actions = 3;
  double gamma = 0.9;
};

/// Lemma 1 rows sweep the kernel perturbation; lemma 2 rows sweep the kernel
/// perturbation with identical policies (eps_pi = 0).
inline std::vector<TightnessRow> bound_tightness_report(std::uint64_t seed, const TightnessOptions& o = {}) {
  std::vector<TightnessRow> rows;
  Rng rng(seed);
  for (double p : o.perturbations)
    for (int i = 0; i < o.instances_per_level; ++i) {
      const auto pair = random_mdp_pair(rng(), o.n_states, o.n_actions, p, o.gamma);
      Rng prng(rng());
      const auto pi = random_policy(prng, o.n_states, o.n_actions);
      const auto l1 = lemma1_check(pair, pi);
      rows.push_back({"lemma1", p, pair.epsilon, l1.lhs, l1.bound, l1.bound - l1.lhs});
      const PolicyPair pp{pi, pi, 0.0};
      const auto l2 = lemma2_check(pair, pp);
      rows.push_back({"lemma2", p, pair.epsilon, l2.lhs, l2.rhs, l2.lhs - l2.rhs});
    }
  return rows;
}

inline void write_tightness_csv(std::ostream& os, const std::vector<TightnessRow>& rows) {
  os << "lemma,perturbation,epsilon,lhs,bound,slack\n";
  os << std::setprecision(12);
  for (const auto& r : rows)
    os << r.lemma << ',' << r.perturbation << ',' << r.epsilon << ',' << r.lhs << ',' << r.bound << ','
       << r.slack << '\n';
}

struct SlackSummary {
  std::string lemma;
  double perturbation;
  double median_epsilon;
  double median_slack;
  double max_slack;
  double min_slack;
};

inline std::vector<SlackSummary> summarize_slack(const std::vector<TightnessRow>& rows) {
  std::vector<SlackSummary> out;
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  for (const std::string lemma : {"lemma1", "lemma2"}) {
    std::vector<double> levels;
    for (const auto& r : rows)
      if (r.lemma == lemma && std::find(levels.begin(), levels.end(), r.perturbation) == levels.end())
        levels.push_back(r.perturbation);
    for (double p : levels) {
      std::vector<double> slack, eps;
      for (const auto& r : rows)
        if (r.lemma == lemma && r.perturbation == p) {
          slack.push_back(r.slack);
          eps.push_back(r.epsilon);
        }
      out.push_back({lemma, p, median(eps), median(slack), *std::max_element(slack.begin(), slack.end()),
                     *std::min_element(slack.begin(), slack.end())});
    }
  }
  return out;
}

}  // namespace mbrpl::bounds

#endif  // MBRPL_BOUNDS_LAB_HPP
