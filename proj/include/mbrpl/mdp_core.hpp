#ifndef MBRPL_MDP_CORE_HPP
#define MBRPL_MDP_CORE_HPP

#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbrpl/common.hpp"

namespace mbrpl::mdp {

/// One experience tuple. `step` is the global environment step that produced it.
struct Transition {
  Vec state;
  Vec action;
  double reward = 0.0;
  Vec next_state;
  bool done = false;
  int agent_id = 0;
  std::int64_t step = 0;
};

/// Column-major batch: one sample per column.
struct Batch {
  Mat states;
  Mat actions;
  Vec rewards;
  Mat next_states;
  Vec dones;  // 1.0 terminal, 0.0 otherwise

  Eigen::Index size() const { return rewards.size(); }
};

inline Batch make_batch(std::span<const Transition> ts) {
  if (ts.empty()) throw ConfigError("make_batch: empty transition list");
  const auto n = static_cast<Eigen::Index>(ts.size());
  const auto d = ts.front().state.size();
  const auto k = ts.front().action.size();
  Batch b{Mat(d, n), Mat(k, n), Vec(n), Mat(d, n), Vec(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = ts[static_cast<std::size_t>(i)];
    b.states.col(i) = t.state;
    b.actions.col(i) = t.action;
    b.rewards(i) = t.reward;
    b.next_states.col(i) = t.next_state;
    b.dones(i) = t.done ? 1.0 : 0.0;
  }
  return b;
}

/// Fixed-capacity FIFO experience store with uniform sampling (with replacement).
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("ReplayBuffer: capacity must be positive");
    ring_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  void push(Transition t) {
    if (t.state.size() != t.next_state.size())
      throw ConfigError("ReplayBuffer::push: state and next_state dimensions differ (" +
                        std::to_string(t.state.size()) + " vs " +
                        std::to_string(t.next_state.size()) + ")");
    if (!std::isfinite(t.reward)) throw ConfigError("ReplayBuffer::push: non-finite reward");
    if (t.agent_id < 0) throw ConfigError("ReplayBuffer::push: negative agent_id");
    if (!ring_.empty()) {
      const auto& ref = ring_.front();
      if (t.state.size() != ref.state.size() || t.action.size() != ref.action.size())
        throw ConfigError("ReplayBuffer::push: dimension mismatch, expected state " +
                          std::to_string(ref.state.size()) + "/action " +
                          std::to_string(ref.action.size()) + ", got " +
                          std::to_string(t.state.size()) + "/" +
                          std::to_string(t.action.size()));
    }
    if (ring_.size() < capacity_) {
      ring_.push_back(std::move(t));
    } else {
      ring_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
    ++insert_count_;
  }

  std::size_t size() const { return ring_.size(); }
  bool empty() const { return ring_.empty(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t insert_count() const { return insert_count_; }

  /// i-th oldest stored transition.
  const Transition& at(std::size_t i) const {
    if (ring_.size() < capacity_) return ring_.at(i);
    return ring_.at((head_ + i) % capacity_);
  }

  /// Entries oldest first.
  std::vector<Transition> entries() const {
    std::vector<Transition> out;
    out.reserve(ring_.size());
    for (std::size_t i = 0; i < ring_.size(); ++i) out.push_back(at(i));
    return out;
  }

  std::vector<Transition> sample(std::size_t batch_size, Rng& rng) const {
    if (ring_.empty()) throw ConfigError("ReplayBuffer::sample: buffer is empty");
    std::uniform_int_distribution<std::size_t> pick(0, ring_.size() - 1);
    std::vector<Transition> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(ring_[pick(rng)]);
    return out;
  }

  std::vector<Transition> sample(std::size_t batch_size, std::uint64_t seed) const {
    Rng rng(seed);
    return sample(batch_size, rng);
  }

  Batch sample_batch(std::size_t batch_size, Rng& rng) const {
    auto ts = sample(batch_size, rng);
    return make_batch(ts);
  }

 private:
  std::size_t capacity_;
  std::vector<Transition> ring_;
  std::size_t head_ = 0;
  std::uint64_t insert_count_ = 0;
};

/// Explicit tabular MDP. P and r are indexed [s][a][s'] (flattened row-major).
struct FiniteMDP {
  int n_states = 0;
  int n_actions = 0;
  std::vector<double> P;
  std::vector<double> r;
  double gamma = 0.9;
  Vec rho0;

  std::size_t index(int s, int a, int sn) const {
    return (static_cast<std::size_t>(s) * n_actions + a) * n_states + sn;
  }
  double p(int s, int a, int sn) const { return P[index(s, a, sn)]; }
  double& p(int s, int a, int sn) { return P[index(s, a, sn)]; }
  double reward(int s, int a, int sn) const { return r[index(s, a, sn)]; }
  double& reward(int s, int a, int sn) { return r[index(s, a, sn)]; }

  /// Transition row P(.|s,a) as a vector.
  Vec row(int s, int a) const {
    Vec v(n_states);
    for (int sn = 0; sn < n_states; ++sn) v(sn) = p(s, a, sn);
    return v;
  }

  static FiniteMDP zeros(int n_states, int n_actions, double gamma) {
    FiniteMDP m;
    m.n_states = n_states;
    m.n_actions = n_actions;
    const auto sz = static_cast<std::size_t>(n_states) * n_actions * n_states;
    m.P.assign(sz, 0.0);
    m.r.assign(sz, 0.0);
    m.gamma = gamma;
    m.rho0 = Vec::Constant(n_states, 1.0 / n_states);
    return m;
  }

  void validate() const {
    if (n_states <= 0 || n_actions <= 0) throw ConfigError("FiniteMDP: empty state or action set");
    const auto sz = static_cast<std::size_t>(n_states) * n_actions * n_states;
    if (P.size() != sz || r.size() != sz) throw ConfigError("FiniteMDP: tensor size mismatch");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("FiniteMDP: gamma must lie in (0,1)");
    if (rho0.size() != n_states) throw ConfigError("FiniteMDP: rho0 size mismatch");
    if (std::abs(rho0.sum() - 1.0) > 1e-12 || (rho0.array() < 0.0).any())
      throw ConfigError("FiniteMDP: rho0 is not a probability vector");
    for (int s = 0; s < n_states; ++s)
      for (int a = 0; a < n_actions; ++a) {
        double sum = 0.0;
        for (int sn = 0; sn < n_states; ++sn) {
          if (p(s, a, sn) < 0.0) throw ConfigError("FiniteMDP: negative probability");
          sum += p(s, a, sn);
        }
        if (std::abs(sum - 1.0) > 1e-12)
          throw ConfigError("FiniteMDP: row P[" + std::to_string(s) + "][" + std::to_string(a) +
                            "] sums to " + std::to_string(sum));
      }
  }

  bool rewards_in_unit_interval() const {
    for (double x : r)
      if (!(x >= 0.0 && x <= 1.0)) return false;
    return true;
  }
};

/// Stationary Markov policy, rows indexed by state.
struct TabularPolicy {
  Mat probs;

  static TabularPolicy uniform(int n_states, int n_actions) {
    return {Mat::Constant(n_states, n_actions, 1.0 / n_actions)};
  }

  void validate() const {
    for (Eigen::Index s = 0; s < probs.rows(); ++s) {
      if ((probs.row(s).array() < 0.0).any()) throw ConfigError("TabularPolicy: negative entry");
      if (std::abs(probs.row(s).sum() - 1.0) > 1e-12)
        throw ConfigError("TabularPolicy: row " + std::to_string(s) + " does not sum to 1");
    }
  }
};

struct PolicyValue {
  Vec v;          // V(s) for every state
  double at_rho0;  // rho0 . V
};

/// Policy-induced state kernel P_pi and expected one-step reward r_pi.
inline std::pair<Mat, Vec> induced_chain(const FiniteMDP& mdp, const TabularPolicy& pi) {
  const int S = mdp.n_states;
  Mat P_pi = Mat::Zero(S, S);
  Vec r_pi = Vec::Zero(S);
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      const double w = pi.probs(s, a);
      if (w == 0.0) continue;
      for (int sn = 0; sn < S; ++sn) {
        const double p = mdp.p(s, a, sn);
        P_pi(s, sn) += w * p;
        r_pi(s) += w * p * mdp.reward(s, a, sn);
      }
    }
  return {P_pi, r_pi};
}

/// Exact policy evaluation: solves (I - gamma P_pi) V = r_pi directly.
inline PolicyValue value_of_policy(const FiniteMDP& mdp, const TabularPolicy& pi) {
  if (pi.probs.rows() != mdp.n_states || pi.probs.cols() != mdp.n_actions)
    throw ConfigError("value_of_policy: policy shape does not match MDP");
  auto [P_pi, r_pi] = induced_chain(mdp, pi);
  const Mat A = Mat::Identity(mdp.n_states, mdp.n_states) - mdp.gamma * P_pi;
  Vec v = A.fullPivLu().solve(r_pi);
  return {v, mdp.rho0.dot(v)};
}

/// Q^pi(s,a) = sum_s' P (r + gamma V(s')).
inline Mat q_of_policy(const FiniteMDP& mdp, const TabularPolicy& pi) {
  const Vec v = value_of_policy(mdp, pi).v;
  Mat q = Mat::Zero(mdp.n_states, mdp.n_actions);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a)
      for (int sn = 0; sn < mdp.n_states; ++sn)
        q(s, a) += mdp.p(s, a, sn) * (mdp.reward(s, a, sn) + mdp.gamma * v(sn));
  return q;
}

/// KL(p || q) in nats with 0 ln(0/q) = 0. Returns +infinity when p is not
/// absolutely continuous with respect to q.
inline double kl_categorical(const Vec& p, const Vec& q) {
  if (p.size() != q.size()) throw ConfigError("kl_categorical: size mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) <= 0.0) continue;
    if (q(i) <= 0.0) return std::numeric_limits<double>::infinity();
    kl += p(i) * std::log(p(i) / q(i));
  }
  // Roundoff can push the sum a hair below zero for p ~= q.
  return std::max(kl, 0.0);
}

// --- Serialization -----------------------------------------------------------
//
// File layout (JSON): {"n_states", "n_actions", "gamma", "rho0": [..],
//   "P": [[[..s'..]..a..]..s..], "r": same nesting}

inline nlohmann::json to_json(const FiniteMDP& m) {
  nlohmann::json P = nlohmann::json::array(), r = nlohmann::json::array();
  for (int s = 0; s < m.n_states; ++s) {
    nlohmann::json Ps = nlohmann::json::array(), rs = nlohmann::json::array();
    for (int a = 0; a < m.n_actions; ++a) {
      std::vector<double> pr(m.n_states), rr(m.n_states);
      for (int sn = 0; sn < m.n_states; ++sn) {
        pr[sn] = m.p(s, a, sn);
        rr[sn] = m.reward(s, a, sn);
      }
      Ps.push_back(pr);
      rs.push_back(rr);
    }
    P.push_back(Ps);
    r.push_back(rs);
  }
  return {{"n_states", m.n_states},
          {"n_actions", m.n_actions},
          {"gamma", m.gamma},
          {"rho0", std::vector<double>(m.rho0.data(), m.rho0.data() + m.rho0.size())},
          {"P", P},
          {"r", r}};
}

inline FiniteMDP finite_mdp_from_json(const nlohmann::json& j) {
  FiniteMDP m = FiniteMDP::zeros(j.at("n_states").get<int>(), j.at("n_actions").get<int>(),
                                 j.at("gamma").get<double>());
  const auto rho = j.at("rho0").get<std::vector<double>>();
  if (static_cast<int>(rho.size()) != m.n_states) throw ConfigError("FiniteMDP json: rho0 size");
  m.rho0 = Eigen::Map<const Vec>(rho.data(), static_cast<Eigen::Index>(rho.size()));
  for (int s = 0; s < m.n_states; ++s)
    for (int a = 0; a < m.n_actions; ++a)
      for (int sn = 0; sn < m.n_states; ++sn) {
        m.p(s, a, sn) = j.at("P").at(s).at(a).at(sn).get<double>();
        m.reward(s, a, sn) = j.at("r").at(s).at(a).at(sn).get<double>();
      }
  m.validate();
  return m;
}

inline void save_finite_mdp(const FiniteMDP& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json(m).dump(1) << '\n';
}

inline FiniteMDP load_finite_mdp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return finite_mdp_from_json(nlohmann::json::parse(in));
}

}  // namespace mbrpl::mdp

#endif  // MBRPL_MDP_CORE_HPP
