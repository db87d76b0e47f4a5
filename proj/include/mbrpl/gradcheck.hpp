#ifndef MBRPL_GRADCHECK_HPP
#define MBRPL_GRADCHECK_HPP

#include <string>
#include <vector>

#include "mbrpl/agents.hpp"
#include "mbrpl/model_learning.hpp"

namespace mbrpl::diag {

using mdp::Batch;

struct GradReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int coords = 0;
  bool pass = false;
};

namespace detail {

inline Batch random_batch(Rng& rng, int obs_dim, int act_dim, int n) {
  Batch b;
  b.states = Mat(obs_dim, n);
  b.next_states = Mat(obs_dim, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (int i = 0; i < obs_dim; ++i) {
      b.states(i, j) = uniform(rng, -2.0, 2.0);
      b.next_states(i, j) = uniform(rng, -2.0, 2.0);
    }
  b.actions = Mat(act_dim, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (int i = 0; i < act_dim; ++i) b.actions(i, j) = uniform(rng, -0.9, 0.9);
  b.rewards = Vec(n);
  for (Eigen::Index j = 0; j < n; ++j) b.rewards(j) = uniform(rng, -1.0, 1.0);
  b.dones = Vec::Zero(n);
  return b;
}

inline GradReport finish(std::string name, const nn::GradCheckResult& r, double tol) {
  return {std::move(name), r.max_rel_error, tol, r.coords_checked, r.max_rel_error < tol};
}

}  // namespace detail

/// Critic MSE, actor entropy objective (plain and composed with a stochastic
/// baseline), model loss under one noise draw and averaged over 1000 draws.
inline std::vector<GradReport> gradient_fidelity(std::uint64_t seed) {
  std::vector<GradReport> out;
  Rng rng(seed);
  const int obs = 4, act = 1, n = 16;
  agents::SacConfig sc;
  sc.alpha0 = 0.3;
  agents::SacAgent agent(obs, act, sc, derive_seed(seed, 1));
  const Batch b = detail::random_batch(rng, obs, act, n);

  {
    Vec y(n);
    for (int i = 0; i < n; ++i) y(i) = uniform(rng, -1.0, 1.0);
    auto& q = agent.mutable_critic1();
    Vec g = Vec::Zero(q.n_params());
    agents::SacAgent::critic_loss(q, b, y, &g);
    const auto r = nn::gradient_check(q.params(), [&] { return agents::SacAgent::critic_loss(q, b, y, nullptr); },
                                      g, rng);
    out.push_back(detail::finish("critic_mse", r, 1e-4));
  }

  const Mat eps = standard_normal(rng, act, n);
  {
    auto& a = agent.mutable_actor();
    Vec g = Vec::Zero(a.n_params());
    agent.actor_loss(b.states, eps, nullptr, &g);
    const auto r = nn::gradient_check(a.params(), [&] { return agent.actor_loss(b.states, eps, nullptr, nullptr); },
                                      g, rng);
    out.push_back(detail::finish("actor_entropy_objective", r, 1e-4));
  }
  {
    Rng init(derive_seed(seed, 2));
    const auto baseline = std::make_shared<agents::ActorBaseline>(nn::Mlp({obs, 16, 2 * act}, init),
                                                                  agents::BaselineMode::Stochastic);
    auto& a = agent.mutable_actor();
    Vec g = Vec::Zero(a.n_params());
    agent.actor_loss(b.states, eps, baseline.get(), &g);
    const auto r = nn::gradient_check(
        a.params(), [&] { return agent.actor_loss(b.states, eps, baseline.get(), nullptr); }, g, rng);
    out.push_back(detail::finish("residual_actor_entropy_objective", r, 1e-4));
  }

  Vec s_min = Vec::Constant(obs, -2.0), s_max = Vec::Constant(obs, 2.0);
  model::ModelConfig mc;
  model::GaussianDynamicsModel m(obs, act, s_min, s_max, mc, derive_seed(seed, 3));
  {
    // Push the variance head into the unclamped range so its gradient is exercised.
    auto bias = m.mutable_network().bias(m.network().n_layers() - 1);
    for (int i = obs; i < 2 * obs; ++i) bias(i) = -3.0;
    const auto noise = model::draw_loss_noise(m, n, rng);
    Vec g = Vec::Zero(m.network().n_params());
    model::model_loss(m, b.states, b.actions, b.next_states, noise, &g);
    const auto r = nn::gradient_check(
        m.mutable_network().params(),
        [&] { return model::model_loss(m, b.states, b.actions, b.next_states, noise, nullptr); }, g, rng);
    out.push_back(detail::finish("model_loss", r, 1e-4));
  }
  {
    // Mean over 1000 fixed noise draws: the batch is tiled once per draw, so the
    // tiled loss equals the average of the per-draw losses.
    const int draws = 1000, nb = 4;
    const Batch small = detail::random_batch(rng, obs, act, nb);
    Mat S(obs, nb * draws), A(act, nb * draws), S2(obs, nb * draws);
    for (int k = 0; k < draws; ++k) {
      S.middleCols(k * nb, nb) = small.states;
      A.middleCols(k * nb, nb) = small.actions;
      S2.middleCols(k * nb, nb) = small.next_states;
    }
    const auto noise = model::draw_loss_noise(m, nb * draws, rng);
    Vec g = Vec::Zero(m.network().n_params());
    model::model_loss(m, S, A, S2, noise, &g);
    const auto r = nn::gradient_check(m.mutable_network().params(),
                                      [&] { return model::model_loss(m, S, A, S2, noise, nullptr); }, g, rng);
    out.push_back(detail::finish("model_loss_noise_averaged", r, 1e-3));
  }
  return out;
}

}  // namespace mbrpl::diag

#endif  // MBRPL_GRADCHECK_HPP
