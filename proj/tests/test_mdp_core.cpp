#include <gtest/gtest.h>

#include <deque>
#include <filesystem>

#include "mbrpl/bounds_lab.hpp"
#include "mbrpl/mdp_core.hpp"

using namespace mbrpl;
using mdp::FiniteMDP;
using mdp::ReplayBuffer;
using mdp::TabularPolicy;
using mdp::Transition;

namespace {

Transition make_t(double tag, int dim = 2) {
  Transition t;
  t.state = Vec::Constant(dim, tag);
  t.action = Vec::Constant(1, tag);
  t.reward = tag;
  t.next_state = Vec::Constant(dim, tag + 1);
  return t;
}

FiniteMDP random_mdp(std::uint64_t seed, int S, int A, double gamma) {
  return bounds::random_mdp_pair(seed, S, A, 0.0, gamma).Mb;
}

}  // namespace

TEST(ReplayBuffer, EvictsOldestFirst) {
  ReplayBuffer b(2);
  for (double tag : {1.0, 2.0, 3.0}) b.push(make_t(tag));
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.at(0).reward, 2.0);
  EXPECT_EQ(b.at(1).reward, 3.0);
  EXPECT_EQ(b.insert_count(), 3u);
}

TEST(ReplayBuffer, HoldsFullCapacityBeforeEvicting) {
  ReplayBuffer b(10000);
  for (int i = 0; i < 10000; ++i) b.push(make_t(i));
  EXPECT_EQ(b.size(), 10000u);
  EXPECT_EQ(b.at(0).reward, 0.0);
  b.push(make_t(10000));
  EXPECT_EQ(b.size(), 10000u);
  EXPECT_EQ(b.at(0).reward, 1.0);
}

TEST(ReplayBuffer, RejectsMismatchedDimensions) {
  ReplayBuffer b(4);
  b.push(make_t(0, 2));
  EXPECT_THROW(b.push(make_t(1, 3)), ConfigError);
  Transition bad = make_t(0, 2);
  bad.next_state = Vec::Zero(3);
  EXPECT_THROW(b.push(bad), ConfigError);
  Transition nonfinite = make_t(0, 2);
  nonfinite.reward = std::numeric_limits<double>::infinity();
  EXPECT_THROW(b.push(nonfinite), ConfigError);
  Transition neg = make_t(0, 2);
  neg.agent_id = -1;
  EXPECT_THROW(b.push(neg), ConfigError);
}

TEST(ReplayBuffer, FifoMatchesNaiveListUnderRandomPushes) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t cap = 1 + rng() % 17;
    ReplayBuffer b(cap);
    std::deque<double> oracle;
    const int pushes = static_cast<int>(rng() % 60);
    for (int i = 0; i < pushes; ++i) {
      const double tag = uniform(rng, -5, 5);
      b.push(make_t(tag));
      oracle.push_back(tag);
      if (oracle.size() > cap) oracle.pop_front();
    }
    ASSERT_EQ(b.size(), oracle.size());
    for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_EQ(b.at(i).reward, oracle[i]);
    EXPECT_EQ(b.insert_count(), static_cast<std::uint64_t>(pushes));
  }
}

TEST(ReplayBuffer, SingleEntrySamplesRepeat) {
  ReplayBuffer b(5);
  b.push(make_t(4.0));
  const auto batch = b.sample(4, std::uint64_t{1});
  ASSERT_EQ(batch.size(), 4u);
  for (const auto& t : batch) EXPECT_EQ(t.reward, 4.0);
}

TEST(ReplayBuffer, SamplingIsSeedDeterministic) {
  ReplayBuffer b(100);
  for (int i = 0; i < 100; ++i) b.push(make_t(i));
  const auto x = b.sample(128, std::uint64_t{42});
  const auto y = b.sample(128, std::uint64_t{42});
  ASSERT_EQ(x.size(), 128u);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i].reward, y[i].reward);
}

TEST(ReplayBuffer, EmptySampleThrows) {
  ReplayBuffer b(3);
  EXPECT_THROW(b.sample(1, std::uint64_t{0}), ConfigError);
}

TEST(ValueOfPolicy, SingleStateGeometricSeries) {
  auto m = FiniteMDP::zeros(1, 1, 0.9);
  m.p(0, 0, 0) = 1.0;
  m.reward(0, 0, 0) = 1.0;
  const auto v = mdp::value_of_policy(m, TabularPolicy::uniform(1, 1));
  EXPECT_NEAR(v.v(0), 10.0, 1e-12);
  EXPECT_NEAR(v.at_rho0, 10.0, 1e-12);
}

TEST(ValueOfPolicy, ZeroRewardGivesZeroValue) {
  auto m = random_mdp(3, 4, 2, 0.9);
  std::fill(m.r.begin(), m.r.end(), 0.0);
  const auto v = mdp::value_of_policy(m, TabularPolicy::uniform(4, 2));
  EXPECT_EQ(v.v.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ValueOfPolicy, MatchesMonteCarloRollouts) {
  const auto m = random_mdp(11, 5, 3, 0.9);
  Rng prng(12);
  const auto pi = bounds::random_policy(prng, 5, 3);
  const double exact = mdp::value_of_policy(m, pi).at_rho0;

  // 10^6 simulated steps in episodes truncated where gamma^T < 1e-12.
  const int horizon = 263;
  const int episodes = 1000000 / horizon;
  Rng rng(13);
  std::discrete_distribution<int> start(m.rho0.data(), m.rho0.data() + m.rho0.size());
  double sum = 0.0, sum2 = 0.0;
  for (int e = 0; e < episodes; ++e) {
    int s = start(rng);
    double ret = 0.0, disc = 1.0;
    for (int t = 0; t < horizon; ++t) {
      const Vec probs = pi.probs.row(s).transpose();
      std::discrete_distribution<int> act(probs.data(), probs.data() + probs.size());
      const int a = act(rng);
      const Vec row = m.row(s, a);
      std::discrete_distribution<int> next(row.data(), row.data() + row.size());
      const int sn = next(rng);
      ret += disc * m.reward(s, a, sn);
      disc *= m.gamma;
      s = sn;
    }
    sum += ret;
    sum2 += ret * ret;
  }
  const double mean = sum / episodes;
  const double se = std::sqrt((sum2 / episodes - mean * mean) / (episodes - 1));
  EXPECT_LT(std::abs(mean - exact), 3.0 * se) << "exact " << exact << " mc " << mean << " se " << se;
}

TEST(ValueOfPolicy, BellmanResidualIsTiny) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int S = 1 + static_cast<int>(rng() % 30), A = 1 + static_cast<int>(rng() % 5);
    const double gamma = uniform(rng, 0.1, 0.99);
    const auto m = random_mdp(rng(), S, A, gamma);
    const auto pi = bounds::random_policy(rng, S, A);
    const Vec v = mdp::value_of_policy(m, pi).v;
    const auto [P, r] = mdp::induced_chain(m, pi);
    EXPECT_LT((v - (r + gamma * P * v)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ValueOfPolicy, QIsConsistentWithV) {
  const auto m = random_mdp(21, 4, 3, 0.8);
  Rng rng(22);
  const auto pi = bounds::random_policy(rng, 4, 3);
  const Mat q = mdp::q_of_policy(m, pi);
  const Vec v = mdp::value_of_policy(m, pi).v;
  for (int s = 0; s < 4; ++s) EXPECT_NEAR(pi.probs.row(s).dot(q.row(s)), v(s), 1e-12);
}

TEST(ValueOfPolicy, ShapeMismatchThrows) {
  const auto m = random_mdp(1, 3, 2, 0.5);
  EXPECT_THROW(mdp::value_of_policy(m, TabularPolicy::uniform(3, 3)), ConfigError);
}

TEST(KlCategorical, ClosedForms) {
  Vec p(2), q(2);
  p << 0.3, 0.7;
  EXPECT_EQ(mdp::kl_categorical(p, p), 0.0);
  p << 1.0, 0.0;
  q << 0.5, 0.5;
  EXPECT_NEAR(mdp::kl_categorical(p, q), std::log(2.0), 1e-15);
  EXPECT_NEAR(mdp::kl_categorical(p, q), 0.6931, 1e-4);
  p << 0.5, 0.5;
  q << 1.0, 0.0;
  EXPECT_TRUE(std::isinf(mdp::kl_categorical(p, q)));
}

TEST(KlCategorical, NonNegativeAndZeroOnlyOnEquality) {
  Rng rng(9);
  for (int i = 0; i < 2000; ++i) {
    const int n = 2 + static_cast<int>(rng() % 8);
    const Vec p = bounds::dirichlet(rng, n), q = bounds::dirichlet(rng, n);
    EXPECT_GE(mdp::kl_categorical(p, q), 0.0);
    EXPECT_LE(mdp::kl_categorical(p, p), 1e-12);
    EXPECT_GT(mdp::kl_categorical(p, q), 1e-12);
  }
}

TEST(FiniteMdp, ValidationCatchesBadRows) {
  auto m = random_mdp(2, 3, 2, 0.9);
  EXPECT_NO_THROW(m.validate());
  m.p(0, 0, 0) += 1e-9;
  EXPECT_THROW(m.validate(), ConfigError);
  auto g = random_mdp(2, 3, 2, 0.9);
  g.gamma = 1.0;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(TabularPolicy, ValidationCatchesBadRows) {
  TabularPolicy pi{Mat::Constant(2, 2, 0.5)};
  EXPECT_NO_THROW(pi.validate());
  pi.probs(1, 0) = 0.6;
  EXPECT_THROW(pi.validate(), ConfigError);
}

TEST(FiniteMdp, JsonRoundTripIsExact) {
  const auto m = random_mdp(17, 4, 3, 0.95);
  const auto path = (std::filesystem::temp_directory_path() / "mbrpl_mdp_roundtrip.json").string();
  mdp::save_finite_mdp(m, path);
  const auto back = mdp::load_finite_mdp(path);
  EXPECT_EQ(back.n_states, m.n_states);
  EXPECT_EQ(back.n_actions, m.n_actions);
  EXPECT_EQ(back.gamma, m.gamma);
  EXPECT_EQ(back.P, m.P);
  EXPECT_EQ(back.r, m.r);
  EXPECT_EQ(back.rho0, m.rho0);
  std::filesystem::remove(path);
}
