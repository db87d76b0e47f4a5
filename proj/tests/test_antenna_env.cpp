#include <gtest/gtest.h>

#include <sstream>

#include "mbrpl/antenna_env.hpp"

using namespace mbrpl;
using namespace mbrpl::env;

namespace {

EnvConfig small_config() {
  EnvConfig c;
  c.n_rings = 1;
  c.n_users = 300;
  c.building_count = 15;
  c.calibration_samples = 100;
  c.episode_length = 5;
  return c;
}

std::vector<double> zeros(int n) { return std::vector<double>(static_cast<std::size_t>(n), 0.0); }

}  // namespace

TEST(AntennaEnv, OneRingYieldsTwentyOneObservationsOfDimFour) {
  AntennaEnv e(small_config());
  const auto obs = e.reset(1);
  ASSERT_EQ(obs.size(), 21u);
  for (const auto& o : obs) {
    EXPECT_EQ(o.size(), 4);
    EXPECT_GE(o(0), 0.0);
    EXPECT_LE(o(0), 15.0);
  }
}

TEST(AntennaEnv, SameSeedSameInitialObservations) {
  AntennaEnv a(small_config()), b(small_config());
  const auto x = a.reset(9), y = b.reset(9);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(AntennaEnv, ActionClampedToOneDegree) {
  AntennaEnv e(small_config());
  e.reset(2);
  const double before = e.tilts()[0];
  auto a = zeros(e.n_agents());
  a[0] = 1.5;
  const auto ts = e.step(a);
  EXPECT_EQ(ts[0].action(0), 1.0);
  EXPECT_DOUBLE_EQ(e.tilts()[0], std::min(before + 1.0, 15.0));
}

TEST(AntennaEnv, TiltSaturatesAtFifteen) {
  AntennaEnv e(small_config());
  e.reset(3);
  const std::vector<double> a(static_cast<std::size_t>(e.n_agents()), 1.0);
  for (int k = 0; k < 16; ++k) e.step(a);
  for (double w : e.tilts()) EXPECT_EQ(w, 15.0);
}

TEST(AntennaEnv, WrongActionCountThrows) {
  AntennaEnv e(small_config());
  e.reset(4);
  EXPECT_THROW(e.step(zeros(3)), ConfigError);
}

TEST(AntennaEnv, OneTransitionPerAntennaWithSharedStep) {
  AntennaEnv e(small_config());
  e.reset(5);
  for (int t = 1; t <= 5; ++t) {
    const auto ts = e.step(zeros(e.n_agents()));
    ASSERT_EQ(ts.size(), 21u);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      EXPECT_EQ(ts[i].agent_id, static_cast<int>(i));
      EXPECT_EQ(ts[i].step, t);
      EXPECT_EQ(ts[i].done, t == 5);
    }
  }
}

TEST(AntennaEnv, RewardIsSumOfNextStateKpis) {
  AntennaEnv e(small_config());
  e.reset(6);
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> a(21);
    for (auto& x : a) x = uniform(rng, -1.0, 1.0);
    for (const auto& tr : e.step(a)) {
      EXPECT_EQ(tr.reward, tr.next_state(1) + tr.next_state(2) + tr.next_state(3));
      EXPECT_EQ(tr.reward, reward_from_next_state(tr.next_state));
    }
  }
}

TEST(AntennaEnv, RewardZeroWhenKpisSitAtNormalizerMeans) {
  auto cfg = small_config();
  AntennaEnv probe(cfg);
  probe.reset(7);
  const auto raw = probe.raw_kpis();
  ASSERT_FALSE(raw[0].empty());
  KpiNormalizer n;
  n.mean = {raw[0].cov, raw[0].cap, raw[0].qual};
  n.std = {2.0, 3.0, 4.0};
  AntennaEnv e(cfg, n);
  e.reset(7);
  const auto ts = e.step(zeros(e.n_agents()));
  EXPECT_EQ(ts[0].reward, 0.0);
}

TEST(AntennaEnv, BuildingToggleRemovesWallLoss) {
  auto cfg = small_config();
  cfg.buildings_enabled = false;
  AntennaEnv e(cfg);
  e.reset(8);
  const auto& L = e.layout();
  ASSERT_FALSE(L.buildings.empty());
  const auto& pc = cfg.propagation;
  bool any_blocked = false;
  for (int ci = 0; ci < e.links().n_cells; ++ci)
    for (int u = 0; u < e.links().n_users; ++u) {
      const auto& a = L.antennas[ci];
      const radio::Point p = L.users[u];
      const double d = std::sqrt(std::pow(p.x - a.position.x, 2) + std::pow(p.y - a.position.y, 2) +
                                 std::pow(a.height_m - L.user_height_m, 2));
      ASSERT_EQ(e.links().loss_linear(ci, u), radio::from_db(-radio::distance_loss_db(d, pc)));
      any_blocked = any_blocked || radio::wall_loss_db(a.position, p, L.buildings) > 0.0;
    }
  EXPECT_TRUE(any_blocked);
}

TEST(AntennaEnv, TiltStaysInRangeUnderRandomActions) {
  AntennaEnv e(small_config());
  e.reset(10);
  Rng rng(10);
  for (int t = 0; t < 300; ++t) {
    if (e.episode_step() == e.config().episode_length) e.begin_episode();
    std::vector<double> a(21);
    for (auto& x : a) x = uniform(rng, -5.0, 5.0);
    if (t % 37 == 0) a[t % 21] = std::numeric_limits<double>::quiet_NaN();
    const auto ts = e.step(a);
    for (double w : e.tilts()) ASSERT_TRUE(w >= 0.0 && w <= 15.0);
    for (const auto& tr : ts) ASSERT_TRUE(tr.next_state.allFinite());
  }
}

TEST(AntennaEnv, EmptyCellReadsAsClipFloor) {
  auto cfg = small_config();
  cfg.n_rings = 0;
  cfg.n_users = 300;
  AntennaEnv e(cfg);
  e.reset(11);
  KpiNormalizer n = e.normalizer();
  AntennaEnv tiny([] {
    EnvConfig c;
    c.n_rings = 0;
    c.n_users = 1;
    c.building_count = 0;
    c.calibration_samples = 100;
    return c;
  }(), n);
  tiny.reset(11);
  int empties = 0;
  for (int i = 0; i < tiny.n_agents(); ++i)
    if (tiny.raw_kpis()[i].empty()) {
      ++empties;
      EXPECT_EQ(tiny.observation(i)(1), -3.0);
      EXPECT_EQ(tiny.observation(i)(3), -3.0);
    }
  EXPECT_EQ(empties, 2);
}

TEST(KpiNormalizer, CalibrationSampleIsStandardised) {
  auto cfg = small_config();
  const auto layout = radio::generate_layout(12, cfg.n_rings, cfg.n_users, cfg.building_count, cfg.layout);
  const auto links = radio::build_link_table(layout, cfg.propagation);
  Rng rng(13);
  const auto samples = collect_kpi_samples(links, 200, rng, cfg.propagation);
  KpiNormalizer n = KpiNormalizer::fit(samples, 1e9);
  for (int k = 0; k < 3; ++k) {
    double m = 0.0, v = 0.0;
    for (double x : samples[k]) m += n.normalize(k, x);
    m /= samples[k].size();
    for (double x : samples[k]) v += std::pow(n.normalize(k, x) - m, 2);
    const double sd = std::sqrt(v / (samples[k].size() - 1));
    EXPECT_LT(std::abs(m), 0.05);
    EXPECT_GE(sd, 0.9);
    EXPECT_LE(sd, 1.1);
  }
}

TEST(KpiNormalizer, ClipsAtThreeSigma) {
  KpiNormalizer n;
  n.mean = {1.0, 0.0, 0.0};
  n.std = {2.0, 1.0, 1.0};
  EXPECT_EQ(n.normalize(kCov, 1.0 + 10 * 2.0), 3.0);
  EXPECT_EQ(n.normalize(kCov, 1.0 - 10 * 2.0), -3.0);
  EXPECT_DOUBLE_EQ(n.normalize(kCov, 2.0), 0.5);
}

TEST(KpiNormalizer, ConstantStreamIsRejected) {
  std::array<std::vector<double>, 3> s;
  for (auto& v : s) v.assign(200, 4.2);
  EXPECT_THROW(KpiNormalizer::fit(s, 3.0), ConfigError);
}

TEST(KpiNormalizer, CalibrateRequiresHundredSamples) {
  EXPECT_THROW(calibrate_normalizer(small_config(), 0, 99), ConfigError);
  const auto n = calibrate_normalizer(small_config(), 0, 100);
  for (double s : n.std) EXPECT_GT(s, 0.0);
}

TEST(AntennaEnv, StepLogCsv) {
  AntennaEnv e(small_config());
  e.reset(14);
  const auto ts = e.step(zeros(21));
  std::ostringstream os;
  write_step_log_header(os);
  write_step_log(os, ts);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "step,agent_id,tilt,cov,cap,qual,reward");
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 21);
}
