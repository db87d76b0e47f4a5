#ifndef MBRPL_HARNESS_HPP
#define MBRPL_HARNESS_HPP

#include <openssl/sha.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "mbrpl/agents.hpp"
#include "mbrpl/antenna_env.hpp"
#include "mbrpl/model_learning.hpp"

namespace mbrpl::harness {

namespace fs = std::filesystem;
using nlohmann::json;

// --- Configuration -------------------------------------------------------------

/// Full experiment description. Stored as JSON; every key can be overridden
/// with a dotted path ("sac.actor_lr=1e-3").
struct ExperimentConfig {
  json doc;

  static json defaults() {
    return json{
        {"method", "mbrpl"},
        {"seeds", {0, 1, 2, 3, 4}},
        {"env_seed", 0},
        {"out_dir", "runs/mbrpl"},
        {"baseline_path", ""},
        {"baseline_mode", "stochastic"},
        {"cbi_steps", 0},
        {"total_steps", 10000},
        {"learning_starts", 100},
        {"buffer_capacity", 10000},
        {"batch", 128},
        {"model_batch", 128},
        {"horizon", 10},
        {"init_sigma0", 0.1},
        {"checkpoint_every", 500},
        {"eval_episodes", 20},
        {"env",
         {{"n_rings", 1},
          {"n_users", 1000},
          {"building_count", 40},
          {"buildings_enabled", true},
          {"episode_length", 500},
          {"calibration_samples", 200},
          {"clip_sigmas", 3.0}}},
        {"sac",
         {{"hidden", {64, 64, 64}},
          {"actor_lr", 3e-4},
          {"critic_lr", 3e-4},
          {"alpha_lr", 3e-4},
          {"alpha0", 1.0},
          {"learn_alpha", true},
          {"target_entropy", -1.0},
          {"gamma", 0.9},
          {"tau", 5e-3},
          {"target_update_period", 2}}},
        {"dqn",
         {{"hidden", {64, 64, 64}},
          {"lr", 3e-4},
          {"gamma", 0.9},
          {"tau", 5e-3},
          {"eps0", 1.0},
          {"eps_final", 0.01},
          {"decay_steps", 3000}}},
        {"model", {{"hidden", {64, 64, 64}}, {"lr", 1e-3}, {"loss_samples", 10}}},
        {"pretrain", {{"total_steps", 2000}}},
    };
  }

  ExperimentConfig() : doc(defaults()) {}

  /// Defaults overlaid with a (possibly partial) document; unknown keys are rejected.
  static ExperimentConfig from_json(const json& j, bool check = true) {
    ExperimentConfig c;
    merge_known(c.doc, j, "");
    if (check) c.validate();
    return c;
  }

  /// With `check` false, validation is left to the caller (after overrides).
  static ExperimentConfig load(const std::string& path, bool check = true) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j, check);
  }

  /// Applies "a.b.c=value"; the value is parsed as JSON, falling back to a string.
  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    std::string pointer = "/" + key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const json::json_pointer ptr(pointer);
    if (!doc.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    if (doc.at(ptr).is_number() && !value.is_number())
      throw ConfigError("config key '" + key + "' expects a number, got '" + raw + "'");
    if (doc.at(ptr).is_boolean() && !value.is_boolean())
      throw ConfigError("config key '" + key + "' expects true/false, got '" + raw + "'");
    doc[ptr] = value;
  }

  model::Method method() const { return model::method_from_string(doc.at("method").get<std::string>()); }
  std::vector<std::uint64_t> seeds() const { return doc.at("seeds").get<std::vector<std::uint64_t>>(); }
  std::uint64_t env_seed() const { return doc.at("env_seed").get<std::uint64_t>(); }
  std::string out_dir() const { return doc.at("out_dir").get<std::string>(); }
  std::string baseline_path() const { return doc.at("baseline_path").get<std::string>(); }
  int eval_episodes() const { return doc.at("eval_episodes").get<int>(); }

  agents::BaselineMode baseline_mode() const {
    const auto m = doc.at("baseline_mode").get<std::string>();
    if (m == "mean") return agents::BaselineMode::Mean;
    if (m == "stochastic") return agents::BaselineMode::Stochastic;
    throw ConfigError("baseline_mode must be 'mean' or 'stochastic', got '" + m + "'");
  }

  env::EnvConfig env_config() const {
    const auto& e = doc.at("env");
    env::EnvConfig c;
    c.n_rings = e.at("n_rings");
    c.n_users = e.at("n_users");
    c.building_count = e.at("building_count");
    c.buildings_enabled = e.at("buildings_enabled");
    c.episode_length = e.at("episode_length");
    c.calibration_samples = e.at("calibration_samples");
    c.clip_sigmas = e.at("clip_sigmas");
    return c;
  }

  model::TrainConfig train_config() const {
    model::TrainConfig t;
    t.method = method();
    t.total_steps = doc.at("total_steps");
    t.learning_starts = doc.at("learning_starts");
    t.buffer_capacity = doc.at("buffer_capacity");
    t.batch = doc.at("batch");
    t.model_batch = doc.at("model_batch");
    t.horizon = doc.at("horizon");
    t.cbi_steps = doc.at("cbi_steps");
    t.init_sigma0 = doc.at("init_sigma0");
    t.checkpoint_every = doc.at("checkpoint_every");
    const auto& s = doc.at("sac");
    t.sac.hidden = s.at("hidden").get<std::vector<int>>();
    t.sac.actor_lr = s.at("actor_lr");
    t.sac.critic_lr = s.at("critic_lr");
    t.sac.alpha_lr = s.at("alpha_lr");
    t.sac.alpha0 = s.at("alpha0");
    t.sac.learn_alpha = s.at("learn_alpha");
    t.sac.target_entropy = s.at("target_entropy");
    t.sac.gamma = s.at("gamma");
    t.sac.tau = s.at("tau");
    t.sac.target_update_period = s.at("target_update_period");
    const auto& d = doc.at("dqn");
    t.dqn.hidden = d.at("hidden").get<std::vector<int>>();
    t.dqn.lr = d.at("lr");
    t.dqn.gamma = d.at("gamma");
    t.dqn.tau = d.at("tau");
    t.dqn.eps0 = d.at("eps0");
    t.dqn.eps_final = d.at("eps_final");
    t.dqn.decay_steps = d.at("decay_steps");
    const auto& m = doc.at("model");
    t.model.hidden = m.at("hidden").get<std::vector<int>>();
    t.model.lr = m.at("lr");
    t.model.loss_samples = m.at("loss_samples");
    return t;
  }

  /// Rejects invalid combinations before any compute.
  void validate() const {
    try {
      const auto m = method();
      if (seeds().empty()) throw ConfigError("seeds must be non-empty");
      if (model::uses_baseline(m) && baseline_path().empty())
        throw ConfigError("method " + model::to_string(m) + " requires baseline_path");
      baseline_mode();
      env_config().validate();
      train_config().validate();
      if (eval_episodes() < 1) throw ConfigError("eval_episodes must be >= 1");
      if (doc.at("pretrain").at("total_steps").get<long>() < 1)
        throw ConfigError("pretrain.total_steps must be >= 1");
      const auto sac = train_config().sac;
      if (!(sac.gamma >= 0.0 && sac.gamma < 1.0)) throw ConfigError("sac.gamma must lie in [0,1)");
      if (!(sac.tau > 0.0 && sac.tau <= 1.0)) throw ConfigError("sac.tau must lie in (0,1]");
      if (sac.target_update_period < 1) throw ConfigError("sac.target_update_period must be >= 1");
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config type error: ") + e.what());
    }
  }

 private:
  static void merge_known(json& base, const json& over, const std::string& prefix) {
    if (!over.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
    for (auto it = over.begin(); it != over.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
      if (base[it.key()].is_object())
        merge_known(base[it.key()], it.value(), key);
      else
        base[it.key()] = it.value();
    }
  }
};

// --- Hashing -----------------------------------------------------------------------

/// SHA-1 of "blob <size>\0<content>", the git object id of `content`.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string obj = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(obj.data()), obj.size(), digest);
  std::ostringstream os;
  for (unsigned char c : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return os.str();
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// --- Statistics ------------------------------------------------------------------

struct MeanCi {
  double mean = 0.0;
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
};

/// Mean with a two-sided Student-t 95% interval; the interval needs >= 2 values.
inline MeanCi mean_ci95(const std::vector<double>& xs) {
  if (xs.empty()) throw ConfigError("mean_ci95: no values");
  MeanCi r;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) r.mean += x;
  r.mean /= n;
  if (xs.size() < 2) return r;
  double ss = 0.0;
  for (double x : xs) ss += (x - r.mean) * (x - r.mean);
  const double se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  const boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(boost::math::complement(dist, 0.025));
  r.ci_low = r.mean - t * se;
  r.ci_high = r.mean + t * se;
  return r;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median: no values");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Mean of the last `tail_fraction` of the series (at least one value).
inline double final_level(const std::vector<double>& series, double tail_fraction = 0.1) {
  if (series.empty()) throw ConfigError("final_level: empty series");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(tail_fraction * series.size())));
  double s = 0.0;
  for (auto i = series.size() - n; i < series.size(); ++i) s += series[i];
  return s / static_cast<double>(n);
}

/// Index of the first element at or after `first` reaching ref + frac * (final - ref),
/// where final is the tail level and ref the minimum from `first` on unless given.
inline std::size_t convergence_index(const std::vector<double>& series, double frac,
                                     std::optional<double> reference = std::nullopt, std::size_t first = 0) {
  const double fin = final_level(series);
  first = std::min(first, series.size() - 1);
  const double ref = reference ? *reference : *std::min_element(series.begin() + first, series.end());
  const double threshold = ref + frac * (fin - ref);
  for (std::size_t i = first; i < series.size(); ++i)
    if (series[i] >= threshold) return i;
  return series.size() - 1;
}

/// Steps in the logged running average; earlier entries average a partial window.
inline constexpr std::size_t kRunningWindow = 100;

// --- Logs ---------------------------------------------------------------------------

inline void write_train_log(const std::string& path, const std::vector<model::StepRecord>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << std::setprecision(17);
  model::write_train_log_header(os);
  for (const auto& r : log) model::write_train_log_row(os, r);
}

/// Column-name -> values reader for the numeric CSVs this library writes.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> columns;

  const std::vector<double>& col(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return columns[i];
    throw ConfigError("CSV has no column '" + name + "'");
  }
  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }
};

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("'" + path + "' is empty");
  std::stringstream hs(line);
  for (std::string cell; std::getline(hs, cell, ',');) t.header.push_back(cell);
  t.columns.resize(t.header.size());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::size_t i = 0;
    for (std::string cell; std::getline(ls, cell, ','); ++i) {
      if (i >= t.columns.size()) throw ConfigError("'" + path + "': row wider than header");
      t.columns[i].push_back(cell == "nan" || cell == "-nan" ? std::numeric_limits<double>::quiet_NaN()
                                                             : std::stod(cell));
    }
    if (i != t.columns.size()) throw ConfigError("'" + path + "': row narrower than header");
  }
  return t;
}

/// step,mean,ci_low,ci_high over per-seed series aligned by row.
inline void write_aggregate_csv(const std::string& path, const std::vector<double>& steps,
                                const std::vector<std::vector<double>>& per_seed) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  os << std::setprecision(17) << "step,mean,ci_low,ci_high\n";
  for (std::size_t i = 0; i < steps.size(); ++i) {
    std::vector<double> xs;
    for (const auto& s : per_seed) xs.push_back(s[i]);
    const auto m = mean_ci95(xs);
    os << static_cast<long>(steps[i]) << ',' << m.mean << ',' << m.ci_low << ',' << m.ci_high << '\n';
  }
}

// --- Policy evaluation ------------------------------------------------------------

struct EvalStats {
  double mean = 0.0;  // of per-episode mean per-antenna reward
  double std = 0.0;
  std::vector<double> episodes;
};

inline EvalStats summarize(std::vector<double> xs) {
  EvalStats s;
  s.episodes = std::move(xs);
  for (double x : s.episodes) s.mean += x;
  s.mean /= static_cast<double>(s.episodes.size());
  double ss = 0.0;
  for (double x : s.episodes) ss += (x - s.mean) * (x - s.mean);
  s.std = s.episodes.size() > 1 ? std::sqrt(ss / static_cast<double>(s.episodes.size() - 1)) : 0.0;
  return s;
}

using ActionFn = std::function<Vec(const Vec& state, Rng& rng)>;

/// Runs `episodes` full episodes from fresh random tilts on a reset environment.
inline EvalStats evaluate(env::AntennaEnv& e, const ActionFn& act, int episodes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> per_episode;
  e.reseed_tilts(derive_seed(seed, 0xE7A1));
  for (int ep = 0; ep < episodes; ++ep) {
    auto states = ep == 0 ? e.observations() : e.begin_episode();
    double total = 0.0;
    for (int t = 0; t < e.config().episode_length; ++t) {
      std::vector<double> deltas;
      for (const auto& s : states) deltas.push_back(act(s, rng)(0) * env::kMaxDeltaTiltDeg);
      const auto ts = e.step(deltas);
      for (const auto& tr : ts) total += tr.reward / static_cast<double>(ts.size());
      states = e.observations();
    }
    per_episode.push_back(total / e.config().episode_length);
  }
  return summarize(std::move(per_episode));
}

inline ActionFn random_actions() {
  return [](const Vec&, Rng& rng) { return Vec::Constant(1, uniform(rng, -1.0, 1.0)); };
}

inline ActionFn baseline_actions(std::shared_ptr<const agents::BaselinePolicy> b) {
  return [b](const Vec& s, Rng& rng) { return b->act(s, rng); };
}

inline json to_json(const EvalStats& s) {
  return json{{"mean", s.mean}, {"std", s.std}, {"episodes", s.episodes}};
}

inline env::AntennaEnv make_env(const env::EnvConfig& ec, std::uint64_t env_seed) {
  env::AntennaEnv e(ec);
  e.reset(env_seed);
  return e;
}

// --- Experiments -------------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  model::TrainResult result;
};

struct ExperimentResult {
  std::string out_dir;
  std::vector<SeedOutcome> seeds;
  bool all_ok() const {
    return std::all_of(seeds.begin(), seeds.end(), [](const auto& s) { return s.ok; });
  }
};

inline std::shared_ptr<const agents::BaselinePolicy> load_baseline(const ExperimentConfig& c) {
  if (c.baseline_path().empty()) return nullptr;
  return agents::ActorBaseline::load(c.baseline_path(), c.baseline_mode());
}

inline std::string seed_dir(const std::string& out, std::uint64_t seed) {
  return (fs::path(out) / ("seed_" + std::to_string(seed))).string();
}

/// Trains every seed in sequence (one failing seed does not stop the others),
/// then writes per-seed logs, the aggregate CSV and a manifest.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::cerr,
                                       const model::TrainHooks& hooks = {}) {
  cfg.validate();
  const std::string out = cfg.out_dir();
  fs::create_directories(out);
  const auto baseline = model::uses_baseline(cfg.method()) ? load_baseline(cfg) : nullptr;
  ExperimentResult res{out, {}};
  for (const auto seed : cfg.seeds()) {
    SeedOutcome so;
    so.seed = seed;
    const std::string dir = seed_dir(out, seed);
    fs::create_directories(dir);
    try {
      auto e = make_env(cfg.env_config(), cfg.env_seed());
      e.reseed_tilts(derive_seed(seed, 0x7117));
      auto tc = cfg.train_config();
      tc.checkpoint_dir = (fs::path(dir) / "checkpoints").string();
      so.result = model::train(e, tc, baseline, seed, hooks, &log);
      write_train_log((fs::path(dir) / "train_log.csv").string(), so.result.log);
      so.ok = true;
    } catch (const std::exception& ex) {
      so.error = ex.what();
      log << "seed " << seed << " failed: " << ex.what() << '\n';
    }
    res.seeds.push_back(std::move(so));
  }

  std::vector<std::vector<double>> series;
  std::vector<double> steps;
  for (const auto& s : res.seeds)
    if (s.ok) {
      std::vector<double> v;
      for (const auto& r : s.result.log) v.push_back(r.running_avg100);
      series.push_back(std::move(v));
      if (steps.empty())
        for (const auto& r : s.result.log) steps.push_back(static_cast<double>(r.step));
    }
  if (!series.empty()) write_aggregate_csv((fs::path(out) / "aggregate.csv").string(), steps, series);

  const std::string cfg_text = cfg.doc.dump(2);
  json manifest{{"config", cfg.doc}, {"config_sha1", git_blob_sha1(cfg_text)}};
  if (!cfg.baseline_path().empty() && fs::exists(cfg.baseline_path()))
    manifest["baseline_sha1"] = git_blob_sha1(read_file(cfg.baseline_path()));
  json seeds = json::array();
  for (const auto& s : res.seeds) {
    json j{{"seed", s.seed}, {"ok", s.ok}};
    if (!s.ok) j["error"] = s.error;
    if (s.ok) {
      j["model_calls"] = s.result.model_calls;
      j["baseline_queries"] = s.result.baseline_queries;
      j["insert_count"] = s.result.insert_count;
      j["train_log_sha1"] = git_blob_sha1(read_file((fs::path(seed_dir(out, s.seed)) / "train_log.csv").string()));
    }
    seeds.push_back(j);
  }
  manifest["seeds"] = seeds;
  std::ofstream((fs::path(out) / "manifest.json").string()) << manifest.dump(2) << '\n';
  return res;
}

// --- Baseline pretraining --------------------------------------------------------

struct PretrainResult {
  std::string checkpoint;
  EvalStats no_buildings, with_buildings, random_no_buildings, random_with_buildings;
};

/// Plain SAC in the building-free variant of the configured environment; saves
/// the actor and evaluates it (mean action) and a uniform-random policy in both variants.
inline PretrainResult pretrain_baseline(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  cfg.validate();
  const std::string out = cfg.out_dir();
  fs::create_directories(out);
  auto ec = cfg.env_config();
  ec.buildings_enabled = false;
  auto e = make_env(ec, cfg.env_seed());
  const std::uint64_t seed = cfg.seeds().front();
  e.reseed_tilts(derive_seed(seed, 0x7117));
  auto tc = cfg.train_config();
  tc.method = model::Method::Sac;
  tc.total_steps = cfg.doc.at("pretrain").at("total_steps");
  tc.checkpoint_dir.clear();
  const auto trained = model::train(e, tc, nullptr, seed, {}, &log);
  write_train_log((fs::path(out) / "pretrain_log.csv").string(), trained.log);

  PretrainResult r;
  r.checkpoint = (fs::path(out) / "baseline_actor.txt").string();
  trained.final_actor.save_file(r.checkpoint);
  const auto baseline = agents::ActorBaseline::load(r.checkpoint, cfg.baseline_mode());
  const int n = cfg.eval_episodes();
  const std::uint64_t eval_seed = derive_seed(seed, 0xE7A1);
  auto plain = make_env(ec, cfg.env_seed());
  r.no_buildings = evaluate(plain, baseline_actions(baseline), n, eval_seed);
  r.random_no_buildings = evaluate(plain, random_actions(), n, eval_seed);
  auto full = make_env(cfg.env_config(), cfg.env_seed());
  r.with_buildings = evaluate(full, baseline_actions(baseline), n, eval_seed);
  r.random_with_buildings = evaluate(full, random_actions(), n, eval_seed);

  json report{{"checkpoint", r.checkpoint},
              {"baseline_mode", cfg.doc.at("baseline_mode")},
              {"eval_episodes", n},
              {"no_buildings", to_json(r.no_buildings)},
              {"with_buildings", to_json(r.with_buildings)},
              {"random_no_buildings", to_json(r.random_no_buildings)},
              {"random_with_buildings", to_json(r.random_with_buildings)}};
  std::ofstream((fs::path(out) / "baseline_eval.json").string()) << report.dump(2) << '\n';
  return r;
}

// --- Burn-in sweep ---------------------------------------------------------------

/// Baseline reward minus the lowest full-window running average within the
/// first max(2 * cbi_max, window) steps. Non-positive when there is no dip.
inline double initial_dip(const std::vector<model::StepRecord>& log, double baseline_reward, long cbi_max,
                          long window = 100) {
  const long horizon = std::max(2 * cbi_max, window);
  double lowest = std::numeric_limits<double>::infinity();
  for (const auto& r : log)
    if (r.step >= window && r.step <= horizon) lowest = std::min(lowest, r.running_avg100);
  if (!std::isfinite(lowest)) throw ConfigError("initial_dip: log shorter than the averaging window");
  return baseline_reward - lowest;
}

struct SweepRow {
  long cbi = 0;
  std::vector<double> dips;  // per seed
  double median_dip = 0.0;
  double mean_dip = 0.0;
};

struct SweepResult {
  double baseline_reward = 0.0;
  std::vector<SweepRow> rows;
  std::vector<ExperimentResult> runs;
};

inline SweepResult burn_in_sweep(const ExperimentConfig& cfg, const std::vector<long>& cbi_values,
                                 std::ostream& log = std::cerr) {
  cfg.validate();
  const auto m = cfg.method();
  if (m != model::Method::Mbrpl && m != model::Method::Srpl)
    throw ConfigError("burn-in sweep requires method mbrpl or srpl");
  if (cbi_values.empty()) throw ConfigError("burn-in sweep needs at least one cbi value");
  const long cbi_max = *std::max_element(cbi_values.begin(), cbi_values.end());
  SweepResult sr;
  {
    auto e = make_env(cfg.env_config(), cfg.env_seed());
    sr.baseline_reward = evaluate(e, baseline_actions(load_baseline(cfg)), cfg.eval_episodes(),
                                  derive_seed(cfg.env_seed(), 0xBA5E))
                             .mean;
  }
  const fs::path root = cfg.out_dir();
  for (long cbi : cbi_values) {
    ExperimentConfig c = cfg;
    c.doc["cbi_steps"] = cbi;
    c.doc["out_dir"] = (root / ("cbi_" + std::to_string(cbi))).string();
    auto run = run_experiment(c, log);
    SweepRow row;
    row.cbi = cbi;
    for (const auto& s : run.seeds)
      if (s.ok) row.dips.push_back(initial_dip(s.result.log, sr.baseline_reward, cbi_max));
    if (!row.dips.empty()) {
      row.median_dip = median(row.dips);
      for (double d : row.dips) row.mean_dip += d / static_cast<double>(row.dips.size());
    }
    sr.rows.push_back(row);
    sr.runs.push_back(std::move(run));
  }
  std::ofstream os((root / "burn_in_report.csv").string());
  os << std::setprecision(12) << "cbi,n_seeds,median_dip,mean_dip,baseline_reward\n";
  for (const auto& r : sr.rows)
    os << r.cbi << ',' << r.dips.size() << ',' << r.median_dip << ',' << r.mean_dip << ',' << sr.baseline_reward
       << '\n';
  return sr;
}

// --- Aggregation across runs ---------------------------------------------------------

struct RunSummary {
  std::string name;
  std::string method;
  int n_seeds = 0;
  double median_convergence_step = 0.0;
  double final_mean = 0.0;
  std::vector<double> steps;
  std::vector<MeanCi> curve;
};

/// Per-seed running-average series of a run directory, read from disk.
inline std::vector<std::vector<double>> read_run_series(const fs::path& run_dir, std::vector<double>* steps,
                                                        const std::string& column = "env_reward_running_avg") {
  if (!fs::is_directory(run_dir)) throw ConfigError("'" + run_dir.string() + "' is not a run directory");
  std::vector<fs::path> logs;
  for (const auto& entry : fs::directory_iterator(run_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("seed_", 0) == 0 &&
        fs::exists(entry.path() / "train_log.csv"))
      logs.push_back(entry.path() / "train_log.csv");
  std::sort(logs.begin(), logs.end());
  std::vector<std::vector<double>> out;
  for (const auto& p : logs) {
    const auto t = read_csv(p.string());
    out.push_back(t.col(column));
    if (steps && steps->empty()) *steps = t.col("step");
  }
  return out;
}

/// Aligns runs on their common step prefix and writes comparison.csv and
/// summary.csv into `out_dir`. Differing env configs only produce a warning.
inline std::vector<RunSummary> aggregate(const std::vector<std::string>& run_dirs, const std::string& out_dir,
                                         double convergence_frac = 0.95, std::ostream& warn = std::cerr) {
  if (run_dirs.empty()) throw ConfigError("aggregate needs at least one run directory");
  std::vector<RunSummary> runs;
  std::optional<json> env_ref;
  std::size_t common = std::numeric_limits<std::size_t>::max();
  std::vector<std::vector<std::vector<double>>> all_series;
  for (const auto& d : run_dirs) {
    RunSummary rs;
    rs.name = fs::path(d).filename().string();
    if (rs.name.empty()) rs.name = fs::path(d).parent_path().filename().string();
    const auto mpath = fs::path(d) / "manifest.json";
    if (fs::exists(mpath)) {
      const auto mj = json::parse(read_file(mpath.string()));
      rs.method = mj.at("config").at("method");
      const auto envj = mj.at("config").at("env");
      if (!env_ref) env_ref = envj;
      else if (*env_ref != envj) warn << "warning: run '" << d << "' uses a different env config\n";
    }
    auto series = read_run_series(d, &rs.steps);
    if (series.empty()) throw ConfigError("run directory '" + d + "' has no seed logs");
    for (const auto& s : series) common = std::min(common, s.size());
    rs.n_seeds = static_cast<int>(series.size());
    all_series.push_back(std::move(series));
    runs.push_back(std::move(rs));
  }
  for (std::size_t k = 0; k < runs.size(); ++k) {
    auto& rs = runs[k];
    auto& series = all_series[k];
    for (auto& s : series) s.resize(common);
    rs.steps.resize(common);
    std::vector<double> conv;
    for (const auto& s : series)
      conv.push_back(rs.steps[convergence_index(s, convergence_frac, std::nullopt, kRunningWindow - 1)]);
    rs.median_convergence_step = median(conv);
    std::vector<double> finals;
    for (const auto& s : series) finals.push_back(final_level(s));
    rs.final_mean = mean_ci95(finals).mean;
    for (std::size_t i = 0; i < common; ++i) {
      std::vector<double> xs;
      for (const auto& s : series) xs.push_back(s[i]);
      rs.curve.push_back(mean_ci95(xs));
    }
  }
  fs::create_directories(out_dir);
  {
    std::ofstream os((fs::path(out_dir) / "comparison.csv").string());
    os << std::setprecision(12) << "step";
    for (const auto& r : runs) os << ',' << r.name << "_mean," << r.name << "_ci_low," << r.name << "_ci_high";
    os << '\n';
    for (std::size_t i = 0; i < common; ++i) {
      os << static_cast<long>(runs.front().steps[i]);
      for (const auto& r : runs) os << ',' << r.curve[i].mean << ',' << r.curve[i].ci_low << ',' << r.curve[i].ci_high;
      os << '\n';
    }
  }
  std::ofstream os((fs::path(out_dir) / "summary.csv").string());
  os << std::setprecision(12) << "run,method,n_seeds,median_convergence_step,final_mean\n";
  for (const auto& r : runs)
    os << r.name << ',' << r.method << ',' << r.n_seeds << ',' << r.median_convergence_step << ',' << r.final_mean
       << '\n';
  return runs;
}

}  // namespace mbrpl::harness

#endif  // MBRPL_HARNESS_HPP
