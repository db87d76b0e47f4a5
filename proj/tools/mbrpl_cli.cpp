#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "mbrpl/bounds_lab.hpp"
#include "mbrpl/gradcheck.hpp"
#include "mbrpl/harness.hpp"

using namespace mbrpl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitConfig = 2;

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.path, "JSON experiment config (defaults are used for missing keys)");
  cmd->add_option("-s,--set", a.overrides, "Override a config key, e.g. --set sac.actor_lr=1e-3")->take_all();
}

harness::ExperimentConfig build_config(const ConfigArgs& a) {
  auto cfg = a.path.empty() ? harness::ExperimentConfig{} : harness::ExperimentConfig::load(a.path, false);
  for (const auto& o : a.overrides) cfg.set(o);
  cfg.validate();
  return cfg;
}

std::vector<long> parse_longs(const std::string& csv) {
  std::vector<long> out;
  std::stringstream ss(csv);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stol(tok));
    } catch (const std::exception&) {
      throw ConfigError("'" + tok + "' is not an integer");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model-based residual policy learning for antenna tilt control"};
  app.require_subcommand(1);

  ConfigArgs pre_args, train_args, sweep_args, eval_args;
  auto* pre = app.add_subcommand("pretrain-baseline", "Train the building-free SAC baseline and evaluate it");
  add_config_options(pre, pre_args);

  auto* train = app.add_subcommand("train", "Run one method over all configured seeds");
  add_config_options(train, train_args);

  std::string cbi_list = "0,2000,4000";
  auto* sweep = app.add_subcommand("burn-in-sweep", "Compare critic burn-in lengths");
  add_config_options(sweep, sweep_args);
  sweep->add_option("--cbi", cbi_list, "Comma-separated burn-in lengths")->capture_default_str();

  std::vector<std::string> agg_dirs;
  std::string agg_out = "aggregate";
  double agg_frac = 0.95;
  auto* agg = app.add_subcommand("aggregate", "Align runs and emit comparison and summary CSVs");
  agg->add_option("runs", agg_dirs, "Run directories")->required();
  agg->add_option("-o,--out", agg_out, "Output directory")->capture_default_str();
  agg->add_option("--frac", agg_frac, "Convergence fraction of the final level")->capture_default_str();

  int bc_instances = 1000;
  std::uint64_t bc_seed = 0;
  std::string bc_report;
  auto* bc = app.add_subcommand("bounds-check", "Certify the value-difference bounds on random finite MDPs");
  bc->add_option("-n,--instances", bc_instances, "Instances per bound")->capture_default_str();
  bc->add_option("--seed", bc_seed, "Seed")->capture_default_str();
  bc->add_option("--report", bc_report, "Write the tightness table to this CSV");

  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every training loss");
  gc->add_option("--seed", gc_seed, "Seed")->capture_default_str();

  std::string eval_ckpt;
  std::string eval_variant = "both";
  auto* ev = app.add_subcommand("eval", "Evaluate an actor checkpoint (mean action) in the environment");
  add_config_options(ev, eval_args);
  ev->add_option("checkpoint", eval_ckpt, "Actor checkpoint")->required();
  ev->add_option("--variant", eval_variant, "buildings, no-buildings or both")
      ->check(CLI::IsMember({"buildings", "no-buildings", "both"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*pre) {
      const auto r = harness::pretrain_baseline(build_config(pre_args));
      std::cout << "checkpoint " << r.checkpoint << "\n"
                << "no_buildings " << r.no_buildings.mean << " +- " << r.no_buildings.std << " (random "
                << r.random_no_buildings.mean << ")\n"
                << "with_buildings " << r.with_buildings.mean << " +- " << r.with_buildings.std << " (random "
                << r.random_with_buildings.mean << ")\n";
      return kExitOk;
    }
    if (*train) {
      const auto r = harness::run_experiment(build_config(train_args));
      std::cout << "wrote " << r.out_dir << "\n";
      return r.all_ok() ? kExitOk : kExitRunFailure;
    }
    if (*sweep) {
      const auto r = harness::burn_in_sweep(build_config(sweep_args), parse_longs(cbi_list));
      std::cout << "baseline_reward " << r.baseline_reward << "\n";
      for (const auto& row : r.rows) std::cout << "cbi " << row.cbi << " median_dip " << row.median_dip << "\n";
      const bool ok = std::all_of(r.runs.begin(), r.runs.end(), [](const auto& x) { return x.all_ok(); });
      return ok ? kExitOk : kExitRunFailure;
    }
    if (*agg) {
      for (const auto& r : harness::aggregate(agg_dirs, agg_out, agg_frac))
        std::cout << r.name << " seeds=" << r.n_seeds << " convergence_step=" << r.median_convergence_step
                  << " final=" << r.final_mean << "\n";
      return kExitOk;
    }
    if (*bc) {
      if (bc_instances < 1) throw ConfigError("--instances must be >= 1");
      const auto l1 = bounds::certify_lemma1(bc_seed, bc_instances);
      const auto l2 = bounds::certify_lemma2(derive_seed(bc_seed, 2), bc_instances);
      std::cout << "value-difference bound: " << l1.violations << "/" << l1.instances << " violations ("
                << l1.pointwise_violations << " pointwise), min slack " << l1.min_slack << "\n"
                << "residual-policy bound: " << l2.violations << "/" << l2.instances << " violations, min slack "
                << l2.min_slack << "\n";
      if (!bc_report.empty()) {
        std::ofstream os(bc_report);
        if (!os) throw std::runtime_error("cannot write '" + bc_report + "'");
        bounds::write_tightness_csv(os, bounds::bound_tightness_report(bc_seed));
      }
      return l1.violations + l1.pointwise_violations + l2.violations == 0 ? kExitOk : kExitRunFailure;
    }
    if (*gc) {
      bool ok = true;
      for (const auto& r : diag::gradient_fidelity(gc_seed)) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << r.max_rel_error
                  << " tol=" << r.tolerance << " coords=" << r.coords << "\n";
        ok = ok && r.pass;
      }
      return ok ? kExitOk : kExitRunFailure;
    }
    if (*ev) {
      const auto cfg = build_config(eval_args);
      const auto policy = agents::ActorBaseline::load(eval_ckpt, agents::BaselineMode::Mean);
      nlohmann::json out{{"checkpoint", eval_ckpt}};
      const std::uint64_t seed = derive_seed(cfg.seeds().front(), 0xE7A1);
      auto run = [&](bool buildings) {
        auto ec = cfg.env_config();
        ec.buildings_enabled = buildings;
        auto e = harness::make_env(ec, cfg.env_seed());
        return harness::to_json(harness::evaluate(e, harness::baseline_actions(policy), cfg.eval_episodes(), seed));
      };
      if (eval_variant != "no-buildings") out["with_buildings"] = run(true);
      if (eval_variant != "buildings") out["no_buildings"] = run(false);
      std::cout << out.dump(2) << "\n";
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRunFailure;
  }
  return kExitOk;
}
