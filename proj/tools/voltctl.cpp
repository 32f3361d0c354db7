// voltctl: run controllers on a feeder, benchmark them, check the theory
// numerically and regenerate figure data.
//
// Exit codes: 0 ok, 1 configuration or I/O error, 2 controller or plant
// failure, 3 theory check failed.

#include "voltctl/harness.hpp"
#include "voltctl/theory.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

using namespace voltctl;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 1, kController = 2, kTheory = 3 };

// Errors raised while reading inputs or validating options.
bool is_config_error(const Error& e) {
  return dynamic_cast<const ParseError*>(&e) || dynamic_cast<const IoError*>(&e) ||
         dynamic_cast<const ParameterError*>(&e) || dynamic_cast<const TopologyError*>(&e) ||
         dynamic_cast<const UnitError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
         dynamic_cast<const EmptyInput*>(&e);
}

struct Options {
  std::string feeder;
  std::string out = "out";
  std::uint64_t seed = 1;
  int jobs = 1;

  std::string controller = "ddsl";
  std::string scenario = "static";
  int horizon = 0;
  int trials = 100;
  double perturb_frac = 0.3;
  std::string suite = "both";
  int tv_steps = 2;
  double tv_magnitude = 0.3;
  double tv_walk = 0.01;

  double radius = 0.02;
  int tau = 0;
  double lambda_ff = 0.95;
  double stall_tol = 1e-6;
  double decrease_tol = 1e-4;
  double perturb_scale = 1e-3;
  double gamma = kDefaultFoGamma;
  double phi = -0.025;
  double w_v = 0.5, w_u = 0.1;

  std::vector<double> radii = {4e-2, 2e-2, 1e-2, 5e-3};
  bool flip_sign = false;
  int fuzz = 1000;
};

void add_common(CLI::App* c, Options& o, bool feeder) {
  if (feeder) c->add_option("--feeder", o.feeder, "feeder directory (buses.csv, lines.csv, header.json)")->required();
  c->add_option("--out", o.out, "output directory")->capture_default_str();
}

void add_controller_flags(CLI::App* c, Options& o, bool tuned_defaults) {
  c->add_option("--radius", o.radius, "DDSL trust-region radius (p.u.)")->capture_default_str();
  c->add_option("--tau", o.tau, "estimator window length in increments; 0 selects 3n")->capture_default_str();
  c->add_option("--lambda-ff", o.lambda_ff, "estimator forgetting factor")->capture_default_str();
  c->add_option("--stall-tol", o.stall_tol, "DDSL stall threshold on the step norm")->capture_default_str();
  c->add_option("--decrease-tol", o.decrease_tol, "DDSL stall threshold on predicted decrease relative to J")
      ->capture_default_str();
  c->add_option("--perturb-scale", o.perturb_scale, "std of bootstrap and stall perturbations (p.u.)")
      ->capture_default_str();
  c->add_option("--w-v", o.w_v, "voltage tracking weight")->capture_default_str();
  c->add_option("--w-u", o.w_u, "input weight")->capture_default_str();
  if (tuned_defaults) {
    c->add_option("--gamma", o.gamma, "FO learning rate [default: grid search on the nominal run]");
    c->add_option("--phi", o.phi, "uniform droop gain [default: grid search on the nominal run]");
  } else {
    c->add_option("--gamma", o.gamma, "FO learning rate")->capture_default_str();
    c->add_option("--phi", o.phi, "uniform droop gain")->capture_default_str();
  }
}

DdslConfig ddsl_config(const Options& o) {
  DdslConfig c;
  c.radius = o.radius;
  c.tau = o.tau;
  c.lambda_ff = o.lambda_ff;
  c.stall_tol = o.stall_tol;
  c.decrease_tol = o.decrease_tol;
  c.perturb_scale = o.perturb_scale;
  c.seed = o.seed;
  return c;
}

FoConfig fo_config(const Options& o) {
  FoConfig c;
  c.gamma = o.gamma;
  c.tau = o.tau;
  c.lambda_ff = o.lambda_ff;
  c.perturb_scale = o.perturb_scale;
  c.seed = o.seed;
  return c;
}

std::vector<ControllerKind> controllers_from(const std::string& s) {
  if (s == "all") return {ControllerKind::Ddsl, ControllerKind::Fo, ControllerKind::Droop, ControllerKind::Socp};
  return {parse_controller(s)};
}

std::string pct(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * x);
  return buf;
}

int cmd_run(const Options& o) {
  const NetworkModel net = load_network(o.feeder);
  const QuadraticCost cost{o.w_v, o.w_u, net.y_ref};
  cost.check();
  if (o.scenario != "static" && o.scenario != "time-varying")
    throw ParameterError("--scenario must be static or time-varying");
  Scenario sc;
  if (o.scenario == "static") {
    Scenario base = nominal_scenario(net, o.horizon > 0 ? o.horizon : 20);
    sc = make_static_trials(base, 1, o.perturb_frac, mix_seed(o.seed, 1)).front();
  } else {
    TimeVaryingOptions tv;
    tv.horizon = o.horizon > 0 ? o.horizon : 50;
    tv.step_changes = o.tv_steps;
    tv.magnitude = o.tv_magnitude;
    tv.walk_sd = o.tv_walk;
    Scenario base = nominal_scenario(net, tv.horizon);
    base.id = trial_id("tv", 0);
    sc = make_time_varying(base, tv, mix_seed(mix_seed(o.seed, 2), 0));
  }
  const auto kinds = controllers_from(o.controller);
  std::vector<RunResult> results;
  int rc = kOk;
  for (auto k : kinds) {
    ControllerSpec spec;
    spec.kind = k;
    spec.ddsl = ddsl_config(o);
    spec.fo = fo_config(o);
    spec.droop_phi = o.phi;
    spec.ddsl.check();
    spec.fo.check();
    try {
      results.push_back(run_trial(net, sc, spec, cost));
      const auto& r = results.back();
      std::printf("%-6s final-5 mean cost %.6e  horizon mean %.6e\n", r.controller_id.c_str(), r.final5_mean_cost,
                  r.horizon_mean_cost);
    } catch (const Error& e) {
      if (is_config_error(e)) throw;
      std::fprintf(stderr, "error: controller %s failed on %s: %s\n", to_string(k), sc.id.c_str(), e.what());
      RunResult r;
      r.scenario_id = sc.id;
      r.kind = sc.kind;
      r.controller_id = to_string(k);
      r.failed = true;
      r.error = e.what();
      results.push_back(std::move(r));
      rc = kController;
    }
  }
  Json cfg = {{"command", "run"},       {"controller", o.controller}, {"scenario", o.scenario},
              {"horizon", sc.horizon},  {"perturb_frac", o.perturb_frac}, {"radius", o.radius},
              {"tau", o.tau},           {"lambda_ff", o.lambda_ff},   {"stall_tol", o.stall_tol},
              {"decrease_tol", o.decrease_tol}, {"perturb_scale", o.perturb_scale}, {"gamma", o.gamma},
              {"phi", o.phi},           {"w_v", o.w_v},               {"w_u", o.w_u},
              {"tv_steps", o.tv_steps}, {"tv_magnitude", o.tv_magnitude}, {"tv_walk", o.tv_walk},
              {"seed", o.seed}};
  Json summary = {{"schema_version", kResultsSchemaVersion},
                  {"provenance",
                   {{"master_seed", o.seed},
                    {"config_hash", fnv1a_hex(cfg.dump())},
                    {"config", cfg},
                    {"feeder", feeder_fingerprint(o.feeder)},
                    {"scenario", sc.description}}},
                  {"suites", Json::object()}};
  bool any_ok = false;
  for (const auto& r : results) any_ok = any_ok || !r.failed;
  if (any_ok) summary["suites"][o.scenario == "static" ? "static" : "time_varying"] = to_json(aggregate(results));
  persist(results, summary, o.out);
  std::printf("wrote %s\n", (fs::path(o.out) / "results.jsonl").string().c_str());
  return rc;
}

void print_suite(const Json& summary, const char* key, const char* label, int trials) {
  if (!summary["suites"].contains(key)) return;
  const Json& s = summary["suites"][key];
  std::printf("%s (%s, %d trials)\n", label, s["metric"].get<std::string>().c_str(), trials);
  for (const auto& [id, c] : s["controllers"].items())
    std::printf("  %-6s mean %.6e  median %.6e  failures %d\n", id.c_str(), c["mean"].is_null() ? NAN : c["mean"].get<double>(),
                c["median"].is_null() ? NAN : c["median"].get<double>(), c["failures"].get<int>());
  for (const auto& [id, r] : s["ddsl_reduction_vs"].items()) {
    const double med = r["median_reduction"].is_null() ? NAN : r["median_reduction"].get<double>();
    std::printf("  DDSL cost is %s %s than %s (median over trials; lower in %d of %d)\n", pct(std::abs(med)).c_str(),
                med >= 0 ? "lower" : "higher", id.c_str(), r["ddsl_lower"].get<int>(), r["compared"].get<int>());
  }
}

int cmd_bench(const Options& o, bool gamma_set, bool phi_set) {
  const NetworkModel net = load_network(o.feeder);
  BenchConfig cfg;
  cfg.master_seed = o.seed;
  cfg.trials = o.trials;
  cfg.perturb_frac = o.perturb_frac;
  if (o.horizon > 0) cfg.static_horizon = o.horizon;
  cfg.tv.step_changes = o.tv_steps;
  cfg.tv.magnitude = o.tv_magnitude;
  cfg.tv.walk_sd = o.tv_walk;
  if (o.suite != "static" && o.suite != "time-varying" && o.suite != "both")
    throw ParameterError("--suite must be static, time-varying or both");
  cfg.run_static = o.suite != "time-varying";
  cfg.run_time_varying = o.suite != "static";
  cfg.controllers = controllers_from(o.controller);
  cfg.ddsl = ddsl_config(o);
  cfg.fo = fo_config(o);
  if (gamma_set) cfg.fo_gamma = o.gamma;
  if (phi_set) cfg.droop_phi = o.phi;
  cfg.w_v = o.w_v;
  cfg.w_u = o.w_u;
  const auto out = run_bench(net, cfg, feeder_fingerprint(o.feeder), o.jobs, &std::cerr);
  persist(out.results, out.summary, o.out);
  print_suite(out.summary, "nominal", "nominal static run", 1);
  print_suite(out.summary, "static", "static trials", cfg.trials);
  print_suite(out.summary, "time_varying", "time-varying trials", cfg.trials);
  std::printf("runs %zu, failed %d, largest power-flow residual %.3e\n", out.results.size(),
              out.summary["failed_runs"].get<int>(), out.summary["max_power_flow_residual"].get<double>());
  std::printf("wrote %s\n", o.out.c_str());
  return kOk;
}

int cmd_validate_theory(const Options& o) {
  const NetworkModel net = load_network(o.feeder);
  TheoryConfig cfg;
  cfg.radii = o.radii;
  cfg.flip_estimate_sign = o.flip_sign;
  cfg.seed = o.seed;
  cfg.fuzz_instances = o.fuzz;
  const auto res = validate_theory(net, cfg, nullptr);
  std::printf("%-26s %-5s %s\n", "check", "", "measured");
  std::vector<std::string> failed;
  for (const auto& c : res) {
    std::string m;
    for (double x : c.measured) {
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.4g", x);
      m += buf;
    }
    std::printf("%-26s %-5s%s\n", c.name.c_str(), c.passed ? "pass" : "FAIL", m.c_str());
    std::printf("%-26s       %s; %s\n", "", c.claim.c_str(), c.detail.c_str());
    if (!c.passed) failed.push_back(c.name);
  }
  if (failed.empty()) return kOk;
  std::string names;
  for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
  std::fprintf(stderr, "theory checks failed: %s\n", names.c_str());
  return kTheory;
}

int cmd_emit_figures(const Options& o) {
  const fs::path dir = o.out;
  const fs::path res = dir / "results.jsonl";
  if (!fs::exists(res)) throw IoError(res.string() + " not found; run `voltctl bench` or `voltctl run` first");
  const auto results = parse_results_jsonl(read_text_file(res));
  const auto files = emit_figures(results, dir);
  Json prov = Json::object();
  if (fs::exists(dir / "summary.json"))
    prov = Json::parse(read_text_file(dir / "summary.json")).value("provenance", Json::object());
  write_manifest(dir, files, prov);
  for (const auto& f : files) std::printf("wrote %s\n", (dir / f).string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-driven volt/var control: runs, benchmarks, theory checks and figure data"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML config file; command-line flags override it")->check(CLI::ExistingFile);
  app.allow_config_extras(CLI::config_extras_mode::error);
  Options o;
  app.add_option("--seed", o.seed, "master seed for every random stream")->capture_default_str();
  app.add_option("--jobs", o.jobs, "parallel trials (results do not depend on it)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  auto* run = app.add_subcommand("run", "one controller on one scenario");
  add_common(run, o, true);
  run->add_option("--controller", o.controller, "ddsl | fo | droop | socp | all")->capture_default_str();
  run->add_option("--scenario", o.scenario, "static | time-varying")->capture_default_str();
  run->add_option("--horizon", o.horizon, "steps; 0 selects 20 (static) or 50 (time-varying)")->capture_default_str();
  run->add_option("--perturb-frac", o.perturb_frac, "static load perturbation fraction")->capture_default_str();
  run->add_option("--tv-steps", o.tv_steps, "number of load step changes")->capture_default_str();
  run->add_option("--tv-magnitude", o.tv_magnitude, "relative size of each step change")->capture_default_str();
  run->add_option("--tv-walk", o.tv_walk, "per-step std of the load random walk")->capture_default_str();
  add_controller_flags(run, o, false);

  auto* bench = app.add_subcommand("bench", "all controllers over the seeded trial suites");
  add_common(bench, o, true);
  bench->add_option("--controller", o.controller, "ddsl | fo | droop | socp | all")->default_val("all");
  bench->add_option("--suite", o.suite, "static | time-varying | both")->capture_default_str();
  bench->add_option("--trials", o.trials, "trials per suite")->capture_default_str();
  bench->add_option("--horizon", o.horizon, "static horizon; 0 selects 20")->capture_default_str();
  bench->add_option("--perturb-frac", o.perturb_frac, "static load perturbation fraction")->capture_default_str();
  bench->add_option("--tv-steps", o.tv_steps, "number of load step changes")->capture_default_str();
  bench->add_option("--tv-magnitude", o.tv_magnitude, "relative size of each step change")->capture_default_str();
  bench->add_option("--tv-walk", o.tv_walk, "per-step std of the load random walk")->capture_default_str();
  add_controller_flags(bench, o, true);

  auto* theory = app.add_subcommand("validate-theory", "numerical checks of the convergence theory");
  add_common(theory, o, true);
  theory->add_option("--radii", o.radii, "trust-region radii, largest first")->capture_default_str();
  theory->add_option("--fuzz", o.fuzz, "fuzzed subproblems for the decrease check")->capture_default_str();
  theory->add_flag("--flip-estimate-sign", o.flip_sign, "fault injection: negate every sensitivity estimate");

  auto* emit = app.add_subcommand("emit-figures", "rebuild figure CSVs from results.jsonl");
  add_common(emit, o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  std::fprintf(stderr, "effective configuration:\n%s", app.config_to_str(true, false).c_str());
  try {
    if (*run) return cmd_run(o);
    if (*bench) return cmd_bench(o, bench->count("--gamma") > 0, bench->count("--phi") > 0);
    if (*theory) return cmd_validate_theory(o);
    if (*emit) return cmd_emit_figures(o);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return is_config_error(e) ? kConfig : kController;
  } catch (const Json::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kController;
  }
  return kConfig;
}
