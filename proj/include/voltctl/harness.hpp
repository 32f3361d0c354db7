#pragma once

// Scenario generation, trial execution, aggregation and on-disk results for
// the controller comparison.

#include "voltctl/common.hpp"
#include "voltctl/controllers.hpp"
#include "voltctl/grid_model.hpp"
#include "voltctl/powerflow.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace voltctl {

using Json = nlohmann::json;

inline constexpr int kResultsSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Scenarios

enum class ScenarioKind { Static, TimeVarying };

inline const char* to_string(ScenarioKind k) { return k == ScenarioKind::Static ? "static" : "time-varying"; }

struct Scenario {
  std::string id;
  ScenarioKind kind = ScenarioKind::Static;
  int horizon = 20;
  std::vector<LoadProfile> load_series;
  std::uint64_t seed = 0;
  std::string description;
};

inline Scenario nominal_scenario(const NetworkModel& net, int horizon = 20) {
  if (horizon < 1) throw ParameterError("horizon must be >= 1");
  return {"static-nominal", ScenarioKind::Static, horizon,
          std::vector<LoadProfile>(static_cast<std::size_t>(horizon), base_loads(net)), 0, "nominal feeder loads"};
}

inline std::string trial_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%03d", prefix, i);
  return buf;
}

// Trial i scales every bus load by its own uniform factor in [1 - f, 1 + f].
inline std::vector<Scenario> make_static_trials(const Scenario& base, int n_trials, double perturb_frac,
                                                std::uint64_t seed) {
  if (n_trials < 1) throw ParameterError("n_trials must be >= 1");
  if (!(perturb_frac >= 0.0 && perturb_frac < 1.0)) throw ParameterError("perturb_frac must lie in [0, 1)");
  if (base.load_series.empty()) throw ParameterError("base scenario has no loads");
  const LoadProfile& lp0 = base.load_series.front();
  std::vector<Scenario> out;
  for (int i = 0; i < n_trials; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    LoadProfile lp = lp0;
    for (Eigen::Index s = 0; s < lp.p.size(); ++s) {
      const double f = rng.uniform(1.0 - perturb_frac, 1.0 + perturb_frac);
      lp.p[s] *= f;
      lp.q_base[s] *= f;
    }
    out.push_back({trial_id("static", i), ScenarioKind::Static, base.horizon,
                   std::vector<LoadProfile>(static_cast<std::size_t>(base.horizon), lp), mix_seed(seed, i),
                   "per-bus uniform load scaling +-" + detail::format_double(perturb_frac)});
  }
  return out;
}

struct TimeVaryingOptions {
  int horizon = 50;
  int step_changes = 2;
  double magnitude = 0.3;  // each change scales all loads by 1 +- magnitude
  double walk_sd = 0.01;   // per-step std of the per-bus multiplier walk
  std::vector<int> change_steps;  // explicit times; signs are then +
};

// Per-bus random-walk multipliers (kept within [0.5, 1.5]) times a global
// factor that jumps at the change steps. Synthetic stand-in for measured
// feeder load data.
inline Scenario make_time_varying(const Scenario& base, const TimeVaryingOptions& o, std::uint64_t seed) {
  if (o.horizon < 10) throw ParameterError("time-varying horizon must be >= 10");
  if (o.step_changes < 0) throw ParameterError("step_changes must be >= 0");
  if (!(std::abs(o.magnitude) < 1.0)) throw ParameterError("step magnitude must lie in (-1, 1)");
  if (!(o.walk_sd >= 0.0)) throw ParameterError("walk_sd must be nonnegative");
  if (base.load_series.empty()) throw ParameterError("base scenario has no loads");
  Rng rng(seed);
  std::vector<std::pair<int, double>> changes;
  if (!o.change_steps.empty()) {
    if (static_cast<int>(o.change_steps.size()) != o.step_changes)
      throw ParameterError("change_steps must list step_changes entries");
    for (int t : o.change_steps) changes.push_back({t, 1.0});
  } else {
    if (o.step_changes > o.horizon - 1) throw ParameterError("more step changes than steps");
    std::set<int> used;
    while (static_cast<int>(used.size()) < o.step_changes)
      used.insert(1 + static_cast<int>(rng.next() % static_cast<std::uint64_t>(o.horizon - 1)));
    for (int t : used) changes.push_back({t, rng.uniform() < 0.5 ? -1.0 : 1.0});
  }
  std::set<int> seen;
  for (const auto& [t, s] : changes)
    if (t < 1 || t >= o.horizon || !seen.insert(t).second)
      throw ParameterError("change steps must be distinct and within [1, horizon)");

  const LoadProfile& lp0 = base.load_series.front();
  const Eigen::Index m = lp0.p.size();
  Vector walk = Vector::Ones(m);
  std::vector<LoadProfile> series;
  std::string times;
  for (int t = 0; t < o.horizon; ++t) {
    if (t > 0 && o.walk_sd > 0.0) walk = (walk + rng.normal_vector(m, o.walk_sd)).cwiseMax(0.5).cwiseMin(1.5);
    double F = 1.0;
    for (const auto& [tc, s] : changes)
      if (t >= tc) F *= 1.0 + s * o.magnitude;
    LoadProfile lp{lp0.p.cwiseProduct(walk) * F, lp0.q_base.cwiseProduct(walk) * F};
    series.push_back(std::move(lp));
  }
  for (const auto& [t, s] : changes) times += (times.empty() ? "" : ",") + std::to_string(t) + (s > 0 ? "+" : "-");
  return {base.id, ScenarioKind::TimeVarying, o.horizon, std::move(series), seed,
          "synthetic load: per-bus random walk sd " + detail::format_double(o.walk_sd) + ", steps of " +
              detail::format_double(o.magnitude) + " at " + (times.empty() ? "none" : times)};
}

// ---------------------------------------------------------------------------
// Trials

enum class ControllerKind { Ddsl, Fo, Droop, Socp };

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::Ddsl: return "ddsl";
    case ControllerKind::Fo: return "fo";
    case ControllerKind::Droop: return "droop";
    case ControllerKind::Socp: return "socp";
  }
  return "?";
}

inline ControllerKind parse_controller(const std::string& s) {
  for (auto k : {ControllerKind::Ddsl, ControllerKind::Fo, ControllerKind::Droop, ControllerKind::Socp})
    if (s == to_string(k)) return k;
  throw ParameterError("unknown controller '" + s + "'");
}

struct ControllerSpec {
  ControllerKind kind = ControllerKind::Ddsl;
  DdslConfig ddsl;
  FoConfig fo;
  double droop_phi = 0.0;
  ConicOptions conic;
};

struct RunResult {
  std::string scenario_id;
  ScenarioKind kind = ScenarioKind::Static;
  std::string controller_id;
  std::vector<ControlStepRecord> records;
  double final5_mean_cost = std::numeric_limits<double>::quiet_NaN();
  double total_cost = std::numeric_limits<double>::quiet_NaN();
  double horizon_mean_cost = std::numeric_limits<double>::quiet_NaN();
  double max_pf_residual = 0.0;
  bool failed = false;
  std::string error;
  std::vector<std::string> log;

  // Static scenarios compare the tail-5 mean, time-varying ones the mean
  // over the whole horizon.
  double metric() const { return kind == ScenarioKind::Static ? final5_mean_cost : horizon_mean_cost; }

  bool operator==(const RunResult& o) const {
    auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return scenario_id == o.scenario_id && kind == o.kind && controller_id == o.controller_id &&
           records == o.records && same(final5_mean_cost, o.final5_mean_cost) && same(total_cost, o.total_cost) &&
           same(horizon_mean_cost, o.horizon_mean_cost) && max_pf_residual == o.max_pf_residual &&
           failed == o.failed && error == o.error && log == o.log;
  }
};

inline RunResult run_trial(const NetworkModel& net, const Scenario& sc, const ControllerSpec& spec,
                           const QuadraticCost& cost) {
  if (sc.horizon < 1 || static_cast<int>(sc.load_series.size()) != sc.horizon)
    throw ParameterError("scenario " + sc.id + ": load series length differs from horizon");
  const ControlProblem pb = make_control_problem(net, cost);
  DistFlowPlant plant(net, LoadSchedule(sc.load_series));
  const Vector u0 = Vector::Zero(net.size());
  ControlTrace trace;
  switch (spec.kind) {
    case ControllerKind::Ddsl: {
      DdslConfig c = spec.ddsl;
      c.max_steps = sc.horizon;
      trace = ddsl_run(plant, pb, c, u0);
      break;
    }
    case ControllerKind::Fo: {
      FoConfig c = spec.fo;
      c.max_steps = sc.horizon;
      trace = feedback_optimization_run(plant, pb, c, u0);
      break;
    }
    case ControllerKind::Droop:
      trace = droop_run(plant, pb, uniform_droop(net.size(), spec.droop_phi), u0, sc.horizon);
      break;
    case ControllerKind::Socp:
      trace = socp_run(plant, pb, sc.horizon, spec.conic);
      break;
  }
  RunResult r;
  r.scenario_id = sc.id;
  r.kind = sc.kind;
  r.controller_id = to_string(spec.kind);
  r.records = std::move(trace.records);
  r.final5_mean_cost = final5_mean(r.records);
  double tot = 0.0;
  for (const auto& rec : r.records) tot += rec.cost;
  r.total_cost = tot;
  r.horizon_mean_cost = tot / static_cast<double>(r.records.size());
  r.max_pf_residual = plant.max_residual();
  r.log = std::move(trace.log);
  if (trace.diverging) r.log.push_back("diverging");
  return r;
}

// Runs n tasks on up to `jobs` threads; results land by index so the
// thread count never changes the output.
template <class F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  if (jobs < 1) throw ParameterError("jobs must be >= 1");
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto nt = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(jobs), std::max<std::size_t>(n, 1)));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < nt; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Aggregation

struct ControllerStats {
  std::string id;
  int runs = 0;
  int failures = 0;
  double mean = 0.0, median = 0.0, min = 0.0, max = 0.0;
  double normalized_mean = 0.0;
  double log10_normalized_mean = 0.0;
};

// DDSL against one other controller, paired by scenario.
struct Reduction {
  std::string vs;
  int compared = 0;
  int ddsl_lower = 0;          // DDSL ok and lower, or the other failed
  double median = 0.0;         // of per-scenario (other - ddsl) / other
  double mean = 0.0;
  double of_means = 0.0;       // (mean_other - mean_ddsl) / mean_other
};

struct SummaryStats {
  std::string metric;
  double basis = 0.0;
  std::vector<ControllerStats> controllers;
  std::vector<Reduction> reductions;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Normalization divides by `basis`, by default the largest controller mean.
inline SummaryStats aggregate(const std::vector<RunResult>& results, std::optional<double> basis = std::nullopt) {
  if (results.empty()) throw EmptyInput("no results to aggregate");
  for (const auto& r : results)
    if (r.kind != results.front().kind) throw ParameterError("cannot aggregate static and time-varying results");
  SummaryStats st;
  st.metric = results.front().kind == ScenarioKind::Static ? "final5_mean_cost" : "horizon_mean_cost";

  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunResult*>> by_ctrl;
  for (const auto& r : results) {
    if (!by_ctrl.count(r.controller_id)) order.push_back(r.controller_id);
    by_ctrl[r.controller_id].push_back(&r);
  }
  for (const auto& id : order) {
    ControllerStats cs;
    cs.id = id;
    std::vector<double> v;
    for (const RunResult* r : by_ctrl[id]) {
      ++cs.runs;
      if (r->failed) ++cs.failures;
      else v.push_back(r->metric());
    }
    cs.mean = mean_of(v);
    cs.median = median_of(v);
    cs.min = v.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::min_element(v.begin(), v.end());
    cs.max = v.empty() ? std::numeric_limits<double>::quiet_NaN() : *std::max_element(v.begin(), v.end());
    st.controllers.push_back(cs);
  }
  double b = 0.0;
  for (const auto& cs : st.controllers)
    if (std::isfinite(cs.mean)) b = std::max(b, cs.mean);
  st.basis = basis ? *basis : b;
  if (!(st.basis > 0.0)) st.basis = 1.0;
  for (auto& cs : st.controllers) {
    cs.normalized_mean = cs.mean / st.basis;
    cs.log10_normalized_mean = std::log10(cs.normalized_mean);
  }

  if (!by_ctrl.count("ddsl")) return st;
  std::map<std::string, const RunResult*> ddsl;
  for (const RunResult* r : by_ctrl["ddsl"]) ddsl[r->scenario_id] = r;
  const double ddsl_mean = std::find_if(st.controllers.begin(), st.controllers.end(),
                                        [](const ControllerStats& c) { return c.id == "ddsl"; })->mean;
  for (const auto& cs : st.controllers) {
    if (cs.id == "ddsl") continue;
    Reduction red;
    red.vs = cs.id;
    std::vector<double> per;
    for (const RunResult* o : by_ctrl[cs.id]) {
      auto it = ddsl.find(o->scenario_id);
      if (it == ddsl.end()) continue;
      const RunResult* d = it->second;
      ++red.compared;
      if (!d->failed && (o->failed || d->metric() < o->metric())) ++red.ddsl_lower;
      if (!d->failed && !o->failed && o->metric() > 0.0) per.push_back((o->metric() - d->metric()) / o->metric());
    }
    red.median = median_of(per);
    red.mean = mean_of(per);
    red.of_means = (cs.mean - ddsl_mean) / cs.mean;
    st.reductions.push_back(red);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Serialization

inline Json vec_json(const Vector& v) { return Json(std::vector<double>(v.data(), v.data() + v.size())); }

inline Vector json_vec(const Json& j) {
  const auto x = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
}

// NaN and infinities have no JSON form; they are written as null.
inline Json num_json(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }
inline double json_num(const Json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

inline Json to_json(const ControlStepRecord& r) {
  return {{"k", r.k},
          {"u", vec_json(r.u)},
          {"y", vec_json(r.y)},
          {"cost", r.cost},
          {"predicted_decrease", r.predicted_decrease},
          {"rho", r.rho ? num_json(*r.rho) : Json(nullptr)},
          {"excited", r.excited},
          {"perturbed", r.perturbed},
          {"trust_active", r.trust_active}};
}

inline ControlStepRecord record_from_json(const Json& j) {
  ControlStepRecord r;
  r.k = j.at("k").get<int>();
  r.u = json_vec(j.at("u"));
  r.y = json_vec(j.at("y"));
  r.cost = j.at("cost").get<double>();
  r.predicted_decrease = j.at("predicted_decrease").get<double>();
  if (!j.at("rho").is_null()) r.rho = j.at("rho").get<double>();
  r.excited = j.at("excited").get<bool>();
  r.perturbed = j.at("perturbed").get<bool>();
  r.trust_active = j.at("trust_active").get<bool>();
  return r;
}

inline Json to_json(const RunResult& r) {
  Json recs = Json::array();
  for (const auto& rec : r.records) recs.push_back(to_json(rec));
  return {{"schema_version", kResultsSchemaVersion},
          {"scenario_id", r.scenario_id},
          {"scenario_kind", to_string(r.kind)},
          {"controller_id", r.controller_id},
          {"final5_mean_cost", num_json(r.final5_mean_cost)},
          {"total_cost", num_json(r.total_cost)},
          {"horizon_mean_cost", num_json(r.horizon_mean_cost)},
          {"max_pf_residual", r.max_pf_residual},
          {"failed", r.failed},
          {"error", r.error},
          {"log", r.log},
          {"records", recs}};
}

inline RunResult result_from_json(const Json& j) {
  if (!j.contains("schema_version"))
    throw ParseError("result line has no schema_version; regenerate it with `voltctl bench` or `voltctl run`");
  const int v = j.at("schema_version").get<int>();
  if (v != kResultsSchemaVersion)
    throw ParseError("results schema_version " + std::to_string(v) + " is not supported (expected " +
                     std::to_string(kResultsSchemaVersion) +
                     "); regenerate the file with `voltctl bench` or `voltctl run` from this build");
  RunResult r;
  r.scenario_id = j.at("scenario_id").get<std::string>();
  const auto kind = j.at("scenario_kind").get<std::string>();
  if (kind != "static" && kind != "time-varying") throw ParseError("unknown scenario_kind '" + kind + "'");
  r.kind = kind == "static" ? ScenarioKind::Static : ScenarioKind::TimeVarying;
  r.controller_id = j.at("controller_id").get<std::string>();
  r.final5_mean_cost = json_num(j.at("final5_mean_cost"));
  r.total_cost = json_num(j.at("total_cost"));
  r.horizon_mean_cost = json_num(j.at("horizon_mean_cost"));
  r.max_pf_residual = j.at("max_pf_residual").get<double>();
  r.failed = j.at("failed").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.log = j.at("log").get<std::vector<std::string>>();
  for (const auto& rec : j.at("records")) r.records.push_back(record_from_json(rec));
  return r;
}

inline Json to_json(const SummaryStats& st) {
  Json ctrls = Json::object();
  for (const auto& c : st.controllers)
    ctrls[c.id] = {{"runs", c.runs},
                   {"failures", c.failures},
                   {"mean", num_json(c.mean)},
                   {"median", num_json(c.median)},
                   {"min", num_json(c.min)},
                   {"max", num_json(c.max)},
                   {"normalized_mean", num_json(c.normalized_mean)},
                   {"log10_normalized_mean", num_json(c.log10_normalized_mean)}};
  Json reds = Json::object();
  for (const auto& r : st.reductions)
    reds[r.vs] = {{"compared", r.compared},
                  {"ddsl_lower", r.ddsl_lower},
                  {"median_reduction", num_json(r.median)},
                  {"mean_reduction", num_json(r.mean)},
                  {"reduction_of_means", num_json(r.of_means)}};
  return {{"metric", st.metric}, {"normalization_basis", st.basis}, {"controllers", ctrls}, {"ddsl_reduction_vs", reds}};
}

// ---------------------------------------------------------------------------
// Hashes

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("SHA-1 digest failed");
  std::string out;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

// Same digest `git hash-object` prints for a file with these bytes.
inline std::string git_blob_sha1(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

// Per-file blob hashes plus one digest over the sorted "name hash" lines.
inline Json feeder_fingerprint(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Json per = Json::object();
  std::string lines;
  for (const auto& f : files) {
    const std::string h = git_blob_sha1(read_text_file(f));
    per[f.filename().string()] = h;
    lines += f.filename().string() + " " + h + "\n";
  }
  return {{"files", per}, {"digest", sha1_hex(lines)}};
}

// ---------------------------------------------------------------------------
// Output files

inline std::string fmt17(double x) {
  if (std::isnan(x)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << content;
  if (!f) throw IoError("write failed for " + p.string());
}

inline std::string results_jsonl(const std::vector<RunResult>& results) {
  std::string out;
  for (const auto& r : results) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<RunResult> parse_results_jsonl(const std::string& text) {
  std::vector<RunResult> out;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (detail::trim(line).empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      throw ParseError("results line " + std::to_string(n) + ": " + e.what());
    }
    try {
      out.push_back(result_from_json(j));
    } catch (const Json::exception& e) {
      throw ParseError("results line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

namespace detail {

inline const std::vector<std::string>& controller_order() {
  static const std::vector<std::string> o = {"ddsl", "fo", "droop", "socp"};
  return o;
}

// Controllers present in `rs`, in canonical order.
inline std::vector<std::string> present(const std::vector<const RunResult*>& rs) {
  std::vector<std::string> out;
  for (const auto& id : controller_order())
    for (const RunResult* r : rs)
      if (r->controller_id == id) {
        out.push_back(id);
        break;
      }
  return out;
}

inline const RunResult* pick(const std::vector<const RunResult*>& rs, const std::string& ctrl) {
  for (const RunResult* r : rs)
    if (r->controller_id == ctrl) return r;
  return nullptr;
}

inline std::string per_step_csv(const std::vector<const RunResult*>& rs, bool trajectories) {
  const auto ctrls = present(rs);
  std::size_t steps = 0;
  Eigen::Index n = 0;
  for (const RunResult* r : rs) {
    steps = std::max(steps, r->records.size());
    if (!r->records.empty()) n = std::max(n, r->records.front().u.size());
  }
  std::string out = "step";
  for (const auto& c : ctrls) {
    if (!trajectories) {
      out += "," + c;
      continue;
    }
    for (Eigen::Index i = 0; i < n; ++i) out += "," + c + "_y" + std::to_string(i + 1);
    for (Eigen::Index i = 0; i < n; ++i) out += "," + c + "_u" + std::to_string(i + 1);
  }
  out += "\n";
  for (std::size_t k = 0; k < steps; ++k) {
    out += std::to_string(k);
    for (const auto& c : ctrls) {
      const RunResult* r = pick(rs, c);
      const bool have = r && k < r->records.size();
      if (!trajectories) {
        out += "," + fmt17(have ? r->records[k].cost : std::nan(""));
        continue;
      }
      for (int part = 0; part < 2; ++part)
        for (Eigen::Index i = 0; i < n; ++i)
          out += "," + fmt17(have ? (part == 0 ? r->records[k].y : r->records[k].u)[i] : std::nan(""));
    }
    out += "\n";
  }
  return out;
}

inline std::string per_trial_csv(const std::vector<std::string>& scenario_ids,
                                 const std::map<std::string, std::vector<const RunResult*>>& by_scenario) {
  std::vector<const RunResult*> all;
  for (const auto& id : scenario_ids)
    for (const RunResult* r : by_scenario.at(id)) all.push_back(r);
  const auto ctrls = present(all);
  std::string out = "trial";
  for (const auto& c : ctrls) out += "," + c;
  out += "\n";
  for (std::size_t t = 0; t < scenario_ids.size(); ++t) {
    out += std::to_string(t);
    for (const auto& c : ctrls) {
      const RunResult* r = pick(by_scenario.at(scenario_ids[t]), c);
      out += "," + fmt17(r && !r->failed ? r->metric() : std::nan(""));
    }
    out += "\n";
  }
  return out;
}

}  // namespace detail

// Figure CSVs derived from stored results only:
//   fig_static_traj.csv  step, <ctrl>_y<i>..., <ctrl>_u<i>...   (nominal static run)
//   fig_cost.csv         step, <ctrl>...  per-step cost           (nominal static run)
//   fig_box.csv          trial, <ctrl>... final-5 mean cost       (static trials)
//   fig_tv.csv           step, <ctrl>...  per-step cost           (first time-varying trial)
//   fig_tv_traj.csv      as fig_static_traj for that trial
//   fig_tv_box.csv       trial, <ctrl>... horizon mean cost       (time-varying trials)
// A file is written only when its source runs are present. Returns the names.
inline std::vector<std::string> emit_figures(const std::vector<RunResult>& results, const std::filesystem::path& dir) {
  std::map<std::string, std::vector<const RunResult*>> by_scenario;
  std::vector<std::string> static_trials, tv_trials;
  for (const auto& r : results) {
    auto& v = by_scenario[r.scenario_id];
    if (v.empty()) {
      if (r.kind == ScenarioKind::TimeVarying) tv_trials.push_back(r.scenario_id);
      else if (r.scenario_id != "static-nominal") static_trials.push_back(r.scenario_id);
    }
    v.push_back(&r);
  }
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& content) {
    write_file(dir / name, content);
    written.push_back(name);
  };
  std::string traj_id = by_scenario.count("static-nominal") ? "static-nominal"
                        : static_trials.empty()              ? ""
                                                             : static_trials.front();
  if (!traj_id.empty()) {
    put("fig_static_traj.csv", detail::per_step_csv(by_scenario[traj_id], true));
    put("fig_cost.csv", detail::per_step_csv(by_scenario[traj_id], false));
  }
  if (!static_trials.empty()) put("fig_box.csv", detail::per_trial_csv(static_trials, by_scenario));
  if (!tv_trials.empty()) {
    put("fig_tv.csv", detail::per_step_csv(by_scenario[tv_trials.front()], false));
    put("fig_tv_traj.csv", detail::per_step_csv(by_scenario[tv_trials.front()], true));
    put("fig_tv_box.csv", detail::per_trial_csv(tv_trials, by_scenario));
  }
  return written;
}

// manifest.json: every file in the output directory with its size and blob
// hash, plus the seed and configuration hash needed to regenerate them.
inline Json write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& data_files,
                           const Json& provenance) {
  Json files = Json::array();
  auto entry = [&](const std::string& name) {
    const std::string c = read_text_file(dir / name);
    files.push_back({{"name", name}, {"bytes", c.size()}, {"sha1", git_blob_sha1(c)}});
  };
  entry("results.jsonl");
  if (std::filesystem::exists(dir / "summary.json")) entry("summary.json");
  Json data = Json::array();
  for (const auto& f : data_files) {
    entry(f);
    data.push_back(f);
  }
  Json m = {{"schema_version", kResultsSchemaVersion},
            {"files", files},
            {"data_files", data},
            {"master_seed", provenance.value("master_seed", Json(nullptr))},
            {"config_hash", provenance.value("config_hash", Json(nullptr))}};
  write_file(dir / "manifest.json", m.dump(2) + "\n");
  return m;
}

// Writes results.jsonl, summary.json, the figure CSVs and manifest.json.
inline Json persist(const std::vector<RunResult>& results, const Json& summary, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_file(dir / "results.jsonl", results_jsonl(results));
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  const auto data = emit_figures(results, dir);
  return write_manifest(dir, data, summary.value("provenance", Json::object()));
}

// ---------------------------------------------------------------------------
// Benchmark suite

struct BenchConfig {
  std::uint64_t master_seed = 1;
  int trials = 100;
  double perturb_frac = 0.3;
  int static_horizon = 20;
  TimeVaryingOptions tv;
  bool run_static = true;
  bool run_time_varying = true;
  std::vector<ControllerKind> controllers = {ControllerKind::Ddsl, ControllerKind::Fo, ControllerKind::Droop,
                                             ControllerKind::Socp};
  DdslConfig ddsl;
  FoConfig fo;
  std::optional<double> fo_gamma;   // unset: grid search on the nominal run
  std::optional<double> droop_phi;  // unset: grid search on the nominal run
  double w_v = 0.5, w_u = 0.1;
  ConicOptions conic;

  // Canonical form; the thread count is deliberately not part of it.
  Json canonical() const {
    Json ctrls = Json::array();
    for (auto k : controllers) ctrls.push_back(to_string(k));
    return {{"master_seed", master_seed},
            {"trials", trials},
            {"perturb_frac", perturb_frac},
            {"static_horizon", static_horizon},
            {"tv_horizon", tv.horizon},
            {"tv_step_changes", tv.step_changes},
            {"tv_magnitude", tv.magnitude},
            {"tv_walk_sd", tv.walk_sd},
            {"tv_change_steps", tv.change_steps},
            {"run_static", run_static},
            {"run_time_varying", run_time_varying},
            {"controllers", ctrls},
            {"ddsl",
             {{"radius", ddsl.radius},
              {"tau", ddsl.tau},
              {"lambda_ff", ddsl.lambda_ff},
              {"stall_tol", ddsl.stall_tol},
              {"perturb_scale", ddsl.perturb_scale}}},
            {"fo",
             {{"gamma", fo_gamma ? Json(*fo_gamma) : Json("tuned")},
              {"tau", fo.tau},
              {"lambda_ff", fo.lambda_ff},
              {"perturb_scale", fo.perturb_scale}}},
            {"droop_phi", droop_phi ? Json(*droop_phi) : Json("tuned")},
            {"cost", {{"w_v", w_v}, {"w_u", w_u}}},
            {"conic", {{"abstol", conic.abstol}, {"reltol", conic.reltol}, {"feastol", conic.feastol}}}};
  }
  std::string hash() const { return fnv1a_hex(canonical().dump()); }

  void check() const {
    if (trials < 1) throw ParameterError("trials must be >= 1");
    if (!(perturb_frac >= 0.0 && perturb_frac < 1.0)) throw ParameterError("perturb_frac must lie in [0, 1)");
    if (static_horizon < 1) throw ParameterError("static horizon must be >= 1");
    if (controllers.empty()) throw ParameterError("no controllers selected");
    if (fo_gamma && !(*fo_gamma > 0.0)) throw ParameterError("gamma must be positive");
    if (!(w_v > 0.0 && w_u >= 0.0)) throw ParameterError("cost weights need w_v > 0 and w_u >= 0");
    ddsl.check();
    FoConfig f = fo;
    if (fo_gamma) f.gamma = *fo_gamma;
    f.check();
  }
};

struct BenchOutput {
  std::vector<RunResult> results;
  Json summary;
  double fo_gamma = 0.0;
  double droop_phi = 0.0;
};

inline std::vector<Scenario> bench_scenarios(const NetworkModel& net, const BenchConfig& cfg) {
  std::vector<Scenario> sc;
  const Scenario base = nominal_scenario(net, cfg.static_horizon);
  if (cfg.run_static) {
    sc.push_back(base);
    for (auto& s : make_static_trials(base, cfg.trials, cfg.perturb_frac, mix_seed(cfg.master_seed, 1)))
      sc.push_back(std::move(s));
  }
  if (cfg.run_time_varying) {
    for (int i = 0; i < cfg.trials; ++i) {
      Scenario b = base;
      b.id = trial_id("tv", i);
      sc.push_back(make_time_varying(b, cfg.tv, mix_seed(mix_seed(cfg.master_seed, 2), static_cast<std::uint64_t>(i))));
    }
  }
  return sc;
}

inline bool has_controller(const BenchConfig& cfg, ControllerKind k) {
  return std::find(cfg.controllers.begin(), cfg.controllers.end(), k) != cfg.controllers.end();
}

inline BenchOutput run_bench(const NetworkModel& net, const BenchConfig& cfg, const Json& feeder_fp, int jobs = 1,
                             std::ostream* progress = nullptr) {
  cfg.check();
  const QuadraticCost cost{cfg.w_v, cfg.w_u, net.y_ref};
  const ControlProblem pb = make_control_problem(net, cost);
  const LoadProfile nominal = base_loads(net);
  BenchOutput out;

  FoConfig fo = cfg.fo;
  std::string gamma_source = "configured", phi_source = "configured";
  if (cfg.fo_gamma) {
    out.fo_gamma = *cfg.fo_gamma;
  } else if (has_controller(cfg, ControllerKind::Fo)) {
    out.fo_gamma = tune_fo_gamma(net, nominal, pb, kFoGammaGrid, fo);
    gamma_source = "grid search on the nominal static run";
  } else {
    out.fo_gamma = fo.gamma;
  }
  fo.gamma = out.fo_gamma;
  if (cfg.droop_phi) {
    out.droop_phi = *cfg.droop_phi;
  } else if (has_controller(cfg, ControllerKind::Droop)) {
    out.droop_phi = tune_droop_gains(net, nominal, pb, kDroopGrid, cfg.static_horizon).phi[0];
    phi_source = "grid search on the nominal static run";
  }
  if (progress) *progress << "fo gamma " << out.fo_gamma << ", droop phi " << out.droop_phi << "\n";

  const auto scenarios = bench_scenarios(net, cfg);
  struct Task {
    std::size_t scenario;
    ControllerKind kind;
  };
  std::vector<Task> tasks;
  for (std::size_t s = 0; s < scenarios.size(); ++s)
    for (auto k : cfg.controllers) tasks.push_back({s, k});
  out.results.resize(tasks.size());
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    const Scenario& sc = scenarios[tasks[i].scenario];
    ControllerSpec spec;
    spec.kind = tasks[i].kind;
    spec.ddsl = cfg.ddsl;
    spec.ddsl.seed = mix_seed(cfg.master_seed, 1000 + tasks[i].scenario);
    spec.fo = fo;
    spec.fo.seed = spec.ddsl.seed;
    spec.droop_phi = out.droop_phi;
    spec.conic = cfg.conic;
    try {
      out.results[i] = run_trial(net, sc, spec, cost);
    } catch (const Error& e) {
      RunResult r;
      r.scenario_id = sc.id;
      r.kind = sc.kind;
      r.controller_id = to_string(spec.kind);
      r.failed = true;
      r.error = e.what();
      out.results[i] = std::move(r);
    }
  });

  Json suites = Json::object();
  auto summarize = [&](const char* name, auto pred) {
    std::vector<RunResult> sel;
    for (const auto& r : out.results)
      if (pred(r)) sel.push_back(r);
    if (!sel.empty()) suites[name] = to_json(aggregate(sel));
  };
  summarize("nominal", [](const RunResult& r) { return r.scenario_id == "static-nominal"; });
  summarize("static", [](const RunResult& r) {
    return r.kind == ScenarioKind::Static && r.scenario_id != "static-nominal";
  });
  summarize("time_varying", [](const RunResult& r) { return r.kind == ScenarioKind::TimeVarying; });

  double worst_pf = 0.0;
  int failures = 0;
  for (const auto& r : out.results) {
    worst_pf = std::max(worst_pf, r.max_pf_residual);
    failures += r.failed;
  }
  out.summary = {
      {"schema_version", kResultsSchemaVersion},
      {"provenance",
       {{"master_seed", cfg.master_seed},
        {"config_hash", cfg.hash()},
        {"config", cfg.canonical()},
        {"feeder", feeder_fp},
        {"load_model",
         "static: per-bus uniform scaling of nominal loads; time-varying: synthetic seeded random walk with step "
         "changes, standing in for measured feeder data"},
        {"normalization", "each suite divides by the largest controller mean in that suite"}}},
      {"tuning",
       {{"fo_gamma", out.fo_gamma}, {"fo_gamma_source", gamma_source}, {"droop_phi", out.droop_phi},
        {"droop_phi_source", phi_source}}},
      {"runs", out.results.size()},
      {"failed_runs", failures},
      {"max_power_flow_residual", worst_pf},
      {"suites", suites}};
  return out;
}

}  // namespace voltctl
