#pragma once

// Closed-loop controllers run against a Plant: the data-driven trust-region
// loop (DDSL) and three baselines, feedback optimization (FO), linear droop
// and the model-based conic relaxation.

#include "voltctl/common.hpp"
#include "voltctl/convex_kernel.hpp"
#include "voltctl/grid_model.hpp"
#include "voltctl/powerflow.hpp"
#include "voltctl/relaxation.hpp"
#include "voltctl/sensitivity.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace voltctl {

// Cost, boxes and penalty weights shared by every controller on one feeder.
struct ControlProblem {
  QuadraticCost cost;
  Vector u_min, u_max;
  Vector y_min, y_max;
  PenaltySpec pen;
};

inline ControlProblem make_control_problem(const ControlBounds& b, const QuadraticCost& cost) {
  cost.check();
  ControlProblem pb{cost, b.u_min, b.u_max, b.y_min, b.y_max, {}};
  pb.pen = default_penalty(cost, b.y_min, b.y_max, b.u_min, b.u_max);
  return pb;
}

inline ControlProblem make_control_problem(const NetworkModel& net, const QuadraticCost& cost) {
  return make_control_problem(control_bounds(net), cost);
}

// Exact penalty at a measured point, where y = g(u) and only the box term is left.
inline double measured_penalty(const ControlProblem& pb, const Vector& y, const Vector& u) {
  return pb.cost(y, u) + pb.pen.eta_pen.dot(voltage_box_h(y, pb.y_min, pb.y_max).cwiseMax(0.0));
}

struct ControlStepRecord {
  int k = 0;
  Vector u, y;
  double cost = 0.0;
  double predicted_decrease = 0.0;  // of the subproblem solved at step k
  std::optional<double> rho;        // filled once y_{k+1} is measured
  bool excited = false;
  bool perturbed = false;  // u_k carries a stall perturbation
  bool trust_active = false;

  bool operator==(const ControlStepRecord&) const = default;
};

// Stationarity measure at the first stall with an excited window: norm of the
// box-projected negative surrogate gradient at the zero step.
struct StallCertificate {
  int k = 0;
  double kkt_at_zero = 0.0;
  Matrix S_estimate;
  Vector u, y;
};

struct ControlTrace {
  std::vector<ControlStepRecord> records;
  std::optional<StallCertificate> certificate;
  bool diverging = false;
  int bootstrap_attempts = 0;
  std::vector<std::string> log;
};

struct DdslConfig {
  double radius = 0.02;
  int tau = 0;  // 0 selects 3n
  double lambda_ff = 0.95;
  double stall_tol = 1e-6;
  // A predicted decrease at or below decrease_tol * J also counts as a
  // stall: steps that small are dominated by the estimation error.
  double decrease_tol = 1e-4;
  double perturb_scale = 1e-3;
  int max_steps = 20;
  std::uint64_t seed = 1;

  void check() const {
    if (!(radius > 0.0)) throw ParameterError("radius must be positive");
    if (!(decrease_tol >= 0.0)) throw ParameterError("decrease tolerance must be nonnegative");
    if (!(lambda_ff > 0.0 && lambda_ff < 1.0)) throw ParameterError("forgetting factor must lie in (0, 1)");
    if (!(perturb_scale >= 0.0)) throw ParameterError("perturbation scale must be nonnegative");
    if (!(stall_tol > 0.0)) throw ParameterError("stall tolerance must be positive");
    if (tau < 0) throw ParameterError("tau must be >= 1 (or 0 for the default)");
    if (max_steps < 1) throw ParameterError("max_steps must be >= 1");
  }
};

// Winner of tune_fo_gamma over kFoGammaGrid on the nominal 33-bus feeder.
// The curvature bound 2/L (L = 2 w_v sigma_max(S)^2 + 2 w_u) is about 1.3e-3
// there; 2e-3 still converges because the clip and the estimated S damp the
// stiffest direction, while 3e-3 and up collapse the feeder.
inline constexpr double kDefaultFoGamma = 2e-3;

inline const std::vector<double> kFoGammaGrid = {1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 3e-3, 5e-3, 1e-2, 0.3};

// Uniform droop gains searched by the bench; the 33-bus feeder loses its
// power-flow solution from about -0.05 on.
inline const std::vector<double> kDroopGrid = {0.0,   -0.005, -0.01, -0.015, -0.02, -0.025,
                                               -0.03, -0.04,  -0.05, -0.1,   -1.0,  -2.0};

struct FoConfig {
  double gamma = kDefaultFoGamma;
  int tau = 0;
  double lambda_ff = 0.95;
  double perturb_scale = 1e-3;  // bootstrap probes only
  int max_steps = 20;
  std::uint64_t seed = 1;

  void check() const {
    if (!(gamma > 0.0)) throw ParameterError("gamma must be positive");
    if (!(lambda_ff > 0.0 && lambda_ff < 1.0)) throw ParameterError("forgetting factor must lie in (0, 1)");
    if (!(perturb_scale >= 0.0)) throw ParameterError("perturbation scale must be nonnegative");
    if (tau < 0) throw ParameterError("tau must be >= 1 (or 0 for the default)");
    if (max_steps < 1) throw ParameterError("max_steps must be >= 1");
  }
};

struct DroopConfig {
  Vector phi;
};

inline DroopConfig uniform_droop(Eigen::Index n, double phi) { return {Vector::Constant(n, phi)}; }

namespace detail {

inline void require_in_box(const Vector& u, const Vector& lo, const Vector& hi) {
  require_size(u, lo.size(), "initial input");
  if (((u - lo).array() < -1e-12).any() || ((hi - u).array() < -1e-12).any())
    throw ParameterError("initial input lies outside the input box");
}

// A window of n + 2 increments is close to square; the least-squares fit then
// nearly interpolates, and curvature in large steps leaks into every column of
// the estimate. Three increments per input keep it a genuine regression.
inline int window_tau(int tau, Eigen::Index n) { return tau > 0 ? tau : 3 * static_cast<int>(n); }

inline double box_projected_gradient(const Vector& grad, const Vector& lo, const Vector& hi) {
  return clip(-grad, lo, hi).norm();
}

}  // namespace detail

// tau + 1 seeded Gaussian probes around u_init, all measured under the
// step-0 loads. The scale doubles on each of up to three retries.
template <Plant P>
TrajectoryWindow bootstrap_window(P& plant, const ControlProblem& pb, const Vector& u_init, int tau, double lambda_ff,
                                  double scale, std::uint64_t seed, ControlTrace* trace = nullptr) {
  const Eigen::Index n = plant.dimension();
  detail::require_in_box(u_init, pb.u_min, pb.u_max);
  tau = detail::window_tau(tau, n);
  for (int attempt = 0; attempt <= 3; ++attempt) {
    const double s = scale * std::ldexp(1.0, attempt);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt) + 1));
    TrajectoryWindow w(tau, lambda_ff);
    for (int i = 0; i <= tau; ++i) {
      const Vector u = clip(u_init + rng.normal_vector(n, s), pb.u_min, pb.u_max);
      w.push(u, plant.measure(u, 0));
    }
    if (trace) trace->bootstrap_attempts = attempt + 1;
    if (estimate_from_window(w).excited) return w;
    if (trace) trace->log.push_back("bootstrap probes at scale " + std::to_string(s) + " were not exciting");
  }
  throw BootstrapError("no exciting probe window after 3 retries (last scale " + std::to_string(scale * 8.0) + ")");
}

namespace detail {

// A repeated input adds a zero increment, which says nothing about S and only
// dilutes the window, so it is not pushed.
inline void refresh(TrajectoryWindow& w, const Vector& u, const Vector& y) {
  if (w.size() == 0 || w.newest().u != u) w.push(u, y);
}

inline SensitivityEstimate estimate_with_prior(const TrajectoryWindow& w, std::optional<Matrix>& prior) {
  auto est = estimate_from_window(w, 1e-8, prior);
  if (est.excited) prior = est.S;
  return est;
}

}  // namespace detail

template <Plant P>
ControlTrace ddsl_run(P& plant, const ControlProblem& pb, const DdslConfig& cfg, const Vector& u_init) {
  cfg.check();
  const Eigen::Index n = plant.dimension();
  ControlTrace trace;
  TrajectoryWindow w =
      bootstrap_window(plant, pb, u_init, cfg.tau, cfg.lambda_ff, cfg.perturb_scale, cfg.seed, &trace);
  Rng rng(mix_seed(cfg.seed, 1000));
  std::optional<Matrix> prior;
  Vector u = u_init;
  bool perturbed = false;
  for (int k = 0; k < cfg.max_steps; ++k) {
    const Vector y = plant.measure(u, k);
    ControlStepRecord rec;
    rec.k = k;
    rec.u = u;
    rec.y = y;
    rec.cost = pb.cost(y, u);
    rec.perturbed = perturbed;
    const double J_now = measured_penalty(pb, y, u);
    if (!trace.records.empty()) {
      auto& prev = trace.records.back();
      // No ratio for a held step: nothing was applied.
      if (prev.predicted_decrease > 1e-12 && prev.u != u)
        prev.rho = decrease_ratio(measured_penalty(pb, prev.y, prev.u), J_now,
                                  measured_penalty(pb, prev.y, prev.u) - prev.predicted_decrease);
    }

    detail::refresh(w, u, y);
    const SensitivityEstimate est = detail::estimate_with_prior(w, prior);
    rec.excited = est.excited;

    TrustRegionSpec spec{cfg.radius, u, y, est.S, pb.u_min, pb.u_max, pb.y_min, pb.y_max};
    SubproblemSolution sol;
    try {
      sol = solve_trust_region(pb.cost, spec, {});
    } catch (const InfeasibleError&) {
      SubproblemOptions soft;
      soft.soft_y = true;
      soft.eta = pb.pen.eta_pen;
      sol = solve_trust_region(pb.cost, spec, soft);
      trace.log.push_back("step " + std::to_string(k) + ": voltage box unreachable, soft mode");
    }
    const double L_next =
        pb.cost(sol.y_pred, sol.u_next) +
        pb.pen.eta_pen.dot(voltage_box_h(sol.y_pred, pb.y_min, pb.y_max).cwiseMax(0.0));
    rec.predicted_decrease = predicted_decrease(J_now, L_next);
    rec.trust_active = sol.active_trust;

    Vector u_next = sol.u_next;
    perturbed = false;
    if ((u_next - u).norm() < cfg.stall_tol || rec.predicted_decrease <= cfg.decrease_tol * J_now) {
      if (!est.excited) {
        u_next = clip(u_next + rng.normal_vector(n, cfg.perturb_scale), pb.u_min, pb.u_max);
        perturbed = true;
      } else {
        if (!trace.certificate) {
          const Vector grad = est.S.transpose() * pb.cost.grad_y(y) + pb.cost.grad_u(u);
          trace.certificate = StallCertificate{
              k, detail::box_projected_gradient(grad, pb.u_min - u, pb.u_max - u), est.S, u, y};
        }
        u_next = u;
      }
    }
    trace.records.push_back(std::move(rec));
    u = u_next;
  }
  return trace;
}

// Step-size instability shows up as growing steps that flip direction.
inline bool oscillation_detected(const std::vector<ControlStepRecord>& recs) {
  int streak = 0;
  for (std::size_t k = 2; k < recs.size(); ++k) {
    const Vector a = recs[k - 1].u - recs[k - 2].u, b = recs[k].u - recs[k - 1].u;
    if (a.norm() > 0.0 && b.norm() >= a.norm() && a.dot(b) < 0.0) {
      if (++streak >= 3) return true;
    } else {
      streak = 0;
    }
  }
  return false;
}

template <Plant P>
ControlTrace feedback_optimization_run(P& plant, const ControlProblem& pb, const FoConfig& cfg, const Vector& u_init) {
  cfg.check();
  ControlTrace trace;
  TrajectoryWindow w =
      bootstrap_window(plant, pb, u_init, cfg.tau, cfg.lambda_ff, cfg.perturb_scale, cfg.seed, &trace);
  std::optional<Matrix> prior;
  Vector u = u_init;
  for (int k = 0; k < cfg.max_steps; ++k) {
    const Vector y = plant.measure(u, k);
    ControlStepRecord rec;
    rec.k = k;
    rec.u = u;
    rec.y = y;
    rec.cost = pb.cost(y, u);
    detail::refresh(w, u, y);
    const SensitivityEstimate est = detail::estimate_with_prior(w, prior);
    rec.excited = est.excited;
    const Vector grad = est.S.transpose() * pb.cost.grad_y(y) + pb.cost.grad_u(u);
    trace.records.push_back(std::move(rec));
    u = clip(u - cfg.gamma * grad, pb.u_min, pb.u_max);
  }
  trace.diverging = oscillation_detected(trace.records);
  if (trace.diverging)
    trace.log.push_back("growing alternating steps: gamma " + std::to_string(cfg.gamma) +
                        " is likely above the stability limit");
  return trace;
}

// u_{k+1} = clip(phi o (y_k - 1)).
template <Plant P>
ControlTrace droop_run(P& plant, const ControlProblem& pb, const DroopConfig& cfg, const Vector& u_init, int steps) {
  const Eigen::Index n = plant.dimension();
  require_size(cfg.phi, n, "droop gains");
  detail::require_in_box(u_init, pb.u_min, pb.u_max);
  if (steps < 1) throw ParameterError("steps must be >= 1");
  ControlTrace trace;
  Vector u = u_init;
  for (int k = 0; k < steps; ++k) {
    const Vector y = plant.measure(u, k);
    ControlStepRecord rec;
    rec.k = k;
    rec.u = u;
    rec.y = y;
    rec.cost = pb.cost(y, u);
    trace.records.push_back(std::move(rec));
    u = clip(cfg.phi.cwiseProduct(y - Vector::Ones(n)), pb.u_min, pb.u_max);
  }
  return trace;
}

// Model-based benchmark: at each step apply the relaxation optimum for that
// step's loads (solved once per distinct load profile).
inline ControlTrace socp_run(DistFlowPlant& plant, const ControlProblem& pb, int steps, const ConicOptions& opts = {}) {
  if (steps < 1) throw ParameterError("steps must be >= 1");
  const NetworkModel& net = plant.network();
  ControlTrace trace;
  const LoadProfile* cached_for = nullptr;
  Vector u_star;
  for (int k = 0; k < steps; ++k) {
    const LoadProfile& lp = plant.loads().at(k);
    if (!cached_for || cached_for->p != lp.p || cached_for->q_base != lp.q_base) {
      u_star = solve_relaxation(net, lp, pb.cost, opts).u_star;
      cached_for = &lp;
    }
    const Vector y = plant.measure(u_star, k);
    ControlStepRecord rec;
    rec.k = k;
    rec.u = u_star;
    rec.y = y;
    rec.cost = pb.cost(y, u_star);
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

inline double final5_mean(const std::vector<ControlStepRecord>& recs) {
  if (recs.empty()) throw EmptyInput("no records");
  const std::size_t k0 = recs.size() > 5 ? recs.size() - 5 : 0;
  double s = 0.0;
  for (std::size_t k = k0; k < recs.size(); ++k) s += recs[k].cost;
  return s / static_cast<double>(recs.size() - k0);
}

// Uniform gain from the grid with the lowest final-5 mean cost on a static
// run from u = 0. A gain that collapses the plant scores +inf; ties go to the
// smaller |phi|.
inline DroopConfig tune_droop_gains(const NetworkModel& net, const LoadProfile& loads, const ControlProblem& pb,
                                    const std::vector<double>& grid, int steps = 20) {
  if (grid.empty()) throw ParameterError("empty droop gain grid");
  double best = std::numeric_limits<double>::infinity(), best_phi = grid.front();
  bool have = false;
  for (double phi : grid) {
    double score = std::numeric_limits<double>::infinity();
    try {
      DistFlowPlant plant(net, LoadSchedule(loads));
      score = final5_mean(droop_run(plant, pb, uniform_droop(net.size(), phi), Vector::Zero(net.size()), steps).records);
    } catch (const PlantError&) {
    }
    if (!have || score < best || (score == best && std::abs(phi) < std::abs(best_phi))) {
      best = score;
      best_phi = phi;
      have = true;
    }
  }
  return uniform_droop(net.size(), best_phi);
}

// Same selection rule for the FO learning rate.
inline double tune_fo_gamma(const NetworkModel& net, const LoadProfile& loads, const ControlProblem& pb,
                            const std::vector<double>& grid, FoConfig base = {}) {
  if (grid.empty()) throw ParameterError("empty learning-rate grid");
  double best = std::numeric_limits<double>::infinity(), best_gamma = grid.front();
  bool have = false;
  for (double g : grid) {
    double score = std::numeric_limits<double>::infinity();
    try {
      DistFlowPlant plant(net, LoadSchedule(loads));
      base.gamma = g;
      score = final5_mean(feedback_optimization_run(plant, pb, base, Vector::Zero(net.size())).records);
    } catch (const PlantError&) {
    }
    if (!have || score < best || (score == best && g < best_gamma)) {
      best = score;
      best_gamma = g;
      have = true;
    }
  }
  return best_gamma;
}

}  // namespace voltctl
