#pragma once

// Nonlinear DistFlow plant: backward-forward sweep on squared voltages with
// loss iteration, plus a central-difference Jacobian oracle.

#include "voltctl/common.hpp"
#include "voltctl/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <string>

namespace voltctl {

// Uncontrolled net injections per non-root slot (generation positive).
struct LoadProfile {
  Vector p;
  Vector q_base;

  bool operator==(const LoadProfile& o) const { return p == o.p && q_base == o.q_base; }
};

struct InjectionProfile {
  Vector p;
  Vector u;
  Vector q_base;
};

inline LoadProfile base_loads(const NetworkModel& net) {
  const Eigen::Index m = net.size();
  LoadProfile lp{Vector(m), Vector(m)};
  for (Eigen::Index s = 0; s < m; ++s) {
    const Bus& b = net.buses[net.bus_of_slot[s]];
    lp.p[s] = -b.p_load;
    lp.q_base[s] = -b.q_load;
  }
  return lp;
}

inline LoadProfile scaled(const LoadProfile& lp, double factor) {
  return {lp.p * factor, lp.q_base * factor};
}

// Flows are indexed like net.lines; voltages like the non-root slots.
struct PowerFlowSolution {
  Vector y;
  Vector P;
  Vector Q;
  Vector l;
  double residual = 0.0;
  int iterations = 0;
};

struct PowerFlowOptions {
  double residual_tol = 1e-10;
  double step_tol = 1e-10;  // max |y change| between sweeps
  int max_sweeps = 200;
};

// Tighter stopping rule used by the plant simulator and the Jacobian oracle;
// the sweep contracts fast enough that the extra passes are nearly free.
inline PowerFlowOptions precise_options() { return {1e-10, 1e-14, 200}; }

// Maximum violation of the four DistFlow relations at a candidate solution.
inline double distflow_residual(const NetworkModel& net, const InjectionProfile& inj,
                                const PowerFlowSolution& sol) {
  const double v0 = net.slack_voltage * net.slack_voltage;
  auto vsq = [&](int bus) {
    const int s = net.slot_of_bus[bus];
    return s < 0 ? v0 : sol.y[s] * sol.y[s];
  };
  double worst = 0.0;
  for (std::size_t e = 0; e < net.lines.size(); ++e) {
    const Line& ln = net.lines[e];
    const int i = net.line_from[e];
    const int j = net.line_to[e];
    const int sj = net.slot_of_bus[j];
    const double vi = vsq(i), vj = vsq(j);
    double child_p = 0.0, child_q = 0.0;
    for (int h : net.children[j]) {
      child_p += sol.P[net.parent_line[h]];
      child_q += sol.Q[net.parent_line[h]];
    }
    const double r_a = vi - vj - 2.0 * (ln.r * sol.P[e] + ln.x * sol.Q[e]) + ln.z2() * sol.l[e];
    const double r_b = child_p - (sol.P[e] - ln.r * sol.l[e] + inj.p[sj]);
    const double r_c = child_q - (sol.Q[e] - ln.x * sol.l[e] + inj.q_base[sj] + inj.u[sj]);
    const double r_d = sol.l[e] - (sol.P[e] * sol.P[e] + sol.Q[e] * sol.Q[e]) / vi;
    worst = std::max({worst, std::abs(r_a), std::abs(r_b), std::abs(r_c), std::abs(r_d)});
  }
  return worst;
}

inline PowerFlowSolution solve_distflow(const NetworkModel& net, const InjectionProfile& inj,
                                        const std::optional<PowerFlowSolution>& warm_start = std::nullopt,
                                        const PowerFlowOptions& opts = {}) {
  const Eigen::Index m = net.size();
  require_size(inj.p, m, "solve_distflow: p");
  require_size(inj.u, m, "solve_distflow: u");
  require_size(inj.q_base, m, "solve_distflow: q_base");
  const std::size_t n_lines = net.lines.size();
  const double v0 = net.slack_voltage * net.slack_voltage;

  // Per-bus working arrays (index = position in net.buses).
  const std::size_t nb = net.buses.size();
  std::vector<double> v(nb, v0);
  Vector P = Vector::Zero(static_cast<Eigen::Index>(n_lines));
  Vector Q = P;
  Vector l = P;
  if (warm_start && warm_start->y.size() == m && warm_start->l.size() == l.size()) {
    for (Eigen::Index s = 0; s < m; ++s) v[net.bus_of_slot[s]] = warm_start->y[s] * warm_start->y[s];
    l = warm_start->l;
  }
  const std::vector<int>& from_idx = net.line_from;

  PowerFlowSolution sol;
  sol.y.resize(m);
  for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
    // Backward: aggregate flows from the leaves toward the root.
    for (auto it = net.sweep_order.rbegin(); it != net.sweep_order.rend(); ++it) {
      const int j = *it;
      const int e = net.parent_line[j];
      if (e < 0) continue;
      const Line& ln = net.lines[e];
      const int sj = net.slot_of_bus[j];
      double p = ln.r * l[e] - inj.p[sj];
      double q = ln.x * l[e] - inj.q_base[sj] - inj.u[sj];
      for (int h : net.children[j]) {
        p += P[net.parent_line[h]];
        q += Q[net.parent_line[h]];
      }
      P[e] = p;
      Q[e] = q;
    }
    // Forward: voltage drops from the root outward.
    double step = 0.0;
    for (int j : net.sweep_order) {
      const int e = net.parent_line[j];
      if (e < 0) continue;
      const Line& ln = net.lines[e];
      const double vj = v[from_idx[e]] - 2.0 * (ln.r * P[e] + ln.x * Q[e]) + ln.z2() * l[e];
      if (!(vj > 0.0) || !std::isfinite(vj))
        throw ConvergenceError("DistFlow sweep produced a nonpositive squared voltage at bus " +
                               std::to_string(net.buses[j].id) + " (operating point near voltage collapse)");
      step = std::max(step, std::abs(std::sqrt(vj) - std::sqrt(v[j])));
      v[j] = vj;
    }
    for (std::size_t e = 0; e < n_lines; ++e) l[e] = (P[e] * P[e] + Q[e] * Q[e]) / v[from_idx[e]];

    for (Eigen::Index s = 0; s < m; ++s) sol.y[s] = std::sqrt(v[net.bus_of_slot[s]]);
    sol.P = P;
    sol.Q = Q;
    sol.l = l;
    sol.iterations = sweep;
    // The last loss update leaves (2b)/(2c) off by r*dl; the residual check
    // below sees that, so no separate loss-change test is needed.
    sol.residual = distflow_residual(net, inj, sol);
    if (sol.residual <= opts.residual_tol && step <= opts.step_tol) return sol;
  }
  throw ConvergenceError("DistFlow sweep did not converge in " + std::to_string(opts.max_sweeps) +
                         " sweeps (residual " + std::to_string(sol.residual) + ")");
}

inline InjectionProfile make_injection(const LoadProfile& loads, const Vector& u) {
  return {loads.p, u, loads.q_base};
}

// y = g(u) for fixed uncontrolled injections.
inline Vector voltage_map(const NetworkModel& net, const LoadProfile& loads, const Vector& u,
                          const PowerFlowOptions& opts = precise_options()) {
  return solve_distflow(net, make_injection(loads, u), std::nullopt, opts).y;
}

// Central-difference Jacobian of any vector map.
template <class F>
  requires std::invocable<F&, const Vector&>
Matrix finite_difference_jacobian(F&& g, const Vector& u, double h) {
  if (!(h > 0.0)) throw StepError("finite-difference step must be positive");
  const Vector y0 = g(u);
  Matrix S(y0.size(), u.size());
  Vector up = u, um = u;
  for (Eigen::Index j = 0; j < u.size(); ++j) {
    up[j] = u[j] + h;
    um[j] = u[j] - h;
    S.col(j) = (g(up) - g(um)) / (2.0 * h);
    up[j] = um[j] = u[j];
  }
  return S;
}

inline Matrix true_jacobian(const NetworkModel& net, const LoadProfile& loads, const Vector& u,
                            double h = 1e-5) {
  if (!(h > 0.0)) throw StepError("finite-difference step must be positive");
  return finite_difference_jacobian([&](const Vector& x) { return voltage_map(net, loads, x); }, u, h);
}

// Plant interface used by the controllers: apply an input at a control step
// and measure the response.
template <class P>
concept Plant = requires(P& plant, const Vector& u, int step) {
  { plant.measure(u, step) } -> std::convertible_to<Vector>;
  { plant.dimension() } -> std::convertible_to<Eigen::Index>;
};

// Schedule of uncontrolled injections per control step.
class LoadSchedule {
 public:
  LoadSchedule() = default;
  explicit LoadSchedule(LoadProfile constant) : steps_{std::move(constant)} {}
  explicit LoadSchedule(std::vector<LoadProfile> steps) : steps_(std::move(steps)) {}

  // Steps past the end hold the last profile; negative steps use the first.
  const LoadProfile& at(int step) const {
    if (steps_.empty()) throw ParameterError("empty load schedule");
    const auto k = static_cast<std::size_t>(std::clamp(step, 0, static_cast<int>(steps_.size()) - 1));
    return steps_[k];
  }
  std::size_t size() const { return steps_.size(); }
  const std::vector<LoadProfile>& steps() const { return steps_; }

 private:
  std::vector<LoadProfile> steps_;
};

// The nonlinear DistFlow network as a plant. Warm-starts each solve from the
// previous one and keeps the worst residual it has accepted.
class DistFlowPlant {
 public:
  DistFlowPlant(const NetworkModel& net, LoadSchedule loads, PowerFlowOptions opts = precise_options())
      : net_(&net), loads_(std::move(loads)), opts_(opts) {}

  Vector measure(const Vector& u, int step) {
    try {
      last_ = solve_distflow(*net_, make_injection(loads_.at(step), u), last_, opts_);
    } catch (const ConvergenceError& e) {
      throw PlantError(std::string("plant solve failed at step ") + std::to_string(step) + ": " + e.what());
    }
    max_residual_ = std::max(max_residual_, last_->residual);
    ++solves_;
    return last_->y;
  }

  Eigen::Index dimension() const { return net_->size(); }
  const NetworkModel& network() const { return *net_; }
  const LoadSchedule& loads() const { return loads_; }
  const std::optional<PowerFlowSolution>& last_solution() const { return last_; }
  double max_residual() const { return max_residual_; }
  long solves() const { return solves_; }

 private:
  const NetworkModel* net_;
  LoadSchedule loads_;
  PowerFlowOptions opts_;
  std::optional<PowerFlowSolution> last_;
  double max_residual_ = 0.0;
  long solves_ = 0;
};

// y = M u + b, for tests and for checking estimator/controller exactness.
class AffinePlant {
 public:
  AffinePlant(Matrix M, Vector b) : M_(std::move(M)), b_(std::move(b)) {}
  Vector measure(const Vector& u, int /*step*/) const { return M_ * u + b_; }
  Eigen::Index dimension() const { return M_.cols(); }
  const Matrix& matrix() const { return M_; }
  const Vector& offset() const { return b_; }

 private:
  Matrix M_;
  Vector b_;
};

}  // namespace voltctl
