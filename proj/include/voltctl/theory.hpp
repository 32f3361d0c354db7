#pragma once

// Numerical checks of the convergence theory behind the trust-region loop,
// run on a real feeder: estimator error O(r), surrogate gap O(r^2), the
// estimate-vs-exact surrogate bound, nonnegative predicted decrease and the
// decrease ratio approaching 1 as the radius shrinks.

#include "voltctl/common.hpp"
#include "voltctl/controllers.hpp"
#include "voltctl/convex_kernel.hpp"
#include "voltctl/grid_model.hpp"
#include "voltctl/powerflow.hpp"
#include "voltctl/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

namespace voltctl {

struct TheoryConfig {
  std::vector<double> radii = {4e-2, 2e-2, 1e-2, 5e-3};
  bool flip_estimate_sign = false;  // fault injection: use -S~ everywhere
  std::uint64_t seed = 1;
  int fuzz_instances = 1000;
  int directions = 100;

  void check() const {
    if (radii.empty()) throw ParameterError("theory checks need at least one radius");
    for (double r : radii)
      if (!(r > 0.0)) throw ParameterError("radii must be positive");
    if (fuzz_instances < 1 || directions < 1) throw ParameterError("sample counts must be >= 1");
  }
};

struct TheoryCheck {
  std::string name;
  std::string claim;
  bool passed = false;
  std::vector<double> radii;
  std::vector<double> measured;  // per radius, or a single summary value
  std::string detail;
};

namespace detail {

inline std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}


inline double spread(const std::vector<double>& v) {
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  if (*mn <= 0.0) return *mx > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  return *mx / *mn;
}

struct TheoryContext {
  const NetworkModel& net;
  LoadProfile loads;
  ControlProblem pb;
  TheoryConfig cfg;

  Eigen::Index n() const { return net.size(); }
  Vector g(const Vector& u) const { return voltage_map(net, loads, u); }

  // Estimate from tau + 1 seeded samples within radius r of u0, newest at u0.
  SensitivityEstimate estimate_near(const Vector& u0, double r) const {
    const int tau = 2 * static_cast<int>(n()) + 3;
    Rng rng(mix_seed(cfg.seed, 17));
    TrajectoryWindow w(tau, 0.9);
    for (int i = 0; i <= tau; ++i) {
      Vector off(n());
      for (Eigen::Index j = 0; j < n(); ++j) off[j] = rng.uniform(-1.0, 1.0);
      if (off.norm() > 1.0) off /= off.norm();
      const Vector u = i == tau ? u0 : Vector(u0 + r * off);
      w.push(u, g(u));
    }
    auto est = estimate_from_window(w);
    if (cfg.flip_estimate_sign) est.S = -est.S;
    return est;
  }

  // J at (y, u) with the exact map g; L with matrix M linearized at (y0, u0).
  double J(const Vector& y, const Vector& u) const {
    return penalty_objective(pb.cost, pb.pen, y, u, g(u), voltage_box_h(y, pb.y_min, pb.y_max));
  }
  double L(const Vector& y0, const Vector& u0, const Matrix& M, const Vector& dy, const Vector& du) const {
    return linearized_penalty(pb.cost, pb.pen, {y0, u0, pb.y_min, pb.y_max}, M, dy, du);
  }

  // Scaled by 1/n so that on large feeders the uniform injection stays far
  // from voltage collapse.
  Vector base_point() const { return 0.2 / static_cast<double>(n()) * pb.u_max; }
  Vector descent_point() const { return 0.8 / static_cast<double>(n()) * pb.u_max; }

  std::vector<Vector> sphere_directions() const {
    Rng rng(mix_seed(cfg.seed, 29));
    std::vector<Vector> dirs;
    for (int i = 0; i < cfg.directions; ++i) {
      Vector d = rng.normal_vector(2 * n(), 1.0);
      dirs.push_back(d / d.norm());
    }
    return dirs;
  }
};

inline TheoryCheck estimator_scaling(const TheoryContext& cx) {
  TheoryCheck c{"estimator-scaling", "||S~ - S|| / r has no growth trend (max <= 2 min)", false, cx.cfg.radii, {}, {}};
  const Vector u0 = cx.base_point();
  const Matrix S = true_jacobian(cx.net, cx.loads, u0);
  for (double r : cx.cfg.radii) {
    const auto est = cx.estimate_near(u0, r);
    if (!est.excited) {
      c.detail = "window at r = " + detail::short_num(r) + " not excited";
      return c;
    }
    c.measured.push_back((est.S - S).norm() / r);
  }
  const double s = spread(c.measured);
  c.passed = s <= 2.0;
  c.detail = "max/min ratio " + detail::short_num(s);
  return c;
}

inline TheoryCheck surrogate_gap_scaling(const TheoryContext& cx) {
  TheoryCheck c{"surrogate-gap-scaling", "max |J(z+d) - L(d)| / r^2 varies by less than 3x", false, cx.cfg.radii, {},
                {}};
  const Vector u0 = cx.base_point();
  const Vector y0 = cx.g(u0);
  const Matrix S = true_jacobian(cx.net, cx.loads, u0);
  const auto dirs = cx.sphere_directions();
  const Eigen::Index n = cx.n();
  for (double r : cx.cfg.radii) {
    double worst = 0.0;
    for (const Vector& e : dirs) {
      const Vector dy = r * e.head(n), du = r * e.tail(n);
      worst = std::max(worst, std::abs(cx.J(y0 + dy, u0 + du) - cx.L(y0, u0, S, dy, du)));
    }
    c.measured.push_back(worst / (r * r));
  }
  const double s = spread(c.measured);
  c.passed = s < 3.0;
  c.detail = "max/min ratio " + detail::short_num(s);
  return c;
}

inline TheoryCheck surrogate_estimate_bound(const TheoryContext& cx) {
  TheoryCheck c{"surrogate-estimate-bound", "|L~(d) - L(d)| <= ||lambda|| ||(S~ - S) d_u|| for every sample", false,
                cx.cfg.radii, {}, {}};
  const Vector u0 = cx.base_point();
  const Vector y0 = cx.g(u0);
  const Matrix S = true_jacobian(cx.net, cx.loads, u0);
  const auto dirs = cx.sphere_directions();
  const Eigen::Index n = cx.n();
  const double lam = cx.pb.pen.lambda_pen.norm();
  bool ok = true;
  for (double r : cx.cfg.radii) {
    const Matrix St = cx.estimate_near(u0, r).S;
    double worst = -std::numeric_limits<double>::infinity();
    for (const Vector& e : dirs) {
      const Vector dy = r * e.head(n), du = r * e.tail(n);
      const double gap = std::abs(cx.L(y0, u0, St, dy, du) - cx.L(y0, u0, S, dy, du));
      const double bound = lam * ((St - S) * du).norm();
      worst = std::max(worst, gap - bound);
      ok = ok && gap <= bound + 1e-13;
    }
    c.measured.push_back(worst);
  }
  c.passed = ok;
  c.detail = "largest gap minus bound " + detail::short_num(*std::max_element(c.measured.begin(), c.measured.end()));
  return c;
}

// J(z) - L~(d*) for one subproblem at a measured point (y on the plant).
inline double live_predicted_decrease(const ControlProblem& pb, const TrustRegionSpec& spec) {
  SubproblemSolution sol;
  try {
    sol = solve_trust_region(pb.cost, spec, {});
  } catch (const InfeasibleError&) {
    SubproblemOptions soft;
    soft.soft_y = true;
    soft.eta = pb.pen.eta_pen;
    sol = solve_trust_region(pb.cost, spec, soft);
  }
  const double L_next = pb.cost(sol.y_pred, sol.u_next) +
                        pb.pen.eta_pen.dot(voltage_box_h(sol.y_pred, pb.y_min, pb.y_max).cwiseMax(0.0));
  return predicted_decrease(measured_penalty(pb, spec.center_y, spec.center_u), L_next);
}

inline TheoryCheck decrease_nonnegative(const TheoryContext& cx) {
  TheoryCheck c{"decrease-nonnegative", "predicted decrease >= -1e-9 on fuzzed and feeder subproblems", false, {}, {},
                {}};
  Rng rng(mix_seed(cx.cfg.seed, 43));
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < cx.cfg.fuzz_instances; ++i) {
    const int n = 1 + static_cast<int>(rng.next() % 8);
    Matrix S(n, n);
    for (int k = 0; k < n * n; ++k) S.data()[k] = rng.uniform(-5.0, 5.0) * (i % 2 ? 20.0 : 1.0);
    Vector cu(n), cy(n);
    for (int k = 0; k < n; ++k) {
      cu[k] = rng.uniform(-0.05, 0.05);
      cy[k] = rng.uniform(0.92, 1.08);
    }
    const QuadraticCost cost{0.5, 0.1, Vector::Ones(n)};
    const ControlBounds b{Vector::Constant(n, -0.05), Vector::Constant(n, 0.05), Vector::Constant(n, 0.9),
                          Vector::Constant(n, 1.1)};
    const ControlProblem pb = make_control_problem(b, cost);
    const TrustRegionSpec spec{rng.uniform(1e-3, 0.05), cu, cy, S, b.u_min, b.u_max, b.y_min, b.y_max};
    worst = std::min(worst, live_predicted_decrease(pb, spec));
  }
  // One subproblem per radius on the feeder itself, with the live estimate.
  const Vector u0 = cx.descent_point();
  const Vector y0 = cx.g(u0);
  for (double r : cx.cfg.radii) {
    const TrustRegionSpec spec{r, u0, y0, cx.estimate_near(u0, r).S, cx.pb.u_min, cx.pb.u_max, cx.pb.y_min,
                               cx.pb.y_max};
    worst = std::min(worst, live_predicted_decrease(cx.pb, spec));
  }
  c.measured = {worst};
  c.passed = worst >= -1e-9;
  c.detail = "smallest predicted decrease " + detail::short_num(worst);
  return c;
}

inline TheoryCheck decrease_ratio_check(const TheoryContext& cx) {
  TheoryCheck c{"decrease-ratio", "rho >= 0.5 for r <= 1e-2 and rho rises (within 0.02) as r shrinks", false,
                cx.cfg.radii, {}, {}};
  std::vector<double> radii = cx.cfg.radii;
  std::sort(radii.begin(), radii.end(), std::greater<>());
  c.radii = radii;
  const Vector u0 = cx.descent_point();
  const Vector y0 = cx.g(u0);
  const double J0 = measured_penalty(cx.pb, y0, u0);
  bool ok = true;
  for (double r : radii) {
    const Matrix St = cx.estimate_near(u0, r).S;
    const TrustRegionSpec spec{r, u0, y0, St, cx.pb.u_min, cx.pb.u_max, cx.pb.y_min, cx.pb.y_max};
    const auto sol = solve_trust_region(cx.pb.cost, spec, {});
    const double Lt = cx.L(y0, u0, St, sol.y_pred - y0, sol.d);
    const Vector y1 = cx.g(sol.u_next);
    double rho;
    try {
      rho = decrease_ratio(J0, measured_penalty(cx.pb, y1, sol.u_next), Lt);
    } catch (const DegenerateDecrease&) {
      c.detail = "no predicted decrease at r = " + detail::short_num(r) + "; the test point is stationary";
      c.measured.push_back(std::numeric_limits<double>::quiet_NaN());
      return c;
    }
    if (r <= 1e-2 + 1e-15 && rho < 0.5) ok = false;
    if (!c.measured.empty() && rho < c.measured.back() - 0.02) ok = false;
    c.measured.push_back(rho);
  }
  c.passed = ok;
  c.detail = "rho from largest to smallest radius";
  return c;
}

}  // namespace detail

inline std::vector<TheoryCheck> validate_theory(const NetworkModel& net, const TheoryConfig& cfg = {},
                                                const QuadraticCost* cost = nullptr) {
  cfg.check();
  const QuadraticCost c = cost ? *cost : QuadraticCost{0.5, 0.1, net.y_ref};
  const detail::TheoryContext cx{net, base_loads(net), make_control_problem(net, c), cfg};
  using Check = TheoryCheck (*)(const detail::TheoryContext&);
  const std::pair<const char*, Check> checks[] = {{"estimator-scaling", detail::estimator_scaling},
                                                  {"surrogate-gap-scaling", detail::surrogate_gap_scaling},
                                                  {"surrogate-estimate-bound", detail::surrogate_estimate_bound},
                                                  {"decrease-nonnegative", detail::decrease_nonnegative},
                                                  {"decrease-ratio", detail::decrease_ratio_check}};
  std::vector<TheoryCheck> out;
  for (const auto& [name, fn] : checks) {
    try {
      out.push_back(fn(cx));
    } catch (const ConvergenceError& e) {
      TheoryCheck c;
      c.name = name;
      c.detail = std::string("power flow failed: ") + e.what();
      out.push_back(std::move(c));
    }
  }
  return out;
}

}  // namespace voltctl
