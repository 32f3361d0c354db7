#pragma once

// Linearized trust-region subproblem
//   min  c(y_k + S d, u_k + d)  s.t. ||d|| <= r, u_k + d in box, y_k + S d in y-box
// and the exact-penalty quantities used to diagnose the outer iteration.

#include "voltctl/common.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

namespace voltctl {

// c(y, u) = w_v ||y - y_ref||^2 + w_u ||u||^2
struct QuadraticCost {
  double w_v = 0.5;
  double w_u = 0.1;
  Vector y_ref;

  void check() const {
    if (!(w_v > 0.0) || !(w_u >= 0.0)) throw ParameterError("cost weights need w_v > 0 and w_u >= 0");
  }
  double operator()(const Vector& y, const Vector& u) const {
    return w_v * (y - y_ref).squaredNorm() + w_u * u.squaredNorm();
  }
  Vector grad_y(const Vector& y) const { return 2.0 * w_v * (y - y_ref); }
  Vector grad_u(const Vector& u) const { return 2.0 * w_u * u; }
};

struct TrustRegionSpec {
  double radius = 0.02;
  Vector center_u;
  Vector center_y;
  Matrix S;
  Vector u_min, u_max;
  Vector y_min, y_max;  // leave empty for no voltage box
};

struct SubproblemOptions {
  double tol = 1e-8;
  // Soft mode replaces the voltage box by the penalty eta^T [h]_+.
  bool soft_y = false;
  Vector eta;
  int max_iter = 400000;
};

struct SubproblemSolution {
  Vector u_next;
  Vector y_pred;
  Vector d;
  double objective = 0.0;
  bool active_trust = false;
  double kkt_residual = 0.0;
  bool softened = false;
  double y_violation = 0.0;  // max voltage-box violation of y_pred
  int iterations = 0;
};

namespace detail {

// Euclidean projection onto {||x|| <= r} intersected with [lo, hi], lo <= 0 <= hi.
// x(mu) = clip(z / (1 + mu), lo, hi) with mu found by bisection.
inline Vector project_ball_box(const Vector& z, const Vector& lo, const Vector& hi, double r) {
  Vector x = clip(z, lo, hi);
  if (x.norm() <= r) return x;
  double a = 0.0, b = z.norm() / r;  // at mu = b, ||z/(1+mu)|| <= r already
  for (int it = 0; it < 200 && b - a > 1e-15 * (1.0 + b); ++it) {
    const double mid = 0.5 * (a + b);
    if (clip(z / (1.0 + mid), lo, hi).norm() > r) a = mid;
    else b = mid;
  }
  x = clip(z / (1.0 + b), lo, hi);
  const double nx = x.norm();
  if (nx > r) x *= r / nx;  // rounding guard; scaling toward 0 keeps the box
  return x;
}

// Accelerated projected gradient with adaptive restart. Stops once the unit
// step projected gradient, relative to max(1, |grad|), is below tol.
template <class Grad, class Proj>
Vector fista(Grad&& grad, Proj&& proj, Vector x, double L, double tol, int max_iter, int& iters) {
  Vector y = x, x_old = x;
  double t = 1.0;
  for (iters = 0; iters < max_iter; ++iters) {
    if (iters % 8 == 0) {
      const Vector g = grad(x);
      const double res = (x - proj(x - g)).norm() / std::max(1.0, g.norm());
      if (res <= tol) return x;
    }
    const Vector x_new = proj(y - grad(y) / L);
    if ((y - x_new).dot(x_new - x) > 0.0) {
      t = 1.0;
      y = x;
      continue;
    }
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = x_new + ((t - 1.0) / t_new) * (x_new - x);
    x_old = x;
    x = x_new;
    t = t_new;
  }
  return x;
}

// F(d) = const + g0'd + d'Hd/2 with linear rows A d <= b, each row either hard
// (cap = inf) or softened with price cap.
struct ReducedProblem {
  Matrix H;
  Vector g0;
  Matrix A;
  Vector b;
  Vector cap;
  Vector lo, hi;
  double r = 0.0;

  double smooth(const Vector& d) const { return g0.dot(d) + 0.5 * d.dot(H * d); }
  Vector grad(const Vector& d) const { return g0 + H * d; }
  double soft_part(const Vector& d) const {
    if (A.rows() == 0) return 0.0;
    const Vector v = (A * d - b).cwiseMax(0.0);
    double s = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (std::isfinite(cap[i])) s += cap[i] * v[i];
    return s;
  }
  Vector proj(const Vector& z) const { return project_ball_box(z, lo, hi, r); }
};

// Natural residual of the KKT system at (d, nu).
inline double kkt_residual(const ReducedProblem& p, const Vector& d, const Vector& nu) {
  const Vector gf = p.grad(d);
  Vector gl = gf;
  if (p.A.rows()) gl += p.A.transpose() * nu;
  double res = (d - p.proj(d - gl)).norm() / std::max(1.0, gf.norm());
  for (Eigen::Index i = 0; i < p.A.rows(); ++i) {
    const double gi = p.A.row(i).dot(d) - p.b[i];
    const double target = std::clamp(nu[i] + gi, 0.0, p.cap[i]);
    res = std::max(res, std::abs(nu[i] - target));
  }
  return res;
}

inline double max_violation(const ReducedProblem& p, const Vector& d) {
  if (p.A.rows() == 0) return 0.0;
  return std::max(0.0, (p.A * d - p.b).maxCoeff());
}

// Exact minimiser of F over the ball alone (eigen decomposition of H),
// or nothing in the hard case.
inline std::optional<Vector> ball_only_minimiser(const ReducedProblem& p) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(p.H);
  const Vector& lam = es.eigenvalues();
  const Vector gam = es.eigenvectors().transpose() * p.g0;
  const double lam_min = lam.minCoeff();
  if (!(lam_min > 1e-13 * std::max(1.0, lam.maxCoeff()))) return std::nullopt;
  auto norm_at = [&](double mu) { return (gam.array() / (lam.array() + mu)).matrix().norm(); };
  double mu = 0.0;
  if (norm_at(0.0) > p.r) {
    double a = 0.0, b = gam.norm() / p.r;
    for (int it = 0; it < 200 && b - a > 1e-16 * (1.0 + b); ++it) {
      const double mid = 0.5 * (a + b);
      if (norm_at(mid) > p.r) a = mid;
      else b = mid;
    }
    mu = b;
  }
  Vector d = -es.eigenvectors() * (gam.array() / (lam.array() + mu)).matrix();
  const double nd = d.norm();
  if (nd > p.r) d *= p.r / nd;
  return d;
}

inline double min_voltage_box_violation(const ReducedProblem& p, double tol, int max_iter) {
  const double L = std::max(1e-12, p.A.operatorNorm() * p.A.operatorNorm());
  auto grad = [&](const Vector& d) -> Vector { return p.A.transpose() * (p.A * d - p.b).cwiseMax(0.0); };
  int iters = 0;
  const Vector d = fista(grad, [&](const Vector& z) { return p.proj(z); }, Vector::Zero(p.g0.size()), L,
                         tol, max_iter, iters);
  return max_violation(p, d);
}

struct ReducedSolution {
  Vector d;
  Vector nu;
  int iterations = 0;
};

// Augmented Lagrangian over the linear rows; inner problems by FISTA.
inline ReducedSolution solve_reduced(const ReducedProblem& p, const Vector& d0, double tol, int max_iter) {
  const Eigen::Index m = p.A.rows();
  const double lam_max = p.H.operatorNorm();
  ReducedSolution out{d0, Vector::Zero(m), 0};
  if (m == 0) {
    out.d = fista([&](const Vector& d) { return p.grad(d); }, [&](const Vector& z) { return p.proj(z); },
                  p.proj(d0), std::max(lam_max, 1e-12), 0.25 * tol, max_iter, out.iterations);
    return out;
  }
  const double a_norm2 = std::max(1e-12, p.A.operatorNorm() * p.A.operatorNorm());
  double rho = std::max(1.0, lam_max / a_norm2);
  Vector d = p.proj(d0);
  Vector nu = Vector::Zero(m);
  double last_viol = std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < 60; ++outer) {
    auto grad = [&](const Vector& x) -> Vector {
      Vector t = p.A * x - p.b + nu / rho;
      for (Eigen::Index i = 0; i < m; ++i) t[i] = std::clamp(rho * t[i], 0.0, p.cap[i]);
      return p.grad(x) + p.A.transpose() * t;
    };
    int iters = 0;
    d = fista(grad, [&](const Vector& z) { return p.proj(z); }, d, lam_max + rho * a_norm2, 0.1 * tol,
              max_iter, iters);
    out.iterations += iters;
    const Vector g = p.A * d - p.b;
    for (Eigen::Index i = 0; i < m; ++i) nu[i] = std::clamp(nu[i] + rho * g[i], 0.0, p.cap[i]);
    double viol = 0.0;
    for (Eigen::Index i = 0; i < m; ++i)
      if (!std::isfinite(p.cap[i])) viol = std::max(viol, g[i]);
    if (kkt_residual(p, d, nu) <= tol && viol <= 1e-3 * tol) break;
    // Grow the penalty when feasibility stalls.
    if (viol > 0.25 * last_viol) rho *= 10.0;
    last_viol = viol;
  }
  out.d = d;
  out.nu = nu;
  return out;
}

}  // namespace detail

inline SubproblemSolution solve_trust_region(const QuadraticCost& cost, const TrustRegionSpec& spec,
                                             const SubproblemOptions& opts = {}) {
  cost.check();
  const Eigen::Index n = spec.center_u.size();
  const Eigen::Index m = spec.center_y.size();
  if (!(spec.radius > 0.0)) throw ParameterError("trust-region radius must be positive");
  if (spec.S.rows() != m || spec.S.cols() != n) throw DimensionError("sensitivity matrix has wrong shape");
  require_size(spec.u_min, n, "solve_trust_region: u_min");
  require_size(spec.u_max, n, "solve_trust_region: u_max");
  require_size(cost.y_ref, m, "solve_trust_region: y_ref");
  const bool has_ybox = spec.y_min.size() || spec.y_max.size();
  if (has_ybox) {
    require_size(spec.y_min, m, "solve_trust_region: y_min");
    require_size(spec.y_max, m, "solve_trust_region: y_max");
  }
  if (((spec.center_u - spec.u_min).array() < -1e-12).any() || ((spec.u_max - spec.center_u).array() < -1e-12).any())
    throw ParameterError("trust-region center lies outside the input box");
  if (!spec.S.allFinite() || !spec.center_y.allFinite()) throw ParameterError("non-finite subproblem data");

  detail::ReducedProblem p;
  const Vector a = spec.center_y - cost.y_ref;
  p.H = 2.0 * (cost.w_v * spec.S.transpose() * spec.S + cost.w_u * Matrix::Identity(n, n));
  p.g0 = 2.0 * (cost.w_v * spec.S.transpose() * a + cost.w_u * spec.center_u);
  p.lo = (spec.u_min - spec.center_u).cwiseMin(0.0);
  p.hi = (spec.u_max - spec.center_u).cwiseMax(0.0);
  p.r = spec.radius;
  if (has_ybox) {
    p.A.resize(2 * m, n);
    p.A << spec.S, -spec.S;
    p.b.resize(2 * m);
    p.b << spec.y_max - spec.center_y, spec.center_y - spec.y_min;
    p.cap = Vector::Constant(2 * m, std::numeric_limits<double>::infinity());
    if (opts.soft_y) {
      require_size(opts.eta, m, "solve_trust_region: eta");
      p.cap << opts.eta, opts.eta;
    }
  } else {
    p.A.resize(0, n);
    p.b.resize(0);
    p.cap.resize(0);
  }

  if (has_ybox && !opts.soft_y && (p.b.array() < 0.0).any()) {
    const double v = detail::min_voltage_box_violation(p, 1e-12, opts.max_iter);
    if (v > 1e-7)
      throw InfeasibleError("voltage box unreachable within the trust region (violation " + std::to_string(v) + ")");
  }

  SubproblemSolution sol;
  detail::ReducedSolution rs;
  const auto ball = detail::ball_only_minimiser(p);
  bool exact = false;
  if (ball) {
    const bool in_box = ((*ball - p.lo).array() >= 0.0).all() && ((p.hi - *ball).array() >= 0.0).all();
    if (in_box && detail::max_violation(p, *ball) == 0.0) {
      rs.d = *ball;
      rs.nu = Vector::Zero(p.A.rows());
      exact = true;
    }
  }
  if (!exact) rs = detail::solve_reduced(p, ball ? *ball : Vector::Zero(n), opts.tol, opts.max_iter);

  auto objective = [&](const Vector& d) {
    return cost(spec.center_y + spec.S * d, spec.center_u + d) + (opts.soft_y ? p.soft_part(d) : 0.0);
  };
  // Zero step is always admissible when it is feasible; never return worse.
  const bool zero_ok = opts.soft_y || detail::max_violation(p, Vector::Zero(n)) == 0.0;
  if (zero_ok && objective(Vector::Zero(n)) <= objective(rs.d)) {
    rs.d.setZero();
    rs.nu = Vector::Zero(p.A.rows());
  }

  // Hard rows with a feasible zero step: pull any leftover violation back
  // along the segment to 0 so the returned point is exactly feasible.
  if (!opts.soft_y && zero_ok && p.A.rows()) {
    const Vector ad = p.A * rs.d;
    double theta = 1.0;
    for (Eigen::Index i = 0; i < ad.size(); ++i)
      if (ad[i] > p.b[i]) theta = std::min(theta, p.b[i] / ad[i]);
    rs.d *= theta;
  }
  sol.d = rs.d;
  sol.u_next = clip(spec.center_u + rs.d, spec.u_min, spec.u_max);
  sol.d = sol.u_next - spec.center_u;
  sol.y_pred = spec.center_y + spec.S * sol.d;
  sol.objective = objective(sol.d);
  sol.active_trust = std::abs(sol.d.norm() - spec.radius) <= 1e-8;
  sol.softened = opts.soft_y;
  sol.iterations = rs.iterations;
  if (has_ybox)
    sol.y_violation = std::max({0.0, (sol.y_pred - spec.y_max).maxCoeff(), (spec.y_min - sol.y_pred).maxCoeff()});
  sol.kkt_residual = detail::kkt_residual(p, sol.d, rs.nu);
  return sol;
}

// ---- exact penalty and its linearizations ----

struct PenaltySpec {
  Vector lambda_pen;  // on |y - g(u)|
  Vector eta_pen;     // on voltage-box violation

  void check(Eigen::Index n) const {
    require_size(lambda_pen, n, "penalty lambda");
    require_size(eta_pen, n, "penalty eta");
    if ((lambda_pen.array() < 0.0).any() || (eta_pen.array() < 0.0).any())
      throw ParameterError("penalty weights must be nonnegative");
  }
};

// Per-bus box violation max(y - y_max, y_min - y); positive part is the hinge.
inline Vector voltage_box_h(const Vector& y, const Vector& y_min, const Vector& y_max) {
  return (y - y_max).cwiseMax(y_min - y);
}

// J = c(y,u) + lambda'|y - g(u)| + eta'[h]_+
inline double penalty_objective(const QuadraticCost& cost, const PenaltySpec& pen, const Vector& y, const Vector& u,
                                const Vector& g_u, const Vector& h) {
  pen.check(y.size());
  require_size(g_u, y.size(), "penalty_objective: g(u)");
  require_size(h, y.size(), "penalty_objective: h");
  return cost(y, u) + pen.lambda_pen.dot((y - g_u).cwiseAbs()) + pen.eta_pen.dot(h.cwiseMax(0.0));
}

struct LinearizationPoint {
  Vector y;
  Vector u;
  Vector y_min, y_max;
};

// c(y_k + d_y, u_k + d_u) + lambda'|d_y - M d_u| + eta'[h(y_k + d_y)]_+
inline double linearized_penalty(const QuadraticCost& cost, const PenaltySpec& pen, const LinearizationPoint& z,
                                 const Matrix& M, const Vector& d_y, const Vector& d_u) {
  pen.check(z.y.size());
  require_size(d_y, z.y.size(), "linearized_penalty: d_y");
  require_size(d_u, z.u.size(), "linearized_penalty: d_u");
  if (M.rows() != z.y.size() || M.cols() != z.u.size()) throw DimensionError("linearized_penalty: matrix shape");
  const Vector y = z.y + d_y;
  return cost(y, z.u + d_u) + pen.lambda_pen.dot((d_y - M * d_u).cwiseAbs()) +
         pen.eta_pen.dot(voltage_box_h(y, z.y_min, z.y_max).cwiseMax(0.0));
}

inline double predicted_decrease(double J_at_zk, double Ltilde_at_dstar) { return J_at_zk - Ltilde_at_dstar; }

inline double decrease_ratio(double J_at_zk, double J_at_znext, double Ltilde_at_dstar) {
  const double den = J_at_zk - Ltilde_at_dstar;
  if (!(den > 1e-12)) throw DegenerateDecrease("predicted decrease " + std::to_string(den) + " is too small for a ratio");
  return (J_at_zk - J_at_znext) / den;
}

// lambda_i = eta_i = 10 * max over the voltage/input boxes of |dc/dy_i|
// (largest cost-gradient component), per the sufficiently-large-penalty rule.
inline PenaltySpec default_penalty(const QuadraticCost& cost, const Vector& y_min, const Vector& y_max,
                                   const Vector& u_min, const Vector& u_max) {
  const double gy = 2.0 * cost.w_v * std::max((y_max - cost.y_ref).cwiseAbs().maxCoeff(),
                                              (y_min - cost.y_ref).cwiseAbs().maxCoeff());
  const double gu = 2.0 * cost.w_u * std::max(u_max.cwiseAbs().maxCoeff(), u_min.cwiseAbs().maxCoeff());
  const double w = 10.0 * std::max(gy, gu);
  return {Vector::Constant(y_min.size(), w), Vector::Constant(y_min.size(), w)};
}

}  // namespace voltctl
