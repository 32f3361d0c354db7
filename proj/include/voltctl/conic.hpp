#pragma once

// Primal-dual interior point for cone linear programs
//   min c'x  s.t.  A x = b,  G x + s = h,  s in K
// with K a product of a nonnegative orthant and second-order cones
// {(s0, s1) : s0 >= |s1|}. Nesterov-Todd scaling, Mehrotra predictor-corrector.

#include "voltctl/common.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

namespace voltctl {

struct ConeDims {
  int l = 0;
  std::vector<int> q;

  int size() const {
    int m = l;
    for (int k : q) m += k;
    return m;
  }
  int degree() const { return l + static_cast<int>(q.size()); }
};

using SparseMatrix = Eigen::SparseMatrix<double>;

struct ConicProblem {
  Vector c;
  SparseMatrix A;
  Vector b;
  SparseMatrix G;
  Vector h;
  ConeDims dims;
};

struct ConicOptions {
  double abstol = 1e-12;
  double reltol = 1e-10;
  double feastol = 1e-9;
  // When the iteration stalls numerically, the best iterate is still returned
  // if it meets these looser limits.
  double fallback_tol = 1e-6;
  int max_iter = 100;
  bool verbose = false;  // per-iteration trace on stderr
};

struct ConicSolution {
  Vector x, y, z, s;
  double primal_objective = 0.0;
  double dual_objective = 0.0;
  double gap = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  int iterations = 0;
};

namespace cone {

// Scaling for one second-order block: W = eta * Wbar with Wbar symmetric.
struct SocScaling {
  double eta = 1.0;
  Vector wbar;
};

struct Scaling {
  Vector d;  // orthant: W = diag(d)
  std::vector<SocScaling> soc;
};

inline double soc_jnorm(const Eigen::Ref<const Vector>& x) {
  const double t = x.tail(x.size() - 1).norm();
  return std::sqrt(std::max(0.0, (x[0] - t) * (x[0] + t)));
}

// W v for a second-order block, or W^{-1} v when inverse is set.
inline Vector soc_apply(const SocScaling& w, const Eigen::Ref<const Vector>& v, bool inverse) {
  const double w0 = w.wbar[0];
  const auto w1 = w.wbar.tail(w.wbar.size() - 1);
  const auto v1 = v.tail(v.size() - 1);
  const double sgn = inverse ? -1.0 : 1.0;
  const double a = w1.dot(v1);
  Vector out(v.size());
  out[0] = w0 * v[0] + sgn * a;
  out.tail(v.size() - 1) = v1 + (sgn * v[0] + a / (1.0 + w0)) * w1;
  return inverse ? Vector(out / w.eta) : Vector(out * w.eta);
}

inline Vector apply_scaling(const ConeDims& dims, const Scaling& W, const Vector& v, bool inverse) {
  Vector out(v.size());
  out.head(dims.l) = inverse ? Vector(v.head(dims.l).cwiseQuotient(W.d)) : Vector(v.head(dims.l).cwiseProduct(W.d));
  int off = dims.l;
  for (std::size_t k = 0; k < dims.q.size(); ++k) {
    const int n = dims.q[k];
    out.segment(off, n) = soc_apply(W.soc[k], v.segment(off, n), inverse);
    off += n;
  }
  return out;
}

inline Scaling compute_scaling(const ConeDims& dims, const Vector& s, const Vector& z) {
  Scaling W;
  W.d = (s.head(dims.l).array() / z.head(dims.l).array()).sqrt();
  int off = dims.l;
  for (int n : dims.q) {
    const Vector sk = s.segment(off, n), zk = z.segment(off, n);
    const double sn = soc_jnorm(sk), zn = soc_jnorm(zk);
    const Vector sb = sk / sn, zb = zk / zn;
    const double gamma = std::sqrt(0.5 * (1.0 + sb.dot(zb)));
    Vector wb(n);
    wb[0] = (sb[0] + zb[0]) / (2.0 * gamma);
    wb.tail(n - 1) = (sb.tail(n - 1) - zb.tail(n - 1)) / (2.0 * gamma);
    W.soc.push_back({std::sqrt(sn / zn), wb});
    off += n;
  }
  return W;
}

inline Vector jordan(const ConeDims& dims, const Vector& x, const Vector& y) {
  Vector out(x.size());
  out.head(dims.l) = x.head(dims.l).cwiseProduct(y.head(dims.l));
  int off = dims.l;
  for (int n : dims.q) {
    out[off] = x.segment(off, n).dot(y.segment(off, n));
    out.segment(off + 1, n - 1) = x[off] * y.segment(off + 1, n - 1) + y[off] * x.segment(off + 1, n - 1);
    off += n;
  }
  return out;
}

// Solves lambda o x = v.
inline Vector jordan_div(const ConeDims& dims, const Vector& lam, const Vector& v) {
  Vector out(v.size());
  out.head(dims.l) = v.head(dims.l).cwiseQuotient(lam.head(dims.l));
  int off = dims.l;
  for (int n : dims.q) {
    const double l0 = lam[off];
    const auto l1 = lam.segment(off + 1, n - 1);
    const double det = (l0 - l1.norm()) * (l0 + l1.norm());
    const double x0 = (l0 * v[off] - l1.dot(v.segment(off + 1, n - 1))) / det;
    out[off] = x0;
    out.segment(off + 1, n - 1) = (v.segment(off + 1, n - 1) - x0 * l1) / l0;
    off += n;
  }
  return out;
}

inline Vector identity(const ConeDims& dims) {
  Vector e = Vector::Zero(dims.size());
  e.head(dims.l).setOnes();
  int off = dims.l;
  for (int n : dims.q) {
    e[off] = 1.0;
    off += n;
  }
  return e;
}

// Largest alpha with x + alpha d in K (infinity if unbounded).
inline double max_step(const ConeDims& dims, const Vector& x, const Vector& d) {
  double alpha = std::numeric_limits<double>::infinity();
  for (int i = 0; i < dims.l; ++i)
    if (d[i] < 0.0) alpha = std::min(alpha, -x[i] / d[i]);
  int off = dims.l;
  for (int n : dims.q) {
    const double x0 = x[off], d0 = d[off];
    const auto x1 = x.segment(off + 1, n - 1);
    const auto d1 = d.segment(off + 1, n - 1);
    const double xn = x1.norm();
    const double a = d0 * d0 - d1.squaredNorm();
    const double b = 2.0 * (x0 * d0 - x1.dot(d1));
    const double c = (x0 - xn) * (x0 + xn);
    double root = std::numeric_limits<double>::infinity();
    if (std::abs(a) < 1e-300) {
      if (b < 0.0) root = -c / b;
    } else {
      const double disc = b * b - 4.0 * a * c;
      if (disc >= 0.0) {
        const double sq = std::sqrt(disc);
        // Numerically stable pair of roots.
        const double qq = -0.5 * (b + std::copysign(sq, b));
        const double r1 = qq / a, r2 = (qq != 0.0) ? c / qq : r1;
        for (double r : {r1, r2})
          if (r > 0.0) root = std::min(root, r);
      }
    }
    // Leaving through the apex (x0 + alpha d0 hits 0) is covered by the roots.
    if (d0 < 0.0 && !(root < std::numeric_limits<double>::infinity())) root = -x0 / d0;
    alpha = std::min(alpha, root);
    off += n;
  }
  return alpha;
}

// Smallest alpha with x + alpha e in K (negative when x is interior).
inline double shift_to_interior(const ConeDims& dims, const Vector& x) {
  double a = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < dims.l; ++i) a = std::max(a, -x[i]);
  int off = dims.l;
  for (int n : dims.q) {
    a = std::max(a, x.segment(off + 1, n - 1).norm() - x[off]);
    off += n;
  }
  return a;
}

}  // namespace cone

namespace detail {

inline ConicSolution solve_conic_core(const ConicProblem& pr, const ConicOptions& opts) {
  const ConeDims& dims = pr.dims;
  const Eigen::Index n = pr.c.size();
  const Eigen::Index p = pr.b.size();
  const Eigen::Index m = dims.size();
  if (pr.A.rows() != p || pr.A.cols() != n || pr.G.rows() != m || pr.G.cols() != n || pr.h.size() != m)
    throw DimensionError("conic problem data have inconsistent shapes");
  for (int k : dims.q)
    if (k < 2) throw ParameterError("second-order cone blocks need dimension >= 2");

  const SparseMatrix At = pr.A.transpose();
  const SparseMatrix Gt = pr.G.transpose();

  // Factor the regularized quasi-definite system
  //   [[dI, A', G'], [A, -dI, 0], [G, 0, -W^2 - dI]].
  // The unreduced form avoids G'W^-2 G, whose conditioning collapses near the
  // cone boundary; iterative refinement removes d.
  struct Kkt {
    Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower> lu;
    cone::Scaling W;
    bool ok = false;
  };
  const Eigen::Index N = n + p + m;
  auto w_squared = [&](const cone::Scaling& W, const Vector& v) {
    return cone::apply_scaling(dims, W, cone::apply_scaling(dims, W, v, false), false);
  };
  auto assemble = [&](const cone::Scaling& W, Kkt& kkt, double reg) {
    std::vector<Eigen::Triplet<double>> trip;
    for (Eigen::Index i = 0; i < n; ++i) trip.emplace_back(i, i, reg);
    for (Eigen::Index i = 0; i < p; ++i) trip.emplace_back(n + i, n + i, -reg);
    for (int k = 0; k < pr.A.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(pr.A, k); it; ++it) trip.emplace_back(n + it.row(), it.col(), it.value());
    for (int k = 0; k < pr.G.outerSize(); ++k)
      for (SparseMatrix::InnerIterator it(pr.G, k); it; ++it)
        trip.emplace_back(n + p + it.row(), it.col(), it.value());
    for (int i = 0; i < dims.l; ++i) trip.emplace_back(n + p + i, n + p + i, -W.d[i] * W.d[i] - reg);
    int off = dims.l;
    for (std::size_t b = 0; b < dims.q.size(); ++b) {
      const int q = dims.q[b];
      for (int c = 0; c < q; ++c) {
        Vector e = Vector::Zero(q);
        e[c] = 1.0;
        const Vector col = cone::soc_apply(W.soc[b], cone::soc_apply(W.soc[b], e, false), false);
        for (int r = c; r < q; ++r) trip.emplace_back(n + p + off + r, n + p + off + c, -col[r] - (r == c ? reg : 0.0));
      }
      off += q;
    }
    SparseMatrix K(N, N);
    K.setFromTriplets(trip.begin(), trip.end());
    K.makeCompressed();
    kkt.lu.compute(K);
    kkt.W = W;
    kkt.ok = kkt.lu.info() == Eigen::Success && kkt.lu.vectorD().allFinite();
  };
  // A zero pivot can still appear in floating point; the regularization is
  // raised until the factorization goes through.
  auto build = [&](const cone::Scaling& W, Kkt& kkt) {
    for (double reg = 1e-11; reg <= 1e-5; reg *= 100.0) {
      assemble(W, kkt, reg);
      if (kkt.ok) return;
    }
  };
  // Solves  A'dy + G'dz = bx,  A dx = by,  G dx - W^2 dz = bz.
  auto solve = [&](const cone::Scaling&, Kkt& kkt, const Vector& bx, const Vector& by, const Vector& bz, Vector& dx,
                   Vector& dy, Vector& dz) {
    Vector rhs(N);
    rhs << bx, by, bz;
    Vector sol = kkt.lu.solve(rhs);
    const double target = 1e-15 * (1.0 + rhs.norm());
    double last = std::numeric_limits<double>::infinity();
    Vector keep = sol;
    for (int it = 0; it < 20; ++it) {
      dx = sol.head(n);
      dy = sol.segment(n, p);
      dz = sol.tail(m);
      Vector res(N);
      res << bx - At * dy - Gt * dz, by - pr.A * dx, bz - pr.G * dx + w_squared(kkt.W, dz);
      const double rn = res.norm();
      if (!(rn < last)) {
        sol = keep;
        break;
      }
      last = rn;
      keep = sol;
      if (rn <= target) break;
      sol += kkt.lu.solve(res);
    }
    dx = sol.head(n);
    dy = sol.segment(n, p);
    dz = sol.tail(m);
  };

  // Starting point from two least-squares problems with W = I.
  cone::Scaling I;
  I.d = Vector::Ones(dims.l);
  for (int k : dims.q) {
    Vector e = Vector::Zero(k);
    e[0] = 1.0;
    I.soc.push_back({1.0, e});
  }
  Kkt kkt;
  build(I, kkt);
  if (!kkt.ok) throw SolverError("conic solver: KKT factorization failed at the starting point");
  Vector x(n), y(p), z(m), s(m);
  {
    Vector dx, dy, dz;
    solve(I, kkt, Vector::Zero(n), pr.b, pr.h, dx, dy, dz);
    x = dx;
    s = -dz;
    solve(I, kkt, -pr.c, Vector::Zero(p), Vector::Zero(m), dx, dy, dz);
    y = dy;
    z = dz;
    const Vector e = cone::identity(dims);
    const double as = cone::shift_to_interior(dims, s);
    const double az = cone::shift_to_interior(dims, z);
    if (as >= 0.0) s += (1.0 + as) * e;
    if (az >= 0.0) z += (1.0 + az) * e;
  }

  const double deg = dims.degree();
  const double res_x0 = std::max(1.0, pr.c.norm());
  const double res_z0 = std::max(1.0, std::sqrt(pr.b.squaredNorm() + pr.h.squaredNorm()));
  const Vector e = cone::identity(dims);
  ConicSolution out, best;
  double best_merit = std::numeric_limits<double>::infinity();
  auto fallback = [&](const std::string& why) -> ConicSolution {
    const double rel = best.gap / std::max(1.0, std::abs(best.primal_objective));
    if (best_merit < std::numeric_limits<double>::infinity() && best.primal_residual <= opts.fallback_tol &&
        best.dual_residual <= opts.fallback_tol && rel <= opts.fallback_tol)
      return best;
    throw SolverError("conic solver: " + why + " (gap " + std::to_string(out.gap) + ", primal res " +
                      std::to_string(out.primal_residual) + ", dual res " + std::to_string(out.dual_residual) + ")");
  };
  for (int iter = 0; iter <= opts.max_iter; ++iter) {
    const Vector rx = At * y + Gt * z + pr.c;
    const Vector ry = pr.A * x - pr.b;
    const Vector rz = pr.G * x + s - pr.h;
    const double gap = s.dot(z);
    const double pcost = pr.c.dot(x);
    const double dcost = -pr.h.dot(z) - pr.b.dot(y);
    const double pres = std::sqrt(ry.squaredNorm() + rz.squaredNorm()) / res_z0;
    const double dres = rx.norm() / res_x0;
    double relgap = std::numeric_limits<double>::infinity();
    if (pcost < 0.0) relgap = gap / -pcost;
    else if (dcost > 0.0) relgap = gap / dcost;
    out = {x, y, z, s, pcost, dcost, gap, pres, dres, iter};
    const double merit = std::max({pres, dres, std::min(gap, relgap)});
    if (merit < best_merit) {
      best_merit = merit;
      best = out;
    }
    if (opts.verbose)
      std::fprintf(stderr, "%3d  pcost % .9e  dcost % .9e  gap %.2e  pres %.2e  dres %.2e\n", iter, pcost, dcost, gap,
                   pres, dres);
    if (pres <= opts.feastol && dres <= opts.feastol && (gap <= opts.abstol || relgap <= opts.reltol)) return out;

    // Farkas certificate for primal infeasibility: A'y + G'z = 0, h'z + b'y < 0.
    const double hz = pr.h.dot(z) + pr.b.dot(y);
    if (hz < 0.0 && (At * y + Gt * z).norm() <= 1e-9 * -hz && iter > 5)
      throw InfeasibleError("conic program is primal infeasible");
    if (iter == opts.max_iter) break;

    const cone::Scaling W = cone::compute_scaling(dims, s, z);
    const Vector lam = cone::apply_scaling(dims, W, z, false);
    build(W, kkt);
    if (!kkt.ok) return fallback("KKT factorization failed at iteration " + std::to_string(iter));
    const double mu = gap / deg;

    // Predictor.
    Vector dx, dy, dz;
    Vector ds_rhs = -cone::jordan(dims, lam, lam);
    auto newton = [&](double scale_res, const Vector& dsr, Vector& dxo, Vector& dyo, Vector& dzo, Vector& dso) {
      const Vector ldiv = cone::jordan_div(dims, lam, dsr);
      const Vector bz = -scale_res * rz - cone::apply_scaling(dims, W, ldiv, false);
      solve(W, kkt, -scale_res * rx, -scale_res * ry, bz, dxo, dyo, dzo);
      // Taken from the linearized primal equation rather than the scaled
      // complementarity row, which cancels badly near the cone boundary.
      dso = -scale_res * rz - pr.G * dxo;
    };
    Vector ds;
    newton(1.0, ds_rhs, dx, dy, dz, ds);
    const double a_aff = std::min({1.0, cone::max_step(dims, s, ds), cone::max_step(dims, z, dz)});
    const double rho = std::max(0.0, (s + a_aff * ds).dot(z + a_aff * dz) / gap);
    const double sigma = std::min(1.0, std::pow(rho, 3.0));

    // Corrector.
    const Vector ws = cone::apply_scaling(dims, W, ds, true);
    const Vector wz = cone::apply_scaling(dims, W, dz, false);
    ds_rhs = -cone::jordan(dims, lam, lam) - cone::jordan(dims, ws, wz) + sigma * mu * e;
    newton(1.0 - sigma, ds_rhs, dx, dy, dz, ds);
    const double a_max = std::min(cone::max_step(dims, s, ds), cone::max_step(dims, z, dz));
    const double alpha = std::min(1.0, 0.99 * a_max);
    if (opts.verbose) std::fprintf(stderr, "     alpha %.3e  sigma %.3e\n", alpha, sigma);
    if (!(alpha > 0.0) || !dx.allFinite()) return fallback("step length collapsed");
    // Residuals growing by orders of magnitude past the best point means the
    // scaled KKT system has lost accuracy.
    if (merit > 1e3 * best_merit && best_merit < opts.fallback_tol) return fallback("lost accuracy");
    x += alpha * dx;
    y += alpha * dy;
    z += alpha * dz;
    s += alpha * ds;
  }
  return fallback("no convergence in " + std::to_string(opts.max_iter) + " iterations");
}

// Smallest t with G x - t e <=_K h, A x = b, floored at t = -1. The program is
// strictly feasible for large t, so the interior method behaves.
inline double phase_one_margin(const ConicProblem& pr, const ConicOptions& opts) {
  const Eigen::Index n = pr.c.size();
  const Vector e = cone::identity(pr.dims);
  ConicProblem ph;
  ph.c = Vector::Zero(n + 1);
  ph.c[n] = 1.0;
  ph.b = pr.b;
  ph.A.resize(pr.A.rows(), n + 1);
  std::vector<Eigen::Triplet<double>> ta, tg;
  for (int k = 0; k < pr.A.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(pr.A, k); it; ++it) ta.emplace_back(it.row(), it.col(), it.value());
  ph.A.setFromTriplets(ta.begin(), ta.end());
  const Eigen::Index m = pr.dims.size();
  tg.emplace_back(0, n, -1.0);
  for (int k = 0; k < pr.G.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(pr.G, k); it; ++it) tg.emplace_back(1 + it.row(), it.col(), it.value());
  for (Eigen::Index i = 0; i < m; ++i)
    if (e[i] != 0.0) tg.emplace_back(1 + i, n, -e[i]);
  ph.G.resize(m + 1, n + 1);
  ph.G.setFromTriplets(tg.begin(), tg.end());
  ph.h.resize(m + 1);
  ph.h << 1.0, pr.h;
  ph.dims = {pr.dims.l + 1, pr.dims.q};
  return solve_conic_core(ph, opts).x[n];
}

}  // namespace detail

// Primal-dual interior point method for  min c'x  s.t.  A x = b,  G x + s = h,
// s in K. InfeasibleError when no x meets the constraints.
inline ConicSolution solve_conic(const ConicProblem& pr, const ConicOptions& opts = {}) {
  try {
    return detail::solve_conic_core(pr, opts);
  } catch (const SolverError&) {
    const double margin = detail::phase_one_margin(pr, opts);
    if (margin > std::sqrt(opts.feastol)) throw InfeasibleError("conic program is primal infeasible");
    throw;
  }
}

}  // namespace voltctl
