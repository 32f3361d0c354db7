#include "voltctl/conic.hpp"
#include "voltctl/relaxation.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace voltctl;

namespace {

const std::filesystem::path kFixtures = VOLTCTL_FIXTURE_DIR;

SparseMatrix dense_to_sparse(const Matrix& M) { return M.sparseView(); }

bool in_cone(const ConeDims& dims, const Vector& x, double tol) {
  for (int i = 0; i < dims.l; ++i)
    if (x[i] < -tol) return false;
  int off = dims.l;
  for (int n : dims.q) {
    if (x[off] + tol < x.segment(off + 1, n - 1).norm()) return false;
    off += n;
  }
  return true;
}

// A strictly feasible primal-dual pair built in, so an optimum exists.
ConicProblem random_problem(Rng& rng, int n, int p, const ConeDims& dims) {
  const int m = static_cast<int>(dims.size());
  Matrix A(p, n), G(m, n);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = rng.normal();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) G(i, j) = rng.uniform() < 0.5 ? rng.normal() : 0.0;
  auto interior = [&]() {
    Vector v(m);
    for (int i = 0; i < dims.l; ++i) v[i] = rng.uniform(0.1, 2.0);
    int off = dims.l;
    for (int k : dims.q) {
      v.segment(off + 1, k - 1) = rng.normal_vector(k - 1, 1.0);
      v[off] = v.segment(off + 1, k - 1).norm() + rng.uniform(0.1, 2.0);
      off += k;
    }
    return v;
  };
  const Vector x0 = rng.normal_vector(n, 1.0), y0 = rng.normal_vector(p, 1.0);
  const Vector s0 = interior(), z0 = interior();
  ConicProblem pr;
  pr.A = dense_to_sparse(A);
  pr.G = dense_to_sparse(G);
  pr.b = A * x0;
  pr.h = G * x0 + s0;
  pr.c = -A.transpose() * y0 - G.transpose() * z0;
  pr.dims = dims;
  return pr;
}

}  // namespace

TEST(ConeAlgebra, ScalingMapsZAndSToTheSamePoint) {
  Rng rng(3);
  const ConeDims dims{3, {4, 2, 6}};
  for (int trial = 0; trial < 200; ++trial) {
    Vector s(dims.size()), z(dims.size());
    for (int i = 0; i < dims.l; ++i) {
      s[i] = rng.uniform(1e-6, 3.0);
      z[i] = rng.uniform(1e-6, 3.0);
    }
    int off = dims.l;
    for (int k : dims.q) {
      for (Vector* v : {&s, &z}) {
        v->segment(off + 1, k - 1) = rng.normal_vector(k - 1, 1.0);
        (*v)[off] = v->segment(off + 1, k - 1).norm() * (1.0 + rng.uniform(1e-6, 1.0));
      }
      off += k;
    }
    const auto W = cone::compute_scaling(dims, s, z);
    const Vector wz = cone::apply_scaling(dims, W, z, false);
    const Vector wis = cone::apply_scaling(dims, W, s, true);
    EXPECT_LE((wz - wis).norm(), 1e-10 * (1.0 + wz.norm()));
    // W and its inverse round-trip.
    const Vector v = rng.normal_vector(dims.size(), 1.0);
    const Vector back = cone::apply_scaling(dims, W, cone::apply_scaling(dims, W, v, false), true);
    EXPECT_LE((back - v).norm(), 1e-10);
  }
}

TEST(ConeAlgebra, JordanDivisionInvertsProduct) {
  Rng rng(5);
  const ConeDims dims{2, {3, 5}};
  for (int trial = 0; trial < 100; ++trial) {
    Vector lam(dims.size());
    lam.head(2) << rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0);
    int off = 2;
    for (int k : dims.q) {
      lam.segment(off + 1, k - 1) = rng.normal_vector(k - 1, 1.0);
      lam[off] = lam.segment(off + 1, k - 1).norm() + rng.uniform(0.1, 1.0);
      off += k;
    }
    const Vector v = rng.normal_vector(dims.size(), 1.0);
    const Vector x = cone::jordan_div(dims, lam, v);
    EXPECT_LE((cone::jordan(dims, lam, x) - v).norm(), 1e-9 * (1.0 + x.norm()));
  }
}

TEST(ConeAlgebra, MaxStepLandsOnTheBoundary) {
  const ConeDims dims{0, {3}};
  Vector x(3), d(3);
  x << 2.0, 0.0, 0.0;
  d << -1.0, 1.0, 0.0;
  // (2 - a)^2 = a^2 at a = 1.
  EXPECT_NEAR(cone::max_step(dims, x, d), 1.0, 1e-14);
  d << 1.0, 0.5, 0.0;
  EXPECT_TRUE(std::isinf(cone::max_step(dims, x, d)));
  const ConeDims lin{2, {}};
  Vector a(2), b(2);
  a << 1.0, 4.0;
  b << -2.0, -1.0;
  EXPECT_DOUBLE_EQ(cone::max_step(lin, a, b), 0.5);
}

TEST(ConicSolver, SmallLinearProgram) {
  // min x1 + x2  s.t.  x1 + 2 x2 = 2, x >= 0  ->  x = (0, 1).
  ConicProblem pr;
  pr.c = Vector::Ones(2);
  pr.A = dense_to_sparse((Matrix(1, 2) << 1.0, 2.0).finished());
  pr.b = Vector::Constant(1, 2.0);
  pr.G = dense_to_sparse(-Matrix::Identity(2, 2));
  pr.h = Vector::Zero(2);
  pr.dims = {2, {}};
  const auto sol = solve_conic(pr);
  EXPECT_NEAR(sol.x[0], 0.0, 1e-8);
  EXPECT_NEAR(sol.x[1], 1.0, 1e-8);
  EXPECT_NEAR(sol.primal_objective, 1.0, 1e-9);
}

TEST(ConicSolver, LinearObjectiveOverUnitDisc) {
  // min -x1 - x2 over the unit disc -> x = (1, 1)/sqrt 2, value -sqrt 2.
  ConicProblem pr;
  pr.c = -Vector::Ones(2);
  pr.A.resize(0, 2);
  pr.b.resize(0);
  Matrix G = Matrix::Zero(3, 2);
  G(1, 0) = -1.0;
  G(2, 1) = -1.0;
  pr.G = dense_to_sparse(G);
  pr.h = (Vector(3) << 1.0, 0.0, 0.0).finished();
  pr.dims = {0, {3}};
  const auto sol = solve_conic(pr);
  EXPECT_NEAR(sol.primal_objective, -std::sqrt(2.0), 1e-9);
  EXPECT_NEAR(sol.x[0], 1.0 / std::sqrt(2.0), 1e-6);
  EXPECT_NEAR(sol.x[1], 1.0 / std::sqrt(2.0), 1e-6);
}

TEST(ConicSolver, ReportsPrimalInfeasibility) {
  // x >= 1 and x <= 0.
  ConicProblem pr;
  pr.c = Vector::Ones(1);
  pr.A.resize(0, 1);
  pr.b.resize(0);
  pr.G = dense_to_sparse((Matrix(2, 1) << -1.0, 1.0).finished());
  pr.h = (Vector(2) << -1.0, 0.0).finished();
  pr.dims = {2, {}};
  EXPECT_THROW(solve_conic(pr), InfeasibleError);
}

TEST(ConicSolver, RejectsInconsistentShapes) {
  ConicProblem pr;
  pr.c = Vector::Ones(2);
  pr.A.resize(0, 2);
  pr.b.resize(0);
  pr.G = dense_to_sparse(Matrix::Identity(3, 2));
  pr.h = Vector::Zero(2);
  pr.dims = {3, {}};
  EXPECT_THROW(solve_conic(pr), DimensionError);
}

// Optimality is certified by the KKT conditions themselves: both residuals,
// the complementarity gap and cone membership of s and z.
TEST(ConicSolver, RandomFeasibleProblemsSatisfyKkt) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(rng.uniform(0.0, 6.0));
    const int p = static_cast<int>(rng.uniform(0.0, 2.0));
    ConeDims dims{static_cast<int>(rng.uniform(0.0, 5.0)), {}};
    const int blocks = static_cast<int>(rng.uniform(1.0, 4.0));
    for (int b = 0; b < blocks; ++b) dims.q.push_back(2 + static_cast<int>(rng.uniform(0.0, 4.0)));
    const ConicProblem pr = random_problem(rng, n, p, dims);
    const auto sol = solve_conic(pr);
    EXPECT_LE((pr.A * sol.x - pr.b).norm(), 1e-7);
    EXPECT_LE((pr.G * sol.x + sol.s - pr.h).norm(), 1e-7);
    EXPECT_LE((Matrix(pr.A.transpose()) * sol.y + Matrix(pr.G.transpose()) * sol.z + pr.c).norm(), 1e-7);
    EXPECT_LE(std::abs(sol.primal_objective - sol.dual_objective), 1e-7 * (1.0 + std::abs(sol.primal_objective)));
    EXPECT_TRUE(in_cone(dims, sol.s, 1e-12));
    EXPECT_TRUE(in_cone(dims, sol.z, 1e-12));
  }
}

class Relaxation33 : public ::testing::Test {
 protected:
  void SetUp() override {
    net = load_network(kFixtures / "ieee33");
    loads = base_loads(net);
    cost = QuadraticCost{0.5, 0.1, net.y_ref};
  }
  NetworkModel net;
  LoadProfile loads;
  QuadraticCost cost;
};

// Reference objectives from an independent modelling-language formulation
// solved with a separate conic solver at 1e-12 tolerances.
TEST_F(Relaxation33, ObjectiveMatchesIndependentSolve) {
  const auto nominal = solve_relaxation(net, loads, cost);
  EXPECT_NEAR(nominal.relaxed_objective, 5.47097292e-05, 1e-6 * 5.47e-05 + 1e-12);
  const auto heavy = solve_relaxation(net, scaled(loads, 3.0), cost);
  EXPECT_NEAR(heavy.relaxed_objective, 9.552532936e-04, 1e-6 * 9.55e-04);
}

TEST_F(Relaxation33, HeavyLoadIsExact) {
  for (double scale : {1.0, 2.0, 3.0}) {
    const auto r = solve_relaxation(net, scaled(loads, scale), cost);
    EXPECT_LE(r.exactness_residual, 1e-6) << "scale " << scale;
    EXPECT_LE(r.conic.gap, 1e-8);
    // Exact relaxation: the nonlinear plant reproduces the relaxed cost.
    const Vector y = voltage_map(net, scaled(loads, scale), r.u_star);
    EXPECT_NEAR(cost(y, r.u_star), r.relaxed_objective, 1e-8);
  }
}

TEST_F(Relaxation33, BackFeedIsNotExactAndCostsMoreOnThePlant) {
  const LoadProfile backfeed = scaled(loads, -3.0);
  const auto r = solve_relaxation(net, backfeed, cost);
  EXPECT_GT(r.exactness_residual, 1e-4);
  const Vector y = voltage_map(net, backfeed, r.u_star);
  EXPECT_GT(cost(y, r.u_star), r.relaxed_objective);
}

// The loss variables carry no cost of their own at zero load, so the optimum
// is flat in them and an interior method stops at a small positive loss. The
// residual bound reflects that flatness at gap ~1e-13, not a modelling error.
TEST_F(Relaxation33, ZeroLoadHasFlatOptimum) {
  ConicOptions tight;
  tight.abstol = 1e-16;
  tight.reltol = 1e-14;
  tight.feastol = 1e-12;
  tight.fallback_tol = 1e-8;
  const auto r = solve_relaxation(net, scaled(loads, 0.0), cost, tight);
  EXPECT_LE(r.u_star.lpNorm<Eigen::Infinity>(), 1e-6);
  EXPECT_LE(std::abs(r.relaxed_objective), 1e-12);
  EXPECT_LE(r.exactness_residual, 1e-5);
}

TEST_F(Relaxation33, InputsStayInsideTheBox) {
  const auto r = solve_relaxation(net, scaled(loads, 3.0), cost);
  const auto b = control_bounds(net);
  EXPECT_TRUE(((r.u_star - b.u_min).array() >= 0.0).all());
  EXPECT_TRUE(((b.u_max - r.u_star).array() >= 0.0).all());
}

TEST_F(Relaxation33, NeedsTheModel) {
  net.model_available = false;
  EXPECT_THROW(solve_relaxation(net, loads, cost), ModelUnavailable);
}
