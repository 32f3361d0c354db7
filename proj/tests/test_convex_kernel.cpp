#include "oracles.hpp"
#include "voltctl/convex_kernel.hpp"

#include <gtest/gtest.h>

using namespace voltctl;

namespace {

Vector v1(double x) { return Vector::Constant(1, x); }
Matrix m1(double x) { return Matrix::Constant(1, 1, x); }

TrustRegionSpec scalar_spec(double r, double box) {
  TrustRegionSpec sp;
  sp.radius = r;
  sp.center_u = v1(0.0);
  sp.center_y = v1(0.95);
  sp.S = m1(1.0);
  sp.u_min = v1(-box);
  sp.u_max = v1(box);
  return sp;
}

QuadraticCost scalar_cost() { return {0.5, 0.1, v1(1.0)}; }

void expect_feasible(const TrustRegionSpec& sp, const SubproblemSolution& s) {
  EXPECT_LE((s.u_next - sp.center_u).norm(), sp.radius + 1e-9);
  EXPECT_TRUE(((s.u_next - sp.u_min).array() >= -1e-12).all());
  EXPECT_TRUE(((sp.u_max - s.u_next).array() >= -1e-12).all());
  EXPECT_LE((s.y_pred - (sp.center_y + sp.S * (s.u_next - sp.center_u))).cwiseAbs().maxCoeff(), 1e-15);
}

}  // namespace

TEST(TrustRegion, AlreadyOptimal) {
  TrustRegionSpec sp;
  sp.radius = 10.0;
  sp.center_u = Vector::Zero(3);
  sp.center_y = Vector::Ones(3);
  sp.S = Matrix::Identity(3, 3);
  sp.u_min = Vector::Constant(3, -1);
  sp.u_max = Vector::Constant(3, 1);
  const auto s = solve_trust_region({0.5, 0.1, Vector::Ones(3)}, sp);
  EXPECT_EQ(s.u_next.norm(), 0.0);
  EXPECT_EQ(s.objective, 0.0);
}

TEST(TrustRegion, ScalarStationaryPoint) {
  const auto s = solve_trust_region(scalar_cost(), scalar_spec(1.0, 1.0));
  EXPECT_NEAR(s.u_next[0], 0.05 / 1.2, 1e-12);
  EXPECT_FALSE(s.active_trust);
  EXPECT_LE(s.kkt_residual, 1e-8);
}

TEST(TrustRegion, ScalarBallBinds) {
  const auto s = solve_trust_region(scalar_cost(), scalar_spec(0.02, 1.0));
  EXPECT_NEAR(s.u_next[0], 0.02, 1e-12);
  EXPECT_TRUE(s.active_trust);
  EXPECT_LE(s.kkt_residual, 1e-8);
}

TEST(TrustRegion, ScalarBoxBinds) {
  const auto s = solve_trust_region(scalar_cost(), scalar_spec(0.02, 0.01));
  EXPECT_NEAR(s.u_next[0], 0.01, 1e-12);
  EXPECT_FALSE(s.active_trust);
  EXPECT_LE(s.kkt_residual, 1e-8);
}

TEST(TrustRegion, RejectsBadSpecs) {
  auto sp = scalar_spec(0.0, 1.0);
  EXPECT_THROW(solve_trust_region(scalar_cost(), sp), ParameterError);
  sp = scalar_spec(0.1, 1.0);
  sp.center_u = v1(2.0);
  EXPECT_THROW(solve_trust_region(scalar_cost(), sp), ParameterError);
  sp = scalar_spec(0.1, 1.0);
  sp.S = Matrix::Ones(2, 1);
  EXPECT_THROW(solve_trust_region(scalar_cost(), sp), DimensionError);
  EXPECT_THROW(solve_trust_region({0.0, 0.1, v1(1.0)}, scalar_spec(0.1, 1.0)), ParameterError);
}

TEST(TrustRegion, MatchesGridSearch) {
  Rng rng(2024);
  int with_ybox = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 3;
    const auto in = oracle::random_instance(rng, n);
    with_ybox += in.spec.y_min.size() > 0;
    const auto grid = oracle::grid_search(in.cost, in.spec, 1e-4);
    const auto s = solve_trust_region(in.cost, in.spec);
    expect_feasible(in.spec, s);
    EXPECT_LE((s.d - grid.d).norm(), 2e-4) << "trial " << trial;
    EXPECT_LE(std::abs(s.objective - grid.objective), 1e-6) << "trial " << trial;
    EXPECT_LE(s.objective, grid.objective + 1e-10) << "trial " << trial;
  }
  EXPECT_GT(with_ybox, 20);
}

TEST(TrustRegion, FuzzedZeroStepNeverBeaten) {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.next() % 8);
    auto in = oracle::random_instance(rng, n);
    if (trial % 2) in.spec.S *= 20.0;  // feeder-scale sensitivities
    const auto s = solve_trust_region(in.cost, in.spec);
    expect_feasible(in.spec, s);
    EXPECT_LE(s.kkt_residual, 1e-8) << trial;
    EXPECT_LE(s.y_violation, 1e-9) << trial;
    const double at_zero = in.cost(in.spec.center_y, in.spec.center_u);
    EXPECT_GE(at_zero - s.objective, -1e-9) << trial;
  }
}

TEST(TrustRegion, InfeasibleVoltageBoxAndSoftMode) {
  auto sp = scalar_spec(0.01, 0.05);
  sp.center_y = v1(0.85);
  sp.y_min = v1(0.90);
  sp.y_max = v1(1.10);
  EXPECT_THROW(solve_trust_region(scalar_cost(), sp), InfeasibleError);

  SubproblemOptions soft;
  soft.soft_y = true;
  soft.eta = v1(1.0);
  const auto s = solve_trust_region(scalar_cost(), sp, soft);
  EXPECT_TRUE(s.softened);
  // Both the cost and the hinge pull upward, so the ball binds.
  EXPECT_NEAR(s.u_next[0], 0.01, 1e-9);
  EXPECT_NEAR(s.y_violation, 0.04, 1e-9);
  const double penalised_zero = scalar_cost()(sp.center_y, sp.center_u) + 0.05;
  EXPECT_LT(s.objective, penalised_zero);

  // Reachable box: hard mode lands exactly on the voltage limit.
  sp.center_y = v1(0.895);
  sp.radius = 0.02;
  auto hard = solve_trust_region(scalar_cost(), sp);
  EXPECT_GE(hard.y_pred[0], 0.90 - 1e-9);
}

TEST(Projection, BallBoxOptimality) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + trial % 6;
    Vector lo(n), hi(n), z(n);
    for (int i = 0; i < n; ++i) {
      lo[i] = -rng.uniform(0.0, 1.0);
      hi[i] = rng.uniform(0.0, 1.0);
      z[i] = rng.uniform(-3.0, 3.0);
    }
    const double r = rng.uniform(0.05, 1.5);
    const Vector x = detail::project_ball_box(z, lo, hi, r);
    ASSERT_LE(x.norm(), r + 1e-12);
    // Variational inequality (z - x)'(w - x) <= 0 for feasible w.
    for (int k = 0; k < 50; ++k) {
      Vector w(n);
      for (int i = 0; i < n; ++i) w[i] = rng.uniform(lo[i], hi[i]);
      if (w.norm() > r) w *= r / w.norm();
      EXPECT_LE((z - x).dot(w - x), 1e-9);
    }
  }
}

TEST(Penalty, HandValues) {
  const QuadraticCost cost{0.5, 0.1, v1(1.0)};
  PenaltySpec pen{v1(1.0), v1(2.0)};
  // Feasible and plant consistent: penalties vanish.
  EXPECT_DOUBLE_EQ(penalty_objective(cost, pen, v1(1.02), v1(0.01), v1(1.02), v1(-0.08)), cost(v1(1.02), v1(0.01)));
  const QuadraticCost zero{1e-300, 0.0, v1(0.0)};
  EXPECT_NEAR(penalty_objective(zero, {v1(1.0), v1(0.0)}, v1(0.1), v1(0.0), v1(0.0), v1(-1.0)), 0.1, 1e-15);
  const Vector h = voltage_box_h(v1(1.06), v1(0.9), v1(1.05));
  EXPECT_NEAR(h[0], 0.01, 1e-15);
  EXPECT_NEAR(penalty_objective(zero, {v1(0.0), v1(2.0)}, v1(1.06), v1(0.0), v1(1.06), h), 0.02, 1e-15);
  EXPECT_THROW(penalty_objective(cost, {v1(-1.0), v1(1.0)}, v1(1), v1(0), v1(1), v1(0)), ParameterError);
}

TEST(Penalty, LinearizedIdentities) {
  const QuadraticCost cost{0.5, 0.1, Vector::Ones(2)};
  const PenaltySpec pen{Vector::Constant(2, 1.0), Vector::Constant(2, 1.0)};
  LinearizationPoint z{Vector::Constant(2, 0.97), Vector::Constant(2, 0.01), Vector::Constant(2, 0.9),
                       Vector::Constant(2, 1.1)};
  Matrix M(2, 2);
  M << 1.0, 0.3, 0.2, 0.8;
  const double J = penalty_objective(cost, pen, z.y, z.u, z.y, voltage_box_h(z.y, z.y_min, z.y_max));
  EXPECT_DOUBLE_EQ(linearized_penalty(cost, pen, z, M, Vector::Zero(2), Vector::Zero(2)), J);
  Vector du(2);
  du << 0.01, -0.004;
  const Vector dy = M * du;
  EXPECT_DOUBLE_EQ(linearized_penalty(cost, pen, z, M, dy, du), cost(z.y + dy, z.u + du));

  // Matrices differing by delta: values differ by at most lambda * delta.
  LinearizationPoint zs{v1(0.97), v1(0.0), v1(0.9), v1(1.1)};
  const PenaltySpec p1{v1(1.0), v1(1.0)};
  const double delta = 0.07;
  const double a = linearized_penalty(scalar_cost(), p1, zs, m1(1.0), v1(0.5), v1(1.0));
  const double b = linearized_penalty(scalar_cost(), p1, zs, m1(1.0 + delta), v1(0.5), v1(1.0));
  EXPECT_LE(std::abs(a - b), delta + 1e-15);
  EXPECT_THROW(linearized_penalty(cost, pen, z, M, Vector::Zero(3), du), DimensionError);
}

TEST(Penalty, PredictedDecreaseOnScalarExample) {
  const auto cost = scalar_cost();
  const auto sp = scalar_spec(1.0, 1.0);
  const auto s = solve_trust_region(cost, sp);
  const PenaltySpec pen{v1(1.0), v1(1.0)};
  LinearizationPoint z{sp.center_y, sp.center_u, v1(0.9), v1(1.1)};
  const double J = penalty_objective(cost, pen, z.y, z.u, z.y, voltage_box_h(z.y, z.y_min, z.y_max));
  const double L = linearized_penalty(cost, pen, z, sp.S, s.y_pred - z.y, s.d);
  const double u = 0.05 / 1.2;
  const double by_hand = 0.5 * 0.05 * 0.05 - (0.5 * (u - 0.05) * (u - 0.05) + 0.1 * u * u);
  EXPECT_NEAR(predicted_decrease(J, L), by_hand, 1e-14);
  EXPECT_GT(predicted_decrease(J, L), 0.0);
  EXPECT_EQ(predicted_decrease(0.3, 0.3), 0.0);
}

TEST(Penalty, RatioIsOneForExactAffineModel) {
  const QuadraticCost cost{0.5, 0.1, Vector::Ones(2)};
  Matrix M(2, 2);
  M << 2.0, 0.5, 0.3, 1.5;
  const Vector b = Vector::Constant(2, 0.95);
  TrustRegionSpec sp;
  sp.radius = 0.01;
  sp.center_u = Vector::Zero(2);
  sp.center_y = b;
  sp.S = M;
  sp.u_min = Vector::Constant(2, -0.05);
  sp.u_max = Vector::Constant(2, 0.05);
  const auto s = solve_trust_region(cost, sp);
  const auto pen = default_penalty(cost, Vector::Constant(2, 0.9), Vector::Constant(2, 1.1), sp.u_min, sp.u_max);
  LinearizationPoint z{b, sp.center_u, Vector::Constant(2, 0.9), Vector::Constant(2, 1.1)};
  auto J = [&](const Vector& y, const Vector& u) {
    return penalty_objective(cost, pen, y, u, M * u + b, voltage_box_h(y, z.y_min, z.y_max));
  };
  const double Lt = linearized_penalty(cost, pen, z, M, s.y_pred - b, s.d);
  EXPECT_NEAR(decrease_ratio(J(b, sp.center_u), J(s.y_pred, s.u_next), Lt), 1.0, 1e-8);
  EXPECT_THROW(decrease_ratio(1.0, 0.5, 1.0), DegenerateDecrease);
  EXPECT_NEAR(pen.lambda_pen[0], 1.0, 1e-15);  // 10 * 2 * 0.5 * 0.1
}

TEST(Penalty, SurrogateIsConvex) {
  Rng rng(91);
  const QuadraticCost cost{0.5, 0.1, Vector::Ones(3)};
  const PenaltySpec pen{Vector::Constant(3, 1.0), Vector::Constant(3, 1.0)};
  for (int trial = 0; trial < 500; ++trial) {
    Matrix M(3, 3);
    for (int i = 0; i < 9; ++i) M.data()[i] = rng.uniform(-5, 5);
    LinearizationPoint z{Vector::Constant(3, rng.uniform(0.9, 1.1)), Vector::Zero(3), Vector::Constant(3, 0.95),
                         Vector::Constant(3, 1.05)};
    Vector a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = rng.uniform(-0.05, 0.05);
      b[i] = rng.uniform(-0.05, 0.05);
    }
    const double th = rng.uniform();
    const Vector c = th * a + (1 - th) * b;
    auto L = [&](const Vector& d) { return linearized_penalty(cost, pen, z, M, d.head(3), d.tail(3)); };
    EXPECT_LE(L(c), th * L(a) + (1 - th) * L(b) + 1e-10);
  }
}
