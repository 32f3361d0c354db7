#include "oracles.hpp"
#include "voltctl/powerflow.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace voltctl;

namespace {

const std::filesystem::path kFixtures = VOLTCTL_FIXTURE_DIR;

}  // namespace

TEST(PowerFlow, FlatNoFlowState) {
  auto net = load_network(kFixtures / "ieee33");
  const Eigen::Index m = net.size();
  const LoadProfile zero{Vector::Zero(m), Vector::Zero(m)};
  const auto sol = solve_distflow(net, make_injection(zero, Vector::Zero(m)));
  EXPECT_TRUE((sol.y.array() == 1.0).all());
  EXPECT_EQ(sol.P.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(sol.Q.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(sol.l.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PowerFlow, TwoBusGoldenValue) {
  const auto net = load_network(kFixtures / "two_bus");
  const auto loads = base_loads(net);
  const auto sol = solve_distflow(net, make_injection(loads, Vector::Zero(1)));
  // Frozen from the scalar fixed point evaluated in 40-digit arithmetic.
  constexpr double kGolden = 0.99799598391954929;
  EXPECT_NEAR(sol.y[0], kGolden, 1e-12);
  EXPECT_NEAR(oracle::two_bus_voltage(0.01, 0.01, 0.1, 0.1, 0.0), kGolden, 1e-15);
  EXPECT_LE(sol.residual, 1e-10);
  EXPECT_NEAR(sol.l[0], (sol.P[0] * sol.P[0] + sol.Q[0] * sol.Q[0]), 1e-12);

  for (double u : {-0.05, 0.02, 0.05}) {
    Vector uv(1);
    uv << u;
    EXPECT_NEAR(voltage_map(net, loads, uv)[0], oracle::two_bus_voltage(0.01, 0.01, 0.1, 0.1, u), 1e-12);
  }
}

TEST(PowerFlow, Ieee33MatchesPhasorLadder) {
  const auto net = load_network(kFixtures / "ieee33");
  const auto loads = base_loads(net);
  const Vector u0 = Vector::Zero(net.size());
  const auto sol = solve_distflow(net, make_injection(loads, u0));
  const Vector ref = oracle::phasor_ladder(net, loads, u0);
  EXPECT_NEAR(sol.y.minCoeff(), ref.minCoeff(), 1e-8);
  EXPECT_LE((sol.y - ref).cwiseAbs().maxCoeff(), 1e-8);
  // Commonly reported minimum for this feeder: 0.9131 p.u. at bus 18.
  EXPECT_NEAR(sol.y.minCoeff(), 0.9131, 1e-4);

  // Every bus injecting 0.05 p.u. at once is far outside the feeder's
  // operating range, so random inputs stay within a tenth of the box.
  Rng rng(3);
  Vector u(net.size());
  for (auto& x : u) x = rng.uniform(-0.005, 0.005);
  const auto sol_u = solve_distflow(net, make_injection(loads, u));
  EXPECT_LE((sol_u.y - oracle::phasor_ladder(net, loads, u)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(PowerFlow, ResidualAndLossInvariants) {
  const auto net = load_network(kFixtures / "ieee33");
  const auto base = base_loads(net);
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const double scale = rng.uniform(0.0, 1.5);
    Vector u(net.size());
    for (auto& x : u) x = rng.uniform(-0.005, 0.005);
    const auto inj = make_injection(scaled(base, scale), u);
    const auto sol = solve_distflow(net, inj);
    EXPECT_LE(sol.residual, 1e-10);
    EXPECT_LE(distflow_residual(net, inj, sol), 1e-10);
    EXPECT_TRUE((sol.y.array() > 0.0).all());
    EXPECT_TRUE((sol.l.array() >= 0.0).all());
  }
}

TEST(PowerFlow, LoadsPullVoltagesDown) {
  const auto net = load_network(kFixtures / "ieee33");
  const auto y = voltage_map(net, base_loads(net), Vector::Zero(net.size()));
  EXPECT_TRUE((y.array() < 1.0).all());
}

TEST(PowerFlow, WarmStartEquivalence) {
  const auto net = load_network(kFixtures / "ieee33");
  const auto loads = base_loads(net);
  Vector u = Vector::Constant(net.size(), 0.01);
  const auto cold = solve_distflow(net, make_injection(loads, u));
  const auto near = solve_distflow(net, make_injection(loads, Vector::Zero(net.size())));
  const auto warm = solve_distflow(net, make_injection(loads, u), near);
  EXPECT_LE((cold.y - warm.y).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE((cold.P - warm.P).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE(warm.iterations, cold.iterations);
}

TEST(PowerFlow, DeterministicAndMonotoneInInjection) {
  const auto net = load_network(kFixtures / "two_bus");
  const auto loads = base_loads(net);
  Vector u(1);
  u << 0.0;
  const Vector a = voltage_map(net, loads, u);
  const Vector b = voltage_map(net, loads, u);
  EXPECT_EQ(a[0], b[0]);
  u << 0.01;
  EXPECT_GT(voltage_map(net, loads, u)[0], a[0]);
}

TEST(PowerFlow, CollapseRaisesConvergenceError) {
  const auto net = load_network(kFixtures / "two_bus");
  LoadProfile heavy{Vector::Constant(1, -30.0), Vector::Constant(1, -30.0)};
  EXPECT_THROW(solve_distflow(net, make_injection(heavy, Vector::Zero(1))), ConvergenceError);
  EXPECT_THROW(solve_distflow(net, make_injection(heavy, Vector::Zero(2))), DimensionError);
}

TEST(Jacobian, ExactForAffineMaps) {
  Matrix M(3, 2);
  M << 1.0, -2.0, 0.5, 4.0, -3.0, 0.25;
  Vector b(3);
  b << 1.0, 0.0, -1.0;
  AffinePlant plant(M, b);
  Vector u(2);
  u << 0.3, -0.7;
  const Matrix S = finite_difference_jacobian([&](const Vector& x) { return plant.measure(x, 0); }, u, 1e-5);
  EXPECT_LE((S - M).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_THROW(finite_difference_jacobian([&](const Vector& x) { return plant.measure(x, 0); }, u, 0.0),
               StepError);
}

TEST(Jacobian, TwoBusSignAndRichardson) {
  const auto net = load_network(kFixtures / "two_bus");
  const auto loads = base_loads(net);
  Vector u(1);
  u << 0.02;
  const Matrix S = true_jacobian(net, loads, u);
  EXPECT_GT(S(0, 0), 0.0);
  EXPECT_THROW(true_jacobian(net, loads, u, -1.0), StepError);

  // Second-order stencil: halving h cuts the truncation error by ~4.
  auto g = [&](const Vector& x) { return Vector::Constant(1, oracle::two_bus_voltage(0.01, 0.01, 0.1, 0.1, x[0])); };
  const double s1 = finite_difference_jacobian(g, u, 4e-2)(0, 0);
  const double s2 = finite_difference_jacobian(g, u, 2e-2)(0, 0);
  const double s3 = finite_difference_jacobian(g, u, 1e-2)(0, 0);
  const double ratio = std::abs(s1 - s2) / std::abs(s2 - s3);
  EXPECT_NEAR(ratio, 4.0, 0.2);
}

TEST(Jacobian, Ieee33DiagonalPositive) {
  const auto net = load_network(kFixtures / "ieee33");
  const Matrix S = true_jacobian(net, base_loads(net), Vector::Zero(net.size()));
  EXPECT_TRUE((S.diagonal().array() > 0.0).all());
}
