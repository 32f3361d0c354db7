#include "voltctl/theory.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace voltctl;

namespace {

const NetworkModel& two_bus() {
  static const NetworkModel net = load_network(std::filesystem::path(VOLTCTL_FIXTURE_DIR) / "two_bus");
  return net;
}

const TheoryCheck& find(const std::vector<TheoryCheck>& v, const std::string& name) {
  for (const auto& c : v)
    if (c.name == name) return c;
  throw std::runtime_error("missing check " + name);
}

}  // namespace

TEST(Theory, AllChecksPassOnTwoBusFeeder) {
  const auto res = validate_theory(two_bus());
  ASSERT_EQ(res.size(), 5u);
  for (const auto& c : res) EXPECT_TRUE(c.passed) << c.name << ": " << c.detail;

  const auto& est = find(res, "estimator-scaling");
  ASSERT_EQ(est.measured.size(), 4u);
  const auto [mn, mx] = std::minmax_element(est.measured.begin(), est.measured.end());
  EXPECT_LE(*mx, 2.0 * *mn);

  const auto& ratio = find(res, "decrease-ratio");
  for (std::size_t i = 0; i < ratio.radii.size(); ++i) {
    if (ratio.radii[i] <= 1e-2) {
      EXPECT_GE(ratio.measured[i], 0.5);
    }
    if (i > 0) {
      EXPECT_GE(ratio.measured[i], ratio.measured[i - 1] - 0.02);
    }
  }
  EXPECT_GE(find(res, "decrease-nonnegative").measured[0], -1e-9);
}

TEST(Theory, SignFlippedEstimateBreaksScalingButNotNonnegativity) {
  TheoryConfig cfg;
  cfg.flip_estimate_sign = true;
  const auto res = validate_theory(two_bus(), cfg);
  EXPECT_FALSE(find(res, "estimator-scaling").passed);
  EXPECT_TRUE(find(res, "decrease-nonnegative").passed);
  EXPECT_TRUE(find(res, "surrogate-estimate-bound").passed);
}

TEST(Theory, SingleRadiusDegeneratesToPointBounds) {
  TheoryConfig cfg;
  cfg.radii = {1e-2};
  for (const auto& c : validate_theory(two_bus(), cfg)) EXPECT_TRUE(c.passed) << c.name;
}

TEST(Theory, SeedDeterminism) {
  const auto a = validate_theory(two_bus()), b = validate_theory(two_bus());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].measured, b[i].measured);
}

TEST(Theory, RejectsBadConfig) {
  TheoryConfig cfg;
  cfg.radii = {};
  EXPECT_THROW(validate_theory(two_bus(), cfg), ParameterError);
  cfg.radii = {1e-2, -1e-3};
  EXPECT_THROW(validate_theory(two_bus(), cfg), ParameterError);
}
