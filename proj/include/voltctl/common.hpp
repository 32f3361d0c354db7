#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace voltctl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Error hierarchy. Every failure the library reports derives from Error so
// front ends can map whole classes of failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define VOLTCTL_DEFINE_ERROR(Name)         \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

VOLTCTL_DEFINE_ERROR(ParseError)
VOLTCTL_DEFINE_ERROR(TopologyError)
VOLTCTL_DEFINE_ERROR(UnitError)
VOLTCTL_DEFINE_ERROR(DimensionError)
VOLTCTL_DEFINE_ERROR(ConvergenceError)
VOLTCTL_DEFINE_ERROR(StepError)
VOLTCTL_DEFINE_ERROR(InsufficientData)
VOLTCTL_DEFINE_ERROR(ParameterError)
VOLTCTL_DEFINE_ERROR(SingularError)
VOLTCTL_DEFINE_ERROR(InfeasibleError)
VOLTCTL_DEFINE_ERROR(DegenerateDecrease)
VOLTCTL_DEFINE_ERROR(PlantError)
VOLTCTL_DEFINE_ERROR(BootstrapError)
VOLTCTL_DEFINE_ERROR(SolverError)
VOLTCTL_DEFINE_ERROR(ModelUnavailable)
VOLTCTL_DEFINE_ERROR(EmptyInput)
VOLTCTL_DEFINE_ERROR(IoError)

#undef VOLTCTL_DEFINE_ERROR

inline void require_size(const Vector& v, Eigen::Index n, const char* what) {
  if (v.size() != n) {
    throw DimensionError(std::string(what) + ": expected length " + std::to_string(n) +
                         ", got " + std::to_string(v.size()));
  }
}

inline Vector clip(const Vector& v, const Vector& lo, const Vector& hi) {
  return v.cwiseMax(lo).cwiseMin(hi);
}

// splitmix64 finalizer; used to derive independent stream seeds from
// (master seed, index) pairs so trial order never changes results.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}


// Seeded random source with distribution code written out here so streams
// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * M_PI * u2;
    spare_ = rad * std::sin(ang);
    has_spare_ = true;
    return rad * std::cos(ang);
  }

  Vector normal_vector(Eigen::Index n, double scale) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * normal();
    return v;
  }

  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace voltctl
