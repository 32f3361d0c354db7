#pragma once

// Rolling (u, y) window and the forgetting-factor weighted least-squares
// estimate of the voltage sensitivity dy/du.

#include "voltctl/common.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <deque>
#include <optional>
#include <utility>

namespace voltctl {

struct Sample {
  Vector u;
  Vector y;
};

class TrajectoryWindow {
 public:
  TrajectoryWindow(int tau, double lambda_ff) : tau_(tau), lambda_ff_(lambda_ff) {
    if (tau < 1) throw ParameterError("window length tau must be >= 1");
    if (!(lambda_ff > 0.0 && lambda_ff < 1.0)) throw ParameterError("forgetting factor must lie in (0, 1)");
  }

  void push(const Vector& u, const Vector& y) {
    if (!samples_.empty()) {
      require_size(u, samples_.back().u.size(), "push_sample: u");
      require_size(y, samples_.back().y.size(), "push_sample: y");
    }
    samples_.push_back({u, y});
    while (samples_.size() > static_cast<std::size_t>(tau_) + 1) samples_.pop_front();
  }

  int tau() const { return tau_; }
  double lambda_ff() const { return lambda_ff_; }
  std::size_t size() const { return samples_.size(); }
  int increments() const { return samples_.empty() ? 0 : static_cast<int>(samples_.size()) - 1; }
  const std::deque<Sample>& samples() const { return samples_; }
  const Sample& newest() const { return samples_.back(); }
  void clear() { samples_.clear(); }

 private:
  int tau_;
  double lambda_ff_;
  std::deque<Sample> samples_;
};

inline TrajectoryWindow push_sample(TrajectoryWindow w, const Vector& u, const Vector& y) {
  w.push(u, y);
  return w;
}

// Rows are first differences in chronological order, oldest first.
inline std::pair<Matrix, Matrix> build_increment_matrices(const TrajectoryWindow& w) {
  if (w.size() < 2) throw InsufficientData("need at least two samples to form increments");
  const auto& s = w.samples();
  const Eigen::Index rows = static_cast<Eigen::Index>(s.size()) - 1;
  Matrix U(rows, s.front().u.size());
  Matrix Y(rows, s.front().y.size());
  for (Eigen::Index l = 0; l < rows; ++l) {
    U.row(l) = (s[l + 1].u - s[l].u).transpose();
    Y.row(l) = (s[l + 1].y - s[l].y).transpose();
  }
  return {U, Y};
}

// Diagonal of W: lambda^(tau-1), ..., lambda, 1.
inline Vector forgetting_weights(int tau, double lambda_ff) {
  if (tau < 1) throw ParameterError("tau must be >= 1");
  if (!(lambda_ff > 0.0 && lambda_ff < 1.0)) throw ParameterError("forgetting factor must lie in (0, 1)");
  Vector w(tau);
  double p = 1.0;
  for (int i = tau - 1; i >= 0; --i) {
    w[i] = p;
    p *= lambda_ff;
  }
  return w;
}

struct SensitivityEstimate {
  Matrix S;
  double sigma_min = 0.0;
  double sigma_max = 0.0;
  bool excited = false;
  double window_radius = 0.0;
};

inline double excitation_threshold(double sigma_max, double rel = 1e-8) {
  return rel * std::max(1.0, sigma_max);
}

// Weighted LS via complete orthogonal decomposition of W^(1/2) U. When U is
// rank deficient the result is the minimum-norm solution, or the prior plus
// a minimum-norm correction if a prior is supplied.
inline SensitivityEstimate estimate_sensitivity(const Matrix& U, const Matrix& Y, const Vector& weights,
                                                double rel_threshold = 1e-8,
                                                const std::optional<Matrix>& prior = std::nullopt) {
  if (U.rows() != Y.rows()) throw DimensionError("U and Y must have the same number of rows");
  if (weights.size() != U.rows()) throw DimensionError("weight vector must match the number of rows");
  if ((weights.array() <= 0.0).any()) throw ParameterError("weights must be positive");
  const Eigen::Index n = U.cols();

  SensitivityEstimate est;
  Eigen::JacobiSVD<Matrix> svd(U);
  const Vector& sv = svd.singularValues();
  est.sigma_max = sv.size() ? sv[0] : 0.0;
  est.sigma_min = (U.rows() >= n && sv.size() == n) ? sv[n - 1] : 0.0;
  est.excited = n > 0 && est.sigma_min >= excitation_threshold(est.sigma_max, rel_threshold) && est.sigma_min > 0.0;

  const Vector root = weights.array().sqrt();
  const Matrix A = root.asDiagonal() * U;
  const Matrix B = root.asDiagonal() * Y;
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(A);
  if (est.excited) {
    if (cod.rank() < n) throw SingularError("weighted increment matrix lost rank despite passing the excitation test");
    est.S = cod.solve(B).transpose();
  } else if (prior) {
    if (prior->rows() != Y.cols() || prior->cols() != n) throw DimensionError("prior sensitivity has wrong shape");
    const Matrix Xp = prior->transpose();
    est.S = (Xp + cod.solve(B - A * Xp)).transpose();
  } else {
    est.S = cod.solve(B).transpose();
  }
  if (est.excited && !est.S.allFinite()) throw SingularError("sensitivity estimate is not finite");
  return est;
}

inline double window_radius(const TrajectoryWindow& w) {
  if (w.size() == 0) return 0.0;
  double r = 0.0;
  for (const auto& s : w.samples()) r = std::max(r, (s.u - w.newest().u).norm());
  return r;
}

inline SensitivityEstimate estimate_from_window(const TrajectoryWindow& w, double rel_threshold = 1e-8,
                                                const std::optional<Matrix>& prior = std::nullopt) {
  const auto [U, Y] = build_increment_matrices(w);
  auto est = estimate_sensitivity(U, Y, forgetting_weights(static_cast<int>(U.rows()), w.lambda_ff()),
                                  rel_threshold, prior);
  est.window_radius = window_radius(w);
  return est;
}

}  // namespace voltctl
