#pragma once

// Shared helpers for the unit tests: seeded random matrices and small fixtures.

#include <random>

#include <Eigen/Dense>

namespace stm::testing {

inline Eigen::MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = n(rng);
  }
  return m;
}

inline Eigen::VectorXd random_vector(int n, std::mt19937_64& rng) { return random_matrix(n, 1, rng); }

/// Well-conditioned SPD matrix: A A' + n I scaled by `scale`.
inline Eigen::MatrixXd random_spd(int n, std::mt19937_64& rng, double scale = 1.0) {
  const Eigen::MatrixXd a = random_matrix(n, n, rng);
  return scale * (a * a.transpose() / n + Eigen::MatrixXd::Identity(n, n));
}

inline double max_abs(const Eigen::MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace stm::testing
