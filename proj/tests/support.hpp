#pragma once

// Shared generators for randomized tests. Fixed engines keep every run
// deterministic; change a seed only together with the tolerances it was
// validated against.

#include <random>

#include "qecl/linalg.hpp"

namespace testgen {

using qecl::Matrix;
using qecl::Vector;

inline Matrix random_gaussian(Eigen::Index rows, Eigen::Index cols,
                              std::mt19937_64& eng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = g(eng);
  return out;
}

inline Vector random_vector(Eigen::Index m, std::mt19937_64& eng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(m);
  for (Eigen::Index i = 0; i < m; ++i) v[i] = g(eng);
  return v;
}

// SPD with eigenvalues pushed away from zero by the ridge.
inline Matrix random_spd(Eigen::Index m, std::mt19937_64& eng, double ridge = 0.3) {
  const Matrix r = random_gaussian(m, m, eng);
  return Matrix(r * r.transpose() / static_cast<double>(m) +
                ridge * Matrix::Identity(m, m));
}

inline Matrix random_psd(Eigen::Index m, std::mt19937_64& eng) {
  const Matrix r = random_gaussian(m, m, eng);
  return Matrix(r * r.transpose() / static_cast<double>(m));
}

inline Matrix random_skew(Eigen::Index m, std::mt19937_64& eng, double scale = 1.0) {
  const Matrix r = random_gaussian(m, m, eng);
  return Matrix(scale * qecl::antisymmetrized(r));
}

// Exact equilibrium covariance triple of a random quadratic Hamiltonian
// H = p^T p / 2 + q^T K q / 2 at beta = 1 with random linear observables
// A = U z. C is the observable covariance, J the antisymmetric cross moment
// <LA A^T>, and D the Schur complement of the joint (A, LA) covariance, so
// (C, J, D) is physically realizable rather than an arbitrary matrix triple.
inline void physical_triple(std::mt19937_64& eng, Eigen::Index n, Eigen::Index m,
                            Matrix& C, Matrix& J, Matrix& D) {
  const Matrix K = random_spd(n, eng);
  const Matrix U = random_gaussian(m, 2 * n, eng);
  Matrix Sigma = Matrix::Zero(2 * n, 2 * n);
  Sigma.topLeftCorner(n, n) = K.inverse();
  Sigma.bottomRightCorner(n, n) = Matrix::Identity(n, n);
  Matrix Hess = Matrix::Zero(2 * n, 2 * n);
  Hess.topLeftCorner(n, n) = K;
  Hess.bottomRightCorner(n, n) = Matrix::Identity(n, n);
  Matrix Jcan = Matrix::Zero(2 * n, 2 * n);
  Jcan.topRightCorner(n, n) = Matrix::Identity(n, n);
  Jcan.bottomLeftCorner(n, n) = -Matrix::Identity(n, n);
  const Matrix V = U * Jcan * Hess;
  C = qecl::symmetrized(U * Sigma * U.transpose());
  const Matrix X = V * Sigma * U.transpose();
  J = qecl::antisymmetrized(X);
  D = qecl::symmetrized(V * Sigma * V.transpose() -
                        X * C.inverse() * X.transpose());
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace testgen
