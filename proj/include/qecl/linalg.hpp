#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace qecl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr const char* version = "0.1.0";

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline Matrix symmetrized(const Matrix& x) {
  return 0.5 * (x + x.transpose());
}

inline Matrix antisymmetrized(const Matrix& x) {
  return 0.5 * (x - x.transpose());
}

inline double min_eig_sym(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

inline double max_eig_sym(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// Condition number of a symmetric positive definite matrix.
inline double spd_condition(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

inline bool is_spd(const Matrix& s, double tol = 0.0) {
  if (s.rows() != s.cols()) return false;
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + s.cwiseAbs().maxCoeff()))
    return false;
  return min_eig_sym(s) > tol;
}

inline Matrix spd_inverse(const Matrix& s, const std::string& what) {
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success)
    throw Error(what + ": matrix is not positive definite");
  return llt.solve(Matrix::Identity(s.rows(), s.cols()));
}

inline double max_abs(const Matrix& x) {
  return x.size() == 0 ? 0.0 : x.cwiseAbs().maxCoeff();
}

}  // namespace qecl
