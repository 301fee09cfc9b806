#pragma once

#include "qecl/closure.hpp"

namespace qecl {

struct UnsupportedSchemeError : Error {
  using Error::Error;
};

struct ClosureConfig {
  double epsilon = 1.0;
  std::string scheme = "rk4";  // "rk4" or "adaptive"
  double dt = 0.0;             // 0: min(0.01, 0.01/epsilon)
  double t0 = 0.0;
  double t1 = 1.0;
  long record_stride = 1;
  std::string regime = "near_G";
  double switch_threshold = 0.05;  // boundary-layer G->M hand-off level
  double adapt_rtol = 1e-9;
  double adapt_atol = 1e-12;
};

// Either a best-fit uncertainty matrix M0 (SPD) or fully specified initial
// data, which pins the macrostate exactly and corresponds to G0 = 0.
struct InitialCondition {
  Vector lambda0;
  std::optional<Matrix> M0;
  bool fully_specified = false;
};

struct ClosureState {
  double t = 0.0;
  Vector lambda_hat;
  Vector a_hat;
  std::optional<Matrix> M_hat;
  std::optional<Matrix> G_hat;
  double entropy = 0.0;
  double entropy_rate = 0.0;
};

struct ClosureTrajectory {
  std::string regime;
  double epsilon = 0.0;
  std::string provenance;
  std::vector<ClosureState> states;
};

// Loss of positive definiteness of the curvature matrix; carries the
// trajectory integrated so far.
struct SingularityError : Error {
  ClosureTrajectory prefix;
  SingularityError(const std::string& msg, ClosureTrajectory traj)
      : Error(msg), prefix(std::move(traj)) {}
};

namespace detail {

inline double default_dt(const ClosureConfig& cfg) {
  if (cfg.dt > 0.0) return cfg.dt;
  return cfg.epsilon > 1.0 ? 0.01 / cfg.epsilon : 0.01;
}

inline void validate_config(const ClosureConfig& cfg) {
  if (!(cfg.t1 > cfg.t0)) throw Error("ClosureConfig: t1 must exceed t0");
  if (cfg.epsilon < 0.0) throw Error("ClosureConfig: epsilon must be nonnegative");
  if (cfg.dt < 0.0) throw Error("ClosureConfig: dt must be nonnegative");
  if (cfg.record_stride < 1) throw Error("ClosureConfig: record_stride must be >= 1");
  if (cfg.scheme != "rk4" && cfg.scheme != "adaptive")
    throw UnsupportedSchemeError("ClosureConfig: unknown scheme '" + cfg.scheme +
                                 "' (use rk4 or adaptive)");
}

using Rhs = std::function<Vector(double, const Vector&)>;
using Hook = std::function<void(double, Vector&)>;

template <class RHS>
inline Vector rk4_step(const RHS& rhs, double t, const Vector& y, double h) {
  const Vector k1 = rhs(t, y);
  const Vector k2 = rhs(t + 0.5 * h, y + (0.5 * h) * k1);
  const Vector k3 = rhs(t + 0.5 * h, y + (0.5 * h) * k2);
  const Vector k4 = rhs(t + h, y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// Fixed-grid RK4 or embedded Dormand-Prince 5(4) with step control.
class OdeDriver {
 public:
  explicit OdeDriver(const ClosureConfig& cfg)
      : adaptive_(cfg.scheme == "adaptive"),
        rtol_(cfg.adapt_rtol),
        atol_(cfg.adapt_atol),
        h_try_(default_dt(cfg)),
        h_min_(1e-12 * (cfg.t1 - cfg.t0)) {}

  void advance(const Rhs& rhs, double& t, Vector& y, double t_target, const Hook& after) {
    if (!adaptive_) {
      const double span = t_target - t;
      const long n = std::max<long>(1, std::llround(std::ceil(span / h_try_ - 1e-9)));
      const double h = span / n;
      for (long k = 0; k < n; ++k) {
        y = rk4_step(rhs, t, y, h);
        t = k + 1 == n ? t_target : t + h;
        after(t, y);
      }
      return;
    }
    while (t < t_target - 1e-14 * std::abs(t_target)) {
      const double h = std::min(h_try_, t_target - t);
      Vector y_next;
      double err = 0.0;
      // a trial stage may leave the admissible cone and throw; that is a
      // step-size artifact, so shrink and retry, rethrowing only once the
      // failure persists down to the step floor
      try {
        dp54_step(rhs, t, y, h, y_next, err);
      } catch (const SingularityError&) {
        h_try_ = 0.2 * h;
        if (h_try_ < h_min_) throw;
        continue;
      }
      if (err <= 1.0) {
        t = h == t_target - t ? t_target : t + h;
        y = std::move(y_next);
        after(t, y);
        h_try_ = h * std::min(5.0, std::max(0.2, 0.9 * std::pow(std::max(err, 1e-10), -0.2)));
      } else {
        h_try_ = h * std::max(0.2, 0.9 * std::pow(err, -0.2));
        if (h_try_ < h_min_)
          throw Error("adaptive integrator: step size underflow at t=" +
                      std::to_string(t) + "; last good state retained");
      }
    }
  }

 private:
  void dp54_step(const Rhs& rhs, double t, const Vector& y, double h, Vector& y5,
                 double& err_norm) const {
    const Vector k1 = rhs(t, y);
    const Vector k2 = rhs(t + h / 5.0, y + h * (k1 / 5.0));
    const Vector k3 = rhs(t + 3.0 * h / 10.0, y + h * (3.0 / 40.0 * k1 + 9.0 / 40.0 * k2));
    const Vector k4 =
        rhs(t + 4.0 * h / 5.0, y + h * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3));
    const Vector k5 =
        rhs(t + 8.0 * h / 9.0, y + h * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 +
                                        64448.0 / 6561.0 * k3 - 212.0 / 729.0 * k4));
    const Vector k6 =
        rhs(t + h, y + h * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 + 46732.0 / 5247.0 * k3 +
                            49.0 / 176.0 * k4 - 5103.0 / 18656.0 * k5));
    y5 = y + h * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4 -
                  2187.0 / 6784.0 * k5 + 11.0 / 84.0 * k6);
    const Vector k7 = rhs(t + h, y5);
    const Vector y4 = y + h * (5179.0 / 57600.0 * k1 + 7571.0 / 16695.0 * k3 +
                               393.0 / 640.0 * k4 - 92097.0 / 339200.0 * k5 +
                               187.0 / 2100.0 * k6 + k7 / 40.0);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double sc = atol_ + rtol_ * std::max(std::abs(y[i]), std::abs(y5[i]));
      const double e = (y5[i] - y4[i]) / sc;
      acc += e * e;
    }
    err_norm = std::sqrt(acc / static_cast<double>(y.size()));
  }

  bool adaptive_;
  double rtol_, atol_, h_try_, h_min_;
};

inline Vector pack(const Vector& lambda, const Matrix& mat) {
  Vector y(lambda.size() + mat.size());
  y.head(lambda.size()) = lambda;
  Eigen::Map<Matrix>(y.data() + lambda.size(), mat.rows(), mat.cols()) = mat;
  return y;
}

inline Vector unpack_lambda(const Vector& y, Eigen::Index m) { return y.head(m); }

inline Matrix unpack_matrix(const Vector& y, Eigen::Index m) {
  return Eigen::Map<const Matrix>(y.data() + m, m, m);
}

inline void check_finite(const Vector& y, double t) {
  if (!y.allFinite())
    throw Error("integration produced non-finite values at t=" + std::to_string(t));
}

struct RecordGrid {
  double t0, h;
  long n_steps, stride;

  RecordGrid(const ClosureConfig& cfg) : t0(cfg.t0), stride(cfg.record_stride) {
    const double span = cfg.t1 - cfg.t0;
    const double dt = default_dt(cfg);
    n_steps = std::max<long>(1, std::llround(std::ceil(span / dt - 1e-9)));
    h = span / n_steps;
  }
  long records() const { return (n_steps + stride - 1) / stride; }
  double time_of(long j) const { return t0 + std::min(j * stride, n_steps) * h; }
};

inline void validate_near_inputs(const Matrix& C, const Matrix& J, const Matrix& D,
                                 const InitialCondition& init) {
  const Eigen::Index m = C.rows();
  if (J.rows() != m || J.cols() != m || D.rows() != m || D.cols() != m ||
      init.lambda0.size() != m)
    throw Error("near-equilibrium closure: dimension mismatch");
  if (!is_spd(C)) throw Error("near-equilibrium closure: C must be SPD");
  if (max_abs(J + J.transpose()) > 1e-10 * (1.0 + max_abs(J)))
    throw Error("near-equilibrium closure: J must be antisymmetric");
  if (max_abs(D - D.transpose()) > 1e-10 * (1.0 + max_abs(D)))
    throw Error("near-equilibrium closure: D must be symmetric");
  if (init.fully_specified && init.M0)
    throw Error("InitialCondition: fully_specified excludes M0");
  if (init.M0 && !is_spd(*init.M0))
    throw Error("InitialCondition: M0 must be symmetric positive definite");
}

}  // namespace detail

// Integrate the inverse-curvature form: the closure remains regular for
// fully specified initial data (G0 = 0).
inline ClosureTrajectory integrate_near_G(const Matrix& C, const Matrix& J, const Matrix& D,
                                          const ClosureConfig& cfg,
                                          const InitialCondition& init) {
  detail::validate_config(cfg);
  detail::validate_near_inputs(C, J, D, init);
  const Eigen::Index m = C.rows();
  const Matrix Cinv = spd_inverse(C, "integrate_near_G");
  const double eps2 = cfg.epsilon * cfg.epsilon;

  Matrix G0;
  if (init.fully_specified)
    G0 = Matrix::Zero(m, m);
  else if (init.M0)
    G0 = spd_inverse(*init.M0, "integrate_near_G M0");
  else
    throw Error("integrate_near_G: provide M0 or set fully_specified");

  detail::Rhs rhs = [&, eps2](double, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix G = detail::unpack_matrix(y, m);
    const Vector dlam = Cinv * (J * lam) - eps2 * (G * (D * lam));
    const Matrix dG =
        Cinv + Cinv * J * G - G * J * Cinv - eps2 * (G * D * G);
    return detail::pack(dlam, dG);
  };
  detail::Hook after = [&](double t, Vector& y) {
    detail::check_finite(y, t);
    Eigen::Map<Matrix> G(y.data() + m, m, m);
    G = symmetrized(G).eval();
  };

  ClosureTrajectory traj;
  traj.regime = "near_G";
  traj.epsilon = cfg.epsilon;
  traj.provenance = "near-equilibrium constant matrices";
  auto record = [&](double t, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix G = detail::unpack_matrix(y, m);
    ClosureState st;
    st.t = t;
    st.lambda_hat = lam;
    st.a_hat = C * lam;
    st.G_hat = G;
    st.entropy = -0.5 * lam.dot(C * lam);
    st.entropy_rate = eps2 * lam.dot(C * (G * (D * lam)));
    traj.states.push_back(std::move(st));
  };

  detail::RecordGrid grid(cfg);
  detail::OdeDriver driver(cfg);
  Vector y = detail::pack(init.lambda0, G0);
  double t = cfg.t0;
  record(t, y);
  for (long j = 1; j <= grid.records(); ++j) {
    driver.advance(rhs, t, y, grid.time_of(j), after);
    record(t, y);
  }
  return traj;
}

// Integrate the curvature form; loss of positive definiteness aborts with
// the trajectory prefix attached.
inline ClosureTrajectory integrate_near_M(const Matrix& C, const Matrix& J, const Matrix& D,
                                          const ClosureConfig& cfg,
                                          const InitialCondition& init) {
  detail::validate_config(cfg);
  detail::validate_near_inputs(C, J, D, init);
  if (!init.M0)
    throw Error("integrate_near_M: M0 is required (use the G form for fully "
                "specified initial data)");
  const Eigen::Index m = C.rows();
  const Matrix Cinv = spd_inverse(C, "integrate_near_M");
  const double eps2 = cfg.epsilon * cfg.epsilon;

  ClosureTrajectory traj;
  traj.regime = "near_M";
  traj.epsilon = cfg.epsilon;
  traj.provenance = "near-equilibrium constant matrices";

  auto minv_times = [&](const Matrix& M, const Vector& v, double t) {
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success)
      throw SingularityError(
          "integrate_near_M: curvature lost positive definiteness at t=" +
              std::to_string(t) + "; possible dynamic phase transition",
          traj);
    return Vector(llt.solve(v));
  };

  detail::Rhs rhs = [&, eps2](double t, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix M = detail::unpack_matrix(y, m);
    const Vector dlam = Cinv * (J * lam) - eps2 * minv_times(M, D * lam, t);
    const Matrix dM = J * Cinv * M - M * Cinv * J - M * Cinv * M + eps2 * D;
    return detail::pack(dlam, dM);
  };
  detail::Hook after = [&](double t, Vector& y) {
    detail::check_finite(y, t);
    Eigen::Map<Matrix> M(y.data() + m, m, m);
    M = symmetrized(M).eval();
    if (min_eig_sym(M) <= 0.0)
      throw SingularityError(
          "integrate_near_M: curvature lost positive definiteness at t=" +
              std::to_string(t) + "; possible dynamic phase transition",
          traj);
  };

  auto record = [&](double t, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix M = detail::unpack_matrix(y, m);
    ClosureState st;
    st.t = t;
    st.lambda_hat = lam;
    st.a_hat = C * lam;
    st.M_hat = M;
    st.entropy = -0.5 * lam.dot(C * lam);
    st.entropy_rate = eps2 * lam.dot(C * minv_times(M, D * lam, t));
    traj.states.push_back(std::move(st));
  };

  detail::RecordGrid grid(cfg);
  detail::OdeDriver driver(cfg);
  Vector y = detail::pack(init.lambda0, *init.M0);
  double t = cfg.t0;
  record(t, y);
  for (long j = 1; j <= grid.records(); ++j) {
    driver.advance(rhs, t, y, grid.time_of(j), after);
    record(t, y);
  }
  return traj;
}

// Local-quadratic closure with lambda-dependent moment fields. Fully
// specified initial data runs an inverse-curvature boundary layer and hands
// off to the curvature form once G is safely positive definite.
inline ClosureTrajectory integrate_far(MomentProvider& provider, const ClosureConfig& cfg,
                                       const InitialCondition& init) {
  detail::validate_config(cfg);
  const Eigen::Index m = provider.dim();
  if (init.lambda0.size() != m) throw Error("integrate_far: lambda0 size mismatch");
  if (init.fully_specified && init.M0)
    throw Error("InitialCondition: fully_specified excludes M0");
  if (init.M0 && !is_spd(*init.M0))
    throw Error("InitialCondition: M0 must be symmetric positive definite");
  if (!init.fully_specified && !init.M0)
    throw Error("integrate_far: provide M0 or set fully_specified");
  const double eps2 = cfg.epsilon * cfg.epsilon;

  ClosureTrajectory traj;
  traj.regime = "far_local_quadratic";
  traj.epsilon = cfg.epsilon;
  traj.provenance = provider.provenance();

  bool g_phase = init.fully_specified;

  struct Fields {
    Matrix C, Cinv, F, hess_w;
    Vector f, grad_w;
  };
  auto fields_at = [&](const Vector& lam) {
    Fields fl;
    const MomentSet ms = provider.moments(lam);
    fl.C = ms.C;
    Eigen::LLT<Matrix> llt(ms.C);
    if (llt.info() != Eigen::Success)
      throw Error("integrate_far: covariance not positive definite along trajectory");
    fl.Cinv = llt.solve(Matrix::Identity(m, m));
    fl.f = llt.solve(ms.drift);
    fl.F = provider.drift_jacobian(lam);
    double w;
    provider.potential_derivatives(lam, w, fl.grad_w, fl.hess_w);
    return fl;
  };

  detail::Rhs rhs_g = [&, eps2](double, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix G = detail::unpack_matrix(y, m);
    const Fields fl = fields_at(lam);
    const Vector dlam = fl.f - eps2 * (G * fl.grad_w);
    const Matrix dG = fl.Cinv + fl.F * G + G * fl.F.transpose() - eps2 * (G * fl.hess_w * G);
    return detail::pack(dlam, dG);
  };
  auto minv_times = [&](const Matrix& M, const Vector& v, double t) {
    Eigen::LLT<Matrix> llt(M);
    if (llt.info() != Eigen::Success)
      throw SingularityError(
          "integrate_far: curvature lost positive definiteness at t=" +
              std::to_string(t) + "; possible dynamic phase transition",
          traj);
    return Vector(llt.solve(v));
  };
  detail::Rhs rhs_m = [&, eps2](double t, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix M = detail::unpack_matrix(y, m);
    const Fields fl = fields_at(lam);
    const Vector dlam = fl.f - eps2 * minv_times(M, fl.grad_w, t);
    const Matrix dM = -fl.F.transpose() * M - M * fl.F - M * fl.Cinv * M + eps2 * fl.hess_w;
    return detail::pack(dlam, dM);
  };

  detail::Hook after = [&](double t, Vector& y) {
    detail::check_finite(y, t);
    Eigen::Map<Matrix> mat(y.data() + m, m, m);
    mat = symmetrized(mat).eval();
    if (!g_phase && min_eig_sym(mat) <= 0.0)
      throw SingularityError(
          "integrate_far: curvature lost positive definiteness at t=" +
              std::to_string(t) + "; possible dynamic phase transition",
          traj);
  };

  auto record = [&](double t, const Vector& y) {
    const Vector lam = detail::unpack_lambda(y, m);
    const Matrix mat = detail::unpack_matrix(y, m);
    const MomentSet ms = provider.moments(lam);
    Vector grad_w;
    Matrix hess_w;
    double w;
    provider.potential_derivatives(lam, w, grad_w, hess_w);
    ClosureState st;
    st.t = t;
    st.lambda_hat = lam;
    st.a_hat = ms.a;
    st.entropy = ms.phi - lam.dot(ms.a);
    if (g_phase) {
      st.G_hat = mat;
      st.entropy_rate = eps2 * lam.dot(ms.C * (mat * grad_w));
    } else {
      st.M_hat = mat;
      Eigen::LLT<Matrix> llt(mat);
      st.entropy_rate = eps2 * lam.dot(ms.C * llt.solve(grad_w));
    }
    traj.states.push_back(std::move(st));
  };

  detail::RecordGrid grid(cfg);
  detail::OdeDriver driver(cfg);
  Vector y = init.fully_specified
                 ? detail::pack(init.lambda0, Matrix::Zero(m, m))
                 : detail::pack(init.lambda0, *init.M0);
  double t = cfg.t0;
  record(t, y);
  for (long j = 1; j <= grid.records(); ++j) {
    driver.advance(g_phase ? rhs_g : rhs_m, t, y, grid.time_of(j), after);
    if (g_phase) {
      // Hand off to the curvature form once G is comfortably invertible.
      const Matrix G = detail::unpack_matrix(y, m);
      const Fields fl = fields_at(detail::unpack_lambda(y, m));
      if (min_eig_sym(G) >= cfg.switch_threshold * fl.Cinv.trace() / static_cast<double>(m)) {
        const Matrix M = spd_inverse(G, "integrate_far hand-off");
        y = detail::pack(detail::unpack_lambda(y, m), M);
        g_phase = false;
      }
    }
    record(t, y);
  }
  return traj;
}

// Leading-order closure: pure drift flow, entropy conserving.
inline ClosureTrajectory integrate_adiabatic(MomentProvider& provider,
                                             const ClosureConfig& cfg,
                                             const InitialCondition& init) {
  detail::validate_config(cfg);
  const Eigen::Index m = provider.dim();
  if (init.lambda0.size() != m) throw Error("integrate_adiabatic: lambda0 size mismatch");

  ClosureTrajectory traj;
  traj.regime = "adiabatic";
  traj.epsilon = cfg.epsilon;
  traj.provenance = provider.provenance();

  detail::Rhs rhs = [&](double, const Vector& lam) {
    const MomentSet ms = provider.moments(lam);
    Eigen::LLT<Matrix> llt(ms.C);
    if (llt.info() != Eigen::Success)
      throw Error("integrate_adiabatic: covariance not positive definite");
    return Vector(llt.solve(ms.drift));
  };
  detail::Hook after = [&](double t, Vector& y) { detail::check_finite(y, t); };
  auto record = [&](double t, const Vector& lam) {
    const MomentSet ms = provider.moments(lam);
    ClosureState st;
    st.t = t;
    st.lambda_hat = lam;
    st.a_hat = ms.a;
    st.entropy = ms.phi - lam.dot(ms.a);
    st.entropy_rate = 0.0;
    traj.states.push_back(std::move(st));
  };

  detail::RecordGrid grid(cfg);
  detail::OdeDriver driver(cfg);
  Vector y = init.lambda0;
  double t = cfg.t0;
  record(t, y);
  for (long j = 1; j <= grid.records(); ++j) {
    driver.advance(rhs, t, y, grid.time_of(j), after);
    record(t, y);
  }
  return traj;
}

// Entropy and production rate of a recorded state, recomputed from the
// near-equilibrium matrices (diagnostic helper).
inline std::pair<double, double> entropy_and_rate(const Matrix& C, const Matrix& D,
                                                  const Vector& lambda, const Matrix& G,
                                                  double epsilon) {
  const double s = -0.5 * lambda.dot(C * lambda);
  const double rate = epsilon * epsilon * lambda.dot(C * (G * (D * lambda)));
  return {s, rate};
}

}  // namespace qecl
