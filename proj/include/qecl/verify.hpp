#pragma once

#include <algorithm>

#include "qecl/reduced.hpp"

namespace qecl {

struct IntegrityError : Error {
  using Error::Error;
};
struct WrongRegimeError : Error {
  using Error::Error;
};
struct DomainTooSmallError : Error {
  using Error::Error;
};

// Ensemble average of the observables under the resolved flow: trajectories
// start from the quasi-equilibrium at lambda0 and evolve symplectically.
struct ResolvedRun {
  Vector times;
  Matrix a_exact;     // times x m
  Matrix std_errors;  // times x m, 10-block batch means over trajectories
  long n_traj = 0;
  double dt = 0.0;
  double energy_drift = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

inline ResolvedRun resolve_ensemble(const HamiltonianSystem& sys, const ObservableSet& set,
                                    const Vector& lambda0, const EquilibriumSpec& spec,
                                    long n_traj, double dt, const Vector& t_grid,
                                    std::uint64_t seed, int workers = 1,
                                    double drift_tol = 1e-4) {
  if (n_traj < 1) throw Error("resolve_ensemble: n_traj must be positive");
  if (dt <= 0.0) throw Error("resolve_ensemble: dt must be positive");
  const long n_times = t_grid.size();
  if (n_times < 1) throw Error("resolve_ensemble: empty time grid");
  std::vector<long> steps_at(n_times);
  for (long j = 0; j < n_times; ++j) {
    if (j > 0 && t_grid[j] <= t_grid[j - 1])
      throw Error("resolve_ensemble: time grid must be strictly increasing");
    steps_at[j] = std::llround(t_grid[j] / dt);
    if (std::abs(steps_at[j] * dt - t_grid[j]) > 1e-9 * std::max(1.0, t_grid[j]))
      throw Error("resolve_ensemble: grid times must be integer multiples of dt");
  }
  const Eigen::Index m = set.size();

  SampleBatch ics = resample_quasi_equilibrium(
      sys, set, lambda0, spec, n_traj, child_seed(seed, "initial-conditions"), workers);

  // Per-trajectory series land in disjoint slots; the reduction below is
  // sequential in trajectory order, so results do not depend on workers.
  Matrix series(n_traj, n_times * m);
  std::vector<double> drift(n_traj, 0.0);
  detail::run_chains(
      [&](long k) {
        PhaseVector z = ics.points[k];
        const double e0 = sys.energy(z);
        long step = 0;
        for (long j = 0; j < n_times; ++j) {
          for (; step < steps_at[j]; ++step) z = symplectic_step(sys, z, dt);
          const Vector a = evaluate_observables(set, z);
          for (Eigen::Index i = 0; i < m; ++i) series(k, j * m + i) = a[i];
        }
        drift[k] = std::abs(sys.energy(z) - e0) / std::max(1.0, std::abs(e0));
      },
      n_traj, workers);

  ResolvedRun run;
  run.times = t_grid;
  run.n_traj = n_traj;
  run.dt = dt;
  run.seed = seed;
  run.warnings = ics.warnings;
  run.energy_drift = *std::max_element(drift.begin(), drift.end());
  if (run.energy_drift > drift_tol)
    throw IntegrityError("resolve_ensemble: relative energy drift " +
                         std::to_string(run.energy_drift) + " exceeds bound " +
                         std::to_string(drift_tol) + "; reduce dt");

  run.a_exact.resize(n_times, m);
  run.std_errors.resize(n_times, m);
  const long n_blocks = std::min<long>(10, n_traj);
  for (long j = 0; j < n_times; ++j)
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto col = series.col(j * m + i);
      run.a_exact(j, i) = col.mean();
      double var = 0.0;
      for (long b = 0; b < n_blocks; ++b) {
        const long lo = b * n_traj / n_blocks;
        const long hi = (b + 1) * n_traj / n_blocks;
        const double bm = col.segment(lo, hi - lo).mean();
        var += (bm - run.a_exact(j, i)) * (bm - run.a_exact(j, i));
      }
      run.std_errors(j, i) =
          n_blocks > 1 ? std::sqrt(var / (n_blocks * (n_blocks - 1.0))) : 0.0;
    }
  return run;
}

// Simultaneous congruence diagonalization of (C, D): W^T C W = I and
// W^T D W = diag(Delta), modes ordered by decreasing relaxation rate.
struct EvenModeDecomposition {
  Matrix W;
  Vector Delta;
  Vector plateau_times;  // 1/sqrt(Delta_i)
};

inline EvenModeDecomposition even_mode_decomposition(const Matrix& C, const Matrix& D,
                                                     const Matrix& J,
                                                     const Matrix* J_std_errors = nullptr) {
  const Eigen::Index m = C.rows();
  double j_bound = 1e-8 * (max_abs(C) + max_abs(D));
  if (J_std_errors)
    j_bound = std::max(j_bound, 5.0 * J_std_errors->cwiseAbs().maxCoeff());
  if (max_abs(J) > j_bound)
    throw WrongRegimeError(
        "even_mode_decomposition: J is significantly nonzero; the time-reversal "
        "even closed forms do not apply");
  if (!is_spd(C)) throw Error("even_mode_decomposition: C must be SPD");
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(D, C);
  if (es.info() != Eigen::Success)
    throw Error("even_mode_decomposition: generalized eigensolve failed");
  const double floor = -1e-8 * std::max(D.trace(), 0.0);
  EvenModeDecomposition out;
  out.W.resize(m, m);
  out.Delta.resize(m);
  out.plateau_times.resize(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index src = m - 1 - i;  // descending rates
    double d = es.eigenvalues()[src];
    if (d < floor)
      throw Error("even_mode_decomposition: D has a significantly negative mode");
    d = std::max(d, 0.0);
    out.Delta[i] = d;
    out.W.col(i) = es.eigenvectors().col(src);
    out.plateau_times[i] =
        d > 0.0 ? 1.0 / std::sqrt(d) : std::numeric_limits<double>::infinity();
  }
  return out;
}

// Closed-form relaxation operators in the time-reversal even case.
struct EvenAnalyticSolution {
  EvenModeDecomposition modes;
  ClosureTrajectory trajectory;
  std::vector<Matrix> Psi;        // macrostate propagator at each record time
  std::vector<Matrix> Khat;       // transport kernel at each record time
  Matrix transport_infinity;      // epsilon * Khat(inf)
};

inline EvenAnalyticSolution analytic_even_solution(const Matrix& C, const Matrix& D,
                                                   const ClosureConfig& cfg,
                                                   const InitialCondition& init,
                                                   const Matrix* J_std_errors = nullptr) {
  detail::validate_config(cfg);
  const Eigen::Index m = C.rows();
  if (init.lambda0.size() != m) throw Error("analytic_even_solution: lambda0 size mismatch");
  if (!init.fully_specified)
    throw Error("analytic_even_solution: the closed form assumes fully specified "
                "initial data (G0 = 0)");
  EvenAnalyticSolution sol;
  sol.modes = even_mode_decomposition(C, D, Matrix::Zero(m, m), J_std_errors);
  const Matrix& W = sol.modes.W;
  const Matrix Winv = W.inverse();
  const Vector sq = sol.modes.Delta.cwiseSqrt();
  const double eps = cfg.epsilon;

  sol.trajectory.regime = "even_analytic";
  sol.trajectory.epsilon = eps;
  sol.trajectory.provenance = "closed-form even relaxation";
  sol.transport_infinity =
      eps * Winv.transpose() * sq.asDiagonal() * Winv;

  detail::RecordGrid grid(cfg);
  const long n_rec = grid.records();
  for (long j = 0; j <= n_rec; ++j) {
    const double t = grid.time_of(j);
    const double tau = eps * (t - cfg.t0);
    Vector sech_v(m), g_v(m), sqtanh_v(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double x = sq[i] * tau;
      sech_v[i] = 1.0 / std::cosh(x);
      sqtanh_v[i] = sq[i] * std::tanh(x);
      if (sq[i] > 0.0)
        g_v[i] = eps > 0.0 ? std::tanh(eps * sq[i] * (t - cfg.t0)) / (eps * sq[i])
                           : (t - cfg.t0);
      else
        g_v[i] = t - cfg.t0;
    }
    const Matrix Psi = Winv.transpose() * sech_v.asDiagonal() * W.transpose();
    const Matrix Khat = Winv.transpose() * sqtanh_v.asDiagonal() * Winv;
    const Matrix G = W * g_v.asDiagonal() * W.transpose();
    const Vector lam = W * sech_v.asDiagonal() * Winv * init.lambda0;
    ClosureState st;
    st.t = t;
    st.lambda_hat = lam;
    st.a_hat = C * lam;
    st.G_hat = G;
    st.entropy = -0.5 * lam.dot(C * lam);
    st.entropy_rate = eps * eps * lam.dot(C * (G * (D * lam)));
    sol.trajectory.states.push_back(std::move(st));
    sol.Psi.push_back(Psi);
    sol.Khat.push_back(Khat);
  }
  return sol;
}

// One-dimensional explicit Lax-Friedrichs grid for the value function.
struct HJGrid {
  double lambda_min = -1.0;
  double lambda_max = 1.0;
  long n_points = 201;
  double dt = 1e-4;
  double dissipation = 0.0;  // artificial viscosity
  double penalty_b = 1e3;    // initial-data quadratic penalty
  double cfl_safety = 0.45;

  HJGrid(double lo, double hi, long n, double dt_, double nu, double b,
         double safety = 0.45)
      : lambda_min(lo),
        lambda_max(hi),
        n_points(n),
        dt(dt_),
        dissipation(nu),
        penalty_b(b),
        cfl_safety(safety) {
    if (!(hi > lo)) throw Error("HJGrid: lambda_max must exceed lambda_min");
    if (n < 5) throw Error("HJGrid: need at least 5 points");
    if (dt <= 0.0) throw Error("HJGrid: dt must be positive");
    if (nu <= 0.0) throw Error("HJGrid: dissipation must be positive");
    if (b <= 0.0) throw Error("HJGrid: penalty_b must be positive");
    const double h = dx();
    if (dt > safety * h * h / nu)
      throw Error("HJGrid: CFL violated, dt must be at most " +
                  std::to_string(safety * h * h / nu) +
                  " for this spacing and dissipation");
  }
  double dx() const { return (lambda_max - lambda_min) / (n_points - 1); }
};

struct HJSolution {
  Vector lambdas;
  Vector times;
  Vector minimizer;
  Vector curvature;
  Matrix surface;  // times x nodes
  long total_steps = 0;
};

// Explicit first-order march of v_t + H(lambda, v_lambda) = dissipation * v_ll
// with outflow extrapolation at the edges. The solver sub-steps internally
// whenever the current slopes demand a smaller stable step than the nominal
// recording dt; the quoted CFL bound is enforced at construction.
inline HJSolution hj_solve_1d(MomentProvider& provider, double epsilon, const HJGrid& grid,
                              double lambda0, double t1) {
  if (provider.dim() != 1) throw Error("hj_solve_1d: provider must be one-dimensional");
  if (t1 <= 0.0) throw Error("hj_solve_1d: t1 must be positive");
  const long n = grid.n_points;
  const double h = grid.dx();
  const double eps2 = epsilon * epsilon;

  Vector lam(n), c_node(n), f_node(n), w_node(n);
  for (long j = 0; j < n; ++j) {
    lam[j] = grid.lambda_min + j * h;
    Vector l1(1);
    l1[0] = lam[j];
    const MomentSet ms = provider.moments(l1);
    c_node[j] = ms.C(0, 0);
    if (c_node[j] <= 0.0) throw Error("hj_solve_1d: nonpositive covariance at a node");
    f_node[j] = ms.drift[0] / c_node[j];
    w_node[j] = ms.w;
  }

  Vector v(n);
  for (long j = 0; j < n; ++j)
    v[j] = 0.5 * grid.penalty_b * (lam[j] - lambda0) * (lam[j] - lambda0);

  const long n_rec = std::max<long>(1, std::llround(std::ceil(t1 / grid.dt - 1e-9)));
  HJSolution sol;
  sol.lambdas = lam;
  sol.times.resize(n_rec + 1);
  sol.minimizer.resize(n_rec + 1);
  sol.curvature.resize(n_rec + 1);
  sol.surface.resize(n_rec + 1, n);

  Vector mu(n), vn(n);
  auto slopes = [&](const Vector& u) {
    for (long j = 1; j + 1 < n; ++j) mu[j] = (u[j + 1] - u[j - 1]) / (2.0 * h);
    mu[0] = (u[1] - u[0]) / h;          // ghost v[-1] = 2 v0 - v1
    mu[n - 1] = (u[n - 1] - u[n - 2]) / h;
  };
  auto record = [&](long rec, double t) {
    sol.times[rec] = t;
    sol.surface.row(rec) = v.transpose();
    long jstar = 1;
    for (long j = 1; j + 1 < n; ++j)
      if (v[j] < v[jstar]) jstar = j;
    if (v[0] <= v[jstar] || v[n - 1] <= v[jstar])
      throw DomainTooSmallError(
          "hj_solve_1d: value minimizer reached the boundary at t=" + std::to_string(t) +
          "; enlarge the lambda range");
    const double d2 = v[jstar - 1] - 2.0 * v[jstar] + v[jstar + 1];
    if (d2 > 0.0) {
      sol.minimizer[rec] = lam[jstar] + 0.5 * h * (v[jstar - 1] - v[jstar + 1]) / d2;
      sol.curvature[rec] = d2 / (h * h);
    } else {
      sol.minimizer[rec] = lam[jstar];
      sol.curvature[rec] = 0.0;
    }
  };

  record(0, 0.0);
  double t = 0.0;
  for (long rec = 1; rec <= n_rec; ++rec) {
    const double t_target = std::min(rec * grid.dt, t1);
    while (t < t_target - 1e-15 * t1) {
      slopes(v);
      double alpha = 0.0;
      for (long j = 0; j < n; ++j)
        alpha = std::max(alpha, std::abs(mu[j] / c_node[j] + f_node[j]));
      const double nu_eff = std::max(grid.dissipation, 0.5 * alpha * h);
      const double dt_stable = grid.cfl_safety * h * h / nu_eff;
      const double dt_step = std::min(dt_stable, t_target - t);
      for (long j = 0; j < n; ++j) {
        const double ham =
            0.5 * mu[j] * mu[j] / c_node[j] + f_node[j] * mu[j] - eps2 * w_node[j];
        const double lap =
            j == 0 || j == n - 1
                ? 0.0  // linear extrapolation ghost: second difference vanishes
                : (v[j + 1] - 2.0 * v[j] + v[j - 1]) / (h * h);
        vn[j] = v[j] + dt_step * (-ham + nu_eff * lap);
      }
      v.swap(vn);
      t += dt_step;
      ++sol.total_steps;
    }
    t = t_target;
    record(rec, t);
  }
  return sol;
}

// Scaled-variance fit of the model to a resolved reference over a window.
struct EpsilonFit {
  double epsilon_star = 0.0;
  double objective = 0.0;
  std::pair<double, double> bracket{0.0, 0.0};
  long evaluations = 0;
  std::vector<std::pair<double, double>> history;
  bool unimodal_warning = false;
};

// Golden-section minimization of a scalar objective over [lo, hi].
inline EpsilonFit tune_epsilon(const std::function<double(double)>& objective, double lo,
                               double hi, double tol = 1e-3) {
  if (!(hi > lo)) throw Error("tune_epsilon: invalid bracket");
  EpsilonFit fit;
  fit.bracket = {lo, hi};
  auto eval = [&](double x) {
    const double y = objective(x);
    ++fit.evaluations;
    fit.history.emplace_back(x, y);
    return y;
  };
  // Coarse unimodality probe across the bracket.
  const double flo = eval(lo), fhi = eval(hi);
  const double fmid = eval(0.5 * (lo + hi));
  if (fmid >= std::min(flo, fhi)) fit.unimodal_warning = true;

  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = eval(x1), f2 = eval(x2);
  while (b - a > tol) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = eval(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = eval(x2);
    }
  }
  fit.epsilon_star = f1 <= f2 ? x1 : x2;
  fit.objective = std::min(f1, f2);
  if (fit.epsilon_star - lo < 2.0 * tol || hi - fit.epsilon_star < 2.0 * tol)
    fit.unimodal_warning = true;
  return fit;
}

struct EntropySeries {
  Vector entropy;
  Vector rate;
};

// Entropy of the resolved reference attached through lambda_ex = C^{-1} a_ex,
// with a centered-difference production rate.
inline EntropySeries exact_entropy_series(const Matrix& C, const Vector& times,
                                          const Matrix& a_exact) {
  const long n_times = times.size();
  if (a_exact.rows() != n_times) throw Error("exact_entropy_series: shape mismatch");
  Eigen::LLT<Matrix> llt(C);
  if (llt.info() != Eigen::Success)
    throw Error("exact_entropy_series: C must be SPD");
  EntropySeries out;
  out.entropy.resize(n_times);
  out.rate.resize(n_times);
  for (long j = 0; j < n_times; ++j) {
    const Vector a = a_exact.row(j).transpose();
    out.entropy[j] = -0.5 * a.dot(llt.solve(a));
  }
  if (n_times < 2) {
    out.rate.setZero();
    return out;
  }
  for (long j = 0; j < n_times; ++j) {
    if (j == 0)
      out.rate[j] = (out.entropy[1] - out.entropy[0]) / (times[1] - times[0]);
    else if (j == n_times - 1)
      out.rate[j] = (out.entropy[j] - out.entropy[j - 1]) / (times[j] - times[j - 1]);
    else
      out.rate[j] = (out.entropy[j + 1] - out.entropy[j - 1]) / (times[j + 1] - times[j - 1]);
  }
  return out;
}

}  // namespace qecl
