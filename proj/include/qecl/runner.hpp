#pragma once

#include "qecl/config.hpp"

namespace qecl {

// Result of one CLI command: the summary JSON that was written to the output
// directory plus any sampler or diagnostic warnings to surface.
struct CommandResult {
  Json summary;
  std::vector<std::string> warnings;
};

namespace rundetail {

inline std::filesystem::path prepare_out(const std::string& out_dir) {
  std::filesystem::path p(out_dir);
  std::filesystem::create_directories(p);
  return p;
}

// The echoed config pins the run inputs; its hash goes into the manifest meta.
inline std::string write_config_echo(const RunConfig& rc,
                                     const std::filesystem::path& out) {
  std::ofstream f(out / "config_echo.json", std::ios::binary);
  if (!f) throw Error("cannot write " + (out / "config_echo.json").string());
  f << rc.canonical << "\n";
  f.close();
  return sha256_string(rc.canonical);
}

inline Json meta_for(const RunConfig& rc, const char* command,
                     const std::string& config_sha) {
  Json meta;
  meta["command"] = command;
  meta["seed"] = rc.seed;
  meta["config_sha256"] = config_sha;
  return meta;
}

inline EquilibriumSpec equilibrium_spec(const RunConfig& rc) {
  EquilibriumSpec spec;
  spec.beta = rc.ensemble.beta;
  spec.sampler = rc.ensemble.sampler;
  spec.analytic_gaussian = rc.ensemble.analytic_gaussian;
  return spec;
}

inline void append_warnings(std::vector<std::string>& sink,
                            const std::vector<std::string>& src) {
  sink.insert(sink.end(), src.begin(), src.end());
}

// Centers for q_squared observables flagged "equilibrium". Exact for quadratic
// systems under the analytic sampler, otherwise from a dedicated pre-sample.
inline std::vector<double> equilibrium_centers(const RunConfig& rc,
                                               const HamiltonianSystem& sys, int workers,
                                               std::vector<std::string>& warnings) {
  std::vector<double> centers(rc.observables.size(), 0.0);
  bool needed = false;
  for (const auto& oc : rc.observables)
    if (oc.center_from_equilibrium) needed = true;
  if (!needed) {
    for (std::size_t i = 0; i < rc.observables.size(); ++i)
      centers[i] = rc.observables[i].center;
    return centers;
  }
  if (rc.ensemble.analytic_gaussian && sys.quadratic_stiffness) {
    const Matrix Kinv = spd_inverse(rc.ensemble.beta * *sys.quadratic_stiffness,
                                    "equilibrium_centers");
    for (std::size_t i = 0; i < rc.observables.size(); ++i) {
      const auto& oc = rc.observables[i];
      centers[i] = oc.center_from_equilibrium ? Kinv(oc.site - 1, oc.site - 1) : oc.center;
    }
    return centers;
  }
  const SampleBatch pre =
      sample_equilibrium(sys, equilibrium_spec(rc), rc.ensemble.center_presample,
                         child_seed(rc.seed, "centering"), workers);
  append_warnings(warnings, pre.warnings);
  const Vector wgt = normalized_weights(pre.log_weights);
  for (std::size_t i = 0; i < rc.observables.size(); ++i) {
    const auto& oc = rc.observables[i];
    if (!oc.center_from_equilibrium) {
      centers[i] = oc.center;
      continue;
    }
    double mean = 0.0;
    for (long k = 0; k < pre.count(); ++k) {
      const double q = pre.points[k].q[oc.site - 1];
      mean += wgt[k] * q * q;
    }
    centers[i] = mean;
  }
  return centers;
}

inline SampleBatch obtain_batch(const RunConfig& rc, const HamiltonianSystem& sys,
                                int workers, std::vector<std::string>& warnings) {
  SampleBatch batch;
  if (!rc.ensemble.cache_in.empty()) {
    batch = load_batch(rc.ensemble.cache_in);
    if (std::abs(batch.beta - rc.ensemble.beta) > 1e-12 * std::abs(rc.ensemble.beta))
      throw ValidationError("cached batch beta " + std::to_string(batch.beta) +
                            " does not match ensemble beta");
    if (batch.lambda_tag.size() > 0 && batch.lambda_tag.cwiseAbs().maxCoeff() > 0.0)
      throw ValidationError("cached batch is not an equilibrium batch");
    if (batch.count() > 0 && batch.points[0].dof() != sys.n)
      throw ValidationError("cached batch dimension does not match the system");
  } else {
    batch = sample_equilibrium(sys, equilibrium_spec(rc), rc.ensemble.count,
                               child_seed(rc.seed, "equilibrium"), workers);
  }
  append_warnings(warnings, batch.warnings);
  if (!rc.ensemble.cache_out.empty()) save_batch(batch, rc.ensemble.cache_out);
  return batch;
}

// Near-equilibrium coefficient matrices from one of three sources.
struct NearMats {
  Matrix C, J, D;
  std::optional<NearEqMatrices> estimated;
  std::optional<Matrix> J_se;
  std::string source;
  double gram_condition = std::numeric_limits<double>::quiet_NaN();
};

inline NearMats load_matrices_file(const std::string& path, Eigen::Index m) {
  const Json j = read_json_file(path);
  NearMats out;
  out.source = "file:" + path;
  if (!j.contains("C") || !j.contains("J") || !j.contains("D"))
    throw ValidationError("matrices file '" + path + "' must contain C, J, and D");
  out.C = symmetrized(matrix_from_json(j.at("C"), "matrices C"));
  out.J = antisymmetrized(matrix_from_json(j.at("J"), "matrices J"));
  out.D = symmetrized(matrix_from_json(j.at("D"), "matrices D"));
  if (out.C.rows() != m)
    throw ValidationError("matrices file dimension " + std::to_string(out.C.rows()) +
                          " does not match the observable count " + std::to_string(m));
  if (j.contains("std_errors") && j.at("std_errors").contains("J"))
    out.J_se = matrix_from_json(j.at("std_errors").at("J"), "matrices std_errors.J");
  return out;
}

inline NearMats resolve_near_matrices(const RunConfig& rc, const HamiltonianSystem& sys,
                                      const ObservableSet& set,
                                      const MatrixSource& source, int workers,
                                      std::vector<std::string>& warnings) {
  const Eigen::Index m = static_cast<Eigen::Index>(rc.observables.size());
  if (source.kind == "analytic") {
    NearMats out;
    out.source = "analytic";
    analytic_gaussian_matrices(sys, rc.observables, rc.ensemble.beta, out.C, out.J, out.D);
    return out;
  }
  if (source.kind == "file") return load_matrices_file(source.file, m);

  const SampleBatch batch = obtain_batch(rc, sys, workers, warnings);
  const BatchTable table = make_batch_table(sys, set, batch);
  NearMats out;
  out.source = "estimate";
  out.gram_condition = observable_gram_condition(table);
  if (out.gram_condition > 1e12)
    throw DegenerateObservablesError(
        "observables are numerically linearly dependent (Gram condition " +
        std::to_string(out.gram_condition) + ")");
  if (out.gram_condition > 1e8)
    warnings.push_back("observable Gram condition is high: " +
                       std::to_string(out.gram_condition));
  out.estimated = near_eq_matrices_from_table(table);
  out.C = out.estimated->C;
  out.J = out.estimated->Jmat;
  out.D = out.estimated->D;
  out.J_se = out.estimated->std_errors.Jmat;
  return out;
}

inline Json matrices_json(const NearMats& mats, const RunConfig& rc,
                          const ObservableSet& set,
                          const std::vector<std::string>& warnings) {
  Json j;
  j["kind"] = "near_equilibrium_matrices";
  j["source"] = mats.source;
  Json ids = Json::array();
  for (const auto& obs : set.items) ids.push_back(obs.id);
  j["observable_ids"] = std::move(ids);
  j["beta"] = rc.ensemble.beta;
  j["seed"] = rc.seed;
  j["C"] = matrix_to_json(mats.C);
  j["J"] = matrix_to_json(mats.J);
  j["D"] = matrix_to_json(mats.D);
  if (mats.estimated) {
    const auto& e = *mats.estimated;
    j["D_alt"] = matrix_to_json(e.D_alt);
    j["ess"] = e.ess;
    j["gram_condition"] = mats.gram_condition;
    Json se;
    se["C"] = matrix_to_json(e.std_errors.C);
    se["J"] = matrix_to_json(e.std_errors.Jmat);
    se["D"] = matrix_to_json(e.std_errors.D);
    se["D_alt"] = matrix_to_json(e.std_errors.D_alt);
    se["D_gap"] = matrix_to_json(e.std_errors.D_gap);
    j["std_errors"] = std::move(se);
    j["fluctuation_dissipation_gap"] = matrix_to_json(Matrix(e.D - e.D_alt));
  }
  j["warnings"] = warnings;
  return j;
}

// Moment provider for the state-dependent regimes. Analytic and file sources
// define a linear-response Gaussian model; "estimate" runs on reweighted
// Monte Carlo batches. The batch is owned by the returned holder.
struct ProviderHolder {
  std::unique_ptr<MomentProvider> provider;
  std::optional<NearMats> mats;  // set for analytic and file sources
  MonteCarloMomentProvider* mc = nullptr;
};

inline ProviderHolder make_provider(const RunConfig& rc, const HamiltonianSystem& sys,
                                    const ObservableSet& set, const MatrixSource& source,
                                    const ProviderOptions& opts, int workers,
                                    std::vector<std::string>& warnings) {
  ProviderHolder h;
  if (source.kind == "analytic" || source.kind == "file") {
    NearMats mats = resolve_near_matrices(rc, sys, set, source, workers, warnings);
    const Matrix Omega = mats.J * spd_inverse(mats.C, "make_provider");
    h.provider = std::make_unique<AnalyticGaussianProvider>(mats.C, Omega, mats.D);
    h.mats = std::move(mats);
    return h;
  }
  SampleBatch batch = obtain_batch(rc, sys, workers, warnings);
  auto mc = std::make_unique<MonteCarloMomentProvider>(sys, set, equilibrium_spec(rc),
                                                       std::move(batch), opts, workers);
  h.mc = mc.get();
  h.provider = std::move(mc);
  return h;
}

inline Vector resolve_time_grid(const ResolveSection& rs) {
  const long n_out = std::llround(rs.t1 / rs.dt_out);
  if (n_out < 1) throw ValidationError("resolve: t1 must cover at least one dt_out");
  Vector t(n_out + 1);
  for (long j = 0; j <= n_out; ++j) t[j] = j * rs.dt_out;
  t[n_out] = rs.t1;
  return t;
}

inline Json trajectory_summary(const ClosureTrajectory& traj) {
  Json j;
  j["regime"] = traj.regime;
  j["epsilon"] = traj.epsilon;
  j["provenance"] = traj.provenance;
  j["n_records"] = traj.states.size();
  if (!traj.states.empty()) {
    j["entropy_initial"] = traj.states.front().entropy;
    j["entropy_final"] = traj.states.back().entropy;
    j["lambda_final"] = vector_to_json(traj.states.back().lambda_hat);
    j["a_final"] = vector_to_json(traj.states.back().a_hat);
  }
  for (std::size_t k = 0; k < traj.states.size(); ++k)
    if (traj.states[k].M_hat) {
      j["curvature_form_from_t"] = traj.states[k].t;
      break;
    }
  return j;
}

}  // namespace rundetail

inline CommandResult cmd_matrices(const RunConfig& rc, const std::string& out_dir,
                                  int workers = 1) {
  using namespace rundetail;
  std::vector<std::string> warnings;
  const HamiltonianSystem sys = make_system(rc.system);
  const auto centers = equilibrium_centers(rc, sys, workers, warnings);
  const ObservableSet set = make_observables(rc.observables, sys.n, &centers);
  MatrixSource source;
  if (rc.closure) source = rc.closure->matrices;
  if (source.kind == "file")
    throw ValidationError("the matrices command computes matrices; source 'file' "
                          "applies to reduce and tune only");
  const NearMats mats = resolve_near_matrices(rc, sys, set, source, workers, warnings);

  const auto out = prepare_out(out_dir);
  const Json summary = matrices_json(mats, rc, set, warnings);
  write_json_file((out / "matrices.json").string(), summary);
  const std::string sha = write_config_echo(rc, out);
  write_manifest(out, {"matrices.json", "config_echo.json"},
                 meta_for(rc, "matrices", sha));
  return {summary, warnings};
}

inline CommandResult cmd_reduce(const RunConfig& rc, const std::string& out_dir,
                                int workers = 1) {
  using namespace rundetail;
  if (!rc.closure) throw ValidationError("reduce requires a 'closure' section");
  const ClosureSection& cs = *rc.closure;
  std::vector<std::string> warnings;
  const HamiltonianSystem sys = make_system(rc.system);
  const auto centers = equilibrium_centers(rc, sys, workers, warnings);
  const ObservableSet set = make_observables(rc.observables, sys.n, &centers);

  InitialCondition init;
  init.lambda0 = cs.lambda0;
  init.M0 = cs.M0;
  init.fully_specified = cs.fully_specified;

  ClosureConfig cfg = cs.cfg;
  ClosureTrajectory traj;
  Json extras;
  std::optional<NearMats> mats;
  ProviderHolder holder;

  if (cfg.regime == "near_G" || cfg.regime == "near_M" || cfg.regime == "even_analytic") {
    mats = resolve_near_matrices(rc, sys, set, cs.matrices, workers, warnings);
    if (cfg.regime == "near_G") {
      traj = integrate_near_G(mats->C, mats->J, mats->D, cfg, init);
    } else if (cfg.regime == "near_M") {
      traj = integrate_near_M(mats->C, mats->J, mats->D, cfg, init);
    } else {
      const Matrix* j_se = mats->J_se ? &*mats->J_se : nullptr;
      EvenAnalyticSolution sol = analytic_even_solution(mats->C, mats->D, cfg, init, j_se);
      traj = std::move(sol.trajectory);
      extras["mode_matrix_W"] = matrix_to_json(sol.modes.W);
      extras["mode_rates_delta"] = vector_to_json(sol.modes.Delta);
      extras["plateau_times_tau"] = vector_to_json(sol.modes.plateau_times);
      if (cfg.epsilon > 0.0)
        extras["plateau_times_t"] =
            vector_to_json(Vector(sol.modes.plateau_times / cfg.epsilon));
      extras["transport_infinity"] = matrix_to_json(sol.transport_infinity);
    }
  } else if (cfg.regime == "far_local_quadratic" || cfg.regime == "adiabatic") {
    holder = make_provider(rc, sys, set, cs.matrices, cs.provider, workers, warnings);
    if (holder.mats) mats = holder.mats;
    traj = cfg.regime == "adiabatic" ? integrate_adiabatic(*holder.provider, cfg, init)
                                     : integrate_far(*holder.provider, cfg, init);
    if (holder.mc) extras["resamples"] = holder.mc->resamples();
  } else {
    throw UnsupportedSchemeError("reduce: unhandled regime " + cfg.regime);
  }

  const auto out = prepare_out(out_dir);
  write_trajectory_csv((out / "trajectory.csv").string(), traj);
  Json summary = trajectory_summary(traj);
  summary["scheme"] = cfg.scheme;
  summary["dt_nominal"] = detail::default_dt(cfg);
  summary["t0"] = cfg.t0;
  summary["t1"] = cfg.t1;
  summary["record_stride"] = cfg.record_stride;
  summary["lambda0"] = vector_to_json(cs.lambda0);
  summary["fully_specified"] = cs.fully_specified;
  summary["matrices_source"] = mats ? mats->source : std::string("estimate");
  summary["warnings"] = warnings;
  for (auto it = extras.begin(); it != extras.end(); ++it) summary[it.key()] = it.value();
  write_json_file((out / "reduce.json").string(), summary);
  std::vector<std::string> files{"trajectory.csv", "reduce.json", "config_echo.json"};
  if (mats) {
    write_json_file((out / "matrices.json").string(),
                    matrices_json(*mats, rc, set, warnings));
    files.insert(files.begin() + 2, "matrices.json");
  }
  const std::string sha = write_config_echo(rc, out);
  write_manifest(out, files, meta_for(rc, "reduce", sha));
  return {summary, warnings};
}

inline CommandResult cmd_resolve(const RunConfig& rc, const std::string& out_dir,
                                 int workers = 1) {
  using namespace rundetail;
  if (!rc.resolve) throw ValidationError("resolve requires a 'resolve' section");
  if (!rc.closure)
    throw ValidationError("resolve requires a 'closure' section for lambda0");
  const ResolveSection& rs = *rc.resolve;
  std::vector<std::string> warnings;
  const HamiltonianSystem sys = make_system(rc.system);
  const auto centers = equilibrium_centers(rc, sys, workers, warnings);
  const ObservableSet set = make_observables(rc.observables, sys.n, &centers);

  const Vector t_grid = resolve_time_grid(rs);
  const ResolvedRun run =
      resolve_ensemble(sys, set, rc.closure->lambda0, equilibrium_spec(rc), rs.n_traj,
                       rs.dt, t_grid, rc.seed, workers, rs.drift_tol);
  append_warnings(warnings, run.warnings);

  const auto out = prepare_out(out_dir);
  write_resolved_csv((out / "resolved.csv").string(), run);
  Json summary;
  Json ids = Json::array();
  for (const auto& obs : set.items) ids.push_back(obs.id);
  summary["observable_ids"] = std::move(ids);
  summary["lambda0"] = vector_to_json(rc.closure->lambda0);
  summary["n_traj"] = run.n_traj;
  summary["dt"] = rs.dt;
  summary["dt_out"] = rs.dt_out;
  summary["t1"] = rs.t1;
  summary["beta"] = rc.ensemble.beta;
  summary["energy_drift"] = run.energy_drift;
  summary["drift_tol"] = rs.drift_tol;
  summary["seed"] = rc.seed;
  summary["warnings"] = warnings;
  write_json_file((out / "resolve.json").string(), summary);
  const std::string sha = write_config_echo(rc, out);
  write_manifest(out, {"resolved.csv", "resolve.json", "config_echo.json"},
                 meta_for(rc, "resolve", sha));
  return {summary, warnings};
}

inline CommandResult cmd_tune(const RunConfig& rc, const std::string& out_dir,
                              int workers = 1) {
  using namespace rundetail;
  if (!rc.closure) throw ValidationError("tune requires a 'closure' section");
  if (!rc.tune) throw ValidationError("tune requires a 'tune' section");
  const ClosureSection& cs = *rc.closure;
  const TuneSection& ts = *rc.tune;
  if (cs.cfg.regime == "adiabatic")
    throw ValidationError("tune: the adiabatic closure does not depend on epsilon");
  std::vector<std::string> warnings;
  const HamiltonianSystem sys = make_system(rc.system);
  const auto centers = equilibrium_centers(rc, sys, workers, warnings);
  const ObservableSet set = make_observables(rc.observables, sys.n, &centers);
  const Eigen::Index m = static_cast<Eigen::Index>(set.size());

  // Reference data: either a resolved-run CSV or a fresh resolved ensemble.
  ResolvedRun resolved;
  if (!ts.resolved_path.empty()) {
    resolved = read_resolved_csv(ts.resolved_path);
    if (resolved.a_exact.cols() != m)
      throw ValidationError("tune: resolved file has " +
                            std::to_string(resolved.a_exact.cols()) +
                            " observables, config has " + std::to_string(m));
  } else {
    if (!rc.resolve)
      throw ValidationError("tune requires a 'resolve' section or tune.resolved");
    const Vector t_grid = resolve_time_grid(*rc.resolve);
    resolved = resolve_ensemble(sys, set, cs.lambda0, equilibrium_spec(rc),
                                rc.resolve->n_traj, rc.resolve->dt, t_grid, rc.seed,
                                workers, rc.resolve->drift_tol);
    append_warnings(warnings, resolved.warnings);
  }
  const long n_rows = resolved.times.size();
  if (n_rows < 2) throw ValidationError("tune: resolved data needs at least two rows");
  const double dt_out = resolved.times[1] - resolved.times[0];
  for (long j = 1; j < n_rows; ++j)
    if (std::abs(resolved.times[j] - resolved.times[j - 1] - dt_out) > 1e-9 * dt_out)
      throw ValidationError("tune: resolved time grid must be uniform");
  if (std::abs(resolved.times[0]) > 1e-12)
    throw ValidationError("tune: resolved time grid must start at t=0");
  const double t1 = resolved.times[n_rows - 1];

  // Match the closure record grid to the resolved grid exactly.
  const double dt_base =
      cs.cfg.dt > 0.0 ? cs.cfg.dt : std::min(0.01, 0.01 / std::max(1.0, ts.hi));
  const long k = std::max<long>(1, std::llround(std::ceil(dt_out / dt_base - 1e-9)));
  ClosureConfig cfg = cs.cfg;
  cfg.t0 = 0.0;
  cfg.t1 = t1;
  cfg.dt = dt_out / static_cast<double>(k);
  cfg.record_stride = k;

  InitialCondition init;
  init.lambda0 = cs.lambda0;
  init.M0 = cs.M0;
  init.fully_specified = cs.fully_specified;

  std::optional<NearMats> mats;
  ProviderHolder holder;
  const bool constant_mats = cfg.regime == "near_G" || cfg.regime == "near_M" ||
                             cfg.regime == "even_analytic";
  if (constant_mats) {
    mats = resolve_near_matrices(rc, sys, set, cs.matrices, workers, warnings);
  } else {
    holder = make_provider(rc, sys, set, cs.matrices, cs.provider, workers, warnings);
    if (holder.mats) mats = holder.mats;
  }

  auto run_closure = [&](double eps) {
    ClosureConfig c = cfg;
    c.epsilon = eps;
    if (cfg.regime == "near_G") return integrate_near_G(mats->C, mats->J, mats->D, c, init);
    if (cfg.regime == "near_M") return integrate_near_M(mats->C, mats->J, mats->D, c, init);
    if (cfg.regime == "even_analytic") {
      const Matrix* j_se = mats->J_se ? &*mats->J_se : nullptr;
      return analytic_even_solution(mats->C, mats->D, c, init, j_se).trajectory;
    }
    return integrate_far(*holder.provider, c, init);
  };

  // Relative L2 discrepancy against the resolved means inside the window.
  const double win_lo = ts.window_lo;
  const double win_hi = std::min(ts.window_hi, t1 + 1e-9);
  auto objective = [&](double eps) {
    ClosureTrajectory traj;
    try {
      traj = run_closure(eps);
    } catch (const SingularityError&) {
      return 1e50;  // blown-up candidate: heavily penalized, not fatal
    }
    if (static_cast<long>(traj.states.size()) != n_rows)
      throw Error("tune: closure record grid does not match the resolved grid");
    double num = 0.0, den = 0.0;
    long used = 0;
    for (long j = 0; j < n_rows; ++j) {
      const double t = resolved.times[j];
      if (t < win_lo - 1e-9 || t > win_hi) continue;
      const Vector a_ex = resolved.a_exact.row(j).transpose();
      num += (traj.states[j].a_hat - a_ex).squaredNorm();
      den += a_ex.squaredNorm();
      ++used;
    }
    if (used == 0) throw ValidationError("tune: no resolved rows inside the window");
    return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
  };

  const EpsilonFit fit = tune_epsilon(objective, ts.lo, ts.hi, ts.tol);
  if (fit.unimodal_warning)
    warnings.push_back("tune: objective may not be unimodal on the bracket");
  const ClosureTrajectory best = run_closure(fit.epsilon_star);

  const auto out = prepare_out(out_dir);
  write_resolved_csv((out / "resolved.csv").string(), resolved);
  write_trajectory_csv((out / "best_trajectory.csv").string(), best);
  {
    CsvWriter csv((out / "tune.csv").string(), {"epsilon", "objective"});
    for (const auto& [e, obj] : fit.history)
      csv.row({format_double(e), format_double(obj)});
  }
  Json summary;
  summary["epsilon_star"] = fit.epsilon_star;
  summary["objective"] = fit.objective;
  summary["bracket"] = Json::array({fit.bracket.first, fit.bracket.second});
  summary["tol"] = ts.tol;
  summary["evaluations"] = fit.evaluations;
  summary["unimodal_warning"] = fit.unimodal_warning;
  summary["window"] = Json::array({win_lo, std::min(win_hi, t1)});
  summary["regime"] = cfg.regime;
  summary["matrices_source"] = mats ? mats->source : std::string("estimate");
  summary["n_rows"] = n_rows;
  summary["warnings"] = warnings;
  write_json_file((out / "tune.json").string(), summary);
  std::vector<std::string> files{"tune.json", "tune.csv", "best_trajectory.csv",
                                 "resolved.csv", "config_echo.json"};
  if (mats) {
    write_json_file((out / "matrices.json").string(),
                    matrices_json(*mats, rc, set, warnings));
    files.push_back("matrices.json");
  }
  const std::string sha = write_config_echo(rc, out);
  write_manifest(out, files, meta_for(rc, "tune", sha));
  return {summary, warnings};
}

inline CommandResult cmd_verify(const RunConfig& rc, const std::string& out_dir,
                                int workers = 1) {
  using namespace rundetail;
  if (!rc.hj) throw ValidationError("verify requires an 'hj' section");
  const HJSection& hs = *rc.hj;
  if (rc.observables.size() != 1)
    throw ValidationError("verify: the value-surface check is one-dimensional; "
                          "configure exactly one observable");
  std::vector<std::string> warnings;
  const HamiltonianSystem sys = make_system(rc.system);
  const auto centers = equilibrium_centers(rc, sys, workers, warnings);
  const ObservableSet set = make_observables(rc.observables, sys.n, &centers);

  const long n_rec = std::llround(hs.t1 / hs.dt);
  if (std::abs(n_rec * hs.dt - hs.t1) > 1e-9 * hs.t1)
    throw ValidationError("hj: t1 must be an integer multiple of dt");

  MatrixSource source;
  ProviderOptions popts;
  if (rc.closure) {
    source = rc.closure->matrices;
    popts = rc.closure->provider;
  } else {
    bool linear = true;
    for (const auto& oc : rc.observables)
      if (oc.type == "q_squared") linear = false;
    source.kind = sys.quadratic_stiffness && linear ? "analytic" : "estimate";
  }
  ProviderHolder holder = make_provider(rc, sys, set, source, popts, workers, warnings);

  const HJGrid grid(hs.lambda_min, hs.lambda_max, hs.n_points, hs.dt, hs.dissipation,
                    hs.penalty_b, hs.cfl_safety);
  const HJSolution sol = hj_solve_1d(*holder.provider, hs.epsilon, grid, hs.lambda0, hs.t1);

  // Reference: the curvature-form trajectory started from the same quadratic
  // penalty, recorded on the same time grid.
  ClosureConfig cfg;
  cfg.regime = "far_local_quadratic";
  cfg.epsilon = hs.epsilon;
  cfg.scheme = "adaptive";
  cfg.dt = hs.dt;
  cfg.t0 = 0.0;
  cfg.t1 = hs.t1;
  cfg.record_stride = 1;
  InitialCondition init;
  init.lambda0 = Vector::Constant(1, hs.lambda0);
  Matrix M0(1, 1);
  M0(0, 0) = hs.penalty_b;
  init.M0 = M0;
  const ClosureTrajectory ref = integrate_far(*holder.provider, cfg, init);
  if (static_cast<long>(ref.states.size()) != sol.times.size())
    throw Error("verify: reference record grid does not match the surface grid");

  double lam_scale = 0.0, max_abs_lam = 0.0, max_rel_curv = 0.0;
  for (long r = 0; r < sol.times.size(); ++r) {
    const double lam_ref = ref.states[r].lambda_hat[0];
    lam_scale = std::max(lam_scale, std::abs(lam_ref));
    max_abs_lam = std::max(max_abs_lam, std::abs(sol.minimizer[r] - lam_ref));
    const double m_ref = (*ref.states[r].M_hat)(0, 0);
    max_rel_curv = std::max(max_rel_curv,
                            std::abs(sol.curvature[r] - m_ref) / std::max(1.0, m_ref));
  }
  const double rel_lam = lam_scale > 0.0 ? max_abs_lam / lam_scale : max_abs_lam;

  const auto out = prepare_out(out_dir);
  write_hj_csv((out / "hj.csv").string(), sol);
  const long surf_stride = std::max<long>(1, (sol.times.size() - 1) / 200);
  write_hj_surface_csv((out / "hj_surface.csv").string(), sol, surf_stride);
  write_trajectory_csv((out / "closure_reference.csv").string(), ref);
  Json summary;
  summary["epsilon"] = hs.epsilon;
  summary["lambda0"] = hs.lambda0;
  summary["t1"] = hs.t1;
  summary["grid"] = Json{{"lambda_min", hs.lambda_min},
                         {"lambda_max", hs.lambda_max},
                         {"n_points", hs.n_points},
                         {"dt", hs.dt},
                         {"dissipation", hs.dissipation},
                         {"penalty_b", hs.penalty_b},
                         {"cfl_safety", hs.cfl_safety}};
  summary["total_steps"] = sol.total_steps;
  summary["max_abs_minimizer_error"] = max_abs_lam;
  summary["max_rel_minimizer_error"] = rel_lam;
  summary["max_rel_curvature_error"] = max_rel_curv;
  summary["final_minimizer"] = sol.minimizer[sol.minimizer.size() - 1];
  summary["final_reference_lambda"] = ref.states.back().lambda_hat[0];
  summary["provider"] = holder.provider->provenance();
  summary["warnings"] = warnings;
  write_json_file((out / "verify.json").string(), summary);
  const std::string sha = write_config_echo(rc, out);
  write_manifest(out,
                 {"hj.csv", "hj_surface.csv", "closure_reference.csv", "verify.json",
                  "config_echo.json"},
                 meta_for(rc, "verify", sha));
  return {summary, warnings};
}

}  // namespace qecl
