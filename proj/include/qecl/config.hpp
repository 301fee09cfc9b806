#pragma once

#include "qecl/io.hpp"

namespace qecl {

struct ValidationError : Error {
  using Error::Error;
};

namespace cfgdetail {

inline void check_keys(const Json& obj, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!obj.is_object()) throw ValidationError(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ValidationError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
inline T require(const Json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key))
    throw ValidationError(where + ": missing required key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const std::exception&) {
    throw ValidationError(where + ": key '" + std::string(key) + "' has the wrong type");
  }
}

template <class T>
inline T value_or(const Json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const std::exception&) {
    throw ValidationError(where + ": key '" + std::string(key) + "' has the wrong type");
  }
}

}  // namespace cfgdetail

struct SystemConfig {
  std::string name;
  long n = 1;
  double coupling = 1.0;
  double pinning = 0.0;
  double quartic = 0.0;
};

struct ObservableConfig {
  std::string type;  // "q", "p", "q_squared"
  long site = 1;
  double center = 0.0;
  bool center_from_equilibrium = false;
};

struct EnsembleConfig {
  double beta = 1.0;
  long count = 100000;
  bool analytic_gaussian = false;
  SamplerSpec sampler{};
  std::string cache_out;
  std::string cache_in;
  long center_presample = 20000;
};

struct MatrixSource {
  std::string kind = "estimate";  // "estimate", "analytic", "file"
  std::string file;
};

struct ClosureSection {
  ClosureConfig cfg;
  Vector lambda0;
  std::optional<Matrix> M0;
  bool fully_specified = false;
  MatrixSource matrices;
  ProviderOptions provider{};
};

struct ResolveSection {
  long n_traj = 1024;
  double dt = 0.01;
  double t1 = 10.0;
  double dt_out = 0.1;
  double drift_tol = 1e-4;
};

struct TuneSection {
  double lo = 1e-3;
  double hi = 1.0;
  double tol = 1e-3;
  double window_lo = 0.0;
  double window_hi = std::numeric_limits<double>::infinity();
  std::string resolved_path;
};

struct HJSection {
  double lambda_min = -1.0;
  double lambda_max = 1.0;
  long n_points = 201;
  double dt = 1e-4;
  double dissipation = 1e-3;
  double penalty_b = 1e3;
  double cfl_safety = 0.45;
  double t1 = 1.0;
  double lambda0 = 0.0;
  double epsilon = 1.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SystemConfig system;
  std::vector<ObservableConfig> observables;
  EnsembleConfig ensemble;
  std::optional<ClosureSection> closure;
  std::optional<ResolveSection> resolve;
  std::optional<TuneSection> tune;
  std::optional<HJSection> hj;
  std::string canonical;  // sorted-key dump used for hashing
};

inline RunConfig parse_config(const Json& root) {
  using namespace cfgdetail;
  check_keys(root, {"seed", "system", "observables", "ensemble", "closure", "resolve",
                    "tune", "hj"},
             "config");
  RunConfig rc;
  rc.seed = require<std::uint64_t>(root, "seed", "config");

  const Json& sys = root.contains("system") ? root.at("system")
                                            : throw ValidationError("config: missing 'system'");
  check_keys(sys, {"name", "n", "coupling", "pinning", "quartic"}, "system");
  rc.system.name = require<std::string>(sys, "name", "system");
  if (rc.system.name != "harmonic_oscillator" && rc.system.name != "harmonic_chain" &&
      rc.system.name != "fpu_chain")
    throw ValidationError("system: unknown name '" + rc.system.name +
                          "' (harmonic_oscillator, harmonic_chain, fpu_chain)");
  rc.system.n = value_or<long>(sys, "n", rc.system.name == "harmonic_oscillator" ? 1 : 0,
                               "system");
  if (rc.system.n < 1) throw ValidationError("system: 'n' must be a positive integer");
  if (rc.system.name == "harmonic_oscillator" && rc.system.n != 1)
    throw ValidationError("system: harmonic_oscillator has n=1");
  rc.system.coupling = value_or<double>(sys, "coupling", 1.0, "system");
  rc.system.pinning = value_or<double>(sys, "pinning", 0.0, "system");
  if (rc.system.name == "fpu_chain")
    rc.system.quartic = require<double>(sys, "quartic", "system");
  else if (sys.contains("quartic"))
    throw ValidationError("system: 'quartic' applies to fpu_chain only");

  if (!root.contains("observables") || !root.at("observables").is_array() ||
      root.at("observables").empty())
    throw ValidationError("config: 'observables' must be a nonempty array");
  for (const auto& jo : root.at("observables")) {
    check_keys(jo, {"type", "site", "center"}, "observables[]");
    ObservableConfig oc;
    oc.type = require<std::string>(jo, "type", "observables[]");
    if (oc.type != "q" && oc.type != "p" && oc.type != "q_squared")
      throw ValidationError("observables[]: unknown type '" + oc.type +
                            "' (q, p, q_squared)");
    oc.site = require<long>(jo, "site", "observables[]");
    if (oc.site < 1 || oc.site > rc.system.n)
      throw ValidationError("observables[]: site " + std::to_string(oc.site) +
                            " out of range 1.." + std::to_string(rc.system.n));
    if (jo.contains("center")) {
      if (oc.type != "q_squared")
        throw ValidationError("observables[]: 'center' applies to q_squared only");
      if (jo.at("center").is_string()) {
        if (jo.at("center").get<std::string>() != "equilibrium")
          throw ValidationError("observables[]: 'center' must be a number or \"equilibrium\"");
        oc.center_from_equilibrium = true;
      } else {
        oc.center = jo.at("center").get<double>();
      }
    }
    rc.observables.push_back(oc);
  }

  const Json& ens = root.contains("ensemble")
                        ? root.at("ensemble")
                        : throw ValidationError("config: missing 'ensemble'");
  check_keys(ens, {"beta", "count", "analytic_gaussian", "sampler", "cache", "from_cache",
                   "center_presample"},
             "ensemble");
  rc.ensemble.beta = require<double>(ens, "beta", "ensemble");
  if (rc.ensemble.beta <= 0.0) throw ValidationError("ensemble: beta must be positive");
  rc.ensemble.count = value_or<long>(ens, "count", 100000, "ensemble");
  if (rc.ensemble.count < 10) throw ValidationError("ensemble: count must be at least 10");
  rc.ensemble.analytic_gaussian = value_or<bool>(ens, "analytic_gaussian", false, "ensemble");
  if (ens.contains("sampler")) {
    const Json& sp = ens.at("sampler");
    check_keys(sp, {"burn_in", "thinning", "proposal_scale", "n_chains"}, "ensemble.sampler");
    rc.ensemble.sampler.burn_in = value_or<long>(sp, "burn_in", 10000, "ensemble.sampler");
    rc.ensemble.sampler.thinning = value_or<long>(sp, "thinning", 10, "ensemble.sampler");
    rc.ensemble.sampler.proposal_scale =
        value_or<double>(sp, "proposal_scale", 0.15, "ensemble.sampler");
    rc.ensemble.sampler.n_chains = value_or<long>(sp, "n_chains", 4, "ensemble.sampler");
    if (rc.ensemble.sampler.burn_in < 0 || rc.ensemble.sampler.thinning < 1 ||
        rc.ensemble.sampler.proposal_scale <= 0.0 || rc.ensemble.sampler.n_chains < 1)
      throw ValidationError("ensemble.sampler: invalid sampler parameters");
  }
  rc.ensemble.cache_out = value_or<std::string>(ens, "cache", "", "ensemble");
  rc.ensemble.cache_in = value_or<std::string>(ens, "from_cache", "", "ensemble");
  rc.ensemble.center_presample =
      value_or<long>(ens, "center_presample", 20000, "ensemble");
  if (rc.ensemble.center_presample < 10)
    throw ValidationError("ensemble: center_presample must be at least 10");

  if (root.contains("closure")) {
    const Json& cl = root.at("closure");
    check_keys(cl,
               {"regime", "epsilon", "scheme", "dt", "t0", "t1", "record_stride",
                "switch_threshold", "lambda0", "M0", "fully_specified", "matrices",
                "provider", "adapt_rtol", "adapt_atol"},
               "closure");
    ClosureSection cs;
    cs.cfg.regime = require<std::string>(cl, "regime", "closure");
    const bool known_regime =
        cs.cfg.regime == "near_G" || cs.cfg.regime == "near_M" ||
        cs.cfg.regime == "far_local_quadratic" || cs.cfg.regime == "adiabatic" ||
        cs.cfg.regime == "even_analytic";
    if (!known_regime)
      throw ValidationError("closure: unknown regime '" + cs.cfg.regime + "'");
    cs.cfg.epsilon = cs.cfg.regime == "adiabatic"
                         ? value_or<double>(cl, "epsilon", 0.0, "closure")
                         : require<double>(cl, "epsilon", "closure");
    cs.cfg.scheme = value_or<std::string>(cl, "scheme", "rk4", "closure");
    cs.cfg.dt = value_or<double>(cl, "dt", 0.0, "closure");
    cs.cfg.t0 = value_or<double>(cl, "t0", 0.0, "closure");
    cs.cfg.t1 = require<double>(cl, "t1", "closure");
    cs.cfg.record_stride = value_or<long>(cl, "record_stride", 1, "closure");
    cs.cfg.switch_threshold = value_or<double>(cl, "switch_threshold", 0.05, "closure");
    cs.cfg.adapt_rtol = value_or<double>(cl, "adapt_rtol", 1e-9, "closure");
    cs.cfg.adapt_atol = value_or<double>(cl, "adapt_atol", 1e-12, "closure");
    cs.lambda0 = vector_from_json(
        cl.contains("lambda0") ? cl.at("lambda0")
                               : throw ValidationError("closure: missing 'lambda0'"),
        "closure.lambda0");
    if (cs.lambda0.size() != static_cast<Eigen::Index>(rc.observables.size()))
      throw ValidationError("closure: lambda0 length must match the observable count");
    if (cl.contains("M0")) cs.M0 = matrix_from_json(cl.at("M0"), "closure.M0");
    cs.fully_specified = value_or<bool>(cl, "fully_specified", false, "closure");
    if (cl.contains("matrices")) {
      const Json& ms = cl.at("matrices");
      if (ms.is_string()) {
        cs.matrices.kind = ms.get<std::string>();
        if (cs.matrices.kind != "estimate" && cs.matrices.kind != "analytic")
          throw ValidationError("closure.matrices: use \"estimate\", \"analytic\", or {\"file\": path}");
      } else {
        check_keys(ms, {"file"}, "closure.matrices");
        cs.matrices.kind = "file";
        cs.matrices.file = require<std::string>(ms, "file", "closure.matrices");
        if (!std::filesystem::exists(cs.matrices.file))
          throw ValidationError("closure.matrices: file '" + cs.matrices.file +
                                "' does not exist");
      }
    }
    if (cl.contains("provider")) {
      const Json& pv = cl.at("provider");
      check_keys(pv, {"cache_radius", "fd_step", "ess_floor", "allow_resample", "count"},
                 "closure.provider");
      cs.provider.cache_radius =
          value_or<double>(pv, "cache_radius", 1e-3, "closure.provider");
      cs.provider.fd_step = value_or<double>(pv, "fd_step", 1e-3, "closure.provider");
      cs.provider.ess_floor = value_or<double>(pv, "ess_floor", 0.05, "closure.provider");
      cs.provider.allow_resample =
          value_or<bool>(pv, "allow_resample", true, "closure.provider");
      cs.provider.resample_count = value_or<long>(pv, "count", 0, "closure.provider");
      if (cs.provider.cache_radius <= 0.0 || cs.provider.fd_step <= 0.0 ||
          cs.provider.ess_floor <= 0.0 || cs.provider.ess_floor >= 1.0)
        throw ValidationError("closure.provider: invalid provider parameters");
    }
    rc.closure = std::move(cs);
  }

  if (root.contains("resolve")) {
    const Json& rs = root.at("resolve");
    check_keys(rs, {"n_traj", "dt", "t1", "dt_out", "drift_tol"}, "resolve");
    ResolveSection r;
    r.n_traj = require<long>(rs, "n_traj", "resolve");
    r.dt = require<double>(rs, "dt", "resolve");
    r.t1 = require<double>(rs, "t1", "resolve");
    r.dt_out = require<double>(rs, "dt_out", "resolve");
    r.drift_tol = value_or<double>(rs, "drift_tol", 1e-4, "resolve");
    if (r.n_traj < 1 || r.dt <= 0.0 || r.t1 <= 0.0 || r.dt_out <= 0.0 ||
        r.drift_tol <= 0.0)
      throw ValidationError("resolve: parameters must be positive");
    if (std::abs(std::llround(r.dt_out / r.dt) * r.dt - r.dt_out) > 1e-9 * r.dt_out)
      throw ValidationError("resolve: dt_out must be an integer multiple of dt");
    rc.resolve = r;
  }

  if (root.contains("tune")) {
    const Json& tn = root.at("tune");
    check_keys(tn, {"bracket", "tol", "window", "resolved"}, "tune");
    TuneSection t;
    const Vector br = vector_from_json(
        tn.contains("bracket") ? tn.at("bracket")
                               : throw ValidationError("tune: missing 'bracket'"),
        "tune.bracket");
    if (br.size() != 2 || !(br[1] > br[0]) || br[0] <= 0.0)
      throw ValidationError("tune: bracket must be [lo, hi] with 0 < lo < hi");
    t.lo = br[0];
    t.hi = br[1];
    t.tol = value_or<double>(tn, "tol", 1e-3, "tune");
    if (tn.contains("window")) {
      const Vector win = vector_from_json(tn.at("window"), "tune.window");
      if (win.size() != 2 || !(win[1] > win[0]))
        throw ValidationError("tune: window must be [lo, hi] with lo < hi");
      t.window_lo = win[0];
      t.window_hi = win[1];
    }
    t.resolved_path = value_or<std::string>(tn, "resolved", "", "tune");
    if (!t.resolved_path.empty() && !std::filesystem::exists(t.resolved_path))
      throw ValidationError("tune: resolved file '" + t.resolved_path + "' does not exist");
    rc.tune = t;
  }

  if (root.contains("hj")) {
    const Json& hj = root.at("hj");
    check_keys(hj,
               {"lambda_min", "lambda_max", "n_points", "dt", "dissipation", "penalty_b",
                "cfl_safety", "t1", "lambda0", "epsilon"},
               "hj");
    HJSection h;
    h.lambda_min = require<double>(hj, "lambda_min", "hj");
    h.lambda_max = require<double>(hj, "lambda_max", "hj");
    h.n_points = require<long>(hj, "n_points", "hj");
    h.dt = require<double>(hj, "dt", "hj");
    h.dissipation = require<double>(hj, "dissipation", "hj");
    h.penalty_b = require<double>(hj, "penalty_b", "hj");
    h.cfl_safety = value_or<double>(hj, "cfl_safety", 0.45, "hj");
    h.t1 = require<double>(hj, "t1", "hj");
    h.lambda0 = require<double>(hj, "lambda0", "hj");
    h.epsilon = require<double>(hj, "epsilon", "hj");
    rc.hj = h;
    // Constructing the grid runs its own validation, including the CFL bound.
    HJGrid probe(h.lambda_min, h.lambda_max, h.n_points, h.dt, h.dissipation, h.penalty_b,
                 h.cfl_safety);
    (void)probe;
  }

  rc.canonical = root.dump();
  return rc;
}

inline RunConfig load_config(const std::string& path) {
  return parse_config(read_json_file(path));
}

inline HamiltonianSystem make_system(const SystemConfig& sc) {
  if (sc.name == "harmonic_oscillator") return make_harmonic_oscillator();
  if (sc.name == "harmonic_chain")
    return make_harmonic_chain(sc.n, sc.coupling, sc.pinning);
  if (sc.name == "fpu_chain") return make_fpu_chain(sc.n, sc.quartic);
  throw ValidationError("make_system: unknown system '" + sc.name + "'");
}

// Builds the observable set; q_squared centers flagged "equilibrium" take the
// provided per-observable values (computed from an equilibrium pre-sample).
inline ObservableSet make_observables(const std::vector<ObservableConfig>& obs, long n,
                                      const std::vector<double>* eq_centers = nullptr) {
  std::vector<Observable> items;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const auto& oc = obs[i];
    if (oc.type == "q") {
      items.push_back(obs_coordinate(n, oc.site));
    } else if (oc.type == "p") {
      items.push_back(obs_momentum(n, oc.site));
    } else {
      double center = oc.center;
      if (oc.center_from_equilibrium) {
        if (!eq_centers)
          throw Error("make_observables: equilibrium centers not yet computed");
        center = (*eq_centers)[i];
      }
      items.push_back(obs_coordinate_square(n, oc.site, center));
    }
  }
  return ObservableSet(std::move(items));
}

// Exact equilibrium matrices for linear observables on a quadratic system:
// with selection A = U z and LA = V z under the Gaussian with covariance
// Sigma = diag((beta K)^-1, I/beta), every coefficient matrix is closed-form.
inline void analytic_gaussian_matrices(const HamiltonianSystem& sys,
                                       const std::vector<ObservableConfig>& obs,
                                       double beta, Matrix& C, Matrix& J, Matrix& D) {
  if (!sys.quadratic_stiffness)
    throw ValidationError("analytic matrices require a quadratic system");
  const Matrix& K = *sys.quadratic_stiffness;
  const long n = sys.n;
  const long m = static_cast<long>(obs.size());
  Matrix U = Matrix::Zero(m, 2 * n);
  Matrix V = Matrix::Zero(m, 2 * n);
  for (long i = 0; i < m; ++i) {
    const long s = obs[i].site - 1;
    if (obs[i].type == "q") {
      U(i, s) = 1.0;
      V(i, n + s) = 1.0;  // d q_s / dt = p_s
    } else if (obs[i].type == "p") {
      U(i, n + s) = 1.0;
      V.row(i).head(n) = -K.row(s);  // d p_s / dt = -(K q)_s
    } else {
      throw ValidationError(
          "analytic matrices require linear observables (types q and p)");
    }
  }
  Matrix Sigma = Matrix::Zero(2 * n, 2 * n);
  Sigma.topLeftCorner(n, n) = spd_inverse(beta * K, "analytic_gaussian_matrices");
  Sigma.bottomRightCorner(n, n) = Matrix::Identity(n, n) / beta;
  C = symmetrized(U * Sigma * U.transpose());
  const Matrix X = V * Sigma * U.transpose();
  J = antisymmetrized(X);
  const Matrix cross = X * spd_inverse(C, "analytic_gaussian_matrices") * X.transpose();
  D = symmetrized(V * Sigma * V.transpose() - cross);
}

// Linear-independence diagnostic: condition number of the raw Gram matrix of
// observable values over a batch.
inline double observable_gram_condition(const BatchTable& t) {
  const Matrix gram =
      symmetrized(t.A * t.A.transpose() / static_cast<double>(t.count()));
  Eigen::SelfAdjointEigenSolver<Matrix> es(gram, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff();
  const double hi = es.eigenvalues().maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return hi / lo;
}

}  // namespace qecl
