#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <thread>
#include <vector>

#include "qecl/hamiltonian.hpp"
#include "qecl/rng.hpp"

namespace qecl {

struct LowOverlapError : Error {
  using Error::Error;
};
struct DegenerateObservablesError : Error {
  using Error::Error;
};

struct SamplerSpec {
  long burn_in = 10000;
  long thinning = 10;
  double proposal_scale = 0.15;
  long n_chains = 4;  // fixed chain layout; worker threads map over chains
};

struct EquilibriumSpec {
  double beta = 1.0;
  SamplerSpec sampler{};
  bool analytic_gaussian = false;
};

// Weighted sample of phase points. log_weights are relative to the batch's
// own target exp(lambda_tag^T A - beta H); an empty lambda_tag means the
// plain equilibrium. phi_base is the log-partition shift of that target
// relative to equilibrium (NaN when not tracked, e.g. direct resampling).
struct SampleBatch {
  std::vector<PhaseVector> points;
  Vector log_weights;
  Vector lambda_tag;
  double beta = 1.0;
  double phi_base = 0.0;
  std::uint64_t seed = 0;
  double ess = 0.0;
  std::vector<std::string> warnings;

  long count() const { return static_cast<long>(points.size()); }
};

inline double log_sum_exp(const Vector& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

inline Vector normalized_weights(const Vector& log_w) {
  Vector w = (log_w.array() - log_w.maxCoeff()).exp();
  w /= w.sum();
  return w;
}

inline double effective_sample_size(const Vector& log_w) {
  const Vector w = normalized_weights(log_w);
  return 1.0 / w.squaredNorm();
}

namespace detail {

// Random-walk Metropolis targeting exp(log_density). Chains are seeded from
// named sub-streams so the result is independent of the thread count.
inline void metropolis_chain(const std::function<double(const PhaseVector&)>& log_density,
                             Eigen::Index n, const SamplerSpec& sp, std::uint64_t root,
                             long chain, long keep, std::vector<PhaseVector>& out,
                             long offset, double& acceptance) {
  auto eng = make_engine(root, "sampler", static_cast<std::uint64_t>(chain));
  std::normal_distribution<double> gauss(0.0, 1.0);
  PhaseVector z = PhaseVector::zero(n);
  double ld = log_density(z);
  if (!std::isfinite(ld))
    throw Error("metropolis_chain: non-finite log density at the initial state");
  long accepted = 0, proposed = 0, kept = 0;
  const long total = sp.burn_in + (keep > 0 ? (keep - 1) * sp.thinning + 1 : 0);
  PhaseVector trial = PhaseVector::zero(n);
  for (long step = 0; step < total && kept < keep; ++step) {
    for (Eigen::Index i = 0; i < n; ++i) {
      trial.q[i] = z.q[i] + sp.proposal_scale * gauss(eng);
      trial.p[i] = z.p[i] + sp.proposal_scale * gauss(eng);
    }
    const double ld_trial = log_density(trial);
    bool accept = false;
    if (std::isfinite(ld_trial)) {
      const double u = std::uniform_real_distribution<double>(0.0, 1.0)(eng);
      accept = std::log(u) < ld_trial - ld;
    }
    if (step >= sp.burn_in) {
      ++proposed;
      if (accept) ++accepted;
    }
    if (accept) {
      z = trial;
      ld = ld_trial;
    }
    if (step >= sp.burn_in && (step - sp.burn_in) % sp.thinning == 0) {
      out[offset + kept] = z;
      ++kept;
    }
  }
  acceptance = proposed > 0 ? static_cast<double>(accepted) / proposed : 1.0;
}

inline void run_chains(const std::function<void(long)>& body, long n_chains, int workers) {
  if (workers <= 1) {
    for (long c = 0; c < n_chains; ++c) body(c);
    return;
  }
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&, t] {
      for (long c = t; c < n_chains; c += workers) body(c);
    });
  for (auto& th : pool) th.join();
}

inline std::vector<long> chain_quotas(long count, long n_chains) {
  std::vector<long> quota(n_chains, count / n_chains);
  for (long c = 0; c < count % n_chains; ++c) ++quota[c];
  return quota;
}

inline SampleBatch sample_target(const HamiltonianSystem& sys,
                                 const std::function<double(const PhaseVector&)>& log_density,
                                 const SamplerSpec& sp, long count, std::uint64_t seed,
                                 int workers, const char* what) {
  SampleBatch batch;
  batch.seed = seed;
  batch.points.resize(count);
  const long n_chains = std::max<long>(1, sp.n_chains);
  const auto quota = chain_quotas(count, n_chains);
  std::vector<long> offsets(n_chains, 0);
  for (long c = 1; c < n_chains; ++c) offsets[c] = offsets[c - 1] + quota[c - 1];
  std::vector<double> acc(n_chains, 1.0);
  run_chains(
      [&](long c) {
        metropolis_chain(log_density, sys.n, sp, seed, c, quota[c], batch.points,
                         offsets[c], acc[c]);
      },
      n_chains, workers);
  for (long c = 0; c < n_chains; ++c)
    if (acc[c] < 0.1 || acc[c] > 0.9)
      batch.warnings.push_back(std::string(what) + ": chain " + std::to_string(c) +
                               " acceptance rate " + std::to_string(acc[c]) +
                               " outside [0.1, 0.9]; adjust proposal_scale");
  batch.log_weights = Vector::Zero(count);
  batch.ess = static_cast<double>(count);
  return batch;
}

}  // namespace detail

// Draw `count` equilibrium samples at inverse temperature beta. Quadratic
// systems sample the Gaussian exactly; otherwise random-walk Metropolis.
inline SampleBatch sample_equilibrium(const HamiltonianSystem& sys,
                                      const EquilibriumSpec& spec, long count,
                                      std::uint64_t seed, int workers = 1) {
  if (count < 1) throw Error("sample_equilibrium: count must be positive");
  const double beta = spec.beta;
  if (beta <= 0.0) throw Error("sample_equilibrium: beta must be positive");
  if (spec.analytic_gaussian) {
    if (!sys.quadratic_stiffness)
      throw Error("sample_equilibrium: analytic_gaussian requires a quadratic system");
    SampleBatch batch;
    batch.seed = seed;
    batch.beta = beta;
    batch.points.resize(count);
    Eigen::LLT<Matrix> llt(*sys.quadratic_stiffness);
    if (llt.info() != Eigen::Success)
      throw Error("sample_equilibrium: stiffness matrix is not positive definite");
    const long n_chains = std::max<long>(1, spec.sampler.n_chains);
    const auto quota = detail::chain_quotas(count, n_chains);
    std::vector<long> offsets(n_chains, 0);
    for (long c = 1; c < n_chains; ++c) offsets[c] = offsets[c - 1] + quota[c - 1];
    const double scale = 1.0 / std::sqrt(beta);
    detail::run_chains(
        [&](long c) {
          auto eng = make_engine(seed, "sampler", static_cast<std::uint64_t>(c));
          std::normal_distribution<double> gauss(0.0, 1.0);
          Vector xi(sys.n), eta(sys.n);
          for (long k = 0; k < quota[c]; ++k) {
            for (Eigen::Index i = 0; i < sys.n; ++i) {
              xi[i] = gauss(eng);
              eta[i] = gauss(eng);
            }
            batch.points[offsets[c] + k] =
                PhaseVector(scale * llt.matrixU().solve(xi), scale * eta);
          }
        },
        n_chains, workers);
    batch.log_weights = Vector::Zero(count);
    batch.ess = static_cast<double>(count);
    return batch;
  }
  auto ld = [&sys, beta](const PhaseVector& z) { return -beta * sys.energy(z); };
  SampleBatch batch =
      detail::sample_target(sys, ld, spec.sampler, count, seed, workers, "sample_equilibrium");
  batch.beta = beta;
  return batch;
}

// MCMC targeting the tilted density exp(lambda^T A - beta H). The resulting
// batch carries uniform weights and an unknown log-partition shift.
inline SampleBatch resample_quasi_equilibrium(const HamiltonianSystem& sys,
                                              const ObservableSet& set, const Vector& lambda,
                                              const EquilibriumSpec& spec, long count,
                                              std::uint64_t seed, int workers = 1) {
  if (lambda.size() != set.size())
    throw Error("resample_quasi_equilibrium: lambda size mismatch");
  const double beta = spec.beta;
  auto ld = [&](const PhaseVector& z) {
    return lambda.dot(evaluate_observables(set, z)) - beta * sys.energy(z);
  };
  SampleBatch batch = detail::sample_target(sys, ld, spec.sampler, count, seed, workers,
                                            "resample_quasi_equilibrium");
  batch.beta = beta;
  batch.lambda_tag = lambda;
  batch.phi_base = std::numeric_limits<double>::quiet_NaN();
  return batch;
}

// Precomputed observable and Liouville-derivative values for a batch;
// all reweighted moment estimates reduce to dense linear algebra on it.
struct BatchTable {
  Matrix A;   // m x N observable values
  Matrix LA;  // m x N Liouville derivatives {A_i, H}
  Vector base_log_w;
  Vector lambda_tag;  // empty == equilibrium
  double beta = 1.0;
  double phi_base = 0.0;
  std::uint64_t seed = 0;

  long count() const { return static_cast<long>(A.cols()); }
};

inline BatchTable make_batch_table(const HamiltonianSystem& sys, const ObservableSet& set,
                                   const SampleBatch& batch) {
  const long n_pts = batch.count();
  const Eigen::Index m = set.size();
  BatchTable t;
  t.A.resize(m, n_pts);
  t.LA.resize(m, n_pts);
  for (long k = 0; k < n_pts; ++k) {
    const PhaseVector& z = batch.points[k];
    const PhaseVector gh = sys.gradient(z);
    for (Eigen::Index i = 0; i < m; ++i) {
      t.A(i, k) = set.items[i].value(z);
      t.LA(i, k) = poisson_bracket(set.items[i].gradient(z), gh);
    }
  }
  t.base_log_w = batch.log_weights;
  t.lambda_tag = batch.lambda_tag;
  t.beta = batch.beta;
  t.phi_base = batch.phi_base;
  t.seed = batch.seed;
  return t;
}

inline Vector tilt_log_weights(const BatchTable& t, const Vector& lambda) {
  Vector delta = lambda;
  if (t.lambda_tag.size() > 0) delta -= t.lambda_tag;
  if (delta.size() != t.A.rows())
    throw Error("tilt_log_weights: lambda size mismatch");
  return t.base_log_w + t.A.transpose() * delta;
}

// phi(lambda) - phi(tag), computed with max-subtracted log-mean-exp.
inline double log_partition_shift_from_table(const BatchTable& t, const Vector& lambda,
                                             double ess_floor = 0.05) {
  const Vector lw = tilt_log_weights(t, lambda);
  const double ess = effective_sample_size(lw);
  if (ess < ess_floor * static_cast<double>(t.count()))
    throw LowOverlapError(
        "log_partition_shift: effective sample size " + std::to_string(ess) + " of " +
        std::to_string(t.count()) +
        " below floor; resample the quasi-equilibrium at this lambda instead");
  const double n_log = std::log(static_cast<double>(t.count()));
  return (log_sum_exp(lw) - n_log) - (log_sum_exp(t.base_log_w) - n_log);
}

inline double log_partition_shift(const HamiltonianSystem& sys, const ObservableSet& set,
                                  const SampleBatch& batch, const Vector& lambda,
                                  double ess_floor = 0.05) {
  return log_partition_shift_from_table(make_batch_table(sys, set, batch), lambda, ess_floor);
}

// Importance-reweight a batch to a new lambda without fresh sampling.
inline SampleBatch reweight(const HamiltonianSystem& sys, const ObservableSet& set,
                            const SampleBatch& batch, const Vector& lambda,
                            double ess_floor = 0.05) {
  const BatchTable t = make_batch_table(sys, set, batch);
  const Vector lw = tilt_log_weights(t, lambda);
  const double ess = effective_sample_size(lw);
  if (ess < ess_floor * static_cast<double>(batch.count()))
    throw LowOverlapError("reweight: effective sample size " + std::to_string(ess) +
                          " below floor at the requested lambda; resample instead");
  SampleBatch out = batch;
  out.log_weights = lw;
  out.lambda_tag = lambda;
  out.ess = ess;
  if (std::isfinite(batch.phi_base))
    out.phi_base = batch.phi_base + log_partition_shift_from_table(t, lambda, ess_floor);
  return out;
}

struct MomentErrors {
  Vector a;
  Matrix C;
  Vector drift;
  Matrix D;
  double w = 0.0;
  double phi = 0.0;
};

// Quasi-equilibrium moments at a parameter value: macrostate a, log-partition
// shift phi, covariance C, drift <LA>, fluctuation matrix D from the projected
// residual, and the quadratic dissipation potential w = lambda^T D lambda / 2.
// grad_w and hess_w stay empty here; finite-difference machinery fills them.
struct MomentSet {
  Vector lambda;
  Vector a;
  double phi = std::numeric_limits<double>::quiet_NaN();
  Matrix C;
  Vector drift;
  Matrix D;
  double w = 0.0;
  Vector grad_w;
  Matrix hess_w;
  MomentErrors std_errors;
  double ess = 0.0;
};

struct MomentOptions {
  long blocks = 10;
  double ess_floor = 0.05;
  double cond_max = 1e10;
};

namespace detail {

struct CoreMoments {
  Vector a, drift;
  Matrix C, D, J;
  double w = 0.0, phi = 0.0;
};

// Weighted moments over a column range [lo, hi) of the table.
inline CoreMoments core_moments(const BatchTable& t, const Vector& lambda,
                                const Vector& log_w_full, long lo, long hi,
                                const char* what) {
  const long n_pts = hi - lo;
  const Eigen::Index m = t.A.rows();
  const Vector lw = log_w_full.segment(lo, n_pts);
  const Vector w = normalized_weights(lw);
  const auto A = t.A.middleCols(lo, n_pts);
  const auto LA = t.LA.middleCols(lo, n_pts);

  CoreMoments r;
  r.a = A * w;
  r.drift = LA * w;
  Matrix Ac = A.colwise() - r.a;
  Matrix LAc = LA.colwise() - r.drift;
  Matrix Acw = Ac.array().rowwise() * w.transpose().array();
  r.C = symmetrized(Acw * Ac.transpose());
  Eigen::LLT<Matrix> llt(r.C);
  if (llt.info() != Eigen::Success)
    throw DegenerateObservablesError(std::string(what) +
                                     ": covariance is not positive definite");
  Matrix B = LAc * Acw.transpose();          // <LA (A-a)^T>
  Matrix QLA = LAc - B * llt.solve(Ac);      // projected residual per point
  r.J = B;
  r.D = symmetrized((QLA.array().rowwise() * w.transpose().array()).matrix() *
                    QLA.transpose());
  r.w = 0.5 * lambda.dot(r.D * lambda);
  const double n_log = std::log(static_cast<double>(n_pts));
  const Vector base = t.base_log_w.segment(lo, n_pts);
  r.phi = t.phi_base + (log_sum_exp(lw) - n_log) - (log_sum_exp(base) - n_log);
  return r;
}

}  // namespace detail

inline MomentSet moments_from_table(const BatchTable& t, const Vector& lambda,
                                    const MomentOptions& opts = {}) {
  const long n_pts = t.count();
  const Eigen::Index m = t.A.rows();
  if (lambda.size() != m) throw Error("moments_from_table: lambda size mismatch");

  const Vector lw = tilt_log_weights(t, lambda);
  const double ess = effective_sample_size(lw);
  const bool tilted = t.lambda_tag.size() > 0
                          ? (lambda - t.lambda_tag).cwiseAbs().maxCoeff() > 0.0
                          : lambda.cwiseAbs().maxCoeff() > 0.0;
  if (tilted && ess < opts.ess_floor * static_cast<double>(n_pts))
    throw LowOverlapError("estimate_moments: effective sample size " +
                          std::to_string(ess) +
                          " below floor; resample the quasi-equilibrium at this lambda");

  auto full = detail::core_moments(t, lambda, lw, 0, n_pts, "estimate_moments");
  if (spd_condition(full.C) > opts.cond_max)
    throw DegenerateObservablesError(
        "estimate_moments: covariance condition number exceeds " +
        std::to_string(opts.cond_max) + "; observables are numerically dependent");

  MomentSet ms;
  ms.lambda = lambda;
  ms.a = full.a;
  ms.C = full.C;
  ms.drift = full.drift;
  ms.D = full.D;
  ms.w = full.w;
  ms.phi = full.phi;
  ms.ess = ess;

  if (opts.blocks <= 1) {
    ms.std_errors.a = Vector::Zero(m);
    ms.std_errors.drift = Vector::Zero(m);
    ms.std_errors.C = Matrix::Zero(m, m);
    ms.std_errors.D = Matrix::Zero(m, m);
    ms.std_errors.w = 0.0;
    ms.std_errors.phi = 0.0;
    return ms;
  }

  const long n_blocks = std::min<long>(opts.blocks, n_pts);
  std::vector<detail::CoreMoments> blocks;
  blocks.reserve(n_blocks);
  for (long b = 0; b < n_blocks; ++b) {
    const long lo = b * n_pts / n_blocks;
    const long hi = (b + 1) * n_pts / n_blocks;
    blocks.push_back(detail::core_moments(t, lambda, lw, lo, hi, "estimate_moments block"));
  }
  auto block_se = [&](auto&& get) {
    double mean = 0.0;
    for (const auto& blk : blocks) mean += get(blk);
    mean /= n_blocks;
    double var = 0.0;
    for (const auto& blk : blocks) var += (get(blk) - mean) * (get(blk) - mean);
    return n_blocks > 1 ? std::sqrt(var / (n_blocks * (n_blocks - 1.0))) : 0.0;
  };
  ms.std_errors.a.resize(m);
  ms.std_errors.drift.resize(m);
  ms.std_errors.C.resize(m, m);
  ms.std_errors.D.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    ms.std_errors.a[i] = block_se([&](const auto& b) { return b.a[i]; });
    ms.std_errors.drift[i] = block_se([&](const auto& b) { return b.drift[i]; });
    for (Eigen::Index j = 0; j < m; ++j) {
      ms.std_errors.C(i, j) = block_se([&](const auto& b) { return b.C(i, j); });
      ms.std_errors.D(i, j) = block_se([&](const auto& b) { return b.D(i, j); });
    }
  }
  ms.std_errors.w = block_se([&](const auto& b) { return b.w; });
  ms.std_errors.phi = std::isfinite(t.phi_base)
                          ? block_se([&](const auto& b) { return b.phi; })
                          : std::numeric_limits<double>::quiet_NaN();
  return ms;
}

inline MomentSet estimate_moments(const HamiltonianSystem& sys, const ObservableSet& set,
                                  const SampleBatch& batch, const Vector& lambda,
                                  const MomentOptions& opts = {}) {
  return moments_from_table(make_batch_table(sys, set, batch), lambda, opts);
}

inline MomentSet estimate_moments(const HamiltonianSystem& sys, const ObservableSet& set,
                                  const SampleBatch& batch, const MomentOptions& opts = {}) {
  const Vector lam = batch.lambda_tag.size() > 0 ? batch.lambda_tag
                                                 : Vector(Vector::Zero(set.size()));
  return estimate_moments(sys, set, batch, lam, opts);
}

// Columnar little-endian binary cache for sample batches.
inline void save_batch(const SampleBatch& batch, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("save_batch: cannot open '" + path + "'");
  const char magic[8] = {'Q', 'E', 'B', 'A', 'T', 'C', 'H', '1'};
  f.write(magic, 8);
  const std::int64_t n = batch.points.empty() ? 0 : batch.points[0].dof();
  const std::int64_t cnt = batch.count();
  const std::int64_t m = batch.lambda_tag.size();
  auto put = [&f](const void* ptr, std::size_t bytes) {
    f.write(static_cast<const char*>(ptr), static_cast<std::streamsize>(bytes));
  };
  put(&n, 8);
  put(&cnt, 8);
  put(&m, 8);
  put(&batch.beta, 8);
  put(&batch.seed, 8);
  put(&batch.phi_base, 8);
  put(&batch.ess, 8);
  if (m > 0) put(batch.lambda_tag.data(), 8 * m);
  std::vector<double> col(cnt);
  for (std::int64_t j = 0; j < n; ++j) {
    for (std::int64_t k = 0; k < cnt; ++k) col[k] = batch.points[k].q[j];
    put(col.data(), 8 * cnt);
  }
  for (std::int64_t j = 0; j < n; ++j) {
    for (std::int64_t k = 0; k < cnt; ++k) col[k] = batch.points[k].p[j];
    put(col.data(), 8 * cnt);
  }
  put(batch.log_weights.data(), 8 * cnt);
  if (!f) throw Error("save_batch: short write to '" + path + "'");
}

inline SampleBatch load_batch(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("load_batch: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (std::string(magic, 8) != "QEBATCH1")
    throw Error("load_batch: '" + path + "' is not a batch cache file");
  std::int64_t n = 0, cnt = 0, m = 0;
  auto get = [&f, &path](void* ptr, std::size_t bytes) {
    f.read(static_cast<char*>(ptr), static_cast<std::streamsize>(bytes));
    if (!f) throw Error("load_batch: truncated file '" + path + "'");
  };
  get(&n, 8);
  get(&cnt, 8);
  get(&m, 8);
  SampleBatch batch;
  get(&batch.beta, 8);
  get(&batch.seed, 8);
  get(&batch.phi_base, 8);
  get(&batch.ess, 8);
  if (n < 0 || cnt < 0 || m < 0) throw Error("load_batch: corrupt header");
  if (m > 0) {
    batch.lambda_tag.resize(m);
    get(batch.lambda_tag.data(), 8 * m);
  }
  batch.points.assign(cnt, PhaseVector::zero(n));
  std::vector<double> col(cnt);
  for (std::int64_t j = 0; j < n; ++j) {
    get(col.data(), 8 * cnt);
    for (std::int64_t k = 0; k < cnt; ++k) batch.points[k].q[j] = col[k];
  }
  for (std::int64_t j = 0; j < n; ++j) {
    get(col.data(), 8 * cnt);
    for (std::int64_t k = 0; k < cnt; ++k) batch.points[k].p[j] = col[k];
  }
  batch.log_weights.resize(cnt);
  get(batch.log_weights.data(), 8 * cnt);
  return batch;
}

}  // namespace qecl
