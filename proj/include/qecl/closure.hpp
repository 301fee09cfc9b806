#pragma once

#include <map>
#include <memory>
#include <optional>
#include <tuple>

#include "qecl/ensemble.hpp"
#include "qecl/systems.hpp"

namespace qecl {

// Pointwise Liouville residual of the quasi-equilibrium ansatz,
// R(z) = lambda_dot^T (A(z) - a) + lambda^T LA(z).
inline double residual_at(const HamiltonianSystem& sys, const ObservableSet& set,
                          const MomentSet& moments, const Vector& lambda,
                          const Vector& lambda_dot, const PhaseVector& z) {
  const Vector A = evaluate_observables(set, z);
  const Vector LA = liouville_all(sys, set, z);
  return lambda_dot.dot(A - moments.a) + lambda.dot(LA);
}

// Least-squares rate cost: quadratic in lambda_dot around the adiabatic
// drift, plus the scaled dissipation potential.
inline double lagrangian_eval(const MomentSet& moments, const Vector& lambda_dot,
                              double epsilon) {
  Eigen::LLT<Matrix> llt(moments.C);
  if (llt.info() != Eigen::Success)
    throw Error("lagrangian_eval: covariance is not positive definite");
  const Vector v = lambda_dot - llt.solve(moments.drift);
  return 0.5 * v.dot(moments.C * v) + epsilon * epsilon * moments.w;
}

struct ConjugatePair {
  Vector mu;
  double hamiltonian_value = 0.0;
};

inline double hamiltonian_eval(const MomentSet& moments, const Vector& mu,
                               double epsilon) {
  Eigen::LLT<Matrix> llt(moments.C);
  if (llt.info() != Eigen::Success)
    throw Error("hamiltonian_eval: covariance is not positive definite");
  const Vector cinv_mu = llt.solve(mu);
  return 0.5 * mu.dot(cinv_mu) + moments.drift.dot(cinv_mu) -
         epsilon * epsilon * moments.w;
}

// Legendre transform of the rate cost: mu = C lambda_dot - drift, together
// with the dual Hamiltonian value at (lambda, mu).
inline ConjugatePair legendre_mu(const MomentSet& moments, const Vector& lambda_dot,
                                 double epsilon) {
  ConjugatePair pair;
  pair.mu = moments.C * lambda_dot - moments.drift;
  pair.hamiltonian_value = hamiltonian_eval(moments, pair.mu, epsilon);
  return pair;
}

inline Vector adiabatic_drift(const MomentSet& moments) {
  Eigen::LLT<Matrix> llt(moments.C);
  if (llt.info() != Eigen::Success)
    throw Error("adiabatic_drift: covariance is not positive definite");
  return llt.solve(moments.drift);
}

// Equilibrium coefficient matrices. Jmat is the antisymmetrized cross moment
// <LA (A - a)^T>; D comes from the projected residual, D_alt from the
// alternative identity <LA LA^T> + J C^{-1} J used as a consistency check.
struct NearEqMatrices {
  Matrix C;
  Matrix Jmat;
  Matrix D;
  Matrix D_alt;
  struct {
    Matrix C, Jmat, D, D_alt, D_gap;  // D_gap: std error of D - D_alt entrywise
  } std_errors;
  double ess = 0.0;
};

inline NearEqMatrices near_eq_matrices_from_table(const BatchTable& t,
                                                  const MomentOptions& opts = {}) {
  const long n_pts = t.count();
  const Eigen::Index m = t.A.rows();
  if (t.lambda_tag.size() > 0 && t.lambda_tag.cwiseAbs().maxCoeff() > 0.0)
    throw Error("near_eq_matrices: batch must target the plain equilibrium");
  const Vector zero = Vector::Zero(m);

  struct Piece {
    Matrix C, J, D, D_alt;
  };
  auto piece = [&](long lo, long hi) {
    const long len = hi - lo;
    const Vector w = normalized_weights(Vector(t.base_log_w.segment(lo, len)));
    const auto A = t.A.middleCols(lo, len);
    const auto LA = t.LA.middleCols(lo, len);
    const Vector a = A * w;
    const Vector drift = LA * w;
    Matrix Ac = A.colwise() - a;
    Matrix LAc = LA.colwise() - drift;
    Matrix Acw = Ac.array().rowwise() * w.transpose().array();
    Piece pc;
    pc.C = symmetrized(Acw * Ac.transpose());
    Eigen::LLT<Matrix> llt(pc.C);
    if (llt.info() != Eigen::Success)
      throw DegenerateObservablesError("near_eq_matrices: covariance not positive definite");
    const Matrix B = LAc * Acw.transpose();
    pc.J = antisymmetrized(B);
    const Matrix QLA = LAc - B * llt.solve(Ac);
    pc.D = symmetrized((QLA.array().rowwise() * w.transpose().array()).matrix() *
                       QLA.transpose());
    const Matrix LA2 =
        symmetrized((LA.array().rowwise() * w.transpose().array()).matrix() *
                    LA.transpose());
    pc.D_alt = symmetrized(LA2 + pc.J * llt.solve(pc.J));
    return pc;
  };

  const Piece full = piece(0, n_pts);
  if (spd_condition(full.C) > opts.cond_max)
    throw DegenerateObservablesError(
        "near_eq_matrices: covariance condition number exceeds bound; "
        "observables are numerically dependent");

  NearEqMatrices out;
  out.C = full.C;
  out.Jmat = full.J;
  out.D = full.D;
  out.D_alt = full.D_alt;
  out.ess = effective_sample_size(t.base_log_w);

  const long n_blocks = std::min<long>(opts.blocks, n_pts);
  std::vector<Piece> blocks;
  for (long b = 0; b < n_blocks; ++b)
    blocks.push_back(piece(b * n_pts / n_blocks, (b + 1) * n_pts / n_blocks));
  auto se = [&](auto&& get) {
    double mean = 0.0;
    for (const auto& blk : blocks) mean += get(blk);
    mean /= n_blocks;
    double var = 0.0;
    for (const auto& blk : blocks) var += (get(blk) - mean) * (get(blk) - mean);
    return n_blocks > 1 ? std::sqrt(var / (n_blocks * (n_blocks - 1.0))) : 0.0;
  };
  out.std_errors.C.resize(m, m);
  out.std_errors.Jmat.resize(m, m);
  out.std_errors.D.resize(m, m);
  out.std_errors.D_alt.resize(m, m);
  out.std_errors.D_gap.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      out.std_errors.C(i, j) = se([&](const Piece& b) { return b.C(i, j); });
      out.std_errors.Jmat(i, j) = se([&](const Piece& b) { return b.J(i, j); });
      out.std_errors.D(i, j) = se([&](const Piece& b) { return b.D(i, j); });
      out.std_errors.D_alt(i, j) = se([&](const Piece& b) { return b.D_alt(i, j); });
      out.std_errors.D_gap(i, j) =
          se([&](const Piece& b) { return b.D(i, j) - b.D_alt(i, j); });
    }
  return out;
}

inline NearEqMatrices near_eq_matrices(const HamiltonianSystem& sys,
                                       const ObservableSet& set, const SampleBatch& batch,
                                       const MomentOptions& opts = {}) {
  return near_eq_matrices_from_table(make_batch_table(sys, set, batch), opts);
}

// Moment fields along a closure trajectory. moments() may snap lambda onto an
// internal cache grid; the derivative members always difference exact
// (unsnapped) evaluations around the query point with common random numbers.
class MomentProvider {
 public:
  virtual ~MomentProvider() = default;
  virtual Eigen::Index dim() const = 0;
  virtual MomentSet moments(const Vector& lambda) = 0;
  virtual Matrix drift_jacobian(const Vector& lambda) = 0;  // entry (i,j) = d f_i / d lambda_j
  virtual void potential_derivatives(const Vector& lambda, double& w, Vector& grad_w,
                                     Matrix& hess_w) = 0;
  virtual double log_partition(const Vector& lambda) = 0;
  virtual std::string provenance() const = 0;
};

// Exact moments of a linear-response Gaussian model: a = C lambda,
// drift = Omega C lambda with Omega C antisymmetric, constant D.
class AnalyticGaussianProvider final : public MomentProvider {
 public:
  AnalyticGaussianProvider(Matrix C, Matrix Omega, Matrix D)
      : C_(std::move(C)), Omega_(std::move(Omega)), D_(std::move(D)) {
    if (!is_spd(C_)) throw Error("AnalyticGaussianProvider: C must be SPD");
    const Matrix OC = Omega_ * C_;
    if (max_abs(OC + OC.transpose()) > 1e-10 * (1.0 + max_abs(OC)))
      throw Error("AnalyticGaussianProvider: Omega*C must be antisymmetric");
    c_inv_ = spd_inverse(C_, "AnalyticGaussianProvider");
  }

  Eigen::Index dim() const override { return C_.rows(); }

  MomentSet moments(const Vector& lambda) override {
    MomentSet ms;
    ms.lambda = lambda;
    ms.a = C_ * lambda;
    ms.phi = 0.5 * lambda.dot(ms.a);
    ms.C = C_;
    ms.drift = Omega_ * C_ * lambda;
    ms.D = D_;
    ms.w = 0.5 * lambda.dot(D_ * lambda);
    ms.grad_w = D_ * lambda;
    ms.hess_w = D_;
    ms.ess = std::numeric_limits<double>::infinity();
    const Eigen::Index m = dim();
    ms.std_errors.a = Vector::Zero(m);
    ms.std_errors.drift = Vector::Zero(m);
    ms.std_errors.C = Matrix::Zero(m, m);
    ms.std_errors.D = Matrix::Zero(m, m);
    return ms;
  }

  Matrix drift_jacobian(const Vector&) override { return c_inv_ * Omega_ * C_; }

  void potential_derivatives(const Vector& lambda, double& w, Vector& grad_w,
                             Matrix& hess_w) override {
    w = 0.5 * lambda.dot(D_ * lambda);
    grad_w = D_ * lambda;
    hess_w = D_;
  }

  double log_partition(const Vector& lambda) override {
    return 0.5 * lambda.dot(C_ * lambda);
  }

  std::string provenance() const override {
    return "analytic-gaussian(m=" + std::to_string(C_.rows()) + ")";
  }

 private:
  Matrix C_, Omega_, D_, c_inv_;
};

struct ProviderOptions {
  double cache_radius = 1e-3;  // lambda-grid spacing for memoized moments
  double fd_step = 1e-3;       // scaled by (1 + |lambda_i|) per direction
  double ess_floor = 0.05;
  bool allow_resample = true;
  long resample_count = 0;  // 0: reuse the base batch size
  MomentOptions moment_options{};
};

// Monte Carlo moment fields: one equilibrium batch reweighted across lambda,
// falling back to a fresh quasi-equilibrium batch when the effective sample
// size collapses. Expensive second-order fields (C, D, std errors) are
// memoized on a lambda grid of spacing cache_radius; first-order fields
// (a, drift, phi) are reweighted exactly at the query point, so trajectory
// output carries no grid bias.
class MonteCarloMomentProvider final : public MomentProvider {
 public:
  MonteCarloMomentProvider(const HamiltonianSystem& sys, const ObservableSet& set,
                           const EquilibriumSpec& spec, SampleBatch base,
                           ProviderOptions opts = {}, int workers = 1)
      : sys_(sys),
        set_(set),
        spec_(spec),
        opts_(opts),
        workers_(workers),
        base_count_(base.count()),
        base_seed_(base.seed),
        base_(std::make_shared<BatchTable>(make_batch_table(sys, set, base))) {
    if (opts_.resample_count <= 0) opts_.resample_count = base_count_;
    stencil_opts_ = opts_.moment_options;
    stencil_opts_.blocks = 1;
  }

  Eigen::Index dim() const override { return base_->A.rows(); }

  MomentSet moments(const Vector& lambda) override {
    const auto key = snap_key(lambda);
    auto it = moment_cache_.find(key);
    if (it == moment_cache_.end()) {
      const Vector node = key_to_lambda(key);
      auto table = table_for(node);
      MomentSet node_ms = moments_from_table(*table, node, opts_.moment_options);
      it = moment_cache_.emplace(key, std::make_pair(node_ms, table)).first;
    }
    const MomentSet& node_ms = it->second.first;
    const BatchTable& t = *it->second.second;
    MomentSet ms = node_ms;
    ms.lambda = lambda;
    const Vector lw = tilt_log_weights(t, lambda);
    const Vector w = normalized_weights(lw);
    ms.a = t.A * w;
    ms.drift = t.LA * w;
    ms.ess = 1.0 / w.squaredNorm();
    const double n_log = std::log(static_cast<double>(t.count()));
    ms.phi = t.phi_base + (log_sum_exp(lw) - n_log) -
             (log_sum_exp(t.base_log_w) - n_log);
    ms.w = 0.5 * lambda.dot(ms.D * lambda);
    return ms;
  }

  Matrix drift_jacobian(const Vector& lambda) override {
    const auto key = snap_key(lambda);
    if (auto it = jac_cache_.find(key); it != jac_cache_.end()) return it->second;
    const Vector node = key_to_lambda(key);
    const BatchTable& t = *table_for(node);
    const Eigen::Index m = dim();
    Matrix F(m, m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const double h = opts_.fd_step * (1.0 + std::abs(node[j]));
      Vector lp = node, lm = node;
      lp[j] += h;
      lm[j] -= h;
      MomentSet mp, mm;
      try {
        mp = moments_from_table(t, lp, stencil_opts_);
        mm = moments_from_table(t, lm, stencil_opts_);
      } catch (const LowOverlapError&) {
        throw LowOverlapError(
            "drift_jacobian: effective sample size below floor along direction " +
            std::to_string(j) + " at the finite-difference stencil");
      }
      F.col(j) = (adiabatic_drift(mp) - adiabatic_drift(mm)) / (2.0 * h);
    }
    jac_cache_.emplace(key, F);
    return F;
  }

  void potential_derivatives(const Vector& lambda, double& w, Vector& grad_w,
                             Matrix& hess_w) override {
    const auto key = snap_key(lambda);
    if (auto it = pot_cache_.find(key); it != pot_cache_.end()) {
      w = std::get<0>(it->second);
      grad_w = std::get<1>(it->second);
      hess_w = std::get<2>(it->second);
      return;
    }
    const Vector node = key_to_lambda(key);
    const BatchTable& t = *table_for(node);
    const Eigen::Index m = dim();
    auto w_at = [&](const Vector& lam) {
      try {
        return moments_from_table(t, lam, stencil_opts_).w;
      } catch (const LowOverlapError&) {
        throw LowOverlapError(
            "potential_derivatives: effective sample size below floor at a "
            "finite-difference stencil point");
      }
    };
    const double w0 = w_at(node);
    Vector h(m);
    for (Eigen::Index i = 0; i < m; ++i)
      h[i] = opts_.fd_step * (1.0 + std::abs(node[i]));
    grad_w.resize(m);
    hess_w.resize(m, m);
    Vector wp(m), wm(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      Vector lp = node, lm = node;
      lp[i] += h[i];
      lm[i] -= h[i];
      wp[i] = w_at(lp);
      wm[i] = w_at(lm);
      grad_w[i] = (wp[i] - wm[i]) / (2.0 * h[i]);
      hess_w(i, i) = (wp[i] - 2.0 * w0 + wm[i]) / (h[i] * h[i]);
    }
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = i + 1; j < m; ++j) {
        Vector lpp = node, lpm = node, lmp = node, lmm = node;
        lpp[i] += h[i];
        lpp[j] += h[j];
        lpm[i] += h[i];
        lpm[j] -= h[j];
        lmp[i] -= h[i];
        lmp[j] += h[j];
        lmm[i] -= h[i];
        lmm[j] -= h[j];
        const double hij =
            (w_at(lpp) - w_at(lpm) - w_at(lmp) + w_at(lmm)) / (4.0 * h[i] * h[j]);
        hess_w(i, j) = hij;
        hess_w(j, i) = hij;
      }
    w = w0;
    pot_cache_.emplace(key, std::make_tuple(w, grad_w, hess_w));
  }

  double log_partition(const Vector& lambda) override { return moments(lambda).phi; }

  std::string provenance() const override {
    return "mc(system=" + sys_.label + ", count=" + std::to_string(base_count_) +
           ", seed=" + std::to_string(base_seed_) + ")";
  }

  long resamples() const { return resample_counter_; }

 private:
  using Key = std::vector<long long>;

  Key snap_key(const Vector& lambda) const {
    if (lambda.size() != dim()) throw Error("MomentProvider: lambda size mismatch");
    Key key(lambda.size());
    for (Eigen::Index i = 0; i < lambda.size(); ++i)
      key[i] = llround(lambda[i] / opts_.cache_radius);
    return key;
  }

  Vector key_to_lambda(const Key& key) const {
    Vector lam(static_cast<Eigen::Index>(key.size()));
    for (std::size_t i = 0; i < key.size(); ++i)
      lam[static_cast<Eigen::Index>(i)] = key[i] * opts_.cache_radius;
    return lam;
  }

  bool table_covers(const BatchTable& t, const Vector& lambda) const {
    const Vector lw = tilt_log_weights(t, lambda);
    return effective_sample_size(lw) >=
           opts_.ess_floor * static_cast<double>(t.count());
  }

  // Choose the table used for a node and its finite-difference stencil.
  // Cached nodes hold a shared reference, so later resampling never
  // invalidates earlier results.
  std::shared_ptr<BatchTable> table_for(const Vector& lambda) {
    if (table_covers(*base_, lambda)) return base_;
    if (local_ && table_covers(*local_, lambda)) return local_;
    if (!opts_.allow_resample)
      throw LowOverlapError(
          "MonteCarloMomentProvider: effective sample size below floor at lambda "
          "and resampling is disabled");
    // Carry the log-partition anchor over from the best-overlapping previous
    // table so phi stays finite across resamples. The hand-off estimate is
    // noisy at low overlap but keeps the entropy series consistent.
    const BatchTable* donor = base_.get();
    double donor_ess = effective_sample_size(tilt_log_weights(*base_, lambda));
    if (local_) {
      const double e = effective_sample_size(tilt_log_weights(*local_, lambda));
      if (e > donor_ess) {
        donor = local_.get();
        donor_ess = e;
      }
    }
    const double anchor =
        donor->phi_base + log_partition_shift_from_table(*donor, lambda, 0.0);
    const SampleBatch fresh = resample_quasi_equilibrium(
        sys_, set_, lambda, spec_, opts_.resample_count,
        child_seed(base_seed_, "resample", static_cast<std::uint64_t>(resample_counter_)),
        workers_);
    ++resample_counter_;
    local_ = std::make_shared<BatchTable>(make_batch_table(sys_, set_, fresh));
    local_->phi_base = anchor;
    return local_;
  }

  const HamiltonianSystem& sys_;
  const ObservableSet& set_;
  EquilibriumSpec spec_;
  ProviderOptions opts_;
  MomentOptions stencil_opts_;
  int workers_ = 1;
  long base_count_ = 0;
  std::uint64_t base_seed_ = 0;
  std::shared_ptr<BatchTable> base_;
  std::shared_ptr<BatchTable> local_;
  long resample_counter_ = 0;
  std::map<Key, std::pair<MomentSet, std::shared_ptr<BatchTable>>> moment_cache_;
  std::map<Key, Matrix> jac_cache_;
  std::map<Key, std::tuple<double, Vector, Matrix>> pot_cache_;
};

// Free-function finite-difference wrappers over any provider.
inline Matrix drift_jacobian(MomentProvider& provider, const Vector& lambda) {
  return provider.drift_jacobian(lambda);
}

inline void closure_potential_derivatives(MomentProvider& provider, const Vector& lambda,
                                          double& w, Vector& grad_w, Matrix& hess_w) {
  provider.potential_derivatives(lambda, w, grad_w, hess_w);
}

}  // namespace qecl
