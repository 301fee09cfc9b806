#pragma once

#include <cmath>

#include "qecl/hamiltonian.hpp"

namespace qecl {

namespace detail {

inline HamiltonianSystem make_quadratic(Eigen::Index n, Matrix K, std::string label) {
  HamiltonianSystem sys;
  sys.n = n;
  sys.label = std::move(label);
  sys.separable = true;
  sys.quadratic_stiffness = K;
  sys.energy = [K](const PhaseVector& z) {
    return 0.5 * z.p.squaredNorm() + 0.5 * z.q.dot(K * z.q);
  };
  sys.gradient = [K](const PhaseVector& z) { return PhaseVector(K * z.q, z.p); };
  sys.grad_potential = [K](const Vector& q) { return Vector(K * q); };
  sys.grad_kinetic = [](const Vector& p) { return p; };
  return sys;
}

}  // namespace detail

inline HamiltonianSystem make_harmonic_oscillator() {
  return detail::make_quadratic(1, Matrix::Identity(1, 1), "harmonic_oscillator");
}

// Chain of n unit masses with fixed walls; V = (k/2) sum (q_{i+1}-q_i)^2 + (w2/2)|q|^2.
inline Matrix chain_stiffness(Eigen::Index n, double coupling, double pinning) {
  Matrix K = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    K(i, i) = 2.0 * coupling + pinning;
    if (i + 1 < n) {
      K(i, i + 1) = -coupling;
      K(i + 1, i) = -coupling;
    }
  }
  return K;
}

inline HamiltonianSystem make_harmonic_chain(Eigen::Index n, double coupling = 1.0,
                                             double pinning = 0.0) {
  if (n < 1) throw Error("make_harmonic_chain: n must be positive");
  return detail::make_quadratic(n, chain_stiffness(n, coupling, pinning),
                                "harmonic_chain");
}

// Fixed-end anharmonic chain with bond potential r^2/2 + quartic r^4/4.
inline HamiltonianSystem make_fpu_chain(Eigen::Index n, double quartic) {
  if (n < 1) throw Error("make_fpu_chain: n must be positive");
  HamiltonianSystem sys;
  sys.n = n;
  sys.label = "fpu_chain";
  sys.separable = true;
  auto bond = [quartic](double r) { return 0.5 * r * r + 0.25 * quartic * r * r * r * r; };
  auto dbond = [quartic](double r) { return r + quartic * r * r * r; };
  auto grad_v = [n, dbond](const Vector& q) {
    Vector g(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double r_left = q[j] - (j > 0 ? q[j - 1] : 0.0);
      const double r_right = (j + 1 < n ? q[j + 1] : 0.0) - q[j];
      g[j] = dbond(r_left) - dbond(r_right);
    }
    return g;
  };
  sys.energy = [n, bond](const PhaseVector& z) {
    double v = bond(z.q[0]) + bond(-z.q[n - 1]);
    for (Eigen::Index i = 0; i + 1 < n; ++i) v += bond(z.q[i + 1] - z.q[i]);
    return 0.5 * z.p.squaredNorm() + v;
  };
  sys.gradient = [grad_v](const PhaseVector& z) {
    return PhaseVector(grad_v(z.q), z.p);
  };
  sys.grad_potential = grad_v;
  sys.grad_kinetic = [](const Vector& p) { return p; };
  return sys;
}

// Observables; `site` is 1-based as in the chain numbering q_1..q_n.
inline Observable obs_coordinate(Eigen::Index n, Eigen::Index site) {
  if (site < 1 || site > n) throw Error("obs_coordinate: site out of range");
  const Eigen::Index i = site - 1;
  Observable o;
  o.id = "q" + std::to_string(site);
  o.parity = Parity::even;
  o.value = [i](const PhaseVector& z) { return z.q[i]; };
  o.gradient = [n, i](const PhaseVector&) {
    PhaseVector g = PhaseVector::zero(n);
    g.q[i] = 1.0;
    return g;
  };
  return o;
}

inline Observable obs_momentum(Eigen::Index n, Eigen::Index site) {
  if (site < 1 || site > n) throw Error("obs_momentum: site out of range");
  const Eigen::Index i = site - 1;
  Observable o;
  o.id = "p" + std::to_string(site);
  o.parity = Parity::odd;
  o.value = [i](const PhaseVector& z) { return z.p[i]; };
  o.gradient = [n, i](const PhaseVector&) {
    PhaseVector g = PhaseVector::zero(n);
    g.p[i] = 1.0;
    return g;
  };
  return o;
}

inline Observable obs_coordinate_square(Eigen::Index n, Eigen::Index site,
                                        double center = 0.0) {
  if (site < 1 || site > n) throw Error("obs_coordinate_square: site out of range");
  const Eigen::Index i = site - 1;
  Observable o;
  o.id = "q" + std::to_string(site) + "sq";
  o.parity = Parity::even;
  o.value = [i, center](const PhaseVector& z) { return z.q[i] * z.q[i] - center; };
  o.gradient = [n, i](const PhaseVector& z) {
    PhaseVector g = PhaseVector::zero(n);
    g.q[i] = 2.0 * z.q[i];
    return g;
  };
  return o;
}

}  // namespace qecl
