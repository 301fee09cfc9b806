#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qecl/linalg.hpp"

namespace qecl {

struct PhaseVector {
  Vector q;
  Vector p;

  PhaseVector() = default;
  PhaseVector(Vector q_, Vector p_) : q(std::move(q_)), p(std::move(p_)) {
    if (q.size() != p.size()) throw Error("PhaseVector: q and p sizes differ");
  }
  static PhaseVector zero(Eigen::Index n) {
    return PhaseVector(Vector::Zero(n), Vector::Zero(n));
  }
  Eigen::Index dof() const { return q.size(); }
};

inline PhaseVector time_reverse(const PhaseVector& z) {
  return PhaseVector(z.q, -z.p);
}

// A Hamiltonian on R^{2n} with analytic gradient. Separable systems
// (H = T(p) + V(q)) additionally expose the split derivatives used by the
// velocity Verlet step. quadratic_stiffness is set when V(q) = q^T K q / 2,
// enabling exact Gaussian equilibrium sampling.
struct HamiltonianSystem {
  Eigen::Index n = 0;
  std::string label;
  bool separable = false;
  std::function<double(const PhaseVector&)> energy;
  std::function<PhaseVector(const PhaseVector&)> gradient;  // (dH/dq, dH/dp)
  std::function<Vector(const Vector&)> grad_potential;      // dV/dq, separable only
  std::function<Vector(const Vector&)> grad_kinetic;        // dT/dp, separable only
  std::optional<Matrix> quadratic_stiffness;
};

// Poisson bracket {F,H}(z) with the canonical structure matrix.
inline double poisson_bracket(const PhaseVector& grad_f, const PhaseVector& grad_h) {
  return grad_f.q.dot(grad_h.p) - grad_f.p.dot(grad_h.q);
}

enum class Parity { even, odd, unknown };

struct Observable {
  std::string id;
  Parity parity = Parity::unknown;
  std::function<double(const PhaseVector&)> value;
  std::function<PhaseVector(const PhaseVector&)> gradient;
};

struct ObservableSet {
  std::vector<Observable> items;

  ObservableSet() = default;
  explicit ObservableSet(std::vector<Observable> obs) : items(std::move(obs)) {
    for (std::size_t i = 0; i < items.size(); ++i)
      for (std::size_t j = i + 1; j < items.size(); ++j)
        if (items[i].id == items[j].id)
          throw Error("ObservableSet: duplicate id '" + items[i].id + "'");
  }
  Eigen::Index size() const { return static_cast<Eigen::Index>(items.size()); }
  bool all_even() const {
    for (const auto& o : items)
      if (o.parity != Parity::even) return false;
    return true;
  }
};

inline Vector evaluate_observables(const ObservableSet& set, const PhaseVector& z) {
  Vector out(set.size());
  for (Eigen::Index i = 0; i < set.size(); ++i) out[i] = set.items[i].value(z);
  return out;
}

// LF = {F,H} for a single observable.
inline double liouville_apply(const HamiltonianSystem& sys, const Observable& obs,
                              const PhaseVector& z) {
  return poisson_bracket(obs.gradient(z), sys.gradient(z));
}

// LA for the whole set; evaluates grad H once.
inline Vector liouville_all(const HamiltonianSystem& sys, const ObservableSet& set,
                            const PhaseVector& z) {
  const PhaseVector gh = sys.gradient(z);
  Vector out(set.size());
  for (Eigen::Index i = 0; i < set.size(); ++i)
    out[i] = poisson_bracket(set.items[i].gradient(z), gh);
  return out;
}

// One velocity Verlet step; exact symplecticity requires H = T(p) + V(q).
inline PhaseVector symplectic_step(const HamiltonianSystem& sys, const PhaseVector& z,
                                   double dt) {
  if (!sys.separable)
    throw Error("symplectic_step: '" + sys.label + "' is not separable");
  Vector p_half = z.p - 0.5 * dt * sys.grad_potential(z.q);
  Vector q_next = z.q + dt * sys.grad_kinetic(p_half);
  Vector p_next = p_half - 0.5 * dt * sys.grad_potential(q_next);
  return PhaseVector(std::move(q_next), std::move(p_next));
}

inline PhaseVector evolve(const HamiltonianSystem& sys, PhaseVector z, double dt,
                          long steps) {
  for (long k = 0; k < steps; ++k) z = symplectic_step(sys, z, dt);
  return z;
}

}  // namespace qecl
