#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "dunst/rng.hpp"

namespace dunst {

inline double logsumexp(const Eigen::VectorXd& v) {
  double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;  // all -inf stays -inf
  return mx + std::log((v.array() - mx).exp().sum());
}

inline Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  Eigen::VectorXd e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

inline Eigen::VectorXd log_softmax(const Eigen::VectorXd& v) {
  return v.array() - logsumexp(v);
}

// Dirichlet(1) draw: normalized exponentials, almost surely positive.
inline Eigen::VectorXd random_simplex(int n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
  return v / v.sum();
}

// Sum p_i log(p_i / q_i) with the 0 log 0 = 0 convention. q may be an
// unnormalized positive measure (generalized KL without mass correction).
inline double discrete_kl(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  double acc = 0.0;
  for (int i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

}  // namespace dunst
