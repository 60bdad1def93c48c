#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace dunst {

// Hard bound on log-sigma; keeps exp() and the KL finite everywhere.
constexpr double kLogSigmaClamp = 8.0;

// Diagonal Gaussian in (mu, log sigma) parameterization.
struct LatentGaussian {
  Eigen::VectorXd mu;
  Eigen::VectorXd log_sigma;

  int dim() const { return static_cast<int>(mu.size()); }

  void validate() const {
    if (mu.size() != log_sigma.size())
      throw std::invalid_argument("LatentGaussian: dim mismatch");
    for (int i = 0; i < mu.size(); ++i) {
      if (!std::isfinite(mu[i]) || !std::isfinite(log_sigma[i]))
        throw std::invalid_argument("LatentGaussian: non-finite entry");
      if (std::abs(log_sigma[i]) > kLogSigmaClamp + 1e-12)
        throw std::invalid_argument("LatentGaussian: log_sigma outside clamp");
    }
  }
};

inline double gaussian_log_density(const LatentGaussian& g,
                                   const Eigen::VectorXd& z) {
  if (z.size() != g.mu.size())
    throw std::invalid_argument("gaussian_log_density: dim mismatch");
  constexpr double kLog2Pi = 1.8378770664093453;
  double acc = -0.5 * kLog2Pi * static_cast<double>(z.size());
  for (int i = 0; i < z.size(); ++i) {
    double d = (z[i] - g.mu[i]) * std::exp(-g.log_sigma[i]);
    acc -= g.log_sigma[i] + 0.5 * d * d;
  }
  return acc;
}

}  // namespace dunst
