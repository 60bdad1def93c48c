#pragma once

#include <Eigen/Dense>
#include <vector>

#include "dunst/rng.hpp"

namespace dunst {

// Probability table over a small finite (x, y, z) support, used to check
// the variational identities by exact enumeration.
struct DiscreteJoint {
  int nx = 1, ny = 1, nz = 1;
  std::vector<double> table;  // index ((x * ny) + y) * nz + z

  DiscreteJoint() = default;
  DiscreteJoint(int nx_, int ny_, int nz_);

  double& at(int x, int y, int z);
  double at(int x, int y, int z) const;
  int cells() const { return nx * ny * nz; }

  void validate(double tol = 1e-12) const;  // nonnegative, mass 1, dims <= 16

  static DiscreteJoint uniform(int nx, int ny, int nz);
  static DiscreteJoint random(int nx, int ny, int nz, Rng& rng);
};

// Conditional tables of a discrete latent-variable model. Rows (over the
// last index) are simplexes. The posterior table is free: it may be set to
// the true posterior or to anything else to probe the ELBO gap.
struct TabularModel {
  int nx = 1, ny = 1, nz = 1;
  Eigen::MatrixXd x_given_zy;  // (z*ny + y) rows, nx cols
  Eigen::MatrixXd y_given_zx;  // (z*nx + x) rows, ny cols
  Eigen::MatrixXd z_given_y;   // y rows, nz cols
  Eigen::MatrixXd z_given_x;   // x rows, nz cols
  Eigen::MatrixXd post_z_xy;   // (x*ny + y) rows, nz cols

  static TabularModel random(int nx, int ny, int nz, Rng& rng);
  void validate(double tol = 1e-9) const;

  // Replace the free posterior with the exact model posterior of the
  // generation factorization q(z|x,y) proportional to q(x|z,y) q(z|y), or of
  // the classification factorization q(z|x,y) proportional to q(y|z,x) q(z|x).
  void set_posterior_to_true_gen();
  void set_posterior_to_true_cls();
};

// Per-(x, y) evidence decomposition. gap = log_marginal - elbo is computed
// from the two bound sides; posterior_kl is the KL from the assumed to the
// true posterior computed directly, so tests can confirm gap == posterior_kl.
struct ElboResult {
  Eigen::MatrixXd elbo;          // nx x ny
  Eigen::MatrixXd log_marginal;  // nx x ny
  Eigen::MatrixXd gap;           // nx x ny
  Eigen::MatrixXd posterior_kl;  // nx x ny
};

// log q(x|y) >= E_{p(z|x,y)}[log q(x|z,y)] - KL[p(z|x,y) || q(z|y)]
ElboResult elbo_gap_gen(const TabularModel& m);
// log q(y|x) >= E_{p(z|x,y)}[log q(y|z,x)] - KL[p(z|x,y) || q(z|x)]
ElboResult elbo_gap_cls(const TabularModel& m);

// sum p log((a p + b q' + c u)/q) = KL[p||q] - sum p log(p / (a p + b q' + c u))
// where the second term is a generalized KL against the unnormalized mixture.
struct Theorem1Result {
  double lhs = 0.0;
  double rhs = 0.0;
  double residual = 0.0;
};
Theorem1Result theorem1_identity(const DiscreteJoint& p, const DiscreteJoint& q_prime,
                                 const DiscreteJoint& u, const DiscreteJoint& q,
                                 double alpha = 1.0, double beta = 1.0,
                                 double gamma = 1.0);

// The self-training objective -sum (p + q' + u) log q differs from
// KL[p||q] + KL[q'||q] + KL[u||q] by a constant independent of q.
struct StDecomposition {
  double mixture_objective = 0.0;  // -sum (p + q' + u) log q
  double kl_sum = 0.0;             // KL[p||q] + KL[q'||q] + KL[u||q]
  double constant = 0.0;           // mixture_objective - kl_sum, q-free
};
StDecomposition st_objective_decomposition(const DiscreteJoint& p,
                                           const DiscreteJoint& q_prime,
                                           const DiscreteJoint& u,
                                           const DiscreteJoint& q);

// Normalized (p + q' + u)/3: the pointwise minimizer of the mixture objective.
DiscreteJoint mixture_minimizer(const DiscreteJoint& p,
                                const DiscreteJoint& q_prime,
                                const DiscreteJoint& u);

// Discrete-z analog of the importance-weighted evidence bound: draws z_i
// from the free posterior and returns log mean_i of
// q(x|z_i,y) q(z_i|y) / post(z_i|x,y). Its expectation is a lower bound on
// tabular_log_marginal_gen and is nondecreasing in k.
double tabular_log_marginal_gen(const TabularModel& m, int x, int y);
double tabular_iw_bound(const TabularModel& m, int x, int y, int k, Rng& rng);

}  // namespace dunst
