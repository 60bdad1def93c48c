#pragma once

#include <Eigen/Dense>
#include <functional>
#include <vector>

#include "dunst/latent.hpp"

namespace dunst {

struct LossWeights {
  double lambda_c = 1.0;  // classification presets use 10
  double lambda_g = 1.0;
  double lambda_bow = 0.2;
  double lambda_kl_c = 1.0;  // produced by the anneal schedule
  double lambda_kl_g = 1.0;
  double kl_free_bits = 0.05;

  void validate() const;  // all weights nonnegative
};

// Cyclical ramp: within active epochs the weight rises 0 -> 1 linearly over
// the first rise_fraction of each cycle and holds at 1 for the rest; once a
// term's active epochs are over the weight stays at 1.
struct AnnealSchedule {
  long cycle_length = 1;       // steps per cycle, normally steps per epoch
  double rise_fraction = 0.8;  // in (0, 1]
  int active_epochs_kl_c = 5;
  int active_epochs_kl_g = 7;

  void validate() const;
};

enum class KlTerm { kl_c, kl_g };

double anneal_weight(const AnnealSchedule& sched, long global_step, int epoch,
                     KlTerm term);

// Per-dimension KL[q || p] between diagonal Gaussians; sum gives the scalar.
Eigen::VectorXd gaussian_kl_per_dim(const LatentGaussian& q,
                                    const LatentGaussian& p);
double gaussian_kl(const LatentGaussian& q, const LatentGaussian& p);

// Sum over positions of -log softmax(logits_m)[target_m]. Columns of
// step_logits are per-position vocabulary logits; targets supply one id per
// column (the final one is normally EOS).
double recon_nll(const Eigen::MatrixXd& step_logits,
                 const std::vector<int>& targets);

// Sum over positions of KL[d_m || softmax(logits_m)] for stored soft
// pseudo-token distributions d (columns of soft_targets).
double soft_recon_kl(const Eigen::MatrixXd& soft_targets,
                     const Eigen::MatrixXd& step_logits);

double cls_nll(const Eigen::VectorXd& logits, int gold);

// Position-independent reconstruction: -sum_t log softmax(bow_logits)[x_t]
// over content targets (reserved ids are skipped).
double bow_loss(const Eigen::VectorXd& bow_logits,
                const std::vector<int>& targets);

// sum_i max(kl_i, floor); dims already below the floor contribute a constant
// so their gradient is zero.
double free_bits(const Eigen::VectorXd& kl_per_dim, double kl_free_bits);

struct LossComponents {
  double l_c = 0.0;
  double l_g = 0.0;
  Eigen::VectorXd kl_c_per_dim;
  Eigen::VectorXd kl_g_per_dim;
  double l_bow = 0.0;
};

// lambda_c L_c + lambda_g L_g + lambda_kl_c fb(KL_c) + lambda_kl_g fb(KL_g)
// + lambda_bow L_bow, with fb = free_bits at weights.kl_free_bits.
double total_loss(const LossComponents& parts, const LossWeights& weights);

// Central-difference gradient verification over a flat parameter vector.
// Per-coordinate step is epsilon * max(1, |w_i|); relative error uses a
// guarded denominator so near-zero coordinates compare absolutely.
struct GradCheckResult {
  double max_rel_error = 0.0;
  int worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                           const Eigen::VectorXd& at,
                           const Eigen::VectorXd& analytic_grad, double epsilon,
                           const std::vector<int>& coords = {});

}  // namespace dunst
