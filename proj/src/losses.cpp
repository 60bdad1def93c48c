#include "dunst/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dunst/corpus.hpp"
#include "dunst/math.hpp"

namespace dunst {

void LossWeights::validate() const {
  for (double w : {lambda_c, lambda_g, lambda_bow, lambda_kl_c, lambda_kl_g,
                   kl_free_bits})
    if (w < 0.0) throw std::invalid_argument("LossWeights: negative weight");
}

void AnnealSchedule::validate() const {
  if (cycle_length < 1)
    throw std::invalid_argument("AnnealSchedule: cycle_length must be >= 1");
  if (!(rise_fraction > 0.0 && rise_fraction <= 1.0))
    throw std::invalid_argument("AnnealSchedule: rise_fraction outside (0,1]");
  if (active_epochs_kl_c < 0 || active_epochs_kl_g < 0)
    throw std::invalid_argument("AnnealSchedule: negative active epochs");
}

double anneal_weight(const AnnealSchedule& sched, long global_step, int epoch,
                     KlTerm term) {
  sched.validate();
  int active = term == KlTerm::kl_c ? sched.active_epochs_kl_c
                                    : sched.active_epochs_kl_g;
  if (epoch >= active) return 1.0;
  long pos = global_step % sched.cycle_length;
  double rise_steps = sched.rise_fraction * static_cast<double>(sched.cycle_length);
  return std::min(1.0, static_cast<double>(pos) / rise_steps);
}

Eigen::VectorXd gaussian_kl_per_dim(const LatentGaussian& q,
                                    const LatentGaussian& p) {
  if (q.dim() != p.dim())
    throw std::invalid_argument("gaussian_kl: dim mismatch");
  Eigen::VectorXd out(q.dim());
  for (int i = 0; i < q.dim(); ++i) {
    double var_q = std::exp(2.0 * q.log_sigma[i]);
    double inv_var_p = std::exp(-2.0 * p.log_sigma[i]);
    double dmu = q.mu[i] - p.mu[i];
    out[i] = p.log_sigma[i] - q.log_sigma[i] +
             0.5 * (var_q + dmu * dmu) * inv_var_p - 0.5;
  }
  return out;
}

double gaussian_kl(const LatentGaussian& q, const LatentGaussian& p) {
  return gaussian_kl_per_dim(q, p).sum();
}

double recon_nll(const Eigen::MatrixXd& step_logits,
                 const std::vector<int>& targets) {
  if (targets.empty())
    throw std::invalid_argument("recon_nll: need at least one target");
  if (step_logits.cols() != static_cast<long>(targets.size()))
    throw std::invalid_argument("recon_nll: logit/target length mismatch");
  double acc = 0.0;
  for (size_t m = 0; m < targets.size(); ++m)
    acc -= log_softmax(step_logits.col(m))[targets[m]];
  return acc;
}

double soft_recon_kl(const Eigen::MatrixXd& soft_targets,
                     const Eigen::MatrixXd& step_logits) {
  if (soft_targets.rows() != step_logits.rows() ||
      soft_targets.cols() != step_logits.cols())
    throw std::invalid_argument("soft_recon_kl: shape mismatch");
  double acc = 0.0;
  for (int m = 0; m < soft_targets.cols(); ++m) {
    if (std::abs(soft_targets.col(m).sum() - 1.0) > 1e-6 ||
        soft_targets.col(m).minCoeff() < 0.0)
      throw std::invalid_argument("soft_recon_kl: target is not a simplex");
    Eigen::VectorXd lp = log_softmax(step_logits.col(m));
    for (int v = 0; v < soft_targets.rows(); ++v) {
      double d = soft_targets(v, m);
      if (d > 0.0) acc += d * (std::log(d) - lp[v]);
    }
  }
  return acc;
}

double cls_nll(const Eigen::VectorXd& logits, int gold) {
  if (gold < 0 || gold >= logits.size())
    throw std::invalid_argument("cls_nll: gold label out of range");
  return -log_softmax(logits)[gold];
}

double bow_loss(const Eigen::VectorXd& bow_logits,
                const std::vector<int>& targets) {
  Eigen::VectorXd lp = log_softmax(bow_logits);
  double acc = 0.0;
  for (int t : targets) {
    if (t < 0 || t >= bow_logits.size())
      throw std::invalid_argument("bow_loss: target out of range");
    if (t < Vocab::kNumSpecial) continue;
    acc -= lp[t];
  }
  return acc;
}

double free_bits(const Eigen::VectorXd& kl_per_dim, double kl_free_bits) {
  if (kl_free_bits < 0.0)
    throw std::invalid_argument("free_bits: negative floor");
  return kl_per_dim.cwiseMax(kl_free_bits).sum();
}

double total_loss(const LossComponents& parts, const LossWeights& weights) {
  weights.validate();
  return weights.lambda_c * parts.l_c + weights.lambda_g * parts.l_g +
         weights.lambda_kl_c * free_bits(parts.kl_c_per_dim, weights.kl_free_bits) +
         weights.lambda_kl_g * free_bits(parts.kl_g_per_dim, weights.kl_free_bits) +
         weights.lambda_bow * parts.l_bow;
}

GradCheckResult grad_check(const std::function<double(const Eigen::VectorXd&)>& f,
                           const Eigen::VectorXd& at,
                           const Eigen::VectorXd& analytic_grad, double epsilon,
                           const std::vector<int>& coords) {
  if (epsilon <= 0.0)
    throw std::invalid_argument("grad_check: epsilon must be positive");
  if (analytic_grad.size() != at.size())
    throw std::invalid_argument("grad_check: gradient size mismatch");
  std::vector<int> idx = coords;
  if (idx.empty()) {
    idx.resize(at.size());
    for (int i = 0; i < at.size(); ++i) idx[i] = i;
  }
  GradCheckResult res;
  Eigen::VectorXd w = at;
  for (int i : idx) {
    double h = epsilon * std::max(1.0, std::abs(at[i]));
    w[i] = at[i] + h;
    double up = f(w);
    w[i] = at[i] - h;
    double down = f(w);
    w[i] = at[i];
    double numeric = (up - down) / (2.0 * h);
    double analytic = analytic_grad[i];
    double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-2});
    double rel = std::abs(numeric - analytic) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.analytic_at_worst = analytic;
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

}  // namespace dunst
