#include "dunst/train.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dunst {

void AdamWConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("AdamW: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("AdamW: betas must lie in [0,1)");
  if (eps <= 0.0) throw std::invalid_argument("AdamW: eps must be positive");
  if (weight_decay < 0.0)
    throw std::invalid_argument("AdamW: negative weight decay");
  if (warmup_steps < 1)
    throw std::invalid_argument("AdamW: warmup_steps must be at least 1");
}

AdamW::AdamW(const AdamWConfig& config, long n) : cfg_(config) {
  cfg_.validate();
  if (n < 1) throw std::invalid_argument("AdamW: empty parameter vector");
  m_ = Eigen::VectorXd::Zero(n);
  v_ = Eigen::VectorXd::Zero(n);
}

double AdamW::rate() const {
  double ramp = std::min(
      1.0, static_cast<double>(step_) / static_cast<double>(cfg_.warmup_steps));
  return cfg_.lr * ramp;
}

void AdamW::update(Eigen::VectorXd& w, const Eigen::VectorXd& grad) {
  if (w.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("AdamW: size mismatch");
  const double r = rate();
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  Eigen::ArrayXd mhat = m_.array() / bc1;
  Eigen::ArrayXd vhat = v_.array() / bc2;
  w.array() -= r * (mhat / (vhat.sqrt() + cfg_.eps) + cfg_.weight_decay * w.array());
  ++step_;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be positive");
  if (batch_size < 1)
    throw std::invalid_argument("train: batch_size must be positive");
  opt.validate();
  weights.validate();
  if (anneal.cycle_length > 0) anneal.validate();
}

std::vector<TrainExample> to_train_examples(
    const std::vector<LabeledExample>& data) {
  std::vector<TrainExample> out;
  out.reserve(data.size());
  for (const LabeledExample& ex : data) {
    if (ex.label == kNoLabel)
      throw std::invalid_argument("to_train_examples: unlabeled example");
    TrainExample t;
    t.tokens = ex.tokens;
    t.label = ex.label;
    out.push_back(std::move(t));
  }
  return out;
}

double eval_mean_loss(const ModelParams& params,
                      const std::vector<TrainExample>& data,
                      const LossWeights& weights) {
  if (data.empty()) throw std::invalid_argument("eval_mean_loss: no data");
  Eigen::VectorXd eps = Eigen::VectorXd::Zero(params.config.d_z);
  double sum = 0.0;
  for (const TrainExample& ex : data)
    sum += forward_backward(params, ex, weights, eps, nullptr).total;
  return sum / static_cast<double>(data.size());
}

TrainResult train_model(const ModelParams& init,
                        const std::vector<TrainExample>& train,
                        const std::vector<TrainExample>& dev,
                        const TrainConfig& config) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train: no training data");
  if (dev.empty()) throw std::invalid_argument("train: no dev data");

  ModelParams params = init;
  const long steps_per_epoch =
      (static_cast<long>(train.size()) + config.batch_size - 1) /
      config.batch_size;
  AnnealSchedule anneal = config.anneal;
  if (anneal.cycle_length <= 0) anneal.cycle_length = steps_per_epoch;
  anneal.validate();

  AdamW opt(config.opt, params.param_count());
  Rng rng(derive_seed(config.seed, 0x7247ULL));

  TrainResult result;
  result.best = params;
  result.best_dev = std::numeric_limits<double>::infinity();

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  ModelParams grads = ModelParams::zeros_like(params);
  Eigen::VectorXd eps(params.config.d_z);
  long global_step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    EpochStats stats;
    long batches = 0;
    for (size_t at = 0; at < order.size(); at += config.batch_size) {
      size_t end = std::min(order.size(), at + config.batch_size);
      LossWeights w = config.weights;
      w.lambda_kl_c = config.weights.lambda_kl_c *
                      anneal_weight(anneal, global_step, epoch, KlTerm::kl_c);
      w.lambda_kl_g = config.weights.lambda_kl_g *
                      anneal_weight(anneal, global_step, epoch, KlTerm::kl_g);
      grads.set_zero();
      double batch_loss = 0.0;
      for (size_t i = at; i < end; ++i) {
        const TrainExample& ex = train[order[i]];
        for (int d = 0; d < eps.size(); ++d) eps[d] = rng.normal();
        LossBreakdown out = forward_backward(params, ex, w, eps, &grads);
        batch_loss += out.total;
        stats.l_c += out.parts.l_c;
        stats.l_g += out.parts.l_g;
        stats.l_bow += out.parts.l_bow;
        stats.kl_c += free_bits(out.parts.kl_c_per_dim, w.kl_free_bits);
        stats.kl_g += free_bits(out.parts.kl_g_per_dim, w.kl_free_bits);
      }
      const double inv = 1.0 / static_cast<double>(end - at);
      Eigen::VectorXd flat_w = params.flatten();
      Eigen::VectorXd flat_g = grads.flatten() * inv;
      opt.update(flat_w, flat_g);
      params.unflatten(flat_w);
      stats.train_loss += batch_loss * inv;
      ++batches;
      ++global_step;
    }
    const double n = static_cast<double>(train.size());
    stats.train_loss /= static_cast<double>(batches);
    stats.l_c /= n;
    stats.l_g /= n;
    stats.l_bow /= n;
    stats.kl_c /= n;
    stats.kl_g /= n;
    stats.dev_loss = eval_mean_loss(params, dev, config.weights);
    result.epochs.push_back(stats);
    if (stats.dev_loss < result.best_dev) {
      result.best_dev = stats.dev_loss;
      result.best_epoch = epoch;
      result.best = params;
    }
  }
  return result;
}

}  // namespace dunst
