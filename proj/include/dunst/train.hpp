#pragma once

#include <Eigen/Dense>
#include <vector>

#include "dunst/losses.hpp"
#include "dunst/model.hpp"
#include "dunst/rng.hpp"

namespace dunst {

// Decoupled weight decay Adam over a flat parameter vector. The applied rate
// ramps linearly over the warmup: rate = lr * min(1, step / warmup_steps),
// so the very first update (step 0) only charges the moment estimates.
struct AdamWConfig {
  double lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int warmup_steps = 50;

  void validate() const;
};

class AdamW {
 public:
  AdamW(const AdamWConfig& config, long n);

  double rate() const;  // the rate the next update will apply
  long step() const { return step_; }
  void update(Eigen::VectorXd& w, const Eigen::VectorXd& grad);

 private:
  AdamWConfig cfg_;
  Eigen::VectorXd m_, v_;
  long step_ = 0;
};

struct TrainConfig {
  int epochs = 12;
  int batch_size = 8;
  AdamWConfig opt;
  // Base loss weights; the KL lambdas are replaced by the anneal schedule
  // each step, with cycle_length defaulting to the steps per epoch when 0.
  LossWeights weights;
  AnnealSchedule anneal;
  uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  double train_loss = 0.0;  // mean batch-averaged total
  double dev_loss = 0.0;
  double l_c = 0.0, l_g = 0.0, l_bow = 0.0;  // training means
  double kl_c = 0.0, kl_g = 0.0;             // free-bits floored sums
};

struct TrainResult {
  ModelParams best;  // dev-best parameters
  double best_dev = 0.0;
  int best_epoch = -1;
  std::vector<EpochStats> epochs;
};

std::vector<TrainExample> to_train_examples(
    const std::vector<LabeledExample>& data);

// Mean total loss with deterministic latents (z = posterior mean) and the
// anneal ramp pinned at 1; the model-selection criterion.
double eval_mean_loss(const ModelParams& params,
                      const std::vector<TrainExample>& data,
                      const LossWeights& weights);

// Minibatch training with gradient accumulation. Dev loss is evaluated after
// every epoch and the best parameters are returned; ties keep the earlier
// epoch. Soft examples train through the distribution-matching branch.
TrainResult train_model(const ModelParams& init,
                        const std::vector<TrainExample>& train,
                        const std::vector<TrainExample>& dev,
                        const TrainConfig& config);

}  // namespace dunst
