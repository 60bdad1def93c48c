#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/decoding.hpp"
#include "dunst/latent.hpp"
#include "dunst/losses.hpp"
#include "dunst/rng.hpp"

namespace dunst {

struct ModelConfig {
  int V = 16;
  int K = 2;
  int d_h = 64;
  int d_z = 16;
  int layers = 2;
  int heads = 2;
  int d_ff = 128;
  int max_seq = 64;
  double dropout = 0.1;      // classifier-head dropout, stochastic passes only
  double init_scale = 0.02;  // stddev of weight init

  int d_head() const { return d_h / heads; }
  void validate() const;
};

// One shared transformer block. The encoder and decoder run the same blocks;
// the fusion projection only participates on the decoder path, where the
// latent is concatenated to each position's attention output.
struct LayerParams {
  Eigen::MatrixXd ln1_g, ln1_b;
  Eigen::MatrixXd w_qkv, b_qkv;
  Eigen::MatrixXd w_o, b_o;
  Eigen::MatrixXd w_fuse, b_fuse;  // d_h x (d_h + d_z)
  Eigen::MatrixXd ln2_g, ln2_b;
  Eigen::MatrixXd w_ff1, b_ff1;
  Eigen::MatrixXd w_ff2, b_ff2;
};

struct ModelParams {
  ModelConfig config;

  Eigen::MatrixXd tok_emb;    // d_h x V, also the tied output projection
  Eigen::MatrixXd pos_emb;    // d_h x max_seq
  Eigen::MatrixXd label_emb;  // d_h x K
  std::vector<LayerParams> layers;
  Eigen::MatrixXd lnf_g, lnf_b;

  // Gaussian heads: tanh MLPs ending in 2*d_z outputs (mu, log sigma).
  Eigen::MatrixXd w_post1, b_post1, w_post2, b_post2;  // input [h_x; h_y]
  Eigen::MatrixXd w_pg1, b_pg1, w_pg2, b_pg2;          // input h_y
  Eigen::MatrixXd w_pc1, b_pc1, w_pc2, b_pc2;          // input h_x

  Eigen::MatrixXd w_cls1, b_cls1, w_cls2, b_cls2;  // z -> K logits
  Eigen::MatrixXd w_bow, b_bow;                    // z -> V logits
  Eigen::MatrixXd b_out;                           // output bias, V x 1

  static ModelParams init(const ModelConfig& config, uint64_t seed);
  static ModelParams zeros_like(const ModelParams& other);

  // Every tensor in a fixed order; the order defines the flattened layout,
  // the optimizer-state pairing, and the checkpoint file.
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> tensors();
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> tensors() const;

  long param_count() const;
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& flat);
  void set_zero();
  void add_scaled(const ModelParams& other, double a);  // this += a * other
  double squared_norm() const;
};

struct EncodedState {
  Eigen::VectorXd h_x;     // pooled first-position state
  Eigen::MatrixXd states;  // d_h x framed length
};

// Inference surface. Token arguments are content sequences; BOS/EOS framing
// happens inside. decode_step takes an explicitly BOS-framed prefix instead,
// matching the incremental-generation contract.
EncodedState encode(const ModelParams& p, const std::vector<int>& content);
LatentGaussian posterior(const ModelParams& p, const std::vector<int>& content,
                         int label);
LatentGaussian prior_gen(const ModelParams& p, int label);
LatentGaussian prior_cls(const ModelParams& p, const std::vector<int>& content);
Eigen::VectorXd reparameterize(const LatentGaussian& g, Rng& rng);

// Teacher-forced decoder: frames [BOS, inputs...] and returns one logit
// column per position; column m scores the target following position m.
Eigen::MatrixXd decoder_logits(const ModelParams& p, const Eigen::VectorXd& z,
                               const std::vector<int>& inputs);
Eigen::VectorXd decode_step(const ModelParams& p, const Eigen::VectorXd& z,
                            const std::vector<int>& prefix);

Eigen::VectorXd classify(const ModelParams& p, const Eigen::VectorXd& z);
// Stochastic classifier pass with inverted dropout on the hidden layer; used
// by the BALD uncertainty estimate.
Eigen::VectorXd classify_mc(const ModelParams& p, const Eigen::VectorXd& z,
                            Rng& rng);
Eigen::VectorXd bow_logits(const ModelParams& p, const Eigen::VectorXd& z);

// One training example. For soft pseudo text, `soft` points at the stored
// per-step distributions, `tokens` holds its content shadow (encoder,
// posterior, and BOW inputs), and the reconstruction loss becomes the
// distribution-matching branch.
struct TrainExample {
  std::vector<int> tokens;
  int label = kNoLabel;
  const SoftSequence* soft = nullptr;
};

struct LossBreakdown {
  LossComponents parts;
  double total = 0.0;
};

// Full loss with hand-written backward. eps is the reparameterization draw
// (dimension d_z), supplied by the caller so the functional is deterministic.
// grads may be null for a value-only pass; otherwise gradients accumulate.
LossBreakdown forward_backward(const ModelParams& p, const TrainExample& ex,
                               const LossWeights& weights,
                               const Eigen::VectorXd& eps, ModelParams* grads);

void save_checkpoint(const ModelParams& p, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace dunst
