#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/rng.hpp"

namespace dunst {

struct DecodeConfig {
  double top_p = 0.9;
  double temperature = 1.0;  // high-temperature pseudo-text preset: 5
  int min_len = 10;
  int max_len = 20;
  int no_repeat_ngram = 4;       // 0 disables
  double length_penalty = 1.0;   // sequence-score divisor; inert under sampling
  double repetition_penalty = 1.0;
  uint64_t seed = 0;

  void validate() const;
};

// Per-step token distributions produced by soft generation. Columns of
// `steps` are simplexes over the vocabulary, already temperature-flattened
// and nucleus-filtered. When generation stopped by sampling EOS the final
// column is kept (it supervises stopping), flagged by terminal_eos;
// content_len() counts the non-terminal steps and respects the configured
// length bounds. hard_shadow holds each step's argmax token.
struct SoftSequence {
  Eigen::MatrixXd steps;  // V x M
  int label = kNoLabel;
  std::vector<int> hard_shadow;
  bool terminal_eos = false;

  int content_len() const {
    return static_cast<int>(steps.cols()) - (terminal_eos ? 1 : 0);
  }
  // Hard-shadow tokens restricted to content ids, usable as a plain example.
  std::vector<int> content_shadow() const;
  void validate(int min_len, int max_len) const;
};

// Next-token logits for a BOS-framed prefix. The model side supplies this;
// tests may use any function of the prefix.
using StepFn = std::function<Eigen::VectorXd(const std::vector<int>& prefix)>;

Eigen::VectorXd temperature_softmax(const Eigen::VectorXd& logits, double tau);

// Smallest probability-sorted prefix with cumulative mass >= p, renormalized;
// ties broken by ascending token id. p = 1 is the identity.
Eigen::VectorXd top_p_filter(const Eigen::VectorXd& probs, double p);

// Autoregressive sampling. Returns content tokens (prompt included, BOS/EOS
// stripped). Per step: repetition penalty, temperature softmax, masking
// (reserved ids; EOS before min_len; no-repeat-ngram continuations), top-p,
// sample. Stops on EOS or at max_len.
std::vector<int> generate_hard(const StepFn& step, const DecodeConfig& config,
                               Rng& rng, const std::vector<int>& prompt = {});

// Same loop, but the full filtered distribution of every step is stored and
// the context advances with a token sampled from it.
SoftSequence generate_soft(const StepFn& step, int label,
                           const DecodeConfig& config, Rng& rng);

// Synthetic noise: drop each token w.p. drop_p, replace w.p. mask_p by a
// uniform random content token, then locally shuffle by stable-sorting keys
// i + U[0, shuffle_k]. An emptied sequence is padded with the first source
// token so downstream consumers always see at least one token.
std::vector<int> corrupt(const std::vector<int>& tokens, int V, double drop_p,
                         double mask_p, double shuffle_k, Rng& rng);

// Binary side file for soft sequences (little-endian doubles).
void write_soft_sequences(const std::vector<SoftSequence>& seqs,
                          const std::string& path);
std::vector<SoftSequence> read_soft_sequences(const std::string& path);

}  // namespace dunst
