#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/decoding.hpp"
#include "dunst/metrics.hpp"
#include "dunst/model.hpp"
#include "dunst/train.hpp"

namespace dunst {

// Self-training variants. kDunst pairs pseudo labels with soft pseudo text;
// the kNo* family removes one or both of those ingredients; the kNaivePt /
// kPt* family generates hard pseudo text at temperature 1 regardless of the
// configured preset, optionally with corruption noise or score-based
// selection.
enum class STVariant {
  kDunst,
  kDunstHardPt,  // soft targets replaced by their sampled tokens
  kNoPt,
  kNoPl,
  kNoPlSpt,  // pseudo text only, hard targets
  kNoPlPt,   // labeled data only: the plain dual VAE
  kNaivePt,
  kPtNoise,
  kPtNoisePl,
  kPtSelectPl,
};

const char* variant_name(STVariant v);
STVariant variant_from_name(const std::string& name);

bool variant_uses_pl(STVariant v);
bool variant_uses_pt(STVariant v);
bool variant_soft_pt(STVariant v);
// True for variants that keep the configured pseudo-text decode (the
// flattened high-temperature preset); the naive family forces temperature 1.
bool variant_flattened_pt(STVariant v);
bool variant_noised_pt(STVariant v);
bool variant_selects_pt(STVariant v);

struct NoiseConfig {
  double drop_p = 0.05;
  double mask_p = 0.05;
  double shuffle_k = 1.1;

  void validate() const;
};

struct STConfig {
  int max_epochs = 10;
  // |D_PT| = round(pseudo_text_ratio * |D_L|), split evenly across labels.
  double pseudo_text_ratio = 1.0;
  DecodeConfig pt_decode;    // pseudo text; set temperature 5 for flattening
  DecodeConfig eval_decode;  // evaluation generations
  double overgenerate_factor = 2.0;  // selection pool multiplier
  double selection_epsilon = 1e-5;
  int mc_dropout_passes = 10;
  NoiseConfig noise;
  // Freezes pseudo labels after their first pass and zeroes the classifier
  // loss lambdas during self-training epochs.
  bool minus_dual = false;
  TrainConfig base_train;  // labeled-only warmup
  TrainConfig st_train;    // per-epoch union training
  int eval_generations = 60;
  int ppl_k = 8;
  uint64_t seed = 0;

  void validate(STVariant variant) const;
};

struct STState {
  ModelParams params;    // the model being trained
  ModelParams snapshot;  // sole source of pseudo data within an epoch
  std::vector<LabeledExample> d_pl;
  std::vector<SoftSequence> d_pt;        // soft-target variants
  std::vector<LabeledExample> d_pt_hard;  // hard-target variants
  int epoch = 0;
};

// Deterministic label prediction: argmax of the classifier at the mean of
// the classification prior.
int predict_label(const ModelParams& params, const std::vector<int>& tokens);

// One prediction per unlabeled example, order preserved.
std::vector<LabeledExample> pseudo_label_pass(
    const ModelParams& snapshot, const std::vector<LabeledExample>& unlabeled);

// total split as evenly as possible, leftovers to the lowest labels.
std::vector<int> balanced_counts(int total, int K);

// count_per_label[k] sequences with label k, each from a fresh latent drawn
// at that label's generation prior. Per-sequence rng streams derive from
// (seed, running index) so results do not depend on generation order.
std::vector<SoftSequence> pseudo_text_pass(const ModelParams& snapshot,
                                           const std::vector<int>& count_per_label,
                                           const DecodeConfig& decode,
                                           uint64_t seed);
std::vector<LabeledExample> pseudo_text_hard_pass(
    const ModelParams& snapshot, const std::vector<int>& count_per_label,
    const DecodeConfig& decode, uint64_t seed);

// conf + epsilon / max(uncertainty, 1e-12); higher keeps.
double selection_score(double conf, double uncertainty, double epsilon);

// BALD mutual information from `passes` stochastic classifier passes:
// entropy of the mean predictive minus mean entropy, floored at 0.
double bald_uncertainty(const ModelParams& params, const Eigen::VectorXd& z,
                        int passes, Rng& rng);

// Keeps the keep_per_label[k] highest-scoring pool members of each label;
// ties keep the earlier pool index. Throws if a label bucket is too small.
std::vector<LabeledExample> select_pseudo_text(
    const ModelParams& snapshot, const std::vector<LabeledExample>& pool,
    const std::vector<int>& keep_per_label, double epsilon, int mc_passes,
    uint64_t seed);

// The pseudo-text decode a variant actually uses: the configured preset for
// flattened variants, temperature 1 otherwise.
DecodeConfig pt_decode_for(STVariant variant, const STConfig& config);

struct STEpochSummary {
  int epoch = 0;   // state.epoch after the update
  long n_pl = 0;
  long n_pt = 0;
  double dev_loss = 0.0;  // dev-best of the inner training run
};

// One self-training epoch: pseudo passes from the snapshot, union build,
// inner training continuing from state.params, snapshot refresh.
STEpochSummary run_st_epoch(STState& state, const CorpusSplits& splits,
                            STVariant variant, const STConfig& config);

struct EvalOutput {
  MetricsReport report;
  std::vector<std::vector<int>> generations;
  std::vector<int> intended;
};

// Label-balanced generations from the generation prior plus the full metric
// sweep against the test split; epoch only salts the rng streams.
EvalOutput evaluate_model(const ModelParams& params,
                          const SyntheticSource& source,
                          const std::vector<LabeledExample>& test,
                          const BigramJudge& judge, const STConfig& config,
                          int epoch);

// One record per line: attribute name, tab, space-joined token words.
void write_generations_txt(const std::string& path, const Corpus& corpus,
                           const EvalOutput& ev);

// Labeled-split warmup run; uses config.base_train and config.seed only.
TrainResult train_base_model(const Corpus& corpus, const ModelConfig& mc,
                             const STConfig& config);

struct ExperimentResult {
  std::vector<MetricsReport> epochs;  // max_epochs + 1 rows, epoch 0 = base
  ModelParams final_params;
  ModelParams best_params;  // lowest inner dev loss across the run
  double best_dev = 0.0;
  int best_epoch = 0;
};

// Base training on the labeled split, then max_epochs self-training epochs,
// evaluating after each. A non-empty out_dir receives config.txt,
// epoch_NNN/{metrics.tsv,generations.txt}, checkpoint_{best,last}, and a
// cumulative metrics.tsv. Requires a corpus with rebuildable source.
ExperimentResult run_experiment(const Corpus& corpus,
                                const ModelConfig& model_config,
                                STVariant variant, const STConfig& config,
                                const std::string& out_dir = "");

// Same loop starting from an already trained base model (its dev criterion
// is recomputed), so one base can serve several variants.
ExperimentResult run_experiment_from(const Corpus& corpus,
                                     const ModelParams& base,
                                     STVariant variant, const STConfig& config,
                                     const std::string& out_dir = "");

}  // namespace dunst
