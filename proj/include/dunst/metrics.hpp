#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/model.hpp"
#include "dunst/rng.hpp"

namespace dunst {

// Distinct n-grams over total n-grams, pooled across all generations.
// Returns -1 when no sequence is long enough to contribute an n-gram, so
// callers can exclude that n from aggregation.
double dist_n(const std::vector<std::vector<int>>& generations, int n);

// Geometric mean of dist_1..dist_4, skipping n values with no n-grams.
double dist_geo(const std::vector<std::vector<int>>& generations);

// Mean BLEU of each generation against the others as references: modified
// n-gram precision with clipping for n = 2,3,4, brevity penalty against the
// closest reference length (ties resolved toward the shorter reference), and
// no smoothing, so any zero precision zeroes that candidate's score.
// Scale 0..100; fewer than two generations give 0.
double self_bleu(const std::vector<std::vector<int>>& generations);

// Importance-weighted log-likelihood bound for one sequence: k posterior
// samples, weights p(x|z) p(z|y) / q(z|x,y), bound logmeanexp of the weights.
double iw_log_bound(const ModelParams& params, const std::vector<int>& tokens,
                    int label, int k, Rng& rng);

// exp(-bound / scored positions); positions include the terminal EOS.
double iw_ppl(const ModelParams& params, const std::vector<int>& tokens,
              int label, int k, Rng& rng);

struct PplStats {
  double ppl = 0.0;
  // Multiplicative half-width: ppl * (exp(1.96 se) - 1), with se taken over
  // the unweighted per-example mean token NLL.
  double ci = 0.0;
  long n_tokens = 0;
};

// Token-averaged bound over a labeled set: exp(sum -L_k / sum positions).
// Per-example RNG streams derive from (seed, index) so the value does not
// depend on evaluation order.
PplStats model_ppl_stats(const ModelParams& params,
                         const std::vector<LabeledExample>& data, int k,
                         uint64_t seed);
double model_ppl(const ModelParams& params,
                 const std::vector<LabeledExample>& data, int k = 8,
                 uint64_t seed = 0);

struct ClassificationMetrics {
  double acc = 0.0;
  double macro_f1 = 0.0;  // classes with no gold and no predictions score 0
  double auc = 0.0;       // binary: rank statistic; K>2: macro one-vs-rest
};

// scores is N x K (per-class); binary AUC reads the class-1 column. Classes
// with no positives or no negatives are skipped by the macro AUC average.
ClassificationMetrics classification_metrics(const std::vector<int>& pred,
                                             const Eigen::MatrixXd& scores,
                                             const std::vector<int>& gold);

struct ControlScore {
  double acc = 0.0;
  double macro_f1 = 0.0;
};

// Attribute control measured against the corpus Bayes oracle: the predicted
// label of each generation is the posterior argmax under the true source.
ControlScore control_accuracy(const std::vector<std::vector<int>>& generations,
                              const std::vector<int>& intended,
                              const SyntheticSource& source);

// Label-agnostic bigram language model with additive smoothing, fit on
// held-out text; an external-fluency proxy for generations.
struct BigramJudge {
  int V = 0;
  Eigen::VectorXd init;   // first-token distribution over content ids
  Eigen::MatrixXd trans;  // row-stochastic over content ids

  static BigramJudge fit(const std::vector<LabeledExample>& data, int V,
                         double alpha = 1.0);
  double log_prob(const std::vector<int>& tokens) const;
  // exp of mean NLL per event (first token plus each transition).
  double ppl(const std::vector<int>& tokens) const;
};

// Judge perplexity pooled over a generation set, with the same CI convention
// as model_ppl_stats.
PplStats judge_ppl_stats(const BigramJudge& judge,
                         const std::vector<std::vector<int>>& generations);

struct MetricsReport {
  double output_ppl = 0.0;  // bigram judge on generations
  double output_ppl_ci = 0.0;
  double model_ppl = 0.0;  // importance-weighted bound on the test split
  double model_ppl_ci = 0.0;
  double control_acc = 0.0;
  double control_f1 = 0.0;
  double control_auc = 0.0;
  double cls_acc = 0.0;  // classifier branch on the test split, z at the
  double cls_f1 = 0.0;   // classification-prior mean
  double cls_auc = 0.0;
  double dist = 0.0;  // geometric mean, 0..1 scale
  std::array<double, 4> dist_ns{};
  double self_bleu = 0.0;  // 0..100
  long n_generations = 0;
  long n_test = 0;
};

// Header then one row per entry; reals at 4 decimals, counts as integers.
// Row epochs are numbered from first_epoch.
void write_metrics_tsv(const std::string& path,
                       const std::vector<MetricsReport>& epochs,
                       int first_epoch = 0);

}  // namespace dunst
