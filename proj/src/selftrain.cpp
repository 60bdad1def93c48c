#include "dunst/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "dunst/math.hpp"
#include "dunst/rng.hpp"

namespace dunst {

namespace {

// Seed-stream tags; distinct per concern so streams never collide.
constexpr uint64_t kTagPseudoText = 0x5E0D0000ULL;
constexpr uint64_t kTagNoise = 0x401E0000ULL;
constexpr uint64_t kTagSelect = 0x5E1E0000ULL;
constexpr uint64_t kTagInnerTrain = 0x12A10000ULL;
constexpr uint64_t kTagBaseTrain = 0xBA5EULL;
constexpr uint64_t kTagEvalGen = 0xEAA00000ULL;
constexpr uint64_t kTagEvalPpl = 0x0DD00000ULL;

int argmax(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

const char* variant_name(STVariant v) {
  switch (v) {
    case STVariant::kDunst: return "dunst";
    case STVariant::kDunstHardPt: return "dunst_hard_pt";
    case STVariant::kNoPt: return "no_pt";
    case STVariant::kNoPl: return "no_pl";
    case STVariant::kNoPlSpt: return "no_pl_spt";
    case STVariant::kNoPlPt: return "no_pl_pt";
    case STVariant::kNaivePt: return "naive_pt";
    case STVariant::kPtNoise: return "pt_noise";
    case STVariant::kPtNoisePl: return "pt_noise_pl";
    case STVariant::kPtSelectPl: return "pt_select_pl";
  }
  throw std::logic_error("variant_name: bad enum value");
}

STVariant variant_from_name(const std::string& name) {
  static const STVariant all[] = {
      STVariant::kDunst,    STVariant::kDunstHardPt, STVariant::kNoPt,
      STVariant::kNoPl,     STVariant::kNoPlSpt,     STVariant::kNoPlPt,
      STVariant::kNaivePt,  STVariant::kPtNoise,     STVariant::kPtNoisePl,
      STVariant::kPtSelectPl};
  for (STVariant v : all)
    if (name == variant_name(v)) return v;
  throw std::invalid_argument("unknown self-training variant: " + name);
}

bool variant_uses_pl(STVariant v) {
  switch (v) {
    case STVariant::kDunst:
    case STVariant::kDunstHardPt:
    case STVariant::kNoPt:
    case STVariant::kPtNoisePl:
    case STVariant::kPtSelectPl:
      return true;
    default:
      return false;
  }
}

bool variant_uses_pt(STVariant v) {
  return v != STVariant::kNoPt && v != STVariant::kNoPlPt;
}

bool variant_soft_pt(STVariant v) {
  return v == STVariant::kDunst || v == STVariant::kNoPl;
}

bool variant_flattened_pt(STVariant v) {
  switch (v) {
    case STVariant::kDunst:
    case STVariant::kDunstHardPt:
    case STVariant::kNoPl:
    case STVariant::kNoPlSpt:
      return true;
    default:
      return false;
  }
}

bool variant_noised_pt(STVariant v) {
  return v == STVariant::kPtNoise || v == STVariant::kPtNoisePl;
}

bool variant_selects_pt(STVariant v) {
  return v == STVariant::kPtSelectPl;
}

void NoiseConfig::validate() const {
  if (!(drop_p >= 0.0 && drop_p < 1.0) || !(mask_p >= 0.0 && mask_p < 1.0))
    throw std::invalid_argument("NoiseConfig: rates must lie in [0, 1)");
  if (!(shuffle_k >= 0.0))
    throw std::invalid_argument("NoiseConfig: shuffle_k must be >= 0");
}

void STConfig::validate(STVariant variant) const {
  if (max_epochs < 0)
    throw std::invalid_argument("STConfig: max_epochs must be >= 0");
  if (!(pseudo_text_ratio > 0.0))
    throw std::invalid_argument("STConfig: pseudo_text_ratio must be > 0");
  if (!(overgenerate_factor >= 1.0))
    throw std::invalid_argument("STConfig: overgenerate_factor must be >= 1");
  if (variant_selects_pt(variant) && !(overgenerate_factor > 1.0))
    throw std::invalid_argument("STConfig: selection needs overgeneration");
  if (!(selection_epsilon >= 0.0))
    throw std::invalid_argument("STConfig: selection_epsilon must be >= 0");
  if (mc_dropout_passes < 1)
    throw std::invalid_argument("STConfig: mc_dropout_passes must be >= 1");
  if (eval_generations < 2)
    throw std::invalid_argument("STConfig: eval_generations must be >= 2");
  if (ppl_k < 1) throw std::invalid_argument("STConfig: ppl_k must be >= 1");
  noise.validate();
  pt_decode.validate();
  eval_decode.validate();
  base_train.validate();
  st_train.validate();
}

int predict_label(const ModelParams& params, const std::vector<int>& tokens) {
  LatentGaussian pc = prior_cls(params, tokens);
  return argmax(classify(params, pc.mu));
}

std::vector<LabeledExample> pseudo_label_pass(
    const ModelParams& snapshot,
    const std::vector<LabeledExample>& unlabeled) {
  std::vector<LabeledExample> out;
  out.reserve(unlabeled.size());
  for (const LabeledExample& ex : unlabeled)
    out.push_back({ex.tokens, predict_label(snapshot, ex.tokens)});
  return out;
}

std::vector<int> balanced_counts(int total, int K) {
  if (total < 0 || K < 1)
    throw std::invalid_argument("balanced_counts: bad arguments");
  std::vector<int> counts(K, total / K);
  for (int k = 0; k < total % K; ++k) counts[k] += 1;
  return counts;
}

std::vector<SoftSequence> pseudo_text_pass(
    const ModelParams& snapshot, const std::vector<int>& count_per_label,
    const DecodeConfig& decode, uint64_t seed) {
  if (static_cast<int>(count_per_label.size()) != snapshot.config.K)
    throw std::invalid_argument("pseudo_text_pass: count size != K");
  std::vector<SoftSequence> out;
  uint64_t index = 0;
  for (int k = 0; k < snapshot.config.K; ++k) {
    for (int j = 0; j < count_per_label[k]; ++j, ++index) {
      Rng rng(derive_seed(seed, index));
      Eigen::VectorXd z = reparameterize(prior_gen(snapshot, k), rng);
      StepFn step = [&](const std::vector<int>& prefix) {
        return decode_step(snapshot, z, prefix);
      };
      out.push_back(generate_soft(step, k, decode, rng));
    }
  }
  return out;
}

std::vector<LabeledExample> pseudo_text_hard_pass(
    const ModelParams& snapshot, const std::vector<int>& count_per_label,
    const DecodeConfig& decode, uint64_t seed) {
  if (static_cast<int>(count_per_label.size()) != snapshot.config.K)
    throw std::invalid_argument("pseudo_text_hard_pass: count size != K");
  std::vector<LabeledExample> out;
  uint64_t index = 0;
  for (int k = 0; k < snapshot.config.K; ++k) {
    for (int j = 0; j < count_per_label[k]; ++j, ++index) {
      Rng rng(derive_seed(seed, index));
      Eigen::VectorXd z = reparameterize(prior_gen(snapshot, k), rng);
      StepFn step = [&](const std::vector<int>& prefix) {
        return decode_step(snapshot, z, prefix);
      };
      out.push_back({generate_hard(step, decode, rng), k});
    }
  }
  return out;
}

double selection_score(double conf, double uncertainty, double epsilon) {
  return conf + epsilon / std::max(uncertainty, 1e-12);
}

double bald_uncertainty(const ModelParams& params, const Eigen::VectorXd& z,
                        int passes, Rng& rng) {
  if (passes < 1)
    throw std::invalid_argument("bald_uncertainty: passes must be >= 1");
  auto entropy = [](const Eigen::VectorXd& p) {
    double h = 0.0;
    for (int i = 0; i < p.size(); ++i)
      if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
    return h;
  };
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(params.config.K);
  double mean_entropy = 0.0;
  for (int t = 0; t < passes; ++t) {
    Eigen::VectorXd p = softmax(classify_mc(params, z, rng));
    mean += p;
    mean_entropy += entropy(p);
  }
  mean /= passes;
  mean_entropy /= passes;
  return std::max(0.0, entropy(mean) - mean_entropy);
}

std::vector<LabeledExample> select_pseudo_text(
    const ModelParams& snapshot, const std::vector<LabeledExample>& pool,
    const std::vector<int>& keep_per_label, double epsilon, int mc_passes,
    uint64_t seed) {
  int K = snapshot.config.K;
  if (static_cast<int>(keep_per_label.size()) != K)
    throw std::invalid_argument("select_pseudo_text: keep size != K");
  // score, pool index; one bucket per intended label
  std::vector<std::vector<std::pair<double, int>>> buckets(K);
  for (size_t i = 0; i < pool.size(); ++i) {
    const LabeledExample& ex = pool[i];
    if (ex.label < 0 || ex.label >= K)
      throw std::invalid_argument("select_pseudo_text: pool label range");
    Eigen::VectorXd mu = prior_cls(snapshot, ex.tokens).mu;
    double conf = softmax(classify(snapshot, mu))[ex.label];
    Rng rng(derive_seed(seed, i));
    double unc = bald_uncertainty(snapshot, mu, mc_passes, rng);
    buckets[ex.label].push_back({selection_score(conf, unc, epsilon),
                                 static_cast<int>(i)});
  }
  std::vector<int> kept;
  for (int k = 0; k < K; ++k) {
    auto& b = buckets[k];
    if (static_cast<int>(b.size()) < keep_per_label[k])
      throw std::invalid_argument("select_pseudo_text: bucket underflow");
    std::sort(b.begin(), b.end(), [](const auto& a, const auto& c) {
      return a.first != c.first ? a.first > c.first : a.second < c.second;
    });
    for (int j = 0; j < keep_per_label[k]; ++j) kept.push_back(b[j].second);
  }
  std::sort(kept.begin(), kept.end());  // back to generation order
  std::vector<LabeledExample> out;
  out.reserve(kept.size());
  for (int i : kept) out.push_back(pool[i]);
  return out;
}

DecodeConfig pt_decode_for(STVariant variant, const STConfig& config) {
  DecodeConfig dec = config.pt_decode;
  if (!variant_flattened_pt(variant)) dec.temperature = 1.0;
  return dec;
}

STEpochSummary run_st_epoch(STState& state, const CorpusSplits& splits,
                            STVariant variant, const STConfig& config) {
  config.validate(variant);
  if (splits.labeled.empty() || splits.dev.empty())
    throw std::invalid_argument("run_st_epoch: empty labeled or dev split");
  const ModelParams& snapshot = state.snapshot;
  const int K = snapshot.config.K;
  const uint64_t epoch_tag = static_cast<uint64_t>(state.epoch);

  if (variant_uses_pl(variant)) {
    // -Dual keeps the labels from the first pass for the rest of the run.
    if (!(config.minus_dual && !state.d_pl.empty()))
      state.d_pl = pseudo_label_pass(snapshot, splits.unlabeled);
  } else {
    state.d_pl.clear();
  }

  state.d_pt.clear();
  state.d_pt_hard.clear();
  if (variant_uses_pt(variant)) {
    long total = std::lround(config.pseudo_text_ratio *
                             static_cast<double>(splits.labeled.size()));
    std::vector<int> counts = balanced_counts(static_cast<int>(total), K);
    DecodeConfig dec = pt_decode_for(variant, config);
    uint64_t pt_seed = derive_seed(config.seed, kTagPseudoText + epoch_tag);
    if (variant_soft_pt(variant)) {
      state.d_pt = pseudo_text_pass(snapshot, counts, dec, pt_seed);
    } else {
      std::vector<int> gen_counts = counts;
      if (variant_selects_pt(variant))
        for (int& c : gen_counts)
          c = static_cast<int>(std::ceil(c * config.overgenerate_factor));
      std::vector<LabeledExample> pool =
          pseudo_text_hard_pass(snapshot, gen_counts, dec, pt_seed);
      if (variant_noised_pt(variant)) {
        uint64_t nseed = derive_seed(config.seed, kTagNoise + epoch_tag);
        for (size_t i = 0; i < pool.size(); ++i) {
          Rng nrng(derive_seed(nseed, i));
          pool[i].tokens =
              corrupt(pool[i].tokens, snapshot.config.V, config.noise.drop_p,
                      config.noise.mask_p, config.noise.shuffle_k, nrng);
        }
      }
      if (variant_selects_pt(variant)) {
        uint64_t sseed = derive_seed(config.seed, kTagSelect + epoch_tag);
        state.d_pt_hard =
            select_pseudo_text(snapshot, pool, counts, config.selection_epsilon,
                               config.mc_dropout_passes, sseed);
      } else {
        state.d_pt_hard = std::move(pool);
      }
    }
  }

  // Union build; soft pointers taken only after d_pt stops growing.
  std::vector<TrainExample> train;
  train.reserve(splits.labeled.size() + state.d_pl.size() +
                state.d_pt_hard.size() + state.d_pt.size());
  for (const LabeledExample& ex : splits.labeled)
    train.push_back({ex.tokens, ex.label, nullptr});
  for (const LabeledExample& ex : state.d_pl)
    train.push_back({ex.tokens, ex.label, nullptr});
  for (const LabeledExample& ex : state.d_pt_hard)
    train.push_back({ex.tokens, ex.label, nullptr});
  for (const SoftSequence& s : state.d_pt)
    train.push_back({s.content_shadow(), s.label, &s});

  TrainConfig tc = config.st_train;
  tc.seed = derive_seed(config.seed, kTagInnerTrain + epoch_tag);
  if (config.minus_dual) {
    tc.weights.lambda_c = 0.0;
    tc.weights.lambda_kl_c = 0.0;
  }
  TrainResult r = train_model(state.params, train,
                              to_train_examples(splits.dev), tc);
  state.params = r.best;
  state.snapshot = state.params;
  state.epoch += 1;

  STEpochSummary summary;
  summary.epoch = state.epoch;
  summary.n_pl = static_cast<long>(state.d_pl.size());
  summary.n_pt =
      static_cast<long>(state.d_pt.size() + state.d_pt_hard.size());
  summary.dev_loss = r.best_dev;
  return summary;
}

EvalOutput evaluate_model(const ModelParams& params,
                          const SyntheticSource& source,
                          const std::vector<LabeledExample>& test,
                          const BigramJudge& judge, const STConfig& config,
                          int epoch) {
  if (test.empty())
    throw std::invalid_argument("evaluate_model: empty test split");
  const int K = params.config.K;
  const int n = config.eval_generations;
  EvalOutput out;
  out.generations.reserve(n);
  out.intended.reserve(n);
  for (int i = 0; i < n; ++i) {
    int label = i % K;
    out.intended.push_back(label);
    Rng rng(derive_seed(config.seed,
                        kTagEvalGen + static_cast<uint64_t>(epoch) * 1000003ULL +
                            static_cast<uint64_t>(i)));
    Eigen::VectorXd z = reparameterize(prior_gen(params, label), rng);
    StepFn step = [&](const std::vector<int>& prefix) {
      return decode_step(params, z, prefix);
    };
    out.generations.push_back(generate_hard(step, config.eval_decode, rng));
  }

  MetricsReport& r = out.report;
  {
    Eigen::MatrixXd scores(n, K);
    std::vector<int> pred(n);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd post = bayes_posterior(source, out.generations[i]);
      scores.row(i) = post.transpose();
      pred[i] = argmax(post);
    }
    ClassificationMetrics cm =
        classification_metrics(pred, scores, out.intended);
    r.control_acc = cm.acc;
    r.control_f1 = cm.macro_f1;
    r.control_auc = cm.auc;
  }
  for (int nn = 1; nn <= 4; ++nn)
    r.dist_ns[nn - 1] = dist_n(out.generations, nn);
  r.dist = dist_geo(out.generations);
  r.self_bleu = self_bleu(out.generations);
  PplStats jp = judge_ppl_stats(judge, out.generations);
  r.output_ppl = jp.ppl;
  r.output_ppl_ci = jp.ci;
  PplStats mp = model_ppl_stats(
      params, test, config.ppl_k,
      derive_seed(config.seed, kTagEvalPpl + static_cast<uint64_t>(epoch)));
  r.model_ppl = mp.ppl;
  r.model_ppl_ci = mp.ci;
  {
    const int N = static_cast<int>(test.size());
    Eigen::MatrixXd scores(N, K);
    std::vector<int> pred(N), gold(N);
    for (int i = 0; i < N; ++i) {
      Eigen::VectorXd mu = prior_cls(params, test[i].tokens).mu;
      Eigen::VectorXd probs = softmax(classify(params, mu));
      scores.row(i) = probs.transpose();
      pred[i] = argmax(probs);
      gold[i] = test[i].label;
    }
    ClassificationMetrics cm = classification_metrics(pred, scores, gold);
    r.cls_acc = cm.acc;
    r.cls_f1 = cm.macro_f1;
    r.cls_auc = cm.auc;
  }
  r.n_generations = n;
  r.n_test = static_cast<long>(test.size());
  return out;
}

namespace {

void write_config_txt(const std::string& path, const Corpus& corpus,
                      const ModelConfig& mc, STVariant variant,
                      const STConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "variant=" << variant_name(variant) << '\n'
      << "seed=" << c.seed << '\n'
      << "minus_dual=" << (c.minus_dual ? 1 : 0) << '\n'
      << "max_epochs=" << c.max_epochs << '\n'
      << "pseudo_text_ratio=" << c.pseudo_text_ratio << '\n'
      << "overgenerate_factor=" << c.overgenerate_factor << '\n'
      << "selection_epsilon=" << c.selection_epsilon << '\n'
      << "mc_dropout_passes=" << c.mc_dropout_passes << '\n'
      << "noise.drop_p=" << c.noise.drop_p << '\n'
      << "noise.mask_p=" << c.noise.mask_p << '\n'
      << "noise.shuffle_k=" << c.noise.shuffle_k << '\n'
      << "pt_decode.temperature=" << c.pt_decode.temperature << '\n'
      << "pt_decode.top_p=" << c.pt_decode.top_p << '\n'
      << "pt_decode.min_len=" << c.pt_decode.min_len << '\n'
      << "pt_decode.max_len=" << c.pt_decode.max_len << '\n'
      << "eval_decode.temperature=" << c.eval_decode.temperature << '\n'
      << "eval_decode.top_p=" << c.eval_decode.top_p << '\n'
      << "eval_generations=" << c.eval_generations << '\n'
      << "ppl_k=" << c.ppl_k << '\n'
      << "model.V=" << mc.V << '\n'
      << "model.K=" << mc.K << '\n'
      << "model.d_h=" << mc.d_h << '\n'
      << "model.d_z=" << mc.d_z << '\n'
      << "model.layers=" << mc.layers << '\n'
      << "model.heads=" << mc.heads << '\n'
      << "model.d_ff=" << mc.d_ff << '\n'
      << "corpus.labeled=" << corpus.splits.labeled.size() << '\n'
      << "corpus.unlabeled=" << corpus.splits.unlabeled.size() << '\n'
      << "corpus.dev=" << corpus.splits.dev.size() << '\n'
      << "corpus.test=" << corpus.splits.test.size() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace

void write_generations_txt(const std::string& path, const Corpus& corpus,
                           const EvalOutput& ev) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (size_t i = 0; i < ev.generations.size(); ++i) {
    out << corpus.attrs.labels[ev.intended[i]] << '\t';
    const std::vector<int>& toks = ev.generations[i];
    for (size_t t = 0; t < toks.size(); ++t) {
      if (t) out << ' ';
      out << corpus.vocab.tokens[toks[t]];
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

TrainResult train_base_model(const Corpus& corpus, const ModelConfig& mc,
                             const STConfig& config) {
  mc.validate();
  config.base_train.validate();
  const CorpusSplits& sp = corpus.splits;
  if (sp.labeled.empty() || sp.dev.empty())
    throw std::invalid_argument(
        "train_base_model: labeled and dev splits must be non-empty");
  TrainConfig bt = config.base_train;
  bt.seed = derive_seed(config.seed, kTagBaseTrain);
  return train_model(ModelParams::init(mc, config.seed),
                     to_train_examples(sp.labeled), to_train_examples(sp.dev),
                     bt);
}

ExperimentResult run_experiment(const Corpus& corpus,
                                const ModelConfig& model_config,
                                STVariant variant, const STConfig& config,
                                const std::string& out_dir) {
  config.validate(variant);
  TrainResult base = train_base_model(corpus, model_config, config);
  return run_experiment_from(corpus, base.best, variant, config, out_dir);
}

ExperimentResult run_experiment_from(const Corpus& corpus,
                                     const ModelParams& base,
                                     STVariant variant, const STConfig& config,
                                     const std::string& out_dir) {
  config.validate(variant);
  const ModelConfig& model_config = base.config;
  model_config.validate();
  const CorpusSplits& sp = corpus.splits;
  if (sp.labeled.empty() || sp.dev.empty() || sp.test.empty())
    throw std::invalid_argument(
        "run_experiment: labeled, dev, and test splits must be non-empty");
  if (model_config.V != static_cast<int>(corpus.vocab.tokens.size()))
    throw std::invalid_argument("run_experiment: model V != corpus vocab");
  if (model_config.K != static_cast<int>(corpus.attrs.labels.size()))
    throw std::invalid_argument("run_experiment: model K != corpus labels");

  SyntheticSource source = corpus.rebuild_source();
  BigramJudge judge = BigramJudge::fit(sp.test, model_config.V);
  std::vector<TrainExample> dev = to_train_examples(sp.dev);

  ExperimentResult res;
  STState state;
  state.params = base;
  state.snapshot = base;
  res.best_params = base;
  res.best_dev = eval_mean_loss(base, dev, config.base_train.weights);
  res.best_epoch = 0;

  namespace fs = std::filesystem;
  const bool writing = !out_dir.empty();
  if (writing) {
    fs::create_directories(out_dir);
    write_config_txt((fs::path(out_dir) / "config.txt").string(), corpus,
                     model_config, variant, config);
  }
  auto emit = [&](int epoch, const EvalOutput& ev) {
    res.epochs.push_back(ev.report);
    if (!writing) return;
    char sub[32];
    std::snprintf(sub, sizeof(sub), "epoch_%03d", epoch);
    fs::path dir = fs::path(out_dir) / sub;
    fs::create_directories(dir);
    write_metrics_tsv((dir / "metrics.tsv").string(), {ev.report}, epoch);
    write_generations_txt((dir / "generations.txt").string(), corpus, ev);
  };

  emit(0, evaluate_model(state.params, source, sp.test, judge, config, 0));
  for (int e = 1; e <= config.max_epochs; ++e) {
    STEpochSummary s = run_st_epoch(state, sp, variant, config);
    if (s.dev_loss < res.best_dev) {
      res.best_dev = s.dev_loss;
      res.best_params = state.params;
      res.best_epoch = e;
    }
    emit(e, evaluate_model(state.params, source, sp.test, judge, config, e));
  }
  res.final_params = state.params;

  if (writing) {
    write_metrics_tsv((fs::path(out_dir) / "metrics.tsv").string(),
                      res.epochs);
    save_checkpoint(res.best_params,
                    (fs::path(out_dir) / "checkpoint_best").string());
    save_checkpoint(res.final_params,
                    (fs::path(out_dir) / "checkpoint_last").string());
  }
  return res;
}

}  // namespace dunst
