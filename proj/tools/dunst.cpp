// Experiment front-end: corpus generation, base training, self-training,
// evaluation, oracle checks, and report aggregation. Exit codes: 0 success,
// 1 usage error, 2 failed check.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "dunst/corpus.hpp"
#include "dunst/decoding.hpp"
#include "dunst/losses.hpp"
#include "dunst/metrics.hpp"
#include "dunst/model.hpp"
#include "dunst/oracle.hpp"
#include "dunst/rng.hpp"
#include "dunst/selftrain.hpp"
#include "dunst/train.hpp"

namespace fs = std::filesystem;
using namespace dunst;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- config

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::pair<std::string, std::string>> read_kv_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(lineno) +
                       ": expected `key = value`");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(key, value);
  }
  return out;
}

template <typename T>
T parse_scalar(const std::string& raw, const std::string& key);

template <typename T>
T parse_integral(const std::string& raw, const std::string& key,
                 const char* kind) {
  try {
    if (raw.empty()) throw std::invalid_argument("empty");
    if (raw[0] == '-' && !std::is_signed_v<T>)
      throw std::out_of_range("negative");
    size_t pos = 0;
    long long v = std::stoll(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trailing");
    if (v < static_cast<long long>(std::numeric_limits<T>::min()) ||
        (v > 0 && static_cast<unsigned long long>(v) >
                      static_cast<unsigned long long>(
                          std::numeric_limits<T>::max())))
      throw std::out_of_range("range");
    return static_cast<T>(v);
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected " + kind + ", got '" +
                     raw + "'");
  }
}

template <>
int parse_scalar<int>(const std::string& raw, const std::string& key) {
  return parse_integral<int>(raw, key, "integer");
}
template <>
long parse_scalar<long>(const std::string& raw, const std::string& key) {
  return parse_integral<long>(raw, key, "integer");
}
template <>
uint64_t parse_scalar<uint64_t>(const std::string& raw,
                                const std::string& key) {
  try {
    if (raw.empty() || raw[0] == '-') throw std::invalid_argument("sign");
    size_t pos = 0;
    unsigned long long v = std::stoull(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trailing");
    return static_cast<uint64_t>(v);
  } catch (const std::exception&) {
    throw UsageError("config key '" + key +
                     "': expected unsigned integer, got '" + raw + "'");
  }
}
template <>
double parse_scalar<double>(const std::string& raw, const std::string& key) {
  try {
    size_t pos = 0;
    double v = std::stod(raw, &pos);
    if (pos != raw.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected number, got '" + raw +
                     "'");
  }
}
template <>
std::string parse_scalar<std::string>(const std::string& raw,
                                      const std::string&) {
  return raw;
}
template <>
bool parse_scalar<bool>(const std::string& raw, const std::string& key) {
  std::string v = raw;
  std::transform(v.begin(), v.end(), v.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw UsageError("config key '" + key + "': expected boolean, got '" + raw +
                   "'");
}

// Pairs every option with a config-file key; after parsing, file values fill
// in whatever the command line left untouched, so flags override the file.
class Binder {
 public:
  explicit Binder(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_,
                     "flat `key = value` config file; flags override it");
  }

  template <typename T>
  CLI::Option* add(const std::string& flag, const std::string& key, T& var,
                   const std::string& desc) {
    CLI::Option* opt = app_->add_option(flag, var, desc);
    entries_[key] = {opt, [&var, key](const std::string& raw) {
                       var = parse_scalar<T>(raw, key);
                     }};
    return opt;
  }

  CLI::Option* add_flag(const std::string& flag, const std::string& key,
                        bool& var, const std::string& desc) {
    CLI::Option* opt = app_->add_flag(flag, var, desc);
    entries_[key] = {opt, [&var, key](const std::string& raw) {
                       var = parse_scalar<bool>(raw, key);
                     }};
    return opt;
  }

  void apply_config() const {
    if (config_path_.empty()) return;
    for (const auto& [key, value] : read_kv_file(config_path_)) {
      auto it = entries_.find(key);
      if (it == entries_.end())
        throw UsageError("unknown config key: " + key);
      if (it->second.opt->count() > 0) continue;
      it->second.set(value);
    }
  }

 private:
  struct Entry {
    CLI::Option* opt;
    std::function<void(const std::string&)> set;
  };
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, Entry> entries_;
};

// ------------------------------------------------------------- option sets

struct CorpusOpts {
  uint64_t seed = 0;
  int vocab = 32;
  int attrs = 2;
  double separation = 0.6;
  int labeled = 200;
  int unlabeled = 6000;
  int dev = 200;
  int test = 200;
  int min_len = 5;
  int max_len = 12;
  double stop_prob = 0.25;
};

void bind_corpus(Binder& b, CorpusOpts& o) {
  b.add("--corpus-seed", "corpus_seed", o.seed, "corpus generation seed");
  b.add("--vocab", "vocab", o.vocab, "vocabulary size including specials");
  b.add("--attrs", "attrs", o.attrs, "number of attribute labels");
  b.add("--separation", "separation", o.separation,
        "attribute marker mass in [0,1]");
  b.add("--labeled", "labeled", o.labeled, "labeled split size");
  b.add("--unlabeled", "unlabeled", o.unlabeled, "unlabeled split size");
  b.add("--dev", "dev", o.dev, "dev split size");
  b.add("--test", "test", o.test, "test split size");
  b.add("--min-len", "min_len", o.min_len, "minimum content length");
  b.add("--max-len", "max_len", o.max_len, "maximum content length");
  b.add("--stop-prob", "stop_prob", o.stop_prob,
        "per-step stop probability after min length");
}

struct ModelOpts {
  int d_h = 64;
  int d_z = 16;
  int layers = 2;
  int heads = 2;
  int d_ff = 128;
  int max_seq = 64;
  double dropout = 0.1;
  double init_scale = 0.02;
};

void bind_model(Binder& b, ModelOpts& o) {
  b.add("--d-h", "d_h", o.d_h, "hidden width");
  b.add("--d-z", "d_z", o.d_z, "latent width");
  b.add("--layers", "layers", o.layers, "transformer layers per stack");
  b.add("--heads", "heads", o.heads, "attention heads");
  b.add("--d-ff", "d_ff", o.d_ff, "feed-forward width");
  b.add("--max-seq", "max_seq", o.max_seq, "positional embedding span");
  b.add("--dropout", "dropout", o.dropout, "classifier MC-dropout rate");
  b.add("--init-scale", "init_scale", o.init_scale, "weight init scale");
}

ModelConfig to_model_config(const ModelOpts& o, const Corpus& corpus) {
  ModelConfig mc;
  mc.V = static_cast<int>(corpus.vocab.tokens.size());
  mc.K = static_cast<int>(corpus.attrs.labels.size());
  mc.d_h = o.d_h;
  mc.d_z = o.d_z;
  mc.layers = o.layers;
  mc.heads = o.heads;
  mc.d_ff = o.d_ff;
  mc.max_seq = o.max_seq;
  mc.dropout = o.dropout;
  mc.init_scale = o.init_scale;
  mc.validate();
  return mc;
}

struct OptimOpts {
  double lr = 5e-5;
  int batch = 8;
  int warmup = -1;  // -1: one epoch of steps
  double weight_decay = 0.01;
};

void bind_optim(Binder& b, OptimOpts& o) {
  b.add("--lr", "lr", o.lr, "AdamW learning rate");
  b.add("--batch", "batch", o.batch, "minibatch size");
  b.add("--warmup", "warmup", o.warmup,
        "linear warmup steps; -1 = one epoch");
  b.add("--weight-decay", "weight_decay", o.weight_decay,
        "decoupled weight decay");
}

struct LossOpts {
  double lambda_c = 1.0;
  double lambda_g = 1.0;
  double lambda_bow = 0.2;
  double lambda_kl_c = 1.0;
  double lambda_kl_g = 1.0;
  double free_bits = 0.05;
};

void bind_loss(Binder& b, LossOpts& o) {
  b.add("--lambda-c", "lambda_c", o.lambda_c, "classification loss weight");
  b.add("--lambda-g", "lambda_g", o.lambda_g, "generation loss weight");
  b.add("--lambda-bow", "lambda_bow", o.lambda_bow, "bag-of-words weight");
  b.add("--lambda-kl-c", "lambda_kl_c", o.lambda_kl_c,
        "classification KL weight");
  b.add("--lambda-kl-g", "lambda_kl_g", o.lambda_kl_g, "generation KL weight");
  b.add("--free-bits", "free_bits", o.free_bits, "per-dimension KL floor");
}

struct AnnealOpts {
  long cycle = 0;  // 0: steps per epoch
  double rise = 0.8;
  int active_c = 5;
  int active_g = 7;
};

void bind_anneal(Binder& b, AnnealOpts& o) {
  b.add("--kl-cycle", "kl_cycle", o.cycle,
        "anneal cycle steps; 0 = steps per epoch");
  b.add("--kl-rise", "kl_rise", o.rise, "rising fraction of each cycle");
  b.add("--kl-active-c", "kl_active_c", o.active_c,
        "annealed epochs for the classification KL");
  b.add("--kl-active-g", "kl_active_g", o.active_g,
        "annealed epochs for the generation KL");
}

TrainConfig to_train_config(const OptimOpts& opt, const LossOpts& loss,
                            const AnnealOpts& anneal, int epochs,
                            long n_examples) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = opt.batch;
  tc.opt.lr = opt.lr;
  tc.opt.weight_decay = opt.weight_decay;
  long steps_per_epoch =
      std::max<long>(1, (n_examples + opt.batch - 1) / opt.batch);
  tc.opt.warmup_steps =
      opt.warmup < 0 ? static_cast<int>(steps_per_epoch) : opt.warmup;
  tc.weights.lambda_c = loss.lambda_c;
  tc.weights.lambda_g = loss.lambda_g;
  tc.weights.lambda_bow = loss.lambda_bow;
  tc.weights.lambda_kl_c = loss.lambda_kl_c;
  tc.weights.lambda_kl_g = loss.lambda_kl_g;
  tc.weights.kl_free_bits = loss.free_bits;
  tc.anneal.cycle_length = anneal.cycle;
  tc.anneal.rise_fraction = anneal.rise;
  tc.anneal.active_epochs_kl_c = anneal.active_c;
  tc.anneal.active_epochs_kl_g = anneal.active_g;
  return tc;
}

struct DecodeOpts {
  double temperature = 1.0;
  double top_p = 0.9;
  int min_len = 5;
  int max_len = 12;
  int no_repeat_ngram = 4;
};

void bind_decode(Binder& b, DecodeOpts& o, const std::string& prefix,
                 const std::string& key_prefix) {
  b.add("--" + prefix + "temperature", key_prefix + "temperature",
        o.temperature, "softmax temperature");
  b.add("--" + prefix + "top-p", key_prefix + "top_p", o.top_p,
        "nucleus sampling mass");
  b.add("--" + prefix + "min-len", key_prefix + "min_len", o.min_len,
        "minimum generated length");
  b.add("--" + prefix + "max-len", key_prefix + "max_len", o.max_len,
        "maximum generated length");
  b.add("--" + prefix + "no-repeat", key_prefix + "no_repeat", o.no_repeat_ngram,
        "blocked n-gram order; 0 disables");
}

DecodeConfig to_decode_config(const DecodeOpts& o) {
  DecodeConfig dc;
  dc.temperature = o.temperature;
  dc.top_p = o.top_p;
  dc.min_len = o.min_len;
  dc.max_len = o.max_len;
  dc.no_repeat_ngram = o.no_repeat_ngram;
  return dc;
}

// --------------------------------------------------------------- helpers

Corpus load_corpus_or_die(const std::string& prefix) {
  if (!fs::exists(prefix + ".meta"))
    throw UsageError("corpus not found at '" + prefix +
                     ".meta' (run gen-corpus first)");
  return read_corpus(prefix);
}

ModelParams load_checkpoint_or_die(const std::string& path,
                                   const std::string& hint) {
  if (!fs::exists(path))
    throw UsageError("checkpoint not found at '" + path + "' (" + hint + ")");
  return load_checkpoint(path);
}

void write_train_log(const std::string& path,
                     const std::vector<EpochStats>& epochs) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot open for writing: " + path);
  out << "epoch\ttrain_loss\tdev_loss\tl_c\tl_g\tl_bow\tkl_c\tkl_g\n";
  char buf[64];
  for (size_t e = 0; e < epochs.size(); ++e) {
    const EpochStats& s = epochs[e];
    out << e;
    for (double v : {s.train_loss, s.dev_loss, s.l_c, s.l_g, s.l_bow, s.kl_c,
                     s.kl_g}) {
      std::snprintf(buf, sizeof(buf), "%.4f", v);
      out << '\t' << buf;
    }
    out << '\n';
  }
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

void print_report_line(const MetricsReport& r) {
  std::printf(
      "control_acc=%.4f control_f1=%.4f cls_f1=%.4f dist=%.4f "
      "self_bleu=%.2f model_ppl=%.3f output_ppl=%.3f\n",
      r.control_acc, r.control_f1, r.cls_f1, r.dist, r.self_bleu, r.model_ppl,
      r.output_ppl);
}

// ------------------------------------------------------------ subcommands

struct GenCorpusArgs {
  CorpusOpts corpus;
  std::string out;
};

void cmd_gen_corpus(const GenCorpusArgs& a) {
  SplitSizes sizes;
  sizes.labeled = a.corpus.labeled;
  sizes.unlabeled = a.corpus.unlabeled;
  sizes.dev = a.corpus.dev;
  sizes.test = a.corpus.test;
  Corpus corpus =
      gen_corpus(a.corpus.seed, a.corpus.vocab, a.corpus.attrs,
                 a.corpus.separation, sizes, a.corpus.min_len,
                 a.corpus.max_len, a.corpus.stop_prob);
  fs::path prefix(a.out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  write_corpus(corpus, a.out);
  std::printf(
      "wrote corpus '%s' (V=%d K=%d labeled=%d unlabeled=%d dev=%d test=%d)\n",
      a.out.c_str(), a.corpus.vocab, a.corpus.attrs, a.corpus.labeled,
      a.corpus.unlabeled, a.corpus.dev, a.corpus.test);
}

struct TrainBaseArgs {
  std::string corpus;
  std::string exp;
  ModelOpts model;
  OptimOpts optim;
  LossOpts loss;
  AnnealOpts anneal;
  int epochs = 12;
  uint64_t seed = 0;
};

void cmd_train_base(const TrainBaseArgs& a) {
  Corpus corpus = load_corpus_or_die(a.corpus);
  ModelConfig mc = to_model_config(a.model, corpus);
  STConfig cfg;
  cfg.base_train =
      to_train_config(a.optim, a.loss, a.anneal, a.epochs,
                      static_cast<long>(corpus.splits.labeled.size()));
  cfg.seed = a.seed;
  TrainResult r = train_base_model(corpus, mc, cfg);
  fs::path dir = fs::path(a.exp) / "base";
  fs::create_directories(dir);
  save_checkpoint(r.best, (dir / "checkpoint_best").string());
  write_train_log((dir / "train_log.tsv").string(), r.epochs);
  std::printf("base model: best dev %.4f at epoch %d -> %s\n", r.best_dev,
              r.best_epoch, (dir / "checkpoint_best").string().c_str());
}

struct SelftrainArgs {
  std::string corpus;
  std::string exp;
  std::string variant = "dunst";
  std::string name;
  bool minus_dual = false;
  int st_epochs = 10;
  double ratio = 1.0;
  DecodeOpts pt_decode{5.0, 0.9, 5, 12, 4};
  DecodeOpts eval_decode{1.0, 0.9, 5, 12, 4};
  double overgenerate = 2.0;
  double selection_epsilon = 1e-5;
  int mc_passes = 10;
  double drop_p = 0.05;
  double mask_p = 0.05;
  double shuffle_k = 1.1;
  int inner_epochs = 1;
  int eval_generations = 60;
  int ppl_k = 8;
  OptimOpts optim;
  LossOpts loss;
  AnnealOpts anneal;
  uint64_t seed = 0;
};

void cmd_selftrain(const SelftrainArgs& a) {
  Corpus corpus = load_corpus_or_die(a.corpus);
  ModelParams base =
      load_checkpoint_or_die((fs::path(a.exp) / "base/checkpoint_best").string(),
                             "run train-base first");
  STVariant variant = variant_from_name(lowercase(a.variant));

  STConfig cfg;
  cfg.max_epochs = a.st_epochs;
  cfg.pseudo_text_ratio = a.ratio;
  cfg.pt_decode = to_decode_config(a.pt_decode);
  cfg.eval_decode = to_decode_config(a.eval_decode);
  cfg.overgenerate_factor = a.overgenerate;
  cfg.selection_epsilon = a.selection_epsilon;
  cfg.mc_dropout_passes = a.mc_passes;
  cfg.noise.drop_p = a.drop_p;
  cfg.noise.mask_p = a.mask_p;
  cfg.noise.shuffle_k = a.shuffle_k;
  cfg.minus_dual = a.minus_dual;
  cfg.eval_generations = a.eval_generations;
  cfg.ppl_k = a.ppl_k;
  cfg.seed = a.seed;
  long n_labeled = static_cast<long>(corpus.splits.labeled.size());
  long n_union = n_labeled;
  if (variant_uses_pl(variant))
    n_union += static_cast<long>(corpus.splits.unlabeled.size());
  if (variant_uses_pt(variant)) n_union += std::lround(a.ratio * n_labeled);
  cfg.st_train =
      to_train_config(a.optim, a.loss, a.anneal, a.inner_epochs, n_union);
  cfg.base_train = cfg.st_train;  // dev criterion weights for best tracking

  std::string name = a.name.empty()
                         ? std::string(variant_name(variant)) +
                               (a.minus_dual ? "_minus_dual" : "")
                         : a.name;
  std::string out = (fs::path(a.exp) / name).string();
  ExperimentResult res = run_experiment_from(corpus, base, variant, cfg, out);
  std::printf("%s: %d epochs -> %s\n", variant_name(variant),
              cfg.max_epochs, out.c_str());
  std::printf("final  ");
  print_report_line(res.epochs.back());
  std::printf("epoch0 ");
  print_report_line(res.epochs.front());
}

struct EvalArgs {
  std::string corpus;
  std::string checkpoint;
  std::string out;
  DecodeOpts eval_decode{1.0, 0.9, 5, 12, 4};
  int eval_generations = 60;
  int ppl_k = 8;
  uint64_t seed = 0;
};

void cmd_eval(const EvalArgs& a) {
  Corpus corpus = load_corpus_or_die(a.corpus);
  ModelParams params =
      load_checkpoint_or_die(a.checkpoint, "pass --checkpoint a trained model");
  SyntheticSource source = corpus.rebuild_source();
  BigramJudge judge = BigramJudge::fit(
      corpus.splits.test, static_cast<int>(corpus.vocab.tokens.size()));
  STConfig cfg;
  cfg.eval_decode = to_decode_config(a.eval_decode);
  cfg.eval_generations = a.eval_generations;
  cfg.ppl_k = a.ppl_k;
  cfg.seed = a.seed;
  EvalOutput ev =
      evaluate_model(params, source, corpus.splits.test, judge, cfg, 0);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_metrics_tsv((fs::path(a.out) / "metrics.tsv").string(), {ev.report});
    write_generations_txt((fs::path(a.out) / "generations.txt").string(),
                          corpus, ev);
  }
  print_report_line(ev.report);
}

struct OracleArgs {
  int elbo_models = 1000;
  int quadruples = 10000;
  int kl_pairs = 20;
  long kl_samples = 1000000;
  int iw_reps = 60;
  uint64_t seed = 0;
};

bool check_line(const char* name, bool ok, double worst) {
  std::printf("%-34s %s (worst %.3g)\n", name, ok ? "ok" : "FAIL", worst);
  return ok;
}

void cmd_oracle_check(const OracleArgs& a) {
  bool all = true;

  {  // ELBO gap nonnegativity and exact posterior-KL equality
    double min_gap = 0.0, max_mismatch = 0.0, max_true_gap = 0.0;
    for (int t = 0; t < a.elbo_models; ++t) {
      Rng rng(derive_seed(a.seed, 0xE1B0'0000ULL + t));
      int nx = 2 + t % 4, ny = 2 + (t / 4) % 3, nz = 2 + (t / 12) % 4;
      TabularModel m = TabularModel::random(nx, ny, nz, rng);
      for (const ElboResult& r : {elbo_gap_gen(m), elbo_gap_cls(m)}) {
        min_gap = std::min(min_gap, r.gap.minCoeff());
        max_mismatch = std::max(max_mismatch,
                                (r.gap - r.posterior_kl).cwiseAbs().maxCoeff());
      }
      TabularModel mt = m;
      mt.set_posterior_to_true_gen();
      max_true_gap = std::max(
          max_true_gap, elbo_gap_gen(mt).gap.cwiseAbs().maxCoeff());
    }
    all &= check_line("elbo gap >= 0", min_gap >= -1e-12, min_gap);
    all &= check_line("elbo gap == posterior KL", max_mismatch <= 1e-10,
                      max_mismatch);
    all &= check_line("true posterior gap == 0", max_true_gap <= 1e-10,
                      max_true_gap);
  }

  {  // mixture-KL identity residuals
    double worst = 0.0;
    for (int t = 0; t < a.quadruples; ++t) {
      Rng rng(derive_seed(a.seed, 0x7E0A'0000ULL + t));
      int nx = 2 + t % 3, ny = 2 + (t / 3) % 3, nz = 2 + (t / 9) % 3;
      DiscreteJoint p = DiscreteJoint::random(nx, ny, nz, rng);
      DiscreteJoint qp = DiscreteJoint::random(nx, ny, nz, rng);
      DiscreteJoint u = DiscreteJoint::random(nx, ny, nz, rng);
      DiscreteJoint q = DiscreteJoint::random(nx, ny, nz, rng);
      double alpha = 0.25 + 0.25 * (t % 4);
      double beta = 0.25 + 0.25 * ((t / 4) % 4);
      double gamma = 0.25 + 0.25 * ((t / 16) % 4);
      Theorem1Result r = theorem1_identity(p, qp, u, q, alpha, beta, gamma);
      worst = std::max(worst, std::abs(r.residual));
    }
    all &= check_line("mixture identity residual", worst < 1e-10, worst);
  }

  {  // closed-form Gaussian KL vs Monte Carlo
    double worst = 0.0;
    for (int t = 0; t < a.kl_pairs; ++t) {
      Rng rng(derive_seed(a.seed, 0x6A05'0000ULL + t));
      const int d = 4;
      LatentGaussian q, p;
      q.mu = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) {
        return 1.5 * rng.normal();
      });
      q.log_sigma = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) {
        return 0.5 * rng.normal();
      });
      p.mu = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) {
        return 1.5 * rng.normal();
      });
      p.log_sigma = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) {
        return 0.5 * rng.normal();
      });
      double closed = gaussian_kl(q, p);
      double sum = 0.0, sumsq = 0.0;
      Eigen::VectorXd sq = q.log_sigma.array().exp();
      Eigen::VectorXd sp = p.log_sigma.array().exp();
      for (long s = 0; s < a.kl_samples; ++s) {
        double term = 0.0;
        for (int i = 0; i < d; ++i) {
          double z = q.mu[i] + sq[i] * rng.normal();
          double aq = (z - q.mu[i]) / sq[i];
          double ap = (z - p.mu[i]) / sp[i];
          term += -0.5 * aq * aq - q.log_sigma[i] + 0.5 * ap * ap +
                  p.log_sigma[i];
        }
        sum += term;
        sumsq += term * term;
      }
      double n = static_cast<double>(a.kl_samples);
      double mean = sum / n;
      double se = std::sqrt(std::max(0.0, sumsq / n - mean * mean) / n);
      double dev = std::abs(closed - mean) / std::max(se, 1e-300);
      worst = std::max(worst, dev);
    }
    all &= check_line("gaussian KL within 3 SE of MC", worst <= 3.0, worst);
  }

  {  // importance-weighted bound: below evidence, nondecreasing in k
    const int ks[] = {1, 5, 25};
    double worst_viol = 0.0;
    for (int pair = 0; pair < 4; ++pair) {
      Rng mrng(derive_seed(a.seed, 0x13B0'0000ULL + pair));
      TabularModel m = TabularModel::random(4, 3, 5, mrng);
      int x = pair % 4, y = pair % 3;
      double exact = tabular_log_marginal_gen(m, x, y);
      double means[3], ses[3];
      for (int ki = 0; ki < 3; ++ki) {
        double sum = 0.0, sumsq = 0.0;
        for (int rep = 0; rep < a.iw_reps; ++rep) {
          Rng rng(derive_seed(a.seed,
                              0x13B1'0000ULL + pair * 1000 + ki * 100 + rep));
          double v = tabular_iw_bound(m, x, y, ks[ki], rng);
          sum += v;
          sumsq += v * v;
        }
        double n = a.iw_reps;
        means[ki] = sum / n;
        ses[ki] = std::sqrt(std::max(0.0, sumsq / n - means[ki] * means[ki]) /
                            n);
        worst_viol =
            std::max(worst_viol, means[ki] - (exact + 3.0 * ses[ki]));
      }
      for (int ki = 0; ki + 1 < 3; ++ki) {
        double se =
            std::sqrt(ses[ki] * ses[ki] + ses[ki + 1] * ses[ki + 1]);
        worst_viol =
            std::max(worst_viol, means[ki] - means[ki + 1] - 3.0 * se);
      }
    }
    all &= check_line("iw bound <= evidence, monotone", worst_viol <= 0.0,
                      worst_viol);
  }

  if (!all) throw CheckFailure("oracle residual above tolerance");
  std::printf("all oracle checks passed\n");
}

struct ReportArgs {
  std::vector<std::string> dirs;
  int epoch = -1;
  std::string out;
};

void cmd_report(const ReportArgs& a) {
  std::string header;
  std::vector<std::string> rows;
  for (const std::string& dir : a.dirs) {
    fs::path p = fs::path(dir) / "metrics.tsv";
    if (!fs::exists(p))
      throw UsageError("no metrics.tsv in '" + dir + "' (run selftrain first)");
    std::ifstream in(p);
    std::string line;
    if (!std::getline(in, line))
      throw UsageError("empty metrics file: " + p.string());
    if (header.empty())
      header = line;
    else if (line != header)
      throw UsageError("metrics header mismatch in '" + dir + "'");
    std::string picked;
    std::string want = std::to_string(a.epoch) + "\t";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (a.epoch < 0 || line.rfind(want, 0) == 0) picked = line;
    }
    if (picked.empty())
      throw UsageError("epoch " + std::to_string(a.epoch) +
                       " not found in '" + p.string() + "'");
    fs::path label = fs::path(dir).filename();
    if (label.empty()) label = fs::path(dir).parent_path().filename();
    rows.push_back(label.string() + "\t" + picked);
  }
  std::ostringstream table;
  table << "run\t" << header << '\n';
  for (const std::string& r : rows) table << r << '\n';
  std::fputs(table.str().c_str(), stdout);
  if (!a.out.empty()) {
    std::ofstream out(a.out);
    if (!out) throw UsageError("cannot open for writing: " + a.out);
    out << table.str();
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training dual VAE for attribute-controlled generation"};
  app.require_subcommand(1);

  GenCorpusArgs gen;
  CLI::App* gen_app =
      app.add_subcommand("gen-corpus", "generate a synthetic corpus");
  Binder gen_b(gen_app);
  bind_corpus(gen_b, gen.corpus);
  gen_b.add("--out", "out", gen.out, "corpus file prefix")->required();

  TrainBaseArgs tb;
  CLI::App* tb_app =
      app.add_subcommand("train-base", "train the base model on labeled data");
  Binder tb_b(tb_app);
  tb_b.add("--corpus", "corpus", tb.corpus, "corpus file prefix")->required();
  tb_b.add("--exp", "exp", tb.exp, "experiment directory")->required();
  bind_model(tb_b, tb.model);
  bind_optim(tb_b, tb.optim);
  bind_loss(tb_b, tb.loss);
  bind_anneal(tb_b, tb.anneal);
  tb_b.add("--epochs", "epochs", tb.epochs, "training epochs");
  tb_b.add("--seed", "seed", tb.seed, "experiment seed");

  SelftrainArgs st;
  CLI::App* st_app =
      app.add_subcommand("selftrain", "run the self-training loop");
  Binder st_b(st_app);
  st_b.add("--corpus", "corpus", st.corpus, "corpus file prefix")->required();
  st_b.add("--exp", "exp", st.exp, "experiment directory with base/")
      ->required();
  st_b.add("--variant", "variant", st.variant,
           "dunst | dunst_hard_pt | no_pt | no_pl | no_pl_spt | no_pl_pt | "
           "naive_pt | pt_noise | pt_noise_pl | pt_select_pl");
  st_b.add("--name", "name", st.name, "output subdirectory name");
  st_b.add_flag("--minus-dual", "minus_dual", st.minus_dual,
                "freeze pseudo labels and drop classifier losses");
  st_b.add("--st-epochs", "st_epochs", st.st_epochs, "self-training epochs");
  st_b.add("--ratio", "ratio", st.ratio, "pseudo text per labeled example");
  bind_decode(st_b, st.pt_decode, "pt-", "pt_");
  bind_decode(st_b, st.eval_decode, "eval-", "eval_");
  st_b.add("--overgenerate", "overgenerate", st.overgenerate,
           "selection pool multiplier");
  st_b.add("--selection-epsilon", "selection_epsilon", st.selection_epsilon,
           "uncertainty bonus weight");
  st_b.add("--mc-passes", "mc_passes", st.mc_passes,
           "stochastic classifier passes for BALD");
  st_b.add("--drop-p", "drop_p", st.drop_p, "corruption token drop rate");
  st_b.add("--mask-p", "mask_p", st.mask_p, "corruption substitution rate");
  st_b.add("--shuffle-k", "shuffle_k", st.shuffle_k,
           "corruption shuffle window");
  st_b.add("--inner-epochs", "inner_epochs", st.inner_epochs,
           "training epochs per self-training epoch");
  st_b.add("--eval-generations", "eval_generations", st.eval_generations,
           "generations per evaluation");
  st_b.add("--ppl-k", "ppl_k", st.ppl_k, "importance samples for model ppl");
  bind_optim(st_b, st.optim);
  bind_loss(st_b, st.loss);
  bind_anneal(st_b, st.anneal);
  st_b.add("--seed", "seed", st.seed, "experiment seed");

  EvalArgs ev;
  CLI::App* ev_app =
      app.add_subcommand("eval", "evaluate a checkpoint against a corpus");
  Binder ev_b(ev_app);
  ev_b.add("--corpus", "corpus", ev.corpus, "corpus file prefix")->required();
  ev_b.add("--checkpoint", "checkpoint", ev.checkpoint, "model checkpoint")
      ->required();
  ev_b.add("--out", "out", ev.out, "optional output directory");
  bind_decode(ev_b, ev.eval_decode, "eval-", "eval_");
  ev_b.add("--eval-generations", "eval_generations", ev.eval_generations,
           "generations per evaluation");
  ev_b.add("--ppl-k", "ppl_k", ev.ppl_k, "importance samples for model ppl");
  ev_b.add("--seed", "seed", ev.seed, "evaluation seed");

  OracleArgs oc;
  CLI::App* oc_app = app.add_subcommand(
      "oracle-check", "verify the variational identities numerically");
  Binder oc_b(oc_app);
  oc_b.add("--elbo-models", "elbo_models", oc.elbo_models,
           "random tabular models");
  oc_b.add("--quadruples", "quadruples", oc.quadruples,
           "random identity quadruples");
  oc_b.add("--kl-pairs", "kl_pairs", oc.kl_pairs, "random Gaussian pairs");
  oc_b.add("--kl-samples", "kl_samples", oc.kl_samples,
           "Monte Carlo samples per pair");
  oc_b.add("--iw-reps", "iw_reps", oc.iw_reps,
           "bound replicates per (x, y, k)");
  oc_b.add("--seed", "seed", oc.seed, "check seed");

  ReportArgs rp;
  CLI::App* rp_app = app.add_subcommand(
      "report", "aggregate experiment metrics into one table");
  Binder rp_b(rp_app);
  rp_app->add_option("dirs", rp.dirs, "experiment output directories")
      ->required();
  rp_b.add("--epoch", "epoch", rp.epoch, "row to pick; -1 = last");
  rp_b.add("--out", "out", rp.out, "optional output file");

  gen_app->callback([&] { gen_b.apply_config(); cmd_gen_corpus(gen); });
  tb_app->callback([&] { tb_b.apply_config(); cmd_train_base(tb); });
  st_app->callback([&] { st_b.apply_config(); cmd_selftrain(st); });
  ev_app->callback([&] { ev_b.apply_config(); cmd_eval(ev); });
  oc_app->callback([&] { oc_b.apply_config(); cmd_oracle_check(oc); });
  rp_app->callback([&] { rp_b.apply_config(); cmd_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
