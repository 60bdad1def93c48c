#include "dunst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "dunst/latent.hpp"
#include "dunst/losses.hpp"
#include "dunst/math.hpp"

namespace dunst {

double dist_n(const std::vector<std::vector<int>>& generations, int n) {
  if (n < 1) throw std::invalid_argument("dist_n: n must be positive");
  std::set<std::vector<int>> seen;
  long total = 0;
  for (const auto& g : generations) {
    if (static_cast<int>(g.size()) < n) continue;
    for (size_t i = 0; i + n <= g.size(); ++i) {
      seen.insert(std::vector<int>(g.begin() + i, g.begin() + i + n));
      ++total;
    }
  }
  if (total == 0) return -1.0;
  return static_cast<double>(seen.size()) / static_cast<double>(total);
}

double dist_geo(const std::vector<std::vector<int>>& generations) {
  double log_sum = 0.0;
  int used = 0;
  for (int n = 1; n <= 4; ++n) {
    double d = dist_n(generations, n);
    if (d < 0.0) continue;
    log_sum += std::log(d);
    ++used;
  }
  if (used == 0) return 0.0;
  return std::exp(log_sum / used);
}

namespace {

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts count_ngrams(const std::vector<int>& seq, int n) {
  NgramCounts counts;
  if (static_cast<int>(seq.size()) >= n)
    for (size_t i = 0; i + n <= seq.size(); ++i)
      ++counts[std::vector<int>(seq.begin() + i, seq.begin() + i + n)];
  return counts;
}

double bleu_vs_refs(const std::vector<int>& cand,
                    const std::vector<std::vector<int>>& refs) {
  double log_prec_sum = 0.0;
  for (int n = 2; n <= 4; ++n) {
    NgramCounts cand_counts = count_ngrams(cand, n);
    long total = 0;
    for (auto& [gram, c] : cand_counts) total += c;
    if (total == 0) return 0.0;
    NgramCounts clip;
    for (const auto& ref : refs)
      for (auto& [gram, c] : count_ngrams(ref, n)) {
        auto it = clip.find(gram);
        if (it == clip.end())
          clip[gram] = c;
        else
          it->second = std::max(it->second, c);
      }
    long matched = 0;
    for (auto& [gram, c] : cand_counts) {
      auto it = clip.find(gram);
      if (it != clip.end()) matched += std::min(c, it->second);
    }
    if (matched == 0) return 0.0;
    log_prec_sum += std::log(static_cast<double>(matched) / total);
  }
  const long c_len = static_cast<long>(cand.size());
  long r_len = static_cast<long>(refs.front().size());
  for (const auto& ref : refs) {
    long len = static_cast<long>(ref.size());
    long best = std::labs(r_len - c_len), cur = std::labs(len - c_len);
    if (cur < best || (cur == best && len < r_len)) r_len = len;
  }
  double bp = c_len >= r_len
                  ? 1.0
                  : std::exp(1.0 - static_cast<double>(r_len) / c_len);
  return 100.0 * bp * std::exp(log_prec_sum / 3.0);
}

}  // namespace

double self_bleu(const std::vector<std::vector<int>>& generations) {
  if (generations.size() < 2) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < generations.size(); ++i) {
    std::vector<std::vector<int>> refs;
    refs.reserve(generations.size() - 1);
    for (size_t j = 0; j < generations.size(); ++j)
      if (j != i) refs.push_back(generations[j]);
    sum += bleu_vs_refs(generations[i], refs);
  }
  return sum / static_cast<double>(generations.size());
}

double iw_log_bound(const ModelParams& params, const std::vector<int>& tokens,
                    int label, int k, Rng& rng) {
  if (k < 1) throw std::invalid_argument("iw_log_bound: k must be at least 1");
  LatentGaussian post = posterior(params, tokens, label);
  LatentGaussian pg = prior_gen(params, label);
  std::vector<int> targets = tokens;
  targets.push_back(Vocab::kEos);
  Eigen::VectorXd logw(k);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd z = reparameterize(post, rng);
    double log_px = -recon_nll(decoder_logits(params, z, tokens), targets);
    logw[i] = log_px + gaussian_log_density(pg, z) -
              gaussian_log_density(post, z);
  }
  return logsumexp(logw) - std::log(static_cast<double>(k));
}

double iw_ppl(const ModelParams& params, const std::vector<int>& tokens,
              int label, int k, Rng& rng) {
  double bound = iw_log_bound(params, tokens, label, k, rng);
  return std::exp(-bound / static_cast<double>(tokens.size() + 1));
}

namespace {

PplStats pooled_ppl(const std::vector<double>& nll,
                    const std::vector<long>& events) {
  PplStats out;
  double total_nll = 0.0;
  long total_events = 0;
  std::vector<double> per_token;
  per_token.reserve(nll.size());
  for (size_t i = 0; i < nll.size(); ++i) {
    if (events[i] == 0) continue;
    total_nll += nll[i];
    total_events += events[i];
    per_token.push_back(nll[i] / static_cast<double>(events[i]));
  }
  if (total_events == 0) return out;
  out.ppl = std::exp(total_nll / static_cast<double>(total_events));
  out.n_tokens = total_events;
  if (per_token.size() > 1) {
    double mean = std::accumulate(per_token.begin(), per_token.end(), 0.0) /
                  per_token.size();
    double ss = 0.0;
    for (double v : per_token) ss += (v - mean) * (v - mean);
    double se = std::sqrt(ss / (per_token.size() - 1)) /
                std::sqrt(static_cast<double>(per_token.size()));
    out.ci = out.ppl * (std::exp(1.96 * se) - 1.0);
  }
  return out;
}

}  // namespace

PplStats model_ppl_stats(const ModelParams& params,
                         const std::vector<LabeledExample>& data, int k,
                         uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("model_ppl: empty test set");
  std::vector<double> nll(data.size());
  std::vector<long> events(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    if (data[i].label == kNoLabel)
      throw std::invalid_argument("model_ppl: unlabeled example");
    Rng rng(derive_seed(seed, 0xE7A1'0000ULL + i));
    nll[i] = -iw_log_bound(params, data[i].tokens, data[i].label, k, rng);
    events[i] = static_cast<long>(data[i].tokens.size()) + 1;
  }
  return pooled_ppl(nll, events);
}

double model_ppl(const ModelParams& params,
                 const std::vector<LabeledExample>& data, int k,
                 uint64_t seed) {
  return model_ppl_stats(params, data, k, seed).ppl;
}

ClassificationMetrics classification_metrics(const std::vector<int>& pred,
                                             const Eigen::MatrixXd& scores,
                                             const std::vector<int>& gold) {
  const long n = static_cast<long>(gold.size());
  const int K = static_cast<int>(scores.cols());
  if (n == 0) throw std::invalid_argument("classification_metrics: no data");
  if (static_cast<long>(pred.size()) != n || scores.rows() != n)
    throw std::invalid_argument("classification_metrics: size mismatch");
  if (K < 2) throw std::invalid_argument("classification_metrics: K < 2");
  for (long i = 0; i < n; ++i)
    if (pred[i] < 0 || pred[i] >= K || gold[i] < 0 || gold[i] >= K)
      throw std::invalid_argument("classification_metrics: label out of range");

  ClassificationMetrics out;
  std::vector<long> tp(K, 0), fp(K, 0), fn(K, 0);
  long correct = 0;
  for (long i = 0; i < n; ++i) {
    if (pred[i] == gold[i]) {
      ++correct;
      ++tp[gold[i]];
    } else {
      ++fp[pred[i]];
      ++fn[gold[i]];
    }
  }
  out.acc = static_cast<double>(correct) / static_cast<double>(n);
  double f1_sum = 0.0;
  for (int c = 0; c < K; ++c) {
    double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
  }
  out.macro_f1 = f1_sum / K;

  // One-vs-rest Mann-Whitney statistic per class, ties at half credit,
  // computed from average ranks; binary keeps the class-1 view.
  auto ovr_auc = [&](int c, double* auc) {
    std::vector<long> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](long a, long b) {
      return scores(a, c) < scores(b, c);
    });
    long n_pos = 0;
    double rank_pos = 0.0;
    for (long at = 0; at < n;) {
      long to = at;
      while (to < n && scores(idx[to], c) == scores(idx[at], c)) ++to;
      double avg_rank = 0.5 * static_cast<double>(at + 1 + to);  // 1-based
      for (long j = at; j < to; ++j)
        if (gold[idx[j]] == c) {
          ++n_pos;
          rank_pos += avg_rank;
        }
      at = to;
    }
    long n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return false;
    *auc = (rank_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1)) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
    return true;
  };

  if (K == 2) {
    double auc = 0.0;
    out.auc = ovr_auc(1, &auc) ? auc : 0.0;
  } else {
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < K; ++c) {
      double auc = 0.0;
      if (ovr_auc(c, &auc)) {
        sum += auc;
        ++defined;
      }
    }
    out.auc = defined > 0 ? sum / defined : 0.0;
  }
  return out;
}

ControlScore control_accuracy(const std::vector<std::vector<int>>& generations,
                              const std::vector<int>& intended,
                              const SyntheticSource& source) {
  if (generations.size() != intended.size())
    throw std::invalid_argument("control_accuracy: size mismatch");
  if (generations.empty())
    throw std::invalid_argument("control_accuracy: no generations");
  const int K = static_cast<int>(source.prior.size());
  std::vector<int> pred(generations.size());
  for (size_t i = 0; i < generations.size(); ++i) {
    Eigen::VectorXd post = bayes_posterior(source, generations[i]);
    int best = 0;
    for (int c = 1; c < K; ++c)
      if (post[c] > post[best]) best = c;
    pred[i] = best;
    if (intended[i] < 0 || intended[i] >= K)
      throw std::invalid_argument("control_accuracy: intended label range");
  }
  long correct = 0;
  std::vector<long> tp(K, 0), fp(K, 0), fn(K, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == intended[i]) {
      ++correct;
      ++tp[pred[i]];
    } else {
      ++fp[pred[i]];
      ++fn[intended[i]];
    }
  }
  ControlScore out;
  out.acc = static_cast<double>(correct) / static_cast<double>(pred.size());
  double f1_sum = 0.0;
  for (int c = 0; c < K; ++c) {
    double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp[c]) / denom : 0.0;
  }
  out.macro_f1 = f1_sum / K;
  return out;
}

BigramJudge BigramJudge::fit(const std::vector<LabeledExample>& data, int V,
                             double alpha) {
  if (V <= Vocab::kNumSpecial)
    throw std::invalid_argument("BigramJudge: no content vocabulary");
  if (alpha <= 0.0)
    throw std::invalid_argument("BigramJudge: alpha must be positive");
  if (data.empty()) throw std::invalid_argument("BigramJudge: no data");
  const int C = V - Vocab::kNumSpecial;
  BigramJudge judge;
  judge.V = V;
  Eigen::VectorXd init_counts = Eigen::VectorXd::Zero(V);
  Eigen::MatrixXd trans_counts = Eigen::MatrixXd::Zero(V, V);
  auto check = [V](int t) {
    if (t < Vocab::kNumSpecial || t >= V)
      throw std::invalid_argument("BigramJudge: token outside content range");
  };
  long n_first = 0;
  for (const LabeledExample& ex : data) {
    if (ex.tokens.empty()) continue;
    for (int t : ex.tokens) check(t);
    init_counts[ex.tokens.front()] += 1.0;
    ++n_first;
    for (size_t i = 1; i < ex.tokens.size(); ++i)
      trans_counts(ex.tokens[i - 1], ex.tokens[i]) += 1.0;
  }
  judge.init = Eigen::VectorXd::Zero(V);
  judge.trans = Eigen::MatrixXd::Zero(V, V);
  const double init_denom = static_cast<double>(n_first) + alpha * C;
  for (int t = Vocab::kNumSpecial; t < V; ++t)
    judge.init[t] = (init_counts[t] + alpha) / init_denom;
  for (int a = Vocab::kNumSpecial; a < V; ++a) {
    double row = trans_counts.row(a).sum() + alpha * C;
    for (int b = Vocab::kNumSpecial; b < V; ++b)
      judge.trans(a, b) = (trans_counts(a, b) + alpha) / row;
  }
  return judge;
}

double BigramJudge::log_prob(const std::vector<int>& tokens) const {
  if (tokens.empty()) return 0.0;
  for (int t : tokens)
    if (t < Vocab::kNumSpecial || t >= V)
      throw std::invalid_argument("BigramJudge: token outside content range");
  double lp = std::log(init[tokens.front()]);
  for (size_t i = 1; i < tokens.size(); ++i)
    lp += std::log(trans(tokens[i - 1], tokens[i]));
  return lp;
}

double BigramJudge::ppl(const std::vector<int>& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("BigramJudge: empty sequence");
  return std::exp(-log_prob(tokens) / static_cast<double>(tokens.size()));
}

PplStats judge_ppl_stats(const BigramJudge& judge,
                         const std::vector<std::vector<int>>& generations) {
  std::vector<double> nll(generations.size());
  std::vector<long> events(generations.size());
  for (size_t i = 0; i < generations.size(); ++i) {
    nll[i] = -judge.log_prob(generations[i]);
    events[i] = static_cast<long>(generations[i].size());
  }
  return pooled_ppl(nll, events);
}

void write_metrics_tsv(const std::string& path,
                       const std::vector<MetricsReport>& epochs,
                       int first_epoch) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "epoch\toutput_ppl\toutput_ppl_ci\tmodel_ppl\tmodel_ppl_ci"
         "\tcontrol_acc\tcontrol_f1\tcontrol_auc\tcls_acc\tcls_f1\tcls_auc"
         "\tdist\tdist_1\tdist_2\tdist_3\tdist_4\tself_bleu"
         "\tn_generations\tn_test\n";
  char buf[64];
  auto real = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    out << '\t' << buf;
  };
  for (size_t e = 0; e < epochs.size(); ++e) {
    const MetricsReport& r = epochs[e];
    out << first_epoch + static_cast<long>(e);
    real(r.output_ppl);
    real(r.output_ppl_ci);
    real(r.model_ppl);
    real(r.model_ppl_ci);
    real(r.control_acc);
    real(r.control_f1);
    real(r.control_auc);
    real(r.cls_acc);
    real(r.cls_f1);
    real(r.cls_auc);
    real(r.dist);
    for (double d : r.dist_ns) real(d);
    real(r.self_bleu);
    out << '\t' << r.n_generations << '\t' << r.n_test << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace dunst
