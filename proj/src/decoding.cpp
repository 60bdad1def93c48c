#include "dunst/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "dunst/math.hpp"

namespace dunst {

void DecodeConfig::validate() const {
  if (!(top_p > 0.0 && top_p <= 1.0))
    throw std::invalid_argument("DecodeConfig: top_p outside (0,1]");
  if (temperature <= 0.0)
    throw std::invalid_argument("DecodeConfig: temperature must be positive");
  if (min_len < 1 || min_len > max_len)
    throw std::invalid_argument("DecodeConfig: bad length bounds");
  if (no_repeat_ngram < 0)
    throw std::invalid_argument("DecodeConfig: negative no_repeat_ngram");
  if (length_penalty <= 0.0 || repetition_penalty <= 0.0)
    throw std::invalid_argument("DecodeConfig: penalties must be positive");
}

std::vector<int> SoftSequence::content_shadow() const {
  std::vector<int> out;
  for (int t : hard_shadow)
    if (t >= Vocab::kNumSpecial) out.push_back(t);
  return out;
}

void SoftSequence::validate(int min_len, int max_len) const {
  if (hard_shadow.size() != static_cast<size_t>(steps.cols()))
    throw std::invalid_argument("SoftSequence: shadow/step length mismatch");
  for (int m = 0; m < steps.cols(); ++m) {
    if (steps.col(m).minCoeff() < 0.0)
      throw std::invalid_argument("SoftSequence: negative probability");
    if (std::abs(steps.col(m).sum() - 1.0) > 1e-6)
      throw std::invalid_argument("SoftSequence: step is not a simplex");
    int arg;
    steps.col(m).maxCoeff(&arg);
    if (hard_shadow[m] != arg)
      throw std::invalid_argument("SoftSequence: shadow is not the argmax");
  }
  if (content_len() < min_len || content_len() > max_len)
    throw std::invalid_argument("SoftSequence: length outside bounds");
}

Eigen::VectorXd temperature_softmax(const Eigen::VectorXd& logits, double tau) {
  if (tau <= 0.0)
    throw std::invalid_argument("temperature_softmax: tau must be positive");
  return softmax(logits / tau);
}

Eigen::VectorXd top_p_filter(const Eigen::VectorXd& probs, double p) {
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("top_p_filter: p outside (0,1]");
  if (p == 1.0) return probs;
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  Eigen::VectorXd out = Eigen::VectorXd::Zero(probs.size());
  double kept = 0.0;
  for (int id : order) {
    out[id] = probs[id];
    kept += probs[id];
    if (kept >= p) break;
  }
  return out / kept;
}

namespace {

int sample_index(const Eigen::VectorXd& probs, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int last = 0;
  for (int i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

// Tokens completing an already-seen n-gram after the current content suffix.
void ban_ngram_repeats(const std::vector<int>& content, int n,
                       Eigen::VectorXd& probs) {
  if (n <= 0 || static_cast<int>(content.size()) < n - 1) return;
  const int m = static_cast<int>(content.size());
  for (int i = 0; i + n <= m; ++i) {
    bool match = true;
    for (int j = 0; j < n - 1 && match; ++j)
      match = content[i + j] == content[m - (n - 1) + j];
    if (match) probs[content[i + n - 1]] = 0.0;
  }
}

// The frozen per-step pipeline: repetition penalty on raw logits, then
// temperature, then masking (reserved ids, EOS before min_len, n-gram bans),
// then nucleus filtering. Returns a simplex; a fully banned step degenerates
// to certain EOS so generation still terminates.
Eigen::VectorXd step_distribution(Eigen::VectorXd logits,
                                  const std::vector<int>& content,
                                  const DecodeConfig& config) {
  if (config.repetition_penalty != 1.0)
    for (int t : content)
      logits[t] = logits[t] > 0.0 ? logits[t] / config.repetition_penalty
                                  : logits[t] * config.repetition_penalty;
  Eigen::VectorXd probs = temperature_softmax(logits, config.temperature);
  probs[Vocab::kPad] = probs[Vocab::kUnk] = probs[Vocab::kBos] = 0.0;
  bool eos_allowed = static_cast<int>(content.size()) >= config.min_len;
  if (!eos_allowed) probs[Vocab::kEos] = 0.0;
  ban_ngram_repeats(content, config.no_repeat_ngram, probs);
  double mass = probs.sum();
  if (mass <= 0.0) {
    Eigen::VectorXd eos = Eigen::VectorXd::Zero(probs.size());
    eos[Vocab::kEos] = 1.0;
    return eos;
  }
  return top_p_filter(probs / mass, config.top_p);
}

}  // namespace

std::vector<int> generate_hard(const StepFn& step, const DecodeConfig& config,
                               Rng& rng, const std::vector<int>& prompt) {
  config.validate();
  for (int t : prompt)
    if (t < Vocab::kNumSpecial)
      throw std::invalid_argument("generate_hard: reserved token in prompt");
  std::vector<int> content = prompt;
  std::vector<int> prefix;
  prefix.reserve(content.size() + config.max_len + 1);
  prefix.push_back(Vocab::kBos);
  prefix.insert(prefix.end(), content.begin(), content.end());
  while (static_cast<int>(content.size()) < config.max_len) {
    Eigen::VectorXd probs = step_distribution(step(prefix), content, config);
    int t = sample_index(probs, rng);
    if (t == Vocab::kEos) break;
    content.push_back(t);
    prefix.push_back(t);
  }
  return content;
}

SoftSequence generate_soft(const StepFn& step, int label,
                           const DecodeConfig& config, Rng& rng) {
  config.validate();
  SoftSequence seq;
  seq.label = label;
  std::vector<Eigen::VectorXd> cols;
  std::vector<int> content;
  std::vector<int> prefix = {Vocab::kBos};
  while (static_cast<int>(content.size()) < config.max_len) {
    Eigen::VectorXd probs = step_distribution(step(prefix), content, config);
    int arg;
    probs.maxCoeff(&arg);
    cols.push_back(probs);
    seq.hard_shadow.push_back(arg);
    int t = sample_index(probs, rng);
    if (t == Vocab::kEos) {
      seq.terminal_eos = true;
      break;
    }
    content.push_back(t);
    prefix.push_back(t);
  }
  seq.steps.resize(cols.empty() ? 0 : cols.front().size(),
                   static_cast<long>(cols.size()));
  for (size_t m = 0; m < cols.size(); ++m) seq.steps.col(m) = cols[m];
  return seq;
}

std::vector<int> corrupt(const std::vector<int>& tokens, int V, double drop_p,
                         double mask_p, double shuffle_k, Rng& rng) {
  if (drop_p < 0.0 || drop_p > 1.0 || mask_p < 0.0 || mask_p > 1.0)
    throw std::invalid_argument("corrupt: rates outside [0,1]");
  if (shuffle_k < 0.0)
    throw std::invalid_argument("corrupt: negative shuffle_k");
  if (V <= Vocab::kNumSpecial)
    throw std::invalid_argument("corrupt: vocabulary has no content tokens");

  std::vector<int> kept;
  for (int t : tokens)
    if (!(drop_p > 0.0 && rng.uniform() < drop_p)) kept.push_back(t);
  for (int& t : kept)
    if (mask_p > 0.0 && rng.uniform() < mask_p)
      t = Vocab::kNumSpecial + rng.uniform_int(V - Vocab::kNumSpecial);
  if (shuffle_k > 0.0 && kept.size() > 1) {
    std::vector<std::pair<double, int>> keyed(kept.size());
    for (size_t i = 0; i < kept.size(); ++i)
      keyed[i] = {static_cast<double>(i) + shuffle_k * rng.uniform(), kept[i]};
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (size_t i = 0; i < kept.size(); ++i) kept[i] = keyed[i].second;
  }
  if (kept.empty() && !tokens.empty()) kept.push_back(tokens.front());
  return kept;
}

namespace {

constexpr char kSoftMagic[8] = {'D', 'S', 'O', 'F', 'T', '0', '0', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("soft file truncated: " + path);
  return v;
}

}  // namespace

void write_soft_sequences(const std::vector<SoftSequence>& seqs,
                          const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kSoftMagic, sizeof(kSoftMagic));
  put<uint64_t>(out, seqs.size());
  for (const SoftSequence& s : seqs) {
    put<int32_t>(out, s.label);
    put<uint8_t>(out, s.terminal_eos ? 1 : 0);
    put<int32_t>(out, static_cast<int32_t>(s.steps.rows()));
    put<int32_t>(out, static_cast<int32_t>(s.steps.cols()));
    out.write(reinterpret_cast<const char*>(s.steps.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.steps.size());
    for (int t : s.hard_shadow) put<int32_t>(out, t);
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<SoftSequence> read_soft_sequences(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kSoftMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a soft-sequence file: " + path);
  auto count = take<uint64_t>(in, path);
  std::vector<SoftSequence> seqs(count);
  for (SoftSequence& s : seqs) {
    s.label = take<int32_t>(in, path);
    s.terminal_eos = take<uint8_t>(in, path) != 0;
    int rows = take<int32_t>(in, path);
    int cols = take<int32_t>(in, path);
    if (rows < 0 || cols < 0)
      throw std::runtime_error("corrupt soft-sequence header: " + path);
    s.steps.resize(rows, cols);
    in.read(reinterpret_cast<char*>(s.steps.data()),
            static_cast<std::streamsize>(sizeof(double)) * s.steps.size());
    if (!in) throw std::runtime_error("soft file truncated: " + path);
    s.hard_shadow.resize(cols);
    for (int& t : s.hard_shadow) t = take<int32_t>(in, path);
  }
  return seqs;
}

}  // namespace dunst
