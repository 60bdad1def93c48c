#include "dunst/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "dunst/math.hpp"

namespace dunst {

namespace {

constexpr double kRowTol = 1e-9;

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

int draw_from_row(const Eigen::MatrixXd& m, int row, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  int last = 0;
  for (int j = 0; j < m.cols(); ++j) {
    if (m(row, j) <= 0.0) continue;
    acc += m(row, j);
    last = j;
    if (u < acc) return j;
  }
  return last;
}

}  // namespace

Vocab Vocab::make_synthetic(int V) {
  if (V < 8) throw std::invalid_argument("Vocab: V must be at least 8");
  std::vector<std::string> toks = {"<pad>", "<unk>", "<bos>", "<eos>"};
  toks.reserve(V);
  for (int i = 0; i < V - kNumSpecial; ++i) toks.push_back("w" + std::to_string(i));
  return Vocab(std::move(toks));
}

int Vocab::id_of(const std::string& tok) const {
  auto it = std::find(tokens.begin(), tokens.end(), tok);
  return it == tokens.end() ? -1 : static_cast<int>(it - tokens.begin());
}

AttributeSet AttributeSet::make_synthetic(int K) {
  if (K < 2) throw std::invalid_argument("AttributeSet: K must be at least 2");
  std::vector<std::string> names;
  names.reserve(K);
  for (int i = 0; i < K; ++i) names.push_back("a" + std::to_string(i));
  return AttributeSet(std::move(names));
}

int AttributeSet::id_of(const std::string& name) const {
  auto it = std::find(labels.begin(), labels.end(), name);
  return it == labels.end() ? -1 : static_cast<int>(it - labels.begin());
}

void SyntheticSource::validate() const {
  const int V = vocab.size();
  const int K = attrs.K();
  if (K < 2) throw std::invalid_argument("source: need at least 2 attributes");
  if (init.rows() != K || init.cols() != V)
    throw std::invalid_argument("source: init shape mismatch");
  if (static_cast<int>(trans.size()) != K)
    throw std::invalid_argument("source: transition count mismatch");
  if (!(stop_prob > 0.0 && stop_prob < 1.0) && stop_prob != 1.0)
    throw std::invalid_argument("source: stop_prob must lie in (0,1]");
  if (min_len < 1 || min_len > max_len)
    throw std::invalid_argument("source: bad length bounds");
  if (std::abs(prior.sum() - 1.0) > kRowTol)
    throw std::invalid_argument("source: attribute prior not a simplex");
  for (int y = 0; y < K; ++y) {
    if (std::abs(init.row(y).sum() - 1.0) > kRowTol)
      throw std::invalid_argument("source: init row not a simplex");
    if (trans[y].rows() != V || trans[y].cols() != V)
      throw std::invalid_argument("source: transition shape mismatch");
    for (int r = 0; r < V; ++r)
      if (std::abs(trans[y].row(r).sum() - 1.0) > kRowTol)
        throw std::invalid_argument("source: transition row not a simplex");
  }
}

int marker_block_size(int V, int K) { return (V - Vocab::kNumSpecial) / K; }

bool is_marker_token(int token, int label, int V, int K) {
  const int B = marker_block_size(V, K);
  const int lo = Vocab::kNumSpecial + label * B;
  return token >= lo && token < lo + B;
}

SyntheticSource build_synthetic_source(uint64_t seed, int V, int K,
                                       double separation, int min_len,
                                       int max_len, double stop_prob) {
  if (V < 8) throw std::invalid_argument("build_synthetic_source: V < 8");
  if (K < 2) throw std::invalid_argument("build_synthetic_source: K < 2");
  if (separation < 0.0 || separation > 1.0)
    throw std::invalid_argument("build_synthetic_source: separation outside [0,1]");
  const int C = V - Vocab::kNumSpecial;
  if (C < K)
    throw std::invalid_argument(
        "build_synthetic_source: need one marker token per attribute");

  Rng rng(derive_seed(seed, 0xC0DEC0DEULL));

  // Shared backbone: one initial and one per-row transition distribution
  // over content tokens, common to all attributes.
  Eigen::VectorXd base_init = random_simplex(C, rng);
  Eigen::MatrixXd base_trans(C, C);
  for (int r = 0; r < C; ++r) base_trans.row(r) = random_simplex(C, rng).transpose();

  const int B = marker_block_size(V, K);
  Eigen::MatrixXd marker = Eigen::MatrixXd::Zero(K, C);
  for (int y = 0; y < K; ++y)
    for (int j = 0; j < B; ++j) marker(y, y * B + j) = 1.0 / B;

  SyntheticSource src;
  src.vocab = Vocab::make_synthetic(V);
  src.attrs = AttributeSet::make_synthetic(K);
  src.min_len = min_len;
  src.max_len = max_len;
  src.stop_prob = stop_prob;
  src.prior = Eigen::VectorXd::Constant(K, 1.0 / K);
  src.init = Eigen::MatrixXd::Zero(K, V);
  src.trans.assign(K, Eigen::MatrixXd::Zero(V, V));

  const int S = Vocab::kNumSpecial;
  for (int y = 0; y < K; ++y) {
    Eigen::VectorXd yi =
        (1.0 - separation) * base_init + separation * marker.row(y).transpose();
    src.init.row(y).segment(S, C) = yi.transpose();
    for (int r = 0; r < C; ++r) {
      Eigen::VectorXd yt = (1.0 - separation) * base_trans.row(r).transpose() +
                           separation * marker.row(y).transpose();
      src.trans[y].row(S + r).segment(S, C) = yt.transpose();
    }
    // Reserved-token rows are never entered by the chain; mirror the initial
    // distribution so the row-simplex invariant holds uniformly.
    for (int r = 0; r < S; ++r) src.trans[y].row(r) = src.init.row(y);
  }
  src.validate();
  return src;
}

LabeledExample sample_example(const SyntheticSource& source, int label,
                              Rng& rng) {
  if (label < 0 || label >= source.attrs.K())
    throw std::invalid_argument("sample_example: label out of range");
  LabeledExample ex;
  ex.label = label;
  ex.tokens.push_back(draw_from_row(source.init, label, rng));
  while (static_cast<int>(ex.tokens.size()) < source.max_len) {
    if (static_cast<int>(ex.tokens.size()) >= source.min_len &&
        rng.uniform() < source.stop_prob)
      break;
    ex.tokens.push_back(draw_from_row(source.trans[label], ex.tokens.back(), rng));
  }
  return ex;
}

CorpusSplits make_splits(const SyntheticSource& source, const SplitSizes& sizes,
                         Rng& rng) {
  if (sizes.labeled < 1 || sizes.unlabeled < 1 || sizes.dev < 1 || sizes.test < 1)
    throw std::invalid_argument("make_splits: all sizes must be at least 1");
  std::vector<double> prior(source.prior.data(),
                            source.prior.data() + source.prior.size());
  auto draw = [&] {
    int y = rng.categorical(prior);
    return sample_example(source, y, rng);
  };
  CorpusSplits s;
  for (int i = 0; i < sizes.labeled; ++i) s.labeled.push_back(draw());
  for (int i = 0; i < sizes.unlabeled; ++i) {
    LabeledExample ex = draw();
    ex.label = kNoLabel;
    s.unlabeled.push_back(ex);
  }
  for (int i = 0; i < sizes.dev; ++i) s.dev.push_back(draw());
  for (int i = 0; i < sizes.test; ++i) s.test.push_back(draw());
  return s;
}

Eigen::VectorXd bayes_posterior(const SyntheticSource& source,
                                const std::vector<int>& tokens) {
  const int K = source.attrs.K();
  const int V = source.vocab.size();
  for (int t : tokens)
    if (t < 0 || t >= V)
      throw std::invalid_argument("bayes_posterior: token id out of range");

  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd ll(K);
  for (int y = 0; y < K; ++y) {
    double acc = std::log(source.prior[y]);
    for (size_t i = 0; i < tokens.size() && acc != kNegInf; ++i) {
      double p = (i == 0) ? source.init(y, tokens[0])
                          : source.trans[y](tokens[i - 1], tokens[i]);
      acc = (p > 0.0) ? acc + std::log(p) : kNegInf;
    }
    ll[y] = acc;
  }
  double mx = ll.maxCoeff();
  if (mx == kNegInf)  // impossible under every attribute: uniform convention
    return Eigen::VectorXd::Constant(K, 1.0 / K);
  Eigen::VectorXd w = (ll.array() - mx).exp();
  return w / w.sum();
}

Corpus gen_corpus(uint64_t seed, int V, int K, double separation,
                  const SplitSizes& sizes, int min_len, int max_len,
                  double stop_prob) {
  SyntheticSource src = build_synthetic_source(seed, V, K, separation, min_len,
                                               max_len, stop_prob);
  Rng rng(derive_seed(seed, 0x5117ULL));
  Corpus c;
  c.vocab = src.vocab;
  c.attrs = src.attrs;
  c.splits = make_splits(src, sizes, rng);
  c.source_params = SourceParams{seed,    V,       K,        separation,
                                 min_len, max_len, stop_prob};
  return c;
}

SyntheticSource Corpus::rebuild_source() const {
  if (!source_params)
    throw std::runtime_error("corpus: no source parameters recorded");
  const SourceParams& p = *source_params;
  return build_synthetic_source(p.seed, p.V, p.K, p.separation, p.min_len,
                                p.max_len, p.stop_prob);
}

namespace {

void write_split(const Corpus& c, const std::vector<LabeledExample>& split,
                 const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const LabeledExample& ex : split) {
    if (ex.label != kNoLabel) out << c.attrs.label(ex.label);
    out << '\t';
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      if (i) out << ' ';
      out << c.vocab.token(ex.tokens[i]);
    }
    out << '\n';
  }
}

std::vector<LabeledExample> read_split(const Corpus& c, const std::string& path,
                                       bool want_labels) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<LabeledExample> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    auto where = [&] { return path + ":" + std::to_string(lineno) + ": "; };
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(where() + "malformed line (no tab)");
    LabeledExample ex;
    std::string label_str = line.substr(0, tab);
    if (!label_str.empty()) {
      ex.label = c.attrs.id_of(label_str);
      if (ex.label < 0)
        throw std::runtime_error(where() + "unknown label '" + label_str + "'");
    }
    if (want_labels && ex.label == kNoLabel)
      throw std::runtime_error(where() + "missing label");
    if (!want_labels && ex.label != kNoLabel)
      throw std::runtime_error(where() + "unexpected label in unlabeled split");
    for (const std::string& tok : split_ws(line.substr(tab + 1))) {
      int id = c.vocab.id_of(tok);
      if (id < 0)
        throw std::runtime_error(where() + "unknown token '" + tok + "'");
      ex.tokens.push_back(id);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

void write_corpus(const Corpus& corpus, const std::string& prefix) {
  for (const std::string& tok : corpus.vocab.tokens)
    if (tok.find_first_of(" \t") != std::string::npos)
      throw std::invalid_argument("write_corpus: token contains whitespace");

  std::ofstream meta(prefix + ".meta");
  if (!meta) throw std::runtime_error("cannot open for writing: " + prefix + ".meta");
  meta << "# corpus metadata\n";
  meta << "labels\t";
  for (size_t i = 0; i < corpus.attrs.labels.size(); ++i)
    meta << (i ? " " : "") << corpus.attrs.labels[i];
  meta << "\ntokens\t";
  for (size_t i = 0; i < corpus.vocab.tokens.size(); ++i)
    meta << (i ? " " : "") << corpus.vocab.tokens[i];
  meta << '\n';
  if (corpus.source_params) {
    const SourceParams& p = *corpus.source_params;
    meta.precision(17);
    meta << "source\t" << p.seed << ' ' << p.V << ' ' << p.K << ' '
         << p.separation << ' ' << p.min_len << ' ' << p.max_len << ' '
         << p.stop_prob << '\n';
  }

  write_split(corpus, corpus.splits.labeled, prefix + ".labeled");
  write_split(corpus, corpus.splits.unlabeled, prefix + ".unlabeled");
  write_split(corpus, corpus.splits.dev, prefix + ".dev");
  write_split(corpus, corpus.splits.test, prefix + ".test");
}

Corpus read_corpus(const std::string& prefix) {
  std::ifstream meta(prefix + ".meta");
  if (!meta) throw std::runtime_error("cannot open for reading: " + prefix + ".meta");

  Corpus c;
  std::string line;
  int lineno = 0;
  while (std::getline(meta, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(prefix + ".meta:" + std::to_string(lineno) +
                               ": malformed line (no tab)");
    std::string key = line.substr(0, tab);
    std::string val = line.substr(tab + 1);
    if (key == "labels") {
      c.attrs = AttributeSet(split_ws(val));
    } else if (key == "tokens") {
      c.vocab = Vocab(split_ws(val));
    } else if (key == "source") {
      std::istringstream in(val);
      SourceParams p;
      if (!(in >> p.seed >> p.V >> p.K >> p.separation >> p.min_len >>
            p.max_len >> p.stop_prob))
        throw std::runtime_error(prefix + ".meta:" + std::to_string(lineno) +
                                 ": malformed source line");
      c.source_params = p;
    } else {
      throw std::runtime_error(prefix + ".meta:" + std::to_string(lineno) +
                               ": unknown key '" + key + "'");
    }
  }
  if (c.vocab.size() == 0 || c.attrs.K() == 0)
    throw std::runtime_error(prefix + ".meta: missing labels or tokens");
  if (c.source_params) {
    SyntheticSource src = c.rebuild_source();
    if (!(src.vocab == c.vocab) || !(src.attrs == c.attrs))
      throw std::runtime_error(prefix + ".meta: source parameters disagree with vocab");
  }

  c.splits.labeled = read_split(c, prefix + ".labeled", true);
  c.splits.unlabeled = read_split(c, prefix + ".unlabeled", false);
  c.splits.dev = read_split(c, prefix + ".dev", true);
  c.splits.test = read_split(c, prefix + ".test", true);
  return c;
}

}  // namespace dunst
