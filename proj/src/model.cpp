#include "dunst/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dunst/math.hpp"

namespace dunst {

void ModelConfig::validate() const {
  if (V <= Vocab::kNumSpecial)
    throw std::invalid_argument("ModelConfig: vocabulary has no content tokens");
  if (K < 2) throw std::invalid_argument("ModelConfig: K must be at least 2");
  if (d_h < 1 || d_z < 1 || layers < 1 || heads < 1 || d_ff < 1 || max_seq < 4)
    throw std::invalid_argument("ModelConfig: nonpositive dimension");
  if (d_h % heads != 0)
    throw std::invalid_argument("ModelConfig: d_h must divide into heads");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("ModelConfig: dropout outside [0,1)");
  if (init_scale <= 0.0)
    throw std::invalid_argument("ModelConfig: init_scale must be positive");
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kMaskValue = -1e30;

template <typename Self, typename Fn>
void visit_tensors(Self& s, Fn&& f) {
  f("tok_emb", s.tok_emb);
  f("pos_emb", s.pos_emb);
  f("label_emb", s.label_emb);
  for (size_t l = 0; l < s.layers.size(); ++l) {
    auto& lay = s.layers[l];
    std::string base = "layer" + std::to_string(l) + ".";
    f(base + "ln1_g", lay.ln1_g);
    f(base + "ln1_b", lay.ln1_b);
    f(base + "w_qkv", lay.w_qkv);
    f(base + "b_qkv", lay.b_qkv);
    f(base + "w_o", lay.w_o);
    f(base + "b_o", lay.b_o);
    f(base + "w_fuse", lay.w_fuse);
    f(base + "b_fuse", lay.b_fuse);
    f(base + "ln2_g", lay.ln2_g);
    f(base + "ln2_b", lay.ln2_b);
    f(base + "w_ff1", lay.w_ff1);
    f(base + "b_ff1", lay.b_ff1);
    f(base + "w_ff2", lay.w_ff2);
    f(base + "b_ff2", lay.b_ff2);
  }
  f("lnf_g", s.lnf_g);
  f("lnf_b", s.lnf_b);
  f("w_post1", s.w_post1);
  f("b_post1", s.b_post1);
  f("w_post2", s.w_post2);
  f("b_post2", s.b_post2);
  f("w_pg1", s.w_pg1);
  f("b_pg1", s.b_pg1);
  f("w_pg2", s.w_pg2);
  f("b_pg2", s.b_pg2);
  f("w_pc1", s.w_pc1);
  f("b_pc1", s.b_pc1);
  f("w_pc2", s.w_pc2);
  f("b_pc2", s.b_pc2);
  f("w_cls1", s.w_cls1);
  f("b_cls1", s.b_cls1);
  f("w_cls2", s.w_cls2);
  f("b_cls2", s.b_cls2);
  f("w_bow", s.w_bow);
  f("b_bow", s.b_bow);
  f("b_out", s.b_out);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 0x1417ULL));
  auto randn = [&](int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) m(r, c) = config.init_scale * rng.normal();
    return m;
  };
  auto zeros = [](int rows, int cols) { return Eigen::MatrixXd::Zero(rows, cols); };
  auto ones = [](int rows, int cols) { return Eigen::MatrixXd::Ones(rows, cols); };

  const int dh = config.d_h, dz = config.d_z, dff = config.d_ff;
  ModelParams p;
  p.config = config;
  p.tok_emb = randn(dh, config.V);
  p.pos_emb = randn(dh, config.max_seq);
  p.label_emb = randn(dh, config.K);
  p.layers.resize(config.layers);
  for (LayerParams& lay : p.layers) {
    lay.ln1_g = ones(dh, 1);
    lay.ln1_b = zeros(dh, 1);
    lay.w_qkv = randn(3 * dh, dh);
    lay.b_qkv = zeros(3 * dh, 1);
    lay.w_o = randn(dh, dh);
    lay.b_o = zeros(dh, 1);
    lay.w_fuse = randn(dh, dh + dz);
    lay.b_fuse = zeros(dh, 1);
    lay.ln2_g = ones(dh, 1);
    lay.ln2_b = zeros(dh, 1);
    lay.w_ff1 = randn(dff, dh);
    lay.b_ff1 = zeros(dff, 1);
    lay.w_ff2 = randn(dh, dff);
    lay.b_ff2 = zeros(dh, 1);
  }
  p.lnf_g = ones(dh, 1);
  p.lnf_b = zeros(dh, 1);
  p.w_post1 = randn(dh, 2 * dh);
  p.b_post1 = zeros(dh, 1);
  p.w_post2 = randn(2 * dz, dh);
  p.b_post2 = zeros(2 * dz, 1);
  p.w_pg1 = randn(dh, dh);
  p.b_pg1 = zeros(dh, 1);
  p.w_pg2 = randn(2 * dz, dh);
  p.b_pg2 = zeros(2 * dz, 1);
  p.w_pc1 = randn(dh, dh);
  p.b_pc1 = zeros(dh, 1);
  p.w_pc2 = randn(2 * dz, dh);
  p.b_pc2 = zeros(2 * dz, 1);
  p.w_cls1 = randn(dh, dz);
  p.b_cls1 = zeros(dh, 1);
  p.w_cls2 = randn(config.K, dh);
  p.b_cls2 = zeros(config.K, 1);
  p.w_bow = randn(config.V, dz);
  p.b_bow = zeros(config.V, 1);
  p.b_out = zeros(config.V, 1);
  return p;
}

ModelParams ModelParams::zeros_like(const ModelParams& other) {
  ModelParams p = other;
  p.set_zero();
  return p;
}

std::vector<std::pair<std::string, Eigen::MatrixXd*>> ModelParams::tensors() {
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> out;
  visit_tensors(*this, [&](const std::string& name, Eigen::MatrixXd& m) {
    out.emplace_back(name, &m);
  });
  return out;
}

std::vector<std::pair<std::string, const Eigen::MatrixXd*>> ModelParams::tensors()
    const {
  std::vector<std::pair<std::string, const Eigen::MatrixXd*>> out;
  visit_tensors(*this, [&](const std::string& name, const Eigen::MatrixXd& m) {
    out.emplace_back(name, &m);
  });
  return out;
}

long ModelParams::param_count() const {
  long n = 0;
  for (auto& [name, t] : tensors()) n += t->size();
  return n;
}

Eigen::VectorXd ModelParams::flatten() const {
  Eigen::VectorXd flat(param_count());
  long at = 0;
  for (auto& [name, t] : tensors()) {
    std::memcpy(flat.data() + at, t->data(), sizeof(double) * t->size());
    at += t->size();
  }
  return flat;
}

void ModelParams::unflatten(const Eigen::VectorXd& flat) {
  if (flat.size() != param_count())
    throw std::invalid_argument("unflatten: size mismatch");
  long at = 0;
  for (auto& [name, t] : tensors()) {
    std::memcpy(t->data(), flat.data() + at, sizeof(double) * t->size());
    at += t->size();
  }
}

void ModelParams::set_zero() {
  for (auto& [name, t] : tensors()) t->setZero();
}

void ModelParams::add_scaled(const ModelParams& other, double a) {
  auto mine = tensors();
  auto theirs = other.tensors();
  if (mine.size() != theirs.size())
    throw std::invalid_argument("add_scaled: tensor lists differ");
  for (size_t i = 0; i < mine.size(); ++i)
    mine[i].second->noalias() += a * (*theirs[i].second);
}

double ModelParams::squared_norm() const {
  double s = 0.0;
  for (auto& [name, t] : tensors()) s += t->squaredNorm();
  return s;
}

// ---------------------------------------------------------------------------
// Transformer stack
// ---------------------------------------------------------------------------

namespace {

struct LnCache {
  Eigen::MatrixXd n;         // normalized activations
  Eigen::VectorXd inv_std;   // per column
};

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& g,
                           const Eigen::MatrixXd& b, LnCache* cache) {
  const int d = static_cast<int>(x.rows());
  Eigen::MatrixXd y(x.rows(), x.cols());
  Eigen::MatrixXd n(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.cols());
  for (int t = 0; t < x.cols(); ++t) {
    double mu = x.col(t).mean();
    Eigen::VectorXd c = x.col(t).array() - mu;
    double var = c.squaredNorm() / d;
    double r = 1.0 / std::sqrt(var + kLnEps);
    n.col(t) = c * r;
    y.col(t) = g.col(0).cwiseProduct(n.col(t)) + b.col(0);
    inv_std[t] = r;
  }
  if (cache) {
    cache->n = std::move(n);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// dx = r (dn - mean(dn) - n mean(dn . n)), dn = dy . g
Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LnCache& c,
                                    const Eigen::MatrixXd& g,
                                    Eigen::MatrixXd& dg, Eigen::MatrixXd& db) {
  Eigen::MatrixXd dx(dy.rows(), dy.cols());
  for (int t = 0; t < dy.cols(); ++t) {
    dg.col(0).noalias() += dy.col(t).cwiseProduct(c.n.col(t));
    db.col(0).noalias() += dy.col(t);
    Eigen::VectorXd dn = dy.col(t).cwiseProduct(g.col(0));
    double m1 = dn.mean();
    double m2 = dn.cwiseProduct(c.n.col(t)).mean();
    dx.col(t) = c.inv_std[t] * (dn.array() - m1 - c.n.col(t).array() * m2);
  }
  return dx;
}

struct LayerCache {
  LnCache ln1;
  Eigen::MatrixXd u;            // ln1 output
  Eigen::MatrixXd qkv;          // 3 d_h x T
  std::vector<Eigen::MatrixXd> p;  // per-head attention rows (T x T)
  Eigen::MatrixXd attn;         // concatenated head outputs
  Eigen::MatrixXd attn_proj;    // after w_o
  LnCache ln2;
  Eigen::MatrixXd u2;
  Eigen::MatrixXd h1;           // post-tanh feed-forward hidden
};

struct StackCache {
  std::vector<int> framed;
  Eigen::MatrixXd x0;
  std::vector<LayerCache> layers;
  LnCache lnf;
  Eigen::MatrixXd y;
};

void check_tokens(const ModelConfig& config, const std::vector<int>& framed) {
  if (static_cast<int>(framed.size()) > config.max_seq)
    throw std::invalid_argument("model: sequence exceeds max context");
  if (framed.empty()) throw std::invalid_argument("model: empty sequence");
  for (int t : framed)
    if (t < 0 || t >= config.V)
      throw std::invalid_argument("model: token id out of range");
}

// Shared encoder/decoder stack. `z` non-null selects the decoder path:
// causal masking plus per-layer latent fusion.
Eigen::MatrixXd run_stack(const ModelParams& p, const std::vector<int>& framed,
                          bool causal, const Eigen::VectorXd* z,
                          StackCache* cache) {
  const ModelConfig& cfg = p.config;
  check_tokens(cfg, framed);
  const int T = static_cast<int>(framed.size());
  const int dh = cfg.d_h, dk = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  Eigen::MatrixXd x(dh, T);
  for (int t = 0; t < T; ++t)
    x.col(t) = p.tok_emb.col(framed[t]) + p.pos_emb.col(t);
  if (cache) {
    cache->framed = framed;
    cache->x0 = x;
    cache->layers.resize(p.layers.size());
  }

  for (size_t l = 0; l < p.layers.size(); ++l) {
    const LayerParams& lay = p.layers[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    LnCache ln1_local;
    Eigen::MatrixXd u =
        layer_norm(x, lay.ln1_g, lay.ln1_b, lc ? &lc->ln1 : &ln1_local);

    Eigen::MatrixXd qkv = (lay.w_qkv * u).colwise() + lay.b_qkv.col(0);
    Eigen::MatrixXd attn(dh, T);
    std::vector<Eigen::MatrixXd> p_heads(cache ? cfg.heads : 0);
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = qkv.middleRows(h * dk, dk);
      auto kh = qkv.middleRows(dh + h * dk, dk);
      auto vh = qkv.middleRows(2 * dh + h * dk, dk);
      Eigen::MatrixXd s = (qh.transpose() * kh) * scale;  // (query, key)
      if (causal)
        for (int q = 0; q < T; ++q)
          for (int k = q + 1; k < T; ++k) s(q, k) = kMaskValue;
      Eigen::MatrixXd prob(T, T);
      for (int q = 0; q < T; ++q)
        prob.row(q) = softmax(s.row(q).transpose()).transpose();
      attn.middleRows(h * dk, dk).noalias() = vh * prob.transpose();
      if (cache) p_heads[h] = std::move(prob);
    }
    Eigen::MatrixXd attn_proj = (lay.w_o * attn).colwise() + lay.b_o.col(0);

    Eigen::MatrixXd fused;
    if (z) {
      Eigen::MatrixXd cat(dh + cfg.d_z, T);
      cat.topRows(dh) = attn_proj;
      cat.bottomRows(cfg.d_z).colwise() = *z;
      fused = (lay.w_fuse * cat).colwise() + lay.b_fuse.col(0);
    } else {
      fused = attn_proj;
    }
    Eigen::MatrixXd x_mid = x + fused;

    LnCache ln2_local;
    Eigen::MatrixXd u2 =
        layer_norm(x_mid, lay.ln2_g, lay.ln2_b, lc ? &lc->ln2 : &ln2_local);
    Eigen::MatrixXd h1 = ((lay.w_ff1 * u2).colwise() + lay.b_ff1.col(0))
                             .array()
                             .tanh()
                             .matrix();
    Eigen::MatrixXd f2 = (lay.w_ff2 * h1).colwise() + lay.b_ff2.col(0);

    if (lc) {
      lc->u = std::move(u);
      lc->qkv = std::move(qkv);
      lc->p = std::move(p_heads);
      lc->attn = std::move(attn);
      lc->attn_proj = std::move(attn_proj);
      lc->u2 = std::move(u2);
      lc->h1 = std::move(h1);
      x = x_mid + f2;
    } else {
      x = x_mid + f2;
    }
  }

  LnCache lnf_local;
  Eigen::MatrixXd y = layer_norm(x, p.lnf_g, p.lnf_b, cache ? &cache->lnf : &lnf_local);
  if (cache) cache->y = y;
  return y;
}

// Accumulates parameter gradients for a cached stack run. dy is the gradient
// at the final layer-norm output; dz (when fused) collects the latent's
// gradient summed over layers and positions.
void stack_backward(const ModelParams& p, const StackCache& cache, bool causal,
                    const Eigen::VectorXd* z, const Eigen::MatrixXd& dy,
                    ModelParams& g, Eigen::VectorXd* dz) {
  const ModelConfig& cfg = p.config;
  const int T = static_cast<int>(cache.framed.size());
  const int dh = cfg.d_h, dk = cfg.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  // Recompute per-layer inputs from the caches: x_mid = recoverable from
  // residuals is not stored, but every backward formula below only needs
  // cached activations (u, qkv, p, attn, attn_proj, u2, h1) plus LN caches.
  Eigen::MatrixXd dx = layer_norm_backward(dy, cache.lnf, p.lnf_g, g.lnf_g, g.lnf_b);

  for (int l = static_cast<int>(p.layers.size()) - 1; l >= 0; --l) {
    const LayerParams& lay = p.layers[l];
    LayerParams& gl = g.layers[l];
    const LayerCache& lc = cache.layers[l];

    // x_out = x_mid + w_ff2 tanh(w_ff1 ln2(x_mid) + b) + b
    Eigen::MatrixXd dx_mid = dx;
    g.layers[l].b_ff2.col(0).noalias() += dx.rowwise().sum();
    gl.w_ff2.noalias() += dx * lc.h1.transpose();
    Eigen::MatrixXd dh1 = lay.w_ff2.transpose() * dx;
    Eigen::MatrixXd da1 =
        dh1.cwiseProduct((1.0 - lc.h1.array().square()).matrix());
    gl.w_ff1.noalias() += da1 * lc.u2.transpose();
    gl.b_ff1.col(0).noalias() += da1.rowwise().sum();
    Eigen::MatrixXd du2 = lay.w_ff1.transpose() * da1;
    dx_mid.noalias() +=
        layer_norm_backward(du2, lc.ln2, lay.ln2_g, gl.ln2_g, gl.ln2_b);

    // x_mid = x_in + fused(attention)
    Eigen::MatrixXd dfused = dx_mid;  // residual passthrough handled below
    Eigen::MatrixXd dattn_proj;
    if (z) {
      Eigen::MatrixXd cat(dh + cfg.d_z, T);
      cat.topRows(dh) = lc.attn_proj;
      cat.bottomRows(cfg.d_z).colwise() = *z;
      gl.w_fuse.noalias() += dfused * cat.transpose();
      gl.b_fuse.col(0).noalias() += dfused.rowwise().sum();
      Eigen::MatrixXd dcat = lay.w_fuse.transpose() * dfused;
      dattn_proj = dcat.topRows(dh);
      if (dz) dz->noalias() += dcat.bottomRows(cfg.d_z).rowwise().sum();
    } else {
      dattn_proj = dfused;
    }

    gl.w_o.noalias() += dattn_proj * lc.attn.transpose();
    gl.b_o.col(0).noalias() += dattn_proj.rowwise().sum();
    Eigen::MatrixXd dattn = lay.w_o.transpose() * dattn_proj;

    Eigen::MatrixXd dqkv = Eigen::MatrixXd::Zero(3 * dh, T);
    for (int h = 0; h < cfg.heads; ++h) {
      auto qh = lc.qkv.middleRows(h * dk, dk);
      auto kh = lc.qkv.middleRows(dh + h * dk, dk);
      auto vh = lc.qkv.middleRows(2 * dh + h * dk, dk);
      const Eigen::MatrixXd& prob = lc.p[h];
      Eigen::MatrixXd doh = dattn.middleRows(h * dk, dk);
      dqkv.middleRows(2 * dh + h * dk, dk).noalias() = doh * prob;
      Eigen::MatrixXd dprob = doh.transpose() * vh;  // (query, key)
      Eigen::MatrixXd ds(T, T);
      for (int q = 0; q < T; ++q) {
        double inner = dprob.row(q).dot(prob.row(q));
        ds.row(q) =
            (prob.row(q).array() * (dprob.row(q).array() - inner)).matrix();
      }
      (void)causal;  // masked cells have prob 0, so ds is already 0 there
      dqkv.middleRows(h * dk, dk).noalias() = kh * ds.transpose() * scale;
      dqkv.middleRows(dh + h * dk, dk).noalias() = qh * ds * scale;
    }
    gl.w_qkv.noalias() += dqkv * lc.u.transpose();
    gl.b_qkv.col(0).noalias() += dqkv.rowwise().sum();
    Eigen::MatrixXd du = lay.w_qkv.transpose() * dqkv;
    dx = dx_mid;
    dx.noalias() +=
        layer_norm_backward(du, lc.ln1, lay.ln1_g, gl.ln1_g, gl.ln1_b);
  }

  for (int t = 0; t < T; ++t) {
    g.tok_emb.col(cache.framed[t]).noalias() += dx.col(t);
    g.pos_emb.col(t).noalias() += dx.col(t);
  }
}

// Two-layer tanh MLP producing a clamped Gaussian head.
struct GaussCache {
  Eigen::VectorXd in;
  Eigen::VectorXd h;
  Eigen::ArrayXd pass;  // 1 where log_sigma was inside the clamp
};

LatentGaussian gauss_head(const Eigen::MatrixXd& w1, const Eigen::MatrixXd& b1,
                          const Eigen::MatrixXd& w2, const Eigen::MatrixXd& b2,
                          const Eigen::VectorXd& in, GaussCache* cache) {
  Eigen::VectorXd h = ((w1 * in + b1.col(0)).array().tanh()).matrix();
  Eigen::VectorXd out = w2 * h + b2.col(0);
  const int dz = static_cast<int>(out.size()) / 2;
  LatentGaussian gz;
  gz.mu = out.head(dz);
  Eigen::VectorXd raw = out.tail(dz);
  gz.log_sigma.resize(dz);
  Eigen::ArrayXd pass(dz);
  for (int i = 0; i < dz; ++i) {
    pass[i] = std::abs(raw[i]) <= kLogSigmaClamp ? 1.0 : 0.0;
    gz.log_sigma[i] =
        std::clamp(raw[i], -kLogSigmaClamp, kLogSigmaClamp);
  }
  if (cache) {
    cache->in = in;
    cache->h = std::move(h);
    cache->pass = std::move(pass);
  }
  return gz;
}

Eigen::VectorXd gauss_head_backward(const Eigen::MatrixXd& w1,
                                    const Eigen::MatrixXd& w2,
                                    const GaussCache& c,
                                    const Eigen::VectorXd& dmu,
                                    const Eigen::VectorXd& dls,
                                    Eigen::MatrixXd& gw1, Eigen::MatrixXd& gb1,
                                    Eigen::MatrixXd& gw2, Eigen::MatrixXd& gb2) {
  Eigen::VectorXd dout(dmu.size() + dls.size());
  dout.head(dmu.size()) = dmu;
  dout.tail(dls.size()) = (dls.array() * c.pass).matrix();
  gw2.noalias() += dout * c.h.transpose();
  gb2.col(0).noalias() += dout;
  Eigen::VectorXd dh = w2.transpose() * dout;
  Eigen::VectorXd da = dh.cwiseProduct((1.0 - c.h.array().square()).matrix());
  gw1.noalias() += da * c.in.transpose();
  gb1.col(0).noalias() += da;
  return w1.transpose() * da;
}

std::vector<int> frame_encoder(const std::vector<int>& content) {
  std::vector<int> framed;
  framed.reserve(content.size() + 2);
  framed.push_back(Vocab::kBos);
  framed.insert(framed.end(), content.begin(), content.end());
  framed.push_back(Vocab::kEos);
  return framed;
}

std::vector<int> frame_decoder(const std::vector<int>& inputs) {
  std::vector<int> framed;
  framed.reserve(inputs.size() + 1);
  framed.push_back(Vocab::kBos);
  framed.insert(framed.end(), inputs.begin(), inputs.end());
  return framed;
}

}  // namespace

// ---------------------------------------------------------------------------
// Inference surface
// ---------------------------------------------------------------------------

EncodedState encode(const ModelParams& p, const std::vector<int>& content) {
  EncodedState st;
  st.states = run_stack(p, frame_encoder(content), false, nullptr, nullptr);
  st.h_x = st.states.col(0);
  return st;
}

namespace {

LatentGaussian posterior_from_hx(const ModelParams& p, const Eigen::VectorXd& h_x,
                                 int label, GaussCache* cache) {
  if (label < 0 || label >= p.config.K)
    throw std::invalid_argument("posterior: label out of range");
  Eigen::VectorXd in(2 * p.config.d_h);
  in.head(p.config.d_h) = h_x;
  in.tail(p.config.d_h) = p.label_emb.col(label);
  return gauss_head(p.w_post1, p.b_post1, p.w_post2, p.b_post2, in, cache);
}

}  // namespace

LatentGaussian posterior(const ModelParams& p, const std::vector<int>& content,
                         int label) {
  return posterior_from_hx(p, encode(p, content).h_x, label, nullptr);
}

LatentGaussian prior_gen(const ModelParams& p, int label) {
  if (label < 0 || label >= p.config.K)
    throw std::invalid_argument("prior_gen: label out of range");
  return gauss_head(p.w_pg1, p.b_pg1, p.w_pg2, p.b_pg2, p.label_emb.col(label),
                    nullptr);
}

LatentGaussian prior_cls(const ModelParams& p, const std::vector<int>& content) {
  return gauss_head(p.w_pc1, p.b_pc1, p.w_pc2, p.b_pc2, encode(p, content).h_x,
                    nullptr);
}

Eigen::VectorXd reparameterize(const LatentGaussian& g, Rng& rng) {
  Eigen::VectorXd z(g.dim());
  for (int i = 0; i < g.dim(); ++i)
    z[i] = g.mu[i] + std::exp(g.log_sigma[i]) * rng.normal();
  return z;
}

Eigen::MatrixXd decoder_logits(const ModelParams& p, const Eigen::VectorXd& z,
                               const std::vector<int>& inputs) {
  Eigen::MatrixXd y = run_stack(p, frame_decoder(inputs), true, &z, nullptr);
  return ((p.tok_emb.transpose() * y).colwise() + p.b_out.col(0));
}

Eigen::VectorXd decode_step(const ModelParams& p, const Eigen::VectorXd& z,
                            const std::vector<int>& prefix) {
  if (prefix.empty() || prefix.front() != Vocab::kBos)
    throw std::invalid_argument("decode_step: prefix must begin with BOS");
  Eigen::MatrixXd y = run_stack(p, prefix, true, &z, nullptr);
  return p.tok_emb.transpose() * y.col(y.cols() - 1) + p.b_out.col(0);
}

namespace {

Eigen::VectorXd classifier_forward(const ModelParams& p, const Eigen::VectorXd& z,
                                   const Eigen::VectorXd* dropout_mask,
                                   Eigen::VectorXd* hidden_out) {
  Eigen::VectorXd h = ((p.w_cls1 * z + p.b_cls1.col(0)).array().tanh()).matrix();
  if (dropout_mask) h = h.cwiseProduct(*dropout_mask);
  if (hidden_out) *hidden_out = h;
  return p.w_cls2 * h + p.b_cls2.col(0);
}

}  // namespace

Eigen::VectorXd classify(const ModelParams& p, const Eigen::VectorXd& z) {
  return classifier_forward(p, z, nullptr, nullptr);
}

Eigen::VectorXd classify_mc(const ModelParams& p, const Eigen::VectorXd& z,
                            Rng& rng) {
  const double keep = 1.0 - p.config.dropout;
  Eigen::VectorXd mask(p.config.d_h);
  for (int i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  return classifier_forward(p, z, &mask, nullptr);
}

Eigen::VectorXd bow_logits(const ModelParams& p, const Eigen::VectorXd& z) {
  return p.w_bow * z + p.b_bow.col(0);
}

// ---------------------------------------------------------------------------
// Training forward/backward
// ---------------------------------------------------------------------------

LossBreakdown forward_backward(const ModelParams& p, const TrainExample& ex,
                               const LossWeights& weights,
                               const Eigen::VectorXd& eps, ModelParams* grads) {
  const ModelConfig& cfg = p.config;
  weights.validate();
  if (eps.size() != cfg.d_z)
    throw std::invalid_argument("forward_backward: eps dimension mismatch");
  if (ex.label < 0 || ex.label >= cfg.K)
    throw std::invalid_argument("forward_backward: label out of range");
  if (ex.soft && ex.soft->steps.rows() != cfg.V)
    throw std::invalid_argument("forward_backward: soft target vocab mismatch");
  if (ex.soft && ex.soft->steps.cols() < 1)
    throw std::invalid_argument("forward_backward: empty soft target");

  // Encoder over the content tokens; pooled state feeds both Gaussian heads.
  std::vector<int> enc_framed = frame_encoder(ex.tokens);
  StackCache enc_cache;
  Eigen::MatrixXd enc_y =
      run_stack(p, enc_framed, false, nullptr, grads ? &enc_cache : nullptr);
  Eigen::VectorXd h_x = enc_y.col(0);
  Eigen::VectorXd h_y = p.label_emb.col(ex.label);

  GaussCache post_cache, pg_cache, pc_cache;
  LatentGaussian post = posterior_from_hx(p, h_x, ex.label, &post_cache);
  LatentGaussian pg = gauss_head(p.w_pg1, p.b_pg1, p.w_pg2, p.b_pg2, h_y,
                                 &pg_cache);
  LatentGaussian pc = gauss_head(p.w_pc1, p.b_pc1, p.w_pc2, p.b_pc2, h_x,
                                 &pc_cache);

  Eigen::VectorXd sigma = post.log_sigma.array().exp().matrix();
  Eigen::VectorXd z = post.mu + sigma.cwiseProduct(eps);

  // Decoder pass: hard targets append EOS; soft targets use the stored step
  // distributions with the previous argmax as teacher-forcing context.
  std::vector<int> dec_inputs;
  std::vector<int> hard_targets;
  if (ex.soft) {
    const std::vector<int>& shadow = ex.soft->hard_shadow;
    dec_inputs.assign(shadow.begin(),
                      shadow.empty() ? shadow.end() : shadow.end() - 1);
  } else {
    dec_inputs = ex.tokens;
    hard_targets = ex.tokens;
    hard_targets.push_back(Vocab::kEos);
  }
  std::vector<int> dec_framed = frame_decoder(dec_inputs);
  StackCache dec_cache;
  Eigen::MatrixXd dec_y = run_stack(p, dec_framed, true, &z,
                                    grads ? &dec_cache : nullptr);
  Eigen::MatrixXd logits =
      (p.tok_emb.transpose() * dec_y).colwise() + p.b_out.col(0);

  Eigen::VectorXd cls_hidden;
  Eigen::VectorXd cls_logits = classifier_forward(p, z, nullptr, &cls_hidden);
  Eigen::VectorXd bow = p.w_bow * z + p.b_bow.col(0);

  LossBreakdown out;
  out.parts.l_g = ex.soft ? soft_recon_kl(ex.soft->steps, logits)
                          : recon_nll(logits, hard_targets);
  out.parts.l_c = cls_nll(cls_logits, ex.label);
  out.parts.l_bow = bow_loss(bow, ex.tokens);
  out.parts.kl_g_per_dim = gaussian_kl_per_dim(post, pg);
  out.parts.kl_c_per_dim = gaussian_kl_per_dim(post, pc);
  out.total = total_loss(out.parts, weights);
  if (!grads) return out;

  ModelParams& g = *grads;
  const double wc = weights.lambda_c, wg = weights.lambda_g;
  const double wkc = weights.lambda_kl_c, wkg = weights.lambda_kl_g;
  const double wbow = weights.lambda_bow;

  Eigen::VectorXd dz = Eigen::VectorXd::Zero(cfg.d_z);

  // Classifier head.
  {
    Eigen::VectorXd dlogit = softmax(cls_logits);
    dlogit[ex.label] -= 1.0;
    dlogit *= wc;
    g.w_cls2.noalias() += dlogit * cls_hidden.transpose();
    g.b_cls2.col(0).noalias() += dlogit;
    Eigen::VectorXd dh = p.w_cls2.transpose() * dlogit;
    Eigen::VectorXd da =
        dh.cwiseProduct((1.0 - cls_hidden.array().square()).matrix());
    g.w_cls1.noalias() += da * z.transpose();
    g.b_cls1.col(0).noalias() += da;
    dz.noalias() += p.w_cls1.transpose() * da;
  }

  // BOW head: gradient count_v - n p_v per vocabulary entry, negated.
  {
    Eigen::VectorXd pb = softmax(bow);
    Eigen::VectorXd dlogit = Eigen::VectorXd::Zero(cfg.V);
    int n_content = 0;
    for (int t : ex.tokens)
      if (t >= Vocab::kNumSpecial) {
        dlogit[t] -= 1.0;
        ++n_content;
      }
    dlogit.noalias() += static_cast<double>(n_content) * pb;
    dlogit *= wbow;
    g.w_bow.noalias() += dlogit * z.transpose();
    g.b_bow.col(0).noalias() += dlogit;
    dz.noalias() += p.w_bow.transpose() * dlogit;
  }

  // Decoder reconstruction.
  {
    Eigen::MatrixXd dlogits(cfg.V, logits.cols());
    for (int m = 0; m < logits.cols(); ++m) {
      Eigen::VectorXd sm = softmax(logits.col(m));
      if (ex.soft)
        dlogits.col(m) = sm - ex.soft->steps.col(m);
      else {
        dlogits.col(m) = sm;
        dlogits(hard_targets[m], m) -= 1.0;
      }
    }
    dlogits *= wg;
    g.tok_emb.noalias() += dec_y * dlogits.transpose();
    g.b_out.col(0).noalias() += dlogits.rowwise().sum();
    Eigen::MatrixXd ddec_y = p.tok_emb * dlogits;
    stack_backward(p, dec_cache, true, &z, ddec_y, g, &dz);
  }

  // KL terms: active dimensions only (free-bits floor blocks the rest).
  Eigen::VectorXd dpost_mu = Eigen::VectorXd::Zero(cfg.d_z);
  Eigen::VectorXd dpost_ls = Eigen::VectorXd::Zero(cfg.d_z);
  auto kl_backward = [&](const LatentGaussian& prior, const Eigen::VectorXd& kl,
                         double w, Eigen::VectorXd& dprior_mu,
                         Eigen::VectorXd& dprior_ls) {
    for (int i = 0; i < cfg.d_z; ++i) {
      if (kl[i] <= weights.kl_free_bits || w == 0.0) continue;
      double e2q = std::exp(2.0 * post.log_sigma[i]);
      double e2pinv = std::exp(-2.0 * prior.log_sigma[i]);
      double dmu = post.mu[i] - prior.mu[i];
      dpost_mu[i] += w * dmu * e2pinv;
      dprior_mu[i] += -w * dmu * e2pinv;
      dpost_ls[i] += w * (e2q * e2pinv - 1.0);
      dprior_ls[i] += w * (1.0 - (e2q + dmu * dmu) * e2pinv);
    }
  };
  Eigen::VectorXd dpg_mu = Eigen::VectorXd::Zero(cfg.d_z);
  Eigen::VectorXd dpg_ls = Eigen::VectorXd::Zero(cfg.d_z);
  Eigen::VectorXd dpc_mu = Eigen::VectorXd::Zero(cfg.d_z);
  Eigen::VectorXd dpc_ls = Eigen::VectorXd::Zero(cfg.d_z);
  kl_backward(pg, out.parts.kl_g_per_dim, wkg, dpg_mu, dpg_ls);
  kl_backward(pc, out.parts.kl_c_per_dim, wkc, dpc_mu, dpc_ls);

  // Reparameterization: z = mu + exp(ls) eps.
  dpost_mu.noalias() += dz;
  dpost_ls.noalias() += dz.cwiseProduct(eps).cwiseProduct(sigma);

  Eigen::VectorXd dh_x = Eigen::VectorXd::Zero(cfg.d_h);
  Eigen::VectorXd dh_y = Eigen::VectorXd::Zero(cfg.d_h);
  {
    Eigen::VectorXd din =
        gauss_head_backward(p.w_post1, p.w_post2, post_cache, dpost_mu,
                            dpost_ls, g.w_post1, g.b_post1, g.w_post2,
                            g.b_post2);
    dh_x.noalias() += din.head(cfg.d_h);
    dh_y.noalias() += din.tail(cfg.d_h);
  }
  dh_y.noalias() += gauss_head_backward(p.w_pg1, p.w_pg2, pg_cache, dpg_mu,
                                        dpg_ls, g.w_pg1, g.b_pg1, g.w_pg2,
                                        g.b_pg2);
  dh_x.noalias() += gauss_head_backward(p.w_pc1, p.w_pc2, pc_cache, dpc_mu,
                                        dpc_ls, g.w_pc1, g.b_pc1, g.w_pc2,
                                        g.b_pc2);
  g.label_emb.col(ex.label).noalias() += dh_y;

  Eigen::MatrixXd denc_y =
      Eigen::MatrixXd::Zero(cfg.d_h, enc_cache.y.cols());
  denc_y.col(0) = dh_x;
  stack_backward(p, enc_cache, false, nullptr, denc_y, g, nullptr);

  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'D', 'C', 'K', 'P', 'T', '0', '0', '1'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  const ModelConfig& c = p.config;
  for (int v : {c.V, c.K, c.d_h, c.d_z, c.layers, c.heads, c.d_ff, c.max_seq})
    put<int32_t>(out, v);
  put<double>(out, c.dropout);
  put<double>(out, c.init_scale);
  auto ts = p.tensors();
  put<uint32_t>(out, static_cast<uint32_t>(ts.size()));
  for (auto& [name, t] : ts) {
    put<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<int32_t>(out, static_cast<int32_t>(t->rows()));
    put<int32_t>(out, static_cast<int32_t>(t->cols()));
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(sizeof(double)) * t->size());
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  ModelConfig c;
  c.V = take<int32_t>(in, path);
  c.K = take<int32_t>(in, path);
  c.d_h = take<int32_t>(in, path);
  c.d_z = take<int32_t>(in, path);
  c.layers = take<int32_t>(in, path);
  c.heads = take<int32_t>(in, path);
  c.d_ff = take<int32_t>(in, path);
  c.max_seq = take<int32_t>(in, path);
  c.dropout = take<double>(in, path);
  c.init_scale = take<double>(in, path);
  ModelParams p = ModelParams::init(c, 0);
  auto ts = p.tensors();
  auto count = take<uint32_t>(in, path);
  if (count != ts.size())
    throw std::runtime_error("checkpoint tensor count mismatch: " + path);
  for (auto& [name, t] : ts) {
    auto len = take<uint32_t>(in, path);
    std::string stored(len, '\0');
    in.read(stored.data(), len);
    if (!in || stored != name)
      throw std::runtime_error("checkpoint tensor order mismatch: " + path);
    int rows = take<int32_t>(in, path);
    int cols = take<int32_t>(in, path);
    if (rows != t->rows() || cols != t->cols())
      throw std::runtime_error("checkpoint tensor shape mismatch: " + path);
    in.read(reinterpret_cast<char*>(t->data()),
            static_cast<std::streamsize>(sizeof(double)) * t->size());
    if (!in) throw std::runtime_error("checkpoint truncated: " + path);
  }
  return p;
}

}  // namespace dunst
