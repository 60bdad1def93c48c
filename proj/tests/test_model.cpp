#include <doctest.h>

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/losses.hpp"
#include "dunst/model.hpp"

using namespace dunst;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.V = 8;
  cfg.K = 2;
  cfg.d_h = 8;
  cfg.d_z = 4;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 16;
  cfg.dropout = 0.1;
  cfg.init_scale = 0.05;
  return cfg;
}

// Distinct weights to catch cross-wired terms; zero free bits keeps the
// functional smooth for finite differences.
LossWeights fd_weights() {
  LossWeights w;
  w.lambda_c = 0.7;
  w.lambda_g = 1.0;
  w.lambda_bow = 0.3;
  w.lambda_kl_c = 0.6;
  w.lambda_kl_g = 0.9;
  w.kl_free_bits = 0.0;
  return w;
}

Eigen::VectorXd fixed_eps() {
  Eigen::VectorXd eps(4);
  eps << 0.3, -0.7, 1.1, -0.2;
  return eps;
}

// Three-step soft sequence over V=8 ending in a terminal EOS column.
SoftSequence make_soft(int V) {
  SoftSequence s;
  s.steps = Eigen::MatrixXd::Zero(V, 3);
  s.steps(4, 0) = 0.6;
  s.steps(5, 0) = 0.4;
  s.steps(5, 1) = 0.5;
  s.steps(6, 1) = 0.3;
  s.steps(7, 1) = 0.2;
  s.steps(Vocab::kEos, 2) = 0.7;
  s.steps(6, 2) = 0.3;
  s.label = 1;
  s.hard_shadow = {4, 5, Vocab::kEos};
  s.terminal_eos = true;
  return s;
}

Eigen::VectorXd posterior_z(const ModelParams& p, const std::vector<int>& toks,
                            int label, const Eigen::VectorXd& eps) {
  LatentGaussian post = posterior(p, toks, label);
  return post.mu +
         post.log_sigma.array().exp().matrix().cwiseProduct(eps).eval();
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("hard example gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 11);
    TrainExample ex;
    ex.tokens = {4, 6, 5, 7};
    ex.label = 1;
    LossWeights w = fd_weights();
    Eigen::VectorXd eps = fixed_eps();

    ModelParams grads = ModelParams::zeros_like(p);
    forward_backward(p, ex, w, eps, &grads);

    auto f = [&](const Eigen::VectorXd& flat) {
      ModelParams q = p;
      q.unflatten(flat);
      return forward_backward(q, ex, w, eps, nullptr).total;
    };
    GradCheckResult res = grad_check(f, p.flatten(), grads.flatten(), 1e-5);
    CAPTURE(res.worst_index);
    CAPTURE(res.analytic_at_worst);
    CAPTURE(res.numeric_at_worst);
    CHECK(res.max_rel_error < 1e-4);
  }

  TEST_CASE("soft example gradients match finite differences") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 13);
    SoftSequence soft = make_soft(cfg.V);
    TrainExample ex;
    ex.tokens = soft.content_shadow();
    ex.label = soft.label;
    ex.soft = &soft;
    REQUIRE(ex.tokens == std::vector<int>({4, 5}));
    LossWeights w = fd_weights();
    Eigen::VectorXd eps = fixed_eps();

    ModelParams grads = ModelParams::zeros_like(p);
    forward_backward(p, ex, w, eps, &grads);

    auto f = [&](const Eigen::VectorXd& flat) {
      ModelParams q = p;
      q.unflatten(flat);
      return forward_backward(q, ex, w, eps, nullptr).total;
    };
    GradCheckResult res = grad_check(f, p.flatten(), grads.flatten(), 1e-5);
    CAPTURE(res.worst_index);
    CAPTURE(res.analytic_at_worst);
    CAPTURE(res.numeric_at_worst);
    CHECK(res.max_rel_error < 1e-4);
  }

  TEST_CASE("loss parts wire to the standalone heads") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 3);
    std::vector<int> toks = {5, 4, 6};
    int label = 0;
    Eigen::VectorXd eps = fixed_eps();
    LossWeights w;  // defaults, free bits active

    LatentGaussian post = posterior(p, toks, label);
    Eigen::VectorXd z = posterior_z(p, toks, label, eps);
    std::vector<int> targets = toks;
    targets.push_back(Vocab::kEos);
    double lg = recon_nll(decoder_logits(p, z, toks), targets);
    double lc = cls_nll(classify(p, z), label);
    double lbow = bow_loss(bow_logits(p, z), toks);
    Eigen::VectorXd klg = gaussian_kl_per_dim(post, prior_gen(p, label));
    Eigen::VectorXd klc = gaussian_kl_per_dim(post, prior_cls(p, toks));

    TrainExample ex;
    ex.tokens = toks;
    ex.label = label;
    LossBreakdown out = forward_backward(p, ex, w, eps, nullptr);
    CHECK(out.parts.l_g == doctest::Approx(lg).epsilon(1e-12));
    CHECK(out.parts.l_c == doctest::Approx(lc).epsilon(1e-12));
    CHECK(out.parts.l_bow == doctest::Approx(lbow).epsilon(1e-12));
    CHECK((out.parts.kl_g_per_dim - klg).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((out.parts.kl_c_per_dim - klc).lpNorm<Eigen::Infinity>() < 1e-12);
    double expect = w.lambda_c * lc + w.lambda_g * lg + w.lambda_bow * lbow +
                    w.lambda_kl_c * free_bits(klc, w.kl_free_bits) +
                    w.lambda_kl_g * free_bits(klg, w.kl_free_bits);
    CHECK(out.total == doctest::Approx(expect).epsilon(1e-12));
  }

  TEST_CASE("soft reconstruction wires to the stored distributions") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 21);
    SoftSequence soft = make_soft(cfg.V);
    TrainExample ex;
    ex.tokens = soft.content_shadow();
    ex.label = soft.label;
    ex.soft = &soft;
    Eigen::VectorXd eps = fixed_eps();
    LossWeights w = fd_weights();

    Eigen::VectorXd z = posterior_z(p, ex.tokens, ex.label, eps);
    // Teacher inputs are the shadow tokens shifted by one step.
    std::vector<int> inputs(soft.hard_shadow.begin(),
                            soft.hard_shadow.end() - 1);
    double lg = soft_recon_kl(soft.steps, decoder_logits(p, z, inputs));
    LossBreakdown out = forward_backward(p, ex, w, eps, nullptr);
    CHECK(out.parts.l_g == doctest::Approx(lg).epsilon(1e-12));
  }

  TEST_CASE("decoder columns ignore future positions") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 5);
    Eigen::VectorXd z = fixed_eps();
    std::vector<int> a = {4, 5, 6, 7};
    std::vector<int> b = {4, 5, 6, 4};
    Eigen::MatrixXd la = decoder_logits(p, z, a);
    Eigen::MatrixXd lb = decoder_logits(p, z, b);
    REQUIRE(la.cols() == 5);
    for (int m = 0; m < 4; ++m)
      CHECK((la.col(m) - lb.col(m)).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((la.col(4) - lb.col(4)).lpNorm<Eigen::Infinity>() > 1e-8);

    std::vector<int> c = {4, 7, 6, 7};  // position 1 changed
    Eigen::MatrixXd lc = decoder_logits(p, z, c);
    for (int m = 0; m < 2; ++m)
      CHECK((la.col(m) - lc.col(m)).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((la.col(2) - lc.col(2)).lpNorm<Eigen::Infinity>() > 1e-8);
  }

  TEST_CASE("encoder attends in both directions") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 5);
    Eigen::VectorXd ha = encode(p, {4, 5, 6}).h_x;
    Eigen::VectorXd hb = encode(p, {4, 5, 7}).h_x;
    CHECK((ha - hb).lpNorm<Eigen::Infinity>() > 1e-8);
  }

  TEST_CASE("encoder and decoder share transformer parameters") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 17);
    ModelParams q = p;
    q.layers[0].w_qkv(0, 0) += 0.05;
    Eigen::VectorXd z = fixed_eps();
    std::vector<int> toks = {4, 5, 6};
    CHECK((encode(p, toks).h_x - encode(q, toks).h_x)
              .lpNorm<Eigen::Infinity>() > 1e-10);
    CHECK((decoder_logits(p, z, toks) - decoder_logits(q, z, toks))
              .lpNorm<Eigen::Infinity>() > 1e-10);
  }

  TEST_CASE("decode_step agrees with the teacher-forced column") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 29);
    Eigen::VectorXd z = fixed_eps();
    Eigen::MatrixXd full = decoder_logits(p, z, {4, 5});
    Eigen::VectorXd last = decode_step(p, z, {Vocab::kBos, 4, 5});
    CHECK((full.col(2) - last).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK_THROWS(decode_step(p, z, {4, 5}));  // missing BOS
  }

  TEST_CASE("reparameterize matches the Gaussian moments") {
    LatentGaussian g;
    g.mu = Eigen::VectorXd(4);
    g.mu << 0.5, -1.0, 2.0, 0.0;
    g.log_sigma = Eigen::VectorXd(4);
    g.log_sigma << 0.0, -0.5, 0.3, -1.0;
    Rng rng(123);
    const int n = 200000;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(4);
    Eigen::VectorXd sum2 = Eigen::VectorXd::Zero(4);
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd z = reparameterize(g, rng);
      sum += z;
      sum2 += z.cwiseProduct(z);
    }
    Eigen::VectorXd mean = sum / n;
    for (int i = 0; i < 4; ++i) {
      double sigma = std::exp(g.log_sigma[i]);
      double var = sum2[i] / n - mean[i] * mean[i];
      CHECK(std::abs(mean[i] - g.mu[i]) < 4.0 * sigma / std::sqrt(n));
      CHECK(std::abs(var - sigma * sigma) <
            5.0 * sigma * sigma * std::sqrt(2.0 / (n - 1)));
    }
  }

  TEST_CASE("mc classifier is unbiased and collapses without dropout") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.0;
    ModelParams p0 = ModelParams::init(cfg, 31);
    Eigen::VectorXd z = fixed_eps();
    Rng rng(7);
    CHECK((classify_mc(p0, z, rng) - classify(p0, z))
              .lpNorm<Eigen::Infinity>() < 1e-12);

    cfg.dropout = 0.5;
    ModelParams p1 = ModelParams::init(cfg, 31);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(cfg.K);
    const int n = 20000;
    for (int i = 0; i < n; ++i) acc += classify_mc(p1, z, rng);
    // Dropout is applied after the hidden tanh, so logits are unbiased.
    CHECK((acc / n - classify(p1, z)).lpNorm<Eigen::Infinity>() < 0.05);
  }

  TEST_CASE("clamped log-sigma outputs get zero gradient") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 37);
    p.b_post2.col(0).tail(cfg.d_z).setConstant(100.0);
    std::vector<int> toks = {4, 5};
    LatentGaussian post = posterior(p, toks, 0);
    for (int i = 0; i < cfg.d_z; ++i)
      CHECK(post.log_sigma[i] == kLogSigmaClamp);

    TrainExample ex;
    ex.tokens = toks;
    ex.label = 0;
    ModelParams grads = ModelParams::zeros_like(p);
    forward_backward(p, ex, fd_weights(), fixed_eps(), &grads);
    CHECK(grads.b_post2.col(0).tail(cfg.d_z).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(grads.w_post2.bottomRows(cfg.d_z).lpNorm<Eigen::Infinity>() == 0.0);
    // The mean rows still learn.
    CHECK(grads.w_post2.topRows(cfg.d_z).lpNorm<Eigen::Infinity>() > 0.0);
  }

  TEST_CASE("value-only pass agrees with the gradient pass") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 41);
    TrainExample ex;
    ex.tokens = {6, 7, 4};
    ex.label = 1;
    Eigen::VectorXd eps = fixed_eps();
    ModelParams grads = ModelParams::zeros_like(p);
    double with_grads = forward_backward(p, ex, fd_weights(), eps, &grads).total;
    double value_only = forward_backward(p, ex, fd_weights(), eps, nullptr).total;
    CHECK(with_grads == doctest::Approx(value_only).epsilon(1e-15));

    ModelParams again = ModelParams::zeros_like(p);
    forward_backward(p, ex, fd_weights(), eps, &again);
    CHECK((grads.flatten() - again.flatten()).lpNorm<Eigen::Infinity>() == 0.0);
  }

  TEST_CASE("flatten round trip and vector-space helpers") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 43);
    Eigen::VectorXd flat = p.flatten();
    CHECK(flat.size() == p.param_count());

    ModelParams q = ModelParams::zeros_like(p);
    CHECK(q.flatten().lpNorm<Eigen::Infinity>() == 0.0);
    q.unflatten(flat);
    CHECK((q.flatten() - flat).lpNorm<Eigen::Infinity>() == 0.0);

    ModelParams r = ModelParams::zeros_like(p);
    r.add_scaled(p, 2.0);
    CHECK((r.flatten() - 2.0 * flat).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(p.squared_norm() == doctest::Approx(flat.squaredNorm()));

    Eigen::VectorXd bad(flat.size() + 1);
    CHECK_THROWS(q.unflatten(bad));
  }

  TEST_CASE("init is seed-deterministic") {
    ModelConfig cfg = tiny_config();
    Eigen::VectorXd a = ModelParams::init(cfg, 5).flatten();
    Eigen::VectorXd b = ModelParams::init(cfg, 5).flatten();
    Eigen::VectorXd c = ModelParams::init(cfg, 6).flatten();
    CHECK((a - b).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK((a - c).lpNorm<Eigen::Infinity>() > 0.0);
  }

  TEST_CASE("checkpoint round trip is bit exact") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 9);
    const char* path = "model_roundtrip.ckpt";
    save_checkpoint(p, path);
    ModelParams q = load_checkpoint(path);
    CHECK(q.config.V == cfg.V);
    CHECK(q.config.d_h == cfg.d_h);
    CHECK(q.config.max_seq == cfg.max_seq);
    CHECK(q.config.dropout == cfg.dropout);
    CHECK((q.flatten() - p.flatten()).lpNorm<Eigen::Infinity>() == 0.0);
    std::remove(path);

    CHECK_THROWS(load_checkpoint("no_such_file.ckpt"));
    const char* junk = "model_junk.ckpt";
    {
      std::ofstream out(junk, std::ios::binary);
      out << "definitely not a checkpoint";
    }
    CHECK_THROWS(load_checkpoint(junk));
    std::remove(junk);
  }

  TEST_CASE("input validation") {
    ModelConfig cfg = tiny_config();
    ModelParams p = ModelParams::init(cfg, 2);
    Eigen::VectorXd eps = fixed_eps();
    TrainExample ex;
    ex.tokens = {4, 5};
    ex.label = 5;  // out of range
    CHECK_THROWS(forward_backward(p, ex, fd_weights(), eps, nullptr));
    ex.label = 0;
    Eigen::VectorXd short_eps(2);
    short_eps << 0.1, 0.2;
    CHECK_THROWS(forward_backward(p, ex, fd_weights(), short_eps, nullptr));
    ex.tokens = std::vector<int>(cfg.max_seq, 4);  // framed length overflows
    CHECK_THROWS(forward_backward(p, ex, fd_weights(), eps, nullptr));
    ex.tokens = {4, 99};
    CHECK_THROWS(encode(p, ex.tokens));

    ModelConfig bad = cfg;
    bad.d_h = 9;  // not divisible by heads
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.V = Vocab::kNumSpecial;
    CHECK_THROWS(bad.validate());
  }
}
