#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "dunst/corpus.hpp"
#include "dunst/train.hpp"

using namespace dunst;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.V = 12;
  cfg.K = 2;
  cfg.d_h = 8;
  cfg.d_z = 4;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.max_seq = 20;
  cfg.init_scale = 0.05;
  return cfg;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("adamw matches a scalar recomputation over two steps") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.warmup_steps = 1;
    AdamW opt(cfg, 2);

    Eigen::VectorXd w(2);
    w << 1.0, -2.0;
    Eigen::VectorXd g1(2), g2(2);
    g1 << 0.5, 0.1;
    g2 << -0.2, 0.3;

    // Independent scalar replica of the update rule.
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
    auto scalar_step = [&](const Eigen::VectorXd& g, long step) {
      double r = cfg.lr * std::min(1.0, static_cast<double>(step) /
                                            cfg.warmup_steps);
      for (int i = 0; i < 2; ++i) {
        m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
        double mhat = m[i] / (1 - std::pow(cfg.beta1, step + 1));
        double vhat = v[i] / (1 - std::pow(cfg.beta2, step + 1));
        ref[i] -= r * (mhat / (std::sqrt(vhat) + cfg.eps) +
                       cfg.weight_decay * ref[i]);
      }
    };

    CHECK(opt.rate() == 0.0);  // warmup starts the schedule at zero
    opt.update(w, g1);
    scalar_step(g1, 0);
    CHECK(w[0] == doctest::Approx(ref[0]).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(ref[1]).epsilon(1e-15));
    CHECK(w[0] == 1.0);  // rate 0: parameters untouched, moments charged
    CHECK(opt.rate() == doctest::Approx(0.1));

    opt.update(w, g2);
    scalar_step(g2, 1);
    CHECK(w[0] == doctest::Approx(ref[0]).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(ref[1]).epsilon(1e-12));
    CHECK(w[0] != 1.0);
  }

  TEST_CASE("adamw applies decoupled decay with zero gradients") {
    AdamWConfig cfg;
    cfg.lr = 0.5;
    cfg.weight_decay = 0.1;
    cfg.warmup_steps = 1;
    AdamW opt(cfg, 3);
    Eigen::VectorXd w(3);
    w << 4.0, -2.0, 0.5;
    Eigen::VectorXd zero = Eigen::VectorXd::Zero(3);
    opt.update(w, zero);  // rate 0
    CHECK(w[0] == 4.0);
    opt.update(w, zero);  // rate lr: w *= (1 - lr wd)
    CHECK(w[0] == doctest::Approx(4.0 * 0.95).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(-2.0 * 0.95).epsilon(1e-15));
    CHECK(w[2] == doctest::Approx(0.5 * 0.95).epsilon(1e-15));
  }

  TEST_CASE("adamw warmup ramps linearly") {
    AdamWConfig cfg;
    cfg.lr = 1.0;
    cfg.warmup_steps = 4;
    AdamW opt(cfg, 1);
    Eigen::VectorXd w(1);
    w << 0.0;
    Eigen::VectorXd g(1);
    g << 1.0;
    std::vector<double> expected = {0.0, 0.25, 0.5, 0.75, 1.0, 1.0};
    for (double e : expected) {
      CHECK(opt.rate() == doctest::Approx(e));
      opt.update(w, g);
    }
  }

  TEST_CASE("adamw validates configuration") {
    AdamWConfig cfg;
    cfg.lr = 0.0;
    CHECK_THROWS(AdamW(cfg, 2));
    cfg = AdamWConfig{};
    cfg.warmup_steps = 0;
    CHECK_THROWS(AdamW(cfg, 2));
    cfg = AdamWConfig{};
    cfg.beta1 = 1.0;
    CHECK_THROWS(AdamW(cfg, 2));
    AdamW ok(AdamWConfig{}, 2);
    Eigen::VectorXd w(3), g(2);
    CHECK_THROWS(ok.update(w, g));
  }

  TEST_CASE("to_train_examples copies labels and rejects unlabeled rows") {
    std::vector<LabeledExample> data = {{{4, 5}, 1}, {{6}, 0}};
    auto t = to_train_examples(data);
    REQUIRE(t.size() == 2);
    CHECK(t[0].tokens == std::vector<int>({4, 5}));
    CHECK(t[0].label == 1);
    CHECK(t[1].soft == nullptr);
    data.push_back({{7}, kNoLabel});
    CHECK_THROWS(to_train_examples(data));
  }

  TEST_CASE("training reduces dev loss on a synthetic corpus") {
    ModelConfig mcfg = tiny_config();
    SyntheticSource src = build_synthetic_source(3, mcfg.V, mcfg.K, 0.9, 2, 6, 0.4);
    Rng rng(5);
    std::vector<TrainExample> train, dev;
    for (int i = 0; i < 48; ++i) {
      LabeledExample ex = sample_example(src, i % 2, rng);
      (i < 40 ? train : dev).push_back({ex.tokens, ex.label, nullptr});
    }

    ModelParams init = ModelParams::init(mcfg, 1);
    TrainConfig tcfg;
    tcfg.epochs = 4;
    tcfg.batch_size = 8;
    tcfg.opt.lr = 3e-3;
    tcfg.opt.warmup_steps = 5;
    tcfg.seed = 9;

    double before = eval_mean_loss(init, dev, tcfg.weights);
    TrainResult res = train_model(init, train, dev, tcfg);
    REQUIRE(res.epochs.size() == 4);
    CHECK(res.best_dev < before);
    CHECK(res.best_epoch >= 0);
    for (const EpochStats& s : res.epochs)
      CHECK(res.best_dev <= s.dev_loss);
    CHECK(res.best_dev ==
          doctest::Approx(eval_mean_loss(res.best, dev, tcfg.weights)));
  }

  TEST_CASE("training is seed-deterministic") {
    ModelConfig mcfg = tiny_config();
    SyntheticSource src = build_synthetic_source(4, mcfg.V, mcfg.K, 0.8, 2, 5, 0.5);
    Rng rng(11);
    std::vector<TrainExample> train, dev;
    for (int i = 0; i < 20; ++i) {
      LabeledExample ex = sample_example(src, i % 2, rng);
      (i < 16 ? train : dev).push_back({ex.tokens, ex.label, nullptr});
    }
    ModelParams init = ModelParams::init(mcfg, 2);
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.seed = 77;
    TrainResult a = train_model(init, train, dev, tcfg);
    TrainResult b = train_model(init, train, dev, tcfg);
    CHECK((a.best.flatten() - b.best.flatten()).lpNorm<Eigen::Infinity>() ==
          0.0);
    CHECK(a.best_dev == b.best_dev);

    tcfg.seed = 78;
    TrainResult c = train_model(init, train, dev, tcfg);
    CHECK((a.best.flatten() - c.best.flatten()).lpNorm<Eigen::Infinity>() >
          0.0);
  }

  TEST_CASE("train rejects empty splits") {
    ModelConfig mcfg = tiny_config();
    ModelParams init = ModelParams::init(mcfg, 1);
    TrainConfig tcfg;
    std::vector<TrainExample> some = {{{4, 5}, 0, nullptr}};
    CHECK_THROWS(train_model(init, {}, some, tcfg));
    CHECK_THROWS(train_model(init, some, {}, tcfg));
    CHECK_THROWS(eval_mean_loss(init, {}, tcfg.weights));
  }
}
