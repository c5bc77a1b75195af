#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "demkit/model.hpp"

using namespace demkit;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double spread) {
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.uniform(-spread, spread);
  return m;
}

template <std::size_t Depth>
void randomize(FeedForward<Depth>& m, Rng& rng) {
  m.for_each_param([&](double& v, std::size_t, std::size_t) { v = rng.uniform(-1.0, 1.0); });
}

template <std::size_t Depth>
std::vector<double> params(FeedForward<Depth> m) {
  std::vector<double> out;
  m.for_each_param([&](double& v, std::size_t, std::size_t) { out.push_back(v); });
  return out;
}

// Naive matrix arithmetic, independent of the library's affine kernel.
Matrix naive_linear(const Matrix& w, const Vector& b, const Matrix& x, bool relu) {
  Matrix out(x.rows(), w.rows());
  for (std::size_t s = 0; s < x.rows(); ++s) {
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < w.cols(); ++i) acc += w(o, i) * x(s, i);
      out(s, o) = relu ? std::max(acc, 0.0) : acc;
    }
  }
  return out;
}

// Mean loss as a function of the flattened parameters, with per-sample losses
// supplied by `value(z, s)`.
template <std::size_t Depth, class V>
double mean_loss(FeedForward<Depth> m, const std::vector<double>& theta, const Matrix& x, V&& value) {
  m.for_each_param([&](double& v, std::size_t idx, std::size_t) { v = theta[idx]; });
  const Matrix z = forward(m, x);
  double total = 0;
  for (std::size_t s = 0; s < z.rows(); ++s) total += value(Logits(z.row(s)), s);
  return total / static_cast<double>(z.rows());
}

} // namespace

TEST(Forward, Examples) {
  const LinearSoftmax zero = make_linear(4, 3);
  const Matrix x(2, 3, std::vector<double>{1, 2, 3, -1, 0.5, 2});
  const Matrix z = forward(zero, x);
  for (double v : z.flat()) EXPECT_EQ(v, 0.0);
  for (double p : softmax(z.row(0))) EXPECT_DOUBLE_EQ(p, 0.25);

  LinearSoftmax id = make_linear(3, 3);
  for (std::size_t i = 0; i < 3; ++i) id.layers[0].w(i, i) = 1.0;
  const Matrix xi(1, 3, std::vector<double>{0.3, -2.0, 7.0});
  const Matrix zi = forward(id, xi);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(zi(0, i), xi(0, i));

  Rng rng(1);
  Mlp mlp = make_mlp(4, 3, 5, rng);
  randomize(mlp, rng);
  const Matrix xr = random_matrix(rng, 6, 3, 2.0);
  const Matrix ref = naive_linear(mlp.layers[1].w, mlp.layers[1].b,
                                  naive_linear(mlp.layers[0].w, mlp.layers[0].b, xr, true), false);
  const Matrix got = forward(mlp, xr);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got.flat()[i], ref.flat()[i], 1e-14);

  EXPECT_THROW(forward(zero, Matrix(1, 2)), std::invalid_argument);
}

TEST(Backward, Examples) {
  Rng rng(2);
  LinearSoftmax m = make_linear(3, 4);
  randomize(m, rng);
  const Matrix x = random_matrix(rng, 1, 4, 1.0);
  const LinearSoftmax zero = backward(m, x, Matrix(1, 3));
  for (double v : params(zero)) EXPECT_EQ(v, 0.0);

  const Matrix d(1, 3, std::vector<double>{0.5, -1.0, 2.0});
  const LinearSoftmax g = backward(m, x, d);
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.layers[0].w(o, i), d(0, o) * x(0, i));
    EXPECT_DOUBLE_EQ(g.layers[0].b[o], d(0, o));
  }
  EXPECT_THROW(backward(m, x, Matrix(2, 3)), std::invalid_argument);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy_eval(Logits(Vector(10, 0.0)), 3).value, std::log(10.0), 1e-14);
  EXPECT_NEAR(cross_entropy_eval(Logits{0.0, 50.0, 0.0}, 1).value, 0.0, 1e-12);
  const Logits z{0.3, -1.0, 2.0, 0.1};
  const Vector fd =
      finite_diff_grad([](const Vector& v) { return cross_entropy_eval(Logits(v), 2).value; }, z.vec());
  EXPECT_LT(max_rel_error(cross_entropy_eval(z, 2).grad, fd), 1e-6);
  EXPECT_THROW(cross_entropy_eval(z, 4), std::domain_error);
}

TEST(Sgd, Examples) {
  LinearSoftmax m = make_linear(2, 2);
  LinearSoftmax g = m.zeros_like();
  g.for_each_param([](double& v, std::size_t idx, std::size_t) { v = 0.5 + static_cast<double>(idx); });

  const LinearSoftmax plain = sgd_step(m, g, SgdConfig{0.1, 0.0, UpdateScope::all});
  const auto pv = params(plain);
  const auto gv = params(g);
  for (std::size_t i = 0; i < pv.size(); ++i) EXPECT_DOUBLE_EQ(pv[i], -0.1 * gv[i]);

  LinearSoftmax still = m;
  Sgd<1> opt(still, SgdConfig{0.1, 0.9, UpdateScope::all});
  LinearSoftmax zero = m.zeros_like();
  opt.step(still, zero);
  for (double v : params(still)) EXPECT_EQ(v, 0.0);

  LinearSoftmax two = m;
  Sgd<1> mom(two, SgdConfig{0.1, 0.9, UpdateScope::all});
  mom.step(two, g);
  mom.step(two, g);
  const auto tv = params(two);
  for (std::size_t i = 0; i < tv.size(); ++i) EXPECT_NEAR(tv[i], -0.1 * gv[i] * 2.9, 1e-14);
}

TEST(Sgd, HeadScopeFreezesEarlierLayers) {
  Rng rng(3);
  Mlp m = make_mlp(3, 2, 4, rng);
  Mlp g = m.zeros_like();
  g.for_each_param([](double& v, std::size_t, std::size_t) { v = 1.0; });
  const Mlp after = sgd_step(m, g, SgdConfig{0.1, 0.0, UpdateScope::head});
  for (std::size_t i = 0; i < m.layers[0].w.size(); ++i) {
    EXPECT_EQ(after.layers[0].w.flat()[i], m.layers[0].w.flat()[i]);
  }
  EXPECT_EQ(after.layers[1].b[0], m.layers[1].b[0] - 0.1);
}

TEST(TrainSource, SeparableGaussians) {
  Rng rng(4);
  Matrix x(400, 2);
  std::vector<std::size_t> y(400);
  for (std::size_t s = 0; s < 400; ++s) {
    y[s] = s % 2;
    x(s, 0) = (y[s] ? 3.0 : -3.0) + 0.5 * rng.normal();
    x(s, 1) = 0.5 * rng.normal();
  }
  Rng shuffle(5);
  TrainConfig cfg;
  cfg.epochs = 50;
  const LinearSoftmax m = train_source(make_linear(2, 2), x, y, cfg, shuffle);
  const Matrix z = forward(m, x);
  std::size_t hit = 0;
  for (std::size_t s = 0; s < 400; ++s) hit += argmax(z.row(s)) == y[s];
  EXPECT_GE(hit / 400.0, 0.99);

  cfg.epochs = 0;
  Rng r0(5);
  EXPECT_TRUE(train_source(make_linear(2, 2), x, y, cfg, r0) == make_linear(2, 2));

  cfg.epochs = 5;
  Rng a(9);
  Rng b(9);
  Rng init_a(1);
  Rng init_b(1);
  EXPECT_TRUE(train_source(make_mlp(2, 2, 8, init_a), x, y, cfg, a) ==
              train_source(make_mlp(2, 2, 8, init_b), x, y, cfg, b));
}

TEST(EndToEnd, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const std::size_t c = 2 + rng.index(4);
    const std::size_t d = 1 + rng.index(6);
    const std::size_t n = 1 + rng.index(8);
    const Matrix x = random_matrix(rng, n, d, 2.0);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng.index(c);
    const double alpha = rng.uniform(0.0, 2.0);
    const DemConfig dem{rng.uniform(0.1, alpha > 0 ? 2.0 / alpha : 3.0), alpha, Direction::minimize};

    auto check = [&](auto model) {
      const Matrix z = forward(model, x);
      // Frozen AdaDEM constants from a probe state that absorbed this batch.
      MecState probe = mec_init(c);
      std::vector<Vector> probs;
      std::vector<std::size_t> labels;
      for (std::size_t s = 0; s < n; ++s) {
        probs.push_back(softmax(z.row(s)));
        labels.push_back(pseudo_label(probs.back()));
      }
      probe.update(probs, labels);

      std::vector<LossPlugin> plugins{CrossEntropyLoss{}, EmLoss{}, DemLoss{dem},
                                      AdaDemLoss{AdaDemVariant{}, Direction::minimize, mec_init(c)}};
      for (auto& plugin : plugins) {
        const auto evals = evaluate_batch(plugin, z, y);
        const auto grads = params(backward(model, x, stack_grads(evals, c)));
        auto value = [&](const Logits& zz, std::size_t s) -> double {
          switch (plugin.index()) {
          case 0: return cross_entropy_eval(zz, y[s]).value;
          case 1: return conditional_entropy(zz);
          case 2: return dem_eval(zz, dem).value;
          default: {
            const Vector row(probe.row(labels[s]));
            const Vector q = softmax(zz.vec());
            const double dl = std::max(delta(Logits(z.row(s))), kDeltaFloor);
            double v = 0;
            for (std::size_t i = 0; i < c; ++i) v -= (q[i] - row[i]) * zz[i] / dl;
            return v;
          }
          }
        };
        const auto theta = params(model);
        const Vector fd = finite_diff_grad(
            [&](const Vector& th) { return mean_loss(model, th.values(), x, value); }, Vector(theta));
        ASSERT_LT(max_rel_error(Vector(grads), fd), 1e-5) << "plugin " << plugin_name(plugin);
      }
    };
    LinearSoftmax lin = make_linear(c, d);
    randomize(lin, rng);
    check(lin);
    Mlp mlp = make_mlp(c, d, 1 + rng.index(6), rng);
    // Redraw until no hidden pre-activation sits near the rectifier kink.
    bool kink = true;
    while (kink) {
      randomize(mlp, rng);
      const Matrix pre = naive_linear(mlp.layers[0].w, mlp.layers[0].b, x, false);
      kink = false;
      for (double v : pre.flat()) kink = kink || std::abs(v) < 1e-4;
    }
    check(mlp);
  }
}

TEST(AdaptStream, ZeroLearningRateLeavesModelUnchanged) {
  Rng rng(7);
  LinearSoftmax m = make_linear(3, 2);
  randomize(m, rng);
  std::vector<StreamBatch> stream;
  for (int b = 0; b < 5; ++b) {
    StreamBatch sb;
    sb.x = random_matrix(rng, 8, 2, 2.0);
    for (int s = 0; s < 8; ++s) sb.labels.push_back(rng.index(3));
    stream.push_back(sb);
  }
  LossPlugin plugin = EmLoss{};
  AdaptConfig cfg;
  cfg.sgd.lr = 0.0;
  const auto res = adapt_stream(m, std::span<const StreamBatch>(stream), plugin, cfg);
  EXPECT_TRUE(res.model == m);
  for (std::size_t b = 0; b < stream.size(); ++b) {
    const Matrix z = forward(m, stream[b].x);
    std::size_t hit = 0;
    for (std::size_t s = 0; s < 8; ++s) hit += argmax(z.row(s)) == stream[b].labels[s];
    EXPECT_DOUBLE_EQ(res.trace[b].accuracy, hit / 8.0);
  }
}

TEST(AdaptStream, RewardCollapseVersusAdaDem) {
  // A three-class model that is already confident on every sample.
  LinearSoftmax m = make_linear(3, 3);
  for (std::size_t i = 0; i < 3; ++i) m.layers[0].w(i, i) = 12.0;
  Rng rng(8);
  std::vector<StreamBatch> stream;
  for (int b = 0; b < 10; ++b) {
    StreamBatch sb;
    sb.x = Matrix(16, 3);
    for (std::size_t s = 0; s < 16; ++s) {
      const std::size_t k = rng.index(3);
      for (std::size_t i = 0; i < 3; ++i) sb.x(s, i) = (i == k ? 1.0 : 0.0) + 0.02 * rng.normal();
      sb.labels.push_back(k);
    }
    stream.push_back(sb);
  }
  for (const auto& sb : stream) {
    const Matrix z = forward(m, sb.x);
    for (std::size_t s = 0; s < z.rows(); ++s) {
      const Vector p = softmax(z.row(s));
      ASSERT_GT(p[argmax(p.span())], 0.999);
    }
  }
  AdaptConfig cfg;
  cfg.sgd = SgdConfig{1e-3, 0.0, UpdateScope::all};
  LossPlugin em = EmLoss{};
  LossPlugin ada = AdaDemLoss{AdaDemVariant{}, Direction::minimize, mec_init(3)};
  const auto r_em = adapt_stream(m, std::span<const StreamBatch>(stream), em, cfg);
  const auto r_ada = adapt_stream(m, std::span<const StreamBatch>(stream), ada, cfg);
  for (std::size_t b = 0; b < stream.size(); ++b) {
    EXPECT_LT(r_em.trace[b].param_step, 1e-4);
    EXPECT_GE(r_ada.trace[b].param_step, 10.0 * r_em.trace[b].param_step);
  }
}

TEST(AdaptStream, PredictionPrecedesUpdate) {
  Rng rng(9);
  LinearSoftmax m = make_linear(3, 2);
  randomize(m, rng);
  std::vector<StreamBatch> stream;
  for (int b = 0; b < 6; ++b) {
    StreamBatch sb;
    sb.x = random_matrix(rng, 8, 2, 2.0);
    for (int s = 0; s < 8; ++s) sb.labels.push_back(rng.index(3));
    stream.push_back(sb);
  }
  AdaptConfig cfg;
  cfg.sgd.lr = 0.05;
  LossPlugin a = EmLoss{};
  LossPlugin b = EmLoss{};
  const auto clean = adapt_stream(m, std::span<const StreamBatch>(stream), a, cfg);
  // Corrupt the parameters after the update of batch 2: batches 0..2 must
  // keep their trace entries, later ones see the damage.
  const auto probed = adapt_stream(m, std::span<const StreamBatch>(stream), b, cfg,
                                   std::function<void(std::size_t, LinearSoftmax&)>(
                                       [](std::size_t t, LinearSoftmax& model) {
                                         if (t == 2) {
                                           model.for_each_param(
                                               [](double& v, std::size_t, std::size_t) { v = -1e3 * v; });
                                         }
                                       }));
  for (std::size_t t = 0; t <= 2; ++t) {
    EXPECT_EQ(clean.trace[t].accuracy, probed.trace[t].accuracy);
    EXPECT_EQ(clean.trace[t].mean_loss, probed.trace[t].mean_loss);
    for (std::size_t s = 0; s < 8; ++s) {
      EXPECT_TRUE(clean.predictions[t * 8 + s] == probed.predictions[t * 8 + s]);
    }
  }
  bool differs = false;
  for (std::size_t s = 24; s < clean.predictions.size(); ++s) {
    differs = differs || !(clean.predictions[s] == probed.predictions[s]);
  }
  EXPECT_TRUE(differs);
}

TEST(AdaptStream, SupervisedMixing) {
  Rng rng(10);
  LinearSoftmax m = make_linear(3, 2);
  randomize(m, rng);
  StreamBatch sb;
  sb.x = random_matrix(rng, 4, 2, 1.0);
  sb.labels = {0, 1, 2, 0};
  LabeledBatch sup{random_matrix(rng, 4, 2, 1.0), {1, 1, 0, 2}};
  sb.supervised = sup;
  const std::vector<StreamBatch> stream{sb};
  AdaptConfig cfg;
  cfg.sgd.lr = 0.1;
  LossPlugin em = EmLoss{};
  const auto res = adapt_stream(m, std::span<const StreamBatch>(stream), em, cfg);

  // Expected step: 0.3 * EM gradient on the stream batch + CE on the labeled one.
  LossPlugin em2 = EmLoss{};
  LossPlugin ce = CrossEntropyLoss{};
  const auto ge = params(backward(m, sb.x, stack_grads(evaluate_batch(em2, forward(m, sb.x)), 3)));
  const auto gc =
      params(backward(m, sup.x, stack_grads(evaluate_batch(ce, forward(m, sup.x), sup.y), 3)));
  const auto before = params(m);
  const auto after = params(res.model);
  for (std::size_t i = 0; i < before.size(); ++i) {
    EXPECT_NEAR(after[i], before[i] - 0.1 * (0.3 * ge[i] + gc[i]), 1e-14);
  }
}

TEST(AdaptStream, Deterministic) {
  auto run = [] {
    Rng rng(11);
    Mlp m = make_mlp(4, 2, 6, rng);
    std::vector<StreamBatch> stream;
    for (int b = 0; b < 10; ++b) {
      StreamBatch sb;
      sb.x = random_matrix(rng, 16, 2, 3.0);
      for (int s = 0; s < 16; ++s) sb.labels.push_back(rng.index(4));
      stream.push_back(sb);
    }
    LossPlugin plugin = AdaDemLoss{AdaDemVariant{}, Direction::minimize, mec_init(4)};
    AdaptConfig cfg;
    cfg.sgd = SgdConfig{0.05, 0.9, UpdateScope::all};
    const auto res = adapt_stream(m, std::span<const StreamBatch>(stream), plugin, cfg);
    std::vector<double> out;
    for (const auto& t : res.trace) out.insert(out.end(), {t.accuracy, t.mean_loss, t.param_step});
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(AdaptStream, NonFiniteLossIsReported) {
  LinearSoftmax m = make_linear(2, 1);
  m.layers[0].w(0, 0) = 1e308;
  m.layers[0].w(1, 0) = -1e308;
  StreamBatch sb;
  sb.x = Matrix(1, 1, std::vector<double>{10.0});
  sb.labels = {0};
  const std::vector<StreamBatch> stream{sb};
  LossPlugin em = EmLoss{};
  EXPECT_THROW(adapt_stream(m, std::span<const StreamBatch>(stream), em, AdaptConfig{}), std::exception);
}
