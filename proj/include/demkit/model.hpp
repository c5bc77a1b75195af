#pragma once

// Small feed-forward classifiers with hand-written backpropagation, SGD, and
// the online adaptation loop that plugs any entropy-family loss into them.

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "demkit/adadem.hpp"
#include "demkit/em_losses.hpp"
#include "demkit/numkit.hpp"

namespace demkit {

/// Affine map; w is out x in.
struct DenseLayer {
  Matrix w;
  Vector b;

  DenseLayer() = default;
  DenseLayer(std::size_t out, std::size_t in) : w(out, in, 0.0), b(out, 0.0) {}

  std::size_t in() const noexcept { return w.cols(); }
  std::size_t out() const noexcept { return w.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Depth affine layers with a rectifier between consecutive layers.
/// Depth 1 is a linear softmax head, depth 2 a one-hidden-layer MLP.
/// Gradients and SGD velocities reuse this type as parameter-shaped storage.
template <std::size_t Depth>
struct FeedForward {
  static_assert(Depth >= 1);
  static constexpr std::size_t depth = Depth;

  std::array<DenseLayer, Depth> layers;

  FeedForward() = default;
  /// widths = {input dim, hidden..., classes}; all parameters zero.
  explicit FeedForward(const std::array<std::size_t, Depth + 1>& widths) {
    for (std::size_t l = 0; l < Depth; ++l) {
      if (widths[l] == 0 || widths[l + 1] == 0) {
        throw std::invalid_argument("layer widths must be positive");
      }
      layers[l] = DenseLayer(widths[l + 1], widths[l]);
    }
  }

  std::size_t input_dim() const noexcept { return layers.front().in(); }
  std::size_t classes() const noexcept { return layers.back().out(); }

  FeedForward zeros_like() const {
    FeedForward g = *this;
    for (auto& layer : g.layers) {
      for (double& v : layer.w.flat()) {
        v = 0.0;
      }
      for (double& v : layer.b) {
        v = 0.0;
      }
    }
    return g;
  }

  bool all_finite() const {
    for (const auto& layer : layers) {
      for (double v : layer.w.flat()) {
        if (!std::isfinite(v)) {
          return false;
        }
      }
      if (!layer.b.all_finite()) {
        return false;
      }
    }
    return true;
  }

  /// Calls f(param, index, layer) for every scalar parameter in a fixed order.
  template <class F>
  void for_each_param(F&& f) {
    std::size_t idx = 0;
    for (std::size_t l = 0; l < Depth; ++l) {
      for (double& v : layers[l].w.flat()) {
        f(v, idx++, l);
      }
      for (double& v : layers[l].b) {
        f(v, idx++, l);
      }
    }
  }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& layer : layers) {
      n += layer.w.size() + layer.b.size();
    }
    return n;
  }

  friend bool operator==(const FeedForward&, const FeedForward&) = default;
};

using LinearSoftmax = FeedForward<1>;
using Mlp = FeedForward<2>;

inline LinearSoftmax make_linear(std::size_t classes, std::size_t dim) {
  return LinearSoftmax({dim, classes});
}

/// He-style initialization for the hidden layer, small output layer.
inline Mlp make_mlp(std::size_t classes, std::size_t dim, std::size_t hidden, Rng& rng) {
  if (hidden == 0) {
    throw std::invalid_argument("MLP hidden width must be >= 1");
  }
  Mlp m({dim, hidden, classes});
  const double s1 = std::sqrt(2.0 / static_cast<double>(dim));
  for (double& v : m.layers[0].w.flat()) {
    v = s1 * rng.normal();
  }
  const double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
  for (double& v : m.layers[1].w.flat()) {
    v = s2 * rng.normal();
  }
  return m;
}

namespace detail {

inline void affine(const DenseLayer& layer, const Matrix& in, Matrix& out) {
  const std::size_t n = in.rows();
  out = Matrix(n, layer.out());
  for (std::size_t s = 0; s < n; ++s) {
    const auto x = in.row(s);
    auto y = out.row(s);
    for (std::size_t o = 0; o < layer.out(); ++o) {
      double acc = layer.b[o];
      const auto wrow = layer.w.row(o);
      for (std::size_t i = 0; i < x.size(); ++i) {
        acc += wrow[i] * x[i];
      }
      y[o] = acc;
    }
  }
}

/// acts[0] = input, acts[l] = output of layer l (post-rectifier for hidden
/// layers, raw logits for the last one).
template <std::size_t Depth>
std::array<Matrix, Depth + 1> forward_trace(const FeedForward<Depth>& model, const Matrix& x) {
  if (x.cols() != model.input_dim()) {
    throw std::invalid_argument("forward: input has " + std::to_string(x.cols()) +
                                " features, model expects " + std::to_string(model.input_dim()));
  }
  std::array<Matrix, Depth + 1> acts;
  acts[0] = x;
  for (std::size_t l = 0; l < Depth; ++l) {
    affine(model.layers[l], acts[l], acts[l + 1]);
    if (l + 1 < Depth) {
      for (double& v : acts[l + 1].flat()) {
        v = v > 0.0 ? v : 0.0;
      }
    }
  }
  return acts;
}

} // namespace detail

/// Logits for a batch (n x d) -> n x C.
template <std::size_t Depth>
Matrix forward(const FeedForward<Depth>& model, const Matrix& x) {
  return std::move(detail::forward_trace(model, x)[Depth]);
}

/// Gradient of (1/n) sum_s loss_s with respect to every parameter, given
/// d loss_s / d logits_s as row s of dlogits.
template <std::size_t Depth>
FeedForward<Depth> backward(const FeedForward<Depth>& model, const Matrix& x,
                            const Matrix& dlogits) {
  if (dlogits.rows() != x.rows() || dlogits.cols() != model.classes()) {
    throw std::invalid_argument("backward: dlogits shape does not match batch/classes");
  }
  const auto acts = detail::forward_trace(model, x);
  FeedForward<Depth> grads = model.zeros_like();
  const std::size_t n = x.rows();
  if (n == 0) {
    return grads;
  }
  const double inv_n = 1.0 / static_cast<double>(n);

  Matrix delta = dlogits;
  for (std::size_t l = Depth; l-- > 0;) {
    const DenseLayer& layer = model.layers[l];
    DenseLayer& g = grads.layers[l];
    const Matrix& in = acts[l];
    for (std::size_t s = 0; s < n; ++s) {
      const auto d = delta.row(s);
      const auto a = in.row(s);
      for (std::size_t o = 0; o < layer.out(); ++o) {
        const double dv = d[o] * inv_n;
        if (dv == 0.0) {
          continue;
        }
        g.b[o] += dv;
        auto grow = g.w.row(o);
        for (std::size_t i = 0; i < a.size(); ++i) {
          grow[i] += dv * a[i];
        }
      }
    }
    if (l == 0) {
      break;
    }
    Matrix prev(n, layer.in(), 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      const auto d = delta.row(s);
      auto p = prev.row(s);
      const auto a = in.row(s);
      for (std::size_t o = 0; o < layer.out(); ++o) {
        const auto wrow = layer.w.row(o);
        for (std::size_t i = 0; i < p.size(); ++i) {
          p[i] += d[o] * wrow[i];
        }
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(a[i] > 0.0)) {
          p[i] = 0.0;
        }
      }
    }
    delta = std::move(prev);
  }
  return grads;
}

/// value = logsumexp(z) - z_target, grad = softmax(z) - onehot(target).
inline LossEval cross_entropy_eval(const Logits& z, std::size_t target) {
  if (target >= z.classes()) {
    throw std::domain_error("cross entropy: target " + std::to_string(target) +
                            " out of range for " + std::to_string(z.classes()) + " classes");
  }
  LossEval out{logsumexp(z.span()) - z[target], softmax(z.span())};
  out.grad[target] -= 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

enum class UpdateScope { all, head };

struct SgdConfig {
  double lr = 1e-3;
  double momentum = 0.0;
  UpdateScope scope = UpdateScope::all;
};

/// SGD with heavy-ball momentum: v <- mu v + g; theta <- theta - lr v.
/// Velocity starts at zero and belongs to one optimizer instance.
template <std::size_t Depth>
class Sgd {
public:
  Sgd(const FeedForward<Depth>& model, SgdConfig cfg)
      : cfg_(cfg), velocity_(model.zeros_like()) {
    if (!(cfg.lr >= 0.0)) {
      throw std::invalid_argument("learning rate must be >= 0");
    }
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
      throw std::invalid_argument("momentum must lie in [0, 1)");
    }
  }

  const SgdConfig& config() const noexcept { return cfg_; }
  const FeedForward<Depth>& velocity() const noexcept { return velocity_; }

  void step(FeedForward<Depth>& model, FeedForward<Depth>& grads) {
    std::vector<double*> g;
    g.reserve(grads.parameter_count());
    grads.for_each_param([&](double& v, std::size_t, std::size_t) { g.push_back(&v); });
    std::vector<double*> vel;
    vel.reserve(g.size());
    velocity_.for_each_param([&](double& v, std::size_t, std::size_t) { vel.push_back(&v); });

    model.for_each_param([&](double& theta, std::size_t idx, std::size_t layer) {
      if (cfg_.scope == UpdateScope::head && layer + 1 != Depth) {
        return;
      }
      double& v = *vel[idx];
      v = cfg_.momentum * v + *g[idx];
      theta -= cfg_.lr * v;
    });
  }

private:
  SgdConfig cfg_;
  FeedForward<Depth> velocity_;
};

/// Single stateless step (zero velocity): theta <- theta - lr g.
template <std::size_t Depth>
FeedForward<Depth> sgd_step(FeedForward<Depth> model, FeedForward<Depth> grads,
                            const SgdConfig& cfg) {
  Sgd<Depth> opt(model, cfg);
  opt.step(model, grads);
  return model;
}

/// Euclidean distance between two parameter sets of the same shape.
template <std::size_t Depth>
double parameter_distance(FeedForward<Depth> a, FeedForward<Depth> b) {
  std::vector<double> flat;
  flat.reserve(a.parameter_count());
  b.for_each_param([&](double& v, std::size_t, std::size_t) { flat.push_back(v); });
  double acc = 0.0;
  a.for_each_param([&](double& v, std::size_t idx, std::size_t) {
    const double d = v - flat[idx];
    acc += d * d;
  });
  return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Loss plugins
// ---------------------------------------------------------------------------

struct CrossEntropyLoss {};

struct EmLoss {
  Direction direction = Direction::minimize;
};

struct DemLoss {
  DemConfig cfg;
};

struct AdaDemLoss {
  AdaDemVariant variant;
  Direction direction = Direction::minimize;
  MecState state;
};

using LossPlugin = std::variant<CrossEntropyLoss, EmLoss, DemLoss, AdaDemLoss>;

inline std::string plugin_name(const LossPlugin& plugin) {
  struct {
    std::string operator()(const CrossEntropyLoss&) const { return "cross_entropy"; }
    std::string operator()(const EmLoss&) const { return "em"; }
    std::string operator()(const DemLoss&) const { return "dem"; }
    std::string operator()(const AdaDemLoss&) const { return "adadem"; }
  } visitor;
  return std::visit(visitor, plugin);
}

/// Per-sample loss evaluations for an n x C logit batch. Targets are read only
/// by the cross-entropy plugin. The AdaDEM plugin updates its MEC state.
inline std::vector<LossEval> evaluate_batch(LossPlugin& plugin, const Matrix& logits,
                                            std::span<const std::size_t> targets = {}) {
  std::vector<Logits> zs;
  zs.reserve(logits.rows());
  for (std::size_t s = 0; s < logits.rows(); ++s) {
    zs.emplace_back(logits.row(s));
  }
  std::vector<LossEval> out;
  out.reserve(zs.size());
  if (std::holds_alternative<CrossEntropyLoss>(plugin)) {
    if (targets.size() != zs.size()) {
      throw std::invalid_argument("cross entropy plugin needs one target per sample");
    }
    for (std::size_t s = 0; s < zs.size(); ++s) {
      out.push_back(cross_entropy_eval(zs[s], targets[s]));
    }
  } else if (auto* em = std::get_if<EmLoss>(&plugin)) {
    for (const auto& z : zs) {
      out.push_back(em_eval(z, em->direction));
    }
  } else if (auto* dem = std::get_if<DemLoss>(&plugin)) {
    for (const auto& z : zs) {
      out.push_back(dem_eval(z, dem->cfg));
    }
  } else {
    auto& ada = std::get<AdaDemLoss>(plugin);
    out = adadem_eval(zs, ada.state, ada.variant, ada.direction);
  }
  return out;
}

inline Matrix stack_grads(const std::vector<LossEval>& evals, std::size_t classes) {
  Matrix d(evals.size(), classes);
  for (std::size_t s = 0; s < evals.size(); ++s) {
    for (std::size_t i = 0; i < classes; ++i) {
      d(s, i) = evals[s].grad[i];
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  SgdConfig sgd{0.1, 0.9, UpdateScope::all};
};

/// Mini-batch SGD on mean cross-entropy. Shuffling draws from rng only.
template <std::size_t Depth>
FeedForward<Depth> train_source(FeedForward<Depth> model, const Matrix& x,
                                std::span<const std::size_t> y, const TrainConfig& cfg,
                                Rng& rng) {
  if (x.rows() == 0 || x.rows() != y.size()) {
    throw std::invalid_argument("train_source needs a nonempty labeled dataset");
  }
  if (cfg.batch_size == 0) {
    throw std::invalid_argument("batch size must be >= 1");
  }
  Sgd<Depth> opt(model, cfg.sgd);
  LossPlugin ce = CrossEntropyLoss{};
  std::vector<std::size_t> order(x.rows());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Matrix xb(stop - start, x.cols());
      std::vector<std::size_t> yb(stop - start);
      for (std::size_t r = start; r < stop; ++r) {
        const auto src = x.row(order[r]);
        std::copy(src.begin(), src.end(), xb.row(r - start).begin());
        yb[r - start] = y[order[r]];
      }
      const auto evals = evaluate_batch(ce, forward(model, xb), yb);
      auto grads = backward(model, xb, stack_grads(evals, model.classes()));
      opt.step(model, grads);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Online adaptation
// ---------------------------------------------------------------------------

struct LabeledBatch {
  Matrix x;
  std::vector<std::size_t> y;
};

/// One step of a target stream. `labels` are used for evaluation only.
/// `supervised`, when present, adds a cross-entropy term on a separate
/// labeled batch (semi-supervised mixing).
struct StreamBatch {
  Matrix x;
  std::vector<std::size_t> labels;
  std::optional<LabeledBatch> supervised;
};

struct AdaptConfig {
  SgdConfig sgd;
  /// Weight of the unsupervised term when a batch carries supervision.
  double unsupervised_weight = 0.3;
};

struct BatchTrace {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  double avg_max_prob = 0.0;
  double param_step = 0.0;
};

template <std::size_t Depth>
struct AdaptResult {
  FeedForward<Depth> model;
  std::vector<BatchTrace> trace;
  /// Online predictions (before each update), one row per stream sample.
  std::vector<Vector> predictions;
  std::vector<std::size_t> labels;
};

/// Evaluate-then-update loop: each batch is predicted with the current
/// parameters, then the plugin loss (batch mean) drives one SGD step.
/// The plugin carries any loss state (MEC) across the whole stream.
/// `after_step` runs after every update (used by tests to tamper with state).
template <std::size_t Depth>
AdaptResult<Depth> adapt_stream(
    FeedForward<Depth> model, std::span<const StreamBatch> stream, LossPlugin& plugin,
    const AdaptConfig& cfg,
    const std::function<void(std::size_t, FeedForward<Depth>&)>& after_step = {}) {
  AdaptResult<Depth> result;
  Sgd<Depth> opt(model, cfg.sgd);
  const std::size_t c = model.classes();
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const StreamBatch& batch = stream[t];
    const Matrix logits = forward(model, batch.x);

    BatchTrace tr;
    std::size_t correct = 0;
    for (std::size_t s = 0; s < logits.rows(); ++s) {
      Vector p = softmax(logits.row(s));
      const std::size_t pred = argmax(p.span());
      tr.avg_max_prob += p[pred];
      if (s < batch.labels.size() && pred == batch.labels[s]) {
        ++correct;
      }
      result.predictions.push_back(std::move(p));
      if (s < batch.labels.size()) {
        result.labels.push_back(batch.labels[s]);
      }
    }
    const double n = static_cast<double>(std::max<std::size_t>(logits.rows(), 1));
    tr.accuracy = static_cast<double>(correct) / n;
    tr.avg_max_prob /= n;

    const auto evals = evaluate_batch(plugin, logits);
    for (const auto& e : evals) {
      tr.mean_loss += e.value / n;
    }
    if (!std::isfinite(tr.mean_loss)) {
      throw std::domain_error("adaptation loss became non-finite at batch " + std::to_string(t));
    }
    auto grads = backward(model, batch.x, stack_grads(evals, c));
    if (batch.supervised) {
      const auto& sup = *batch.supervised;
      LossPlugin ce = CrossEntropyLoss{};
      const auto ce_evals = evaluate_batch(ce, forward(model, sup.x), sup.y);
      auto ce_grads = backward(model, sup.x, stack_grads(ce_evals, c));
      std::vector<double> flat;
      ce_grads.for_each_param([&](double& v, std::size_t, std::size_t) { flat.push_back(v); });
      grads.for_each_param([&](double& v, std::size_t idx, std::size_t) {
        v = cfg.unsupervised_weight * v + flat[idx];
      });
    }
    const FeedForward<Depth> before = model;
    opt.step(model, grads);
    tr.param_step = parameter_distance(model, before);
    result.trace.push_back(tr);
    if (after_step) {
      after_step(t, model);
    }
  }
  result.model = std::move(model);
  return result;
}

} // namespace demkit
