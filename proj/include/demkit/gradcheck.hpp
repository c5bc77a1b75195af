#pragma once

// Randomized finite-difference checks of every analytic gradient, at the
// logit level and end to end through the linear and MLP models.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "demkit/adadem.hpp"
#include "demkit/em_losses.hpp"
#include "demkit/model.hpp"
#include "demkit/numkit.hpp"

namespace demkit {

inline constexpr double kGradcheckTolerance = 1e-5;

struct GradcheckRow {
  std::string loss;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
  std::vector<double> worst_input; // logits (or model inputs) of the worst trial
  bool passed() const noexcept { return max_rel_error < kGradcheckTolerance; }
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t trials = 1000;
  /// Name of a check whose analytic gradient is deliberately perturbed.
  std::string corrupt;
};

namespace detail {

inline Vector random_logits(Rng& rng, std::size_t classes, double spread) {
  Vector z(classes);
  for (double& v : z) {
    v = rng.uniform(-spread, spread);
  }
  return z;
}

/// Admissible (tau, alpha) with alpha > 0.
inline DemConfig random_dem_config(Rng& rng) {
  DemConfig cfg;
  cfg.alpha = rng.uniform(0.05, 2.0);
  cfg.tau = rng.uniform(0.2, std::min(3.0, 2.0 / cfg.alpha));
  return cfg;
}

class RowAccumulator {
public:
  RowAccumulator(std::string name, const std::string& corrupt)
      : corrupt_(name == corrupt) {
    row_.loss = std::move(name);
  }

  void add(Vector analytic, const Vector& numeric, std::span<const double> input) {
    if (corrupt_) {
      analytic[0] += 1e-3;
    }
    double e = max_rel_error(analytic, numeric);
    if (std::isnan(e)) {
      e = INFINITY;
    }
    ++row_.trials;
    if (row_.trials == 1 || e > row_.max_rel_error) {
      row_.max_rel_error = e;
      row_.worst_input.assign(input.begin(), input.end());
    }
  }

  GradcheckRow take() { return std::move(row_); }

private:
  GradcheckRow row_;
  bool corrupt_ = false;
};

template <std::size_t Depth>
Vector flat_params(FeedForward<Depth>& m) {
  std::vector<double> out;
  m.for_each_param([&](double& v, std::size_t, std::size_t) { out.push_back(v); });
  return Vector(std::move(out));
}

template <std::size_t Depth>
void set_params(FeedForward<Depth>& m, const Vector& theta) {
  m.for_each_param([&](double& v, std::size_t idx, std::size_t) { v = theta[idx]; });
}

inline bool near_kink(const Mlp& m, const Matrix& x) {
  Matrix pre;
  affine(m.layers[0], x, pre);
  for (double v : pre.flat()) {
    if (std::abs(v) < 1e-4) {
      return true;
    }
  }
  return false;
}

/// One end-to-end check: analytic parameter gradient from backward() versus
/// central differences of the mean per-sample loss, AdaDEM constants frozen
/// at the evaluation point.
template <std::size_t Depth>
void model_trial(FeedForward<Depth> model, const Matrix& x, const std::vector<std::size_t>& y,
                 LossPlugin plugin, RowAccumulator& acc) {
  const Matrix logits = forward(model, x);
  std::vector<AdaDemConstants> frozen;
  if (auto* ada = std::get_if<AdaDemLoss>(&plugin)) {
    MecState probe = ada->state;
    std::vector<Vector> probs;
    std::vector<std::size_t> labels;
    for (std::size_t s = 0; s < logits.rows(); ++s) {
      probs.push_back(softmax(logits.row(s)));
      labels.push_back(pseudo_label(probs.back()));
    }
    probe.update(probs, labels);
    for (std::size_t s = 0; s < logits.rows(); ++s) {
      frozen.push_back(adadem_constants(Logits(logits.row(s)), probe, ada->variant));
    }
  }
  const auto evals = evaluate_batch(plugin, logits, y);
  FeedForward<Depth> grads = backward(model, x, stack_grads(evals, model.classes()));
  const Vector analytic = flat_params(grads);

  auto sample_value = [&](const Logits& z, std::size_t s) -> double {
    return std::visit(
        [&](const auto& p) -> double {
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, CrossEntropyLoss>) {
            return cross_entropy_eval(z, y[s]).value;
          } else if constexpr (std::is_same_v<P, EmLoss>) {
            return em_eval(z, p.direction).value;
          } else if constexpr (std::is_same_v<P, DemLoss>) {
            return dem_eval(z, p.cfg).value;
          } else {
            return apply_direction(adadem_surrogate(z, frozen[s]), p.direction).value;
          }
        },
        plugin);
  };
  FeedForward<Depth> work = model;
  auto objective = [&](const Vector& theta) {
    set_params(work, theta);
    const Matrix zs = forward(work, x);
    double total = 0.0;
    for (std::size_t s = 0; s < zs.rows(); ++s) {
      total += sample_value(Logits(zs.row(s)), s);
    }
    return total / static_cast<double>(zs.rows());
  };
  const Vector numeric = finite_diff_grad(objective, flat_params(model));
  acc.add(analytic, numeric, x.flat());
}

} // namespace detail

/// Runs every check `trials` times on random inputs. Row order is fixed.
inline std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opt) {
  if (opt.trials == 0) {
    throw std::invalid_argument("gradcheck needs trials >= 1");
  }
  using detail::random_logits;
  using detail::RowAccumulator;
  const Rng root(opt.seed);
  std::vector<GradcheckRow> rows;

  auto logit_check = [&](const char* name, std::uint64_t stream, auto&& body) {
    RowAccumulator acc(name, opt.corrupt);
    Rng rng = root.split(stream);
    for (std::size_t t = 0; t < opt.trials; ++t) {
      const std::size_t c = 2 + rng.index(9);
      const Vector z = random_logits(rng, c, 5.0);
      body(Logits(z), rng, acc);
    }
    rows.push_back(acc.take());
  };

  logit_check("em", 11, [](const Logits& z, Rng&, RowAccumulator& acc) {
    auto f = [](const Vector& v) { return conditional_entropy(Logits(v)); };
    acc.add(em_eval(z).grad, finite_diff_grad(f, z.vec()), z.span());
  });
  logit_check("detached_em", 12, [](const Logits& z, Rng&, RowAccumulator& acc) {
    auto f = [](const Vector& v) { return conditional_entropy(Logits(v)); };
    acc.add(detached_em_eval(z).grad, finite_diff_grad(f, z.vec()), z.span());
  });
  logit_check("cadf_tempered", 13, [](const Logits& z, Rng& rng, RowAccumulator& acc) {
    const double tau = rng.uniform(0.2, 3.0);
    auto f = [tau](const Vector& v) { return cadf_tempered_eval(Logits(v), tau).value; };
    acc.add(cadf_tempered_eval(z, tau).grad, finite_diff_grad(f, z.vec()), z.span());
  });
  logit_check("dem", 14, [](const Logits& z, Rng& rng, RowAccumulator& acc) {
    const DemConfig cfg = detail::random_dem_config(rng);
    auto f = [&cfg](const Vector& v) { return dem_eval(Logits(v), cfg).value; };
    acc.add(dem_eval(z, cfg).grad, finite_diff_grad(f, z.vec()), z.span());
  });
  logit_check("adadem", 15, [](const Logits& z, Rng& rng, RowAccumulator& acc) {
    MecState state(z.classes(), rng.uniform(0.01, 1.0));
    // Move the table away from uniform with a few random batches first.
    for (int b = 0; b < 3; ++b) {
      std::vector<Vector> probs;
      std::vector<std::size_t> labels;
      for (int s = 0; s < 4; ++s) {
        probs.push_back(softmax(random_logits(rng, z.classes(), 3.0)));
        labels.push_back(pseudo_label(probs.back()));
      }
      state.update(probs, labels);
    }
    static constexpr AdaDemMode modes[] = {AdaDemMode::full, AdaDemMode::norm_only,
                                           AdaDemMode::mec_only};
    const AdaDemVariant variant{modes[rng.index(3)], rng.uniform(0.0, 2.0), DeltaSource::cadf,
                                NormKind::l1};
    const std::vector<Logits> batch{z};
    const LossEval e = adadem_eval(batch, state, variant).front();
    const AdaDemConstants k = adadem_constants(z, state, variant);
    auto f = [&k](const Vector& v) { return adadem_surrogate(Logits(v), k).value; };
    acc.add(e.grad, finite_diff_grad(f, z.vec()), z.span());
  });
  logit_check("cross_entropy", 16, [](const Logits& z, Rng& rng, RowAccumulator& acc) {
    const std::size_t target = rng.index(z.classes());
    auto f = [target](const Vector& v) { return cross_entropy_eval(Logits(v), target).value; };
    acc.add(cross_entropy_eval(z, target).grad, finite_diff_grad(f, z.vec()), z.span());
  });

  // End to end through the models, one row per (architecture, plugin).
  const char* plugin_names[] = {"cross_entropy", "em", "dem", "adadem"};
  for (std::size_t arch = 0; arch < 2; ++arch) {
    for (std::size_t pi = 0; pi < 4; ++pi) {
      const std::string name =
          std::string(arch == 0 ? "linear:" : "mlp:") + plugin_names[pi];
      RowAccumulator acc(name, opt.corrupt);
      Rng rng = root.split(100 + arch * 10 + pi);
      for (std::size_t t = 0; t < opt.trials; ++t) {
        const std::size_t c = 2 + rng.index(4);
        const std::size_t d = 1 + rng.index(6);
        const std::size_t n = 1 + rng.index(8);
        Matrix x(n, d);
        for (double& v : x.flat()) {
          v = rng.uniform(-2.0, 2.0);
        }
        std::vector<std::size_t> y(n);
        for (auto& v : y) {
          v = rng.index(c);
        }
        LossPlugin plugin;
        switch (pi) {
        case 0:
          plugin = CrossEntropyLoss{};
          break;
        case 1:
          plugin = EmLoss{};
          break;
        case 2:
          plugin = DemLoss{detail::random_dem_config(rng)};
          break;
        default:
          plugin = AdaDemLoss{AdaDemVariant{}, Direction::minimize, MecState(c)};
          break;
        }
        if (arch == 0) {
          LinearSoftmax m = make_linear(c, d);
          m.for_each_param([&](double& v, std::size_t, std::size_t) { v = rng.uniform(-1.0, 1.0); });
          detail::model_trial(m, x, y, plugin, acc);
        } else {
          Mlp m = make_mlp(c, d, 1 + rng.index(6), rng);
          m.for_each_param([&](double& v, std::size_t, std::size_t) { v = rng.uniform(-1.0, 1.0); });
          if (detail::near_kink(m, x)) {
            --t; // resample: the rectifier is not differentiable there
            continue;
          }
          detail::model_trial(m, x, y, plugin, acc);
        }
      }
      rows.push_back(acc.take());
    }
  }
  return rows;
}

} // namespace demkit
