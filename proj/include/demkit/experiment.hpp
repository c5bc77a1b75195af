#pragma once

// End-to-end experiment plumbing shared by the CLI and the acceptance suite:
// source training, stream construction and protocol runs driven by an
// ExperimentConfig.

#include <cstdint>
#include <variant>
#include <vector>

#include "demkit/bench.hpp"
#include "demkit/config.hpp"
#include "demkit/model.hpp"
#include "demkit/search.hpp"

namespace demkit {

using AnyModel = std::variant<LinearSoftmax, Mlp>;

/// Generator streams derived from the experiment seed.
enum class SeedStream : std::uint64_t {
  source_data = 1,
  source_shuffle = 2,
  model_init = 3,
  target_stream = 4,
  scoring_subset = 5,
};

inline Rng seeded(std::uint64_t seed, SeedStream s) {
  return Rng(seed).split(static_cast<std::uint64_t>(s));
}

struct Prepared {
  MixtureSpec mixture;
  AnyModel source;
  std::vector<ShiftSegment> stream;
  ProtocolMode mode = ProtocolMode::single_domain;
};

inline MixtureSpec make_mixture(const MixtureConfig& m) {
  MixtureSpec spec = circle_mixture(m.classes, m.dim, m.radius, m.sigma);
  spec.priors = long_tail_priors(m.classes, m.source_rho);
  spec.validate();
  return spec;
}

inline StreamSpec make_stream_spec(const ExperimentConfig& cfg) {
  StreamSpec s;
  s.mode = cfg.stream.mode;
  s.shifts = cfg.stream.shifts;
  s.batches_per_shift = cfg.stream.batches_per_shift;
  s.batch_size = cfg.stream.batch_size;
  s.label_priors = long_tail_priors(cfg.mixture.classes, cfg.stream.label_rho);
  return s;
}

inline AnyModel train_source_model(const ExperimentConfig& cfg, const MixtureSpec& mixture) {
  Rng data_rng = seeded(cfg.seed, SeedStream::source_data);
  const LabeledBatch data = sample_batch(mixture, mixture.priors, cfg.mixture.source_samples, data_rng);
  TrainConfig tc;
  tc.epochs = cfg.model.source_epochs;
  tc.batch_size = cfg.model.source_batch_size;
  tc.sgd = SgdConfig{cfg.model.source_lr, cfg.model.source_momentum, UpdateScope::all};
  Rng shuffle = seeded(cfg.seed, SeedStream::source_shuffle);
  if (cfg.model.kind == ModelKind::linear) {
    return train_source(make_linear(mixture.classes, mixture.dim), data.x, data.y, tc, shuffle);
  }
  Rng init = seeded(cfg.seed, SeedStream::model_init);
  return train_source(make_mlp(mixture.classes, mixture.dim, cfg.model.hidden, init), data.x, data.y,
                      tc, shuffle);
}

inline Prepared prepare(const ExperimentConfig& cfg) {
  Prepared p;
  p.mixture = make_mixture(cfg.mixture);
  p.source = train_source_model(cfg, p.mixture);
  const std::uint64_t stream_seed = seeded(cfg.seed, SeedStream::target_stream).next_u64();
  p.stream = build_stream(p.mixture, make_stream_spec(cfg), stream_seed);
  p.mode = cfg.stream.mode;
  return p;
}

/// Builds the adaptation loss. DEM configs are checked here and throw
/// InvalidHyperparameters when (tau, alpha) is out of bounds.
inline LossPlugin make_plugin(const LossConfig& l, std::size_t classes) {
  switch (l.name) {
  case LossName::em:
    return EmLoss{l.direction};
  case LossName::dem: {
    DemConfig dc{l.tau, l.alpha, l.direction};
    require_valid(dc);
    return DemLoss{dc};
  }
  case LossName::adadem:
    return AdaDemLoss{AdaDemVariant{l.variant, l.mec_alpha, l.delta_source, l.norm}, l.direction,
                      MecState(classes, l.pi)};
  }
  throw std::invalid_argument("unknown loss");
}

/// Protocol outcome without the model type.
struct RunSummary {
  std::vector<ShiftOutcome> shifts;
  MetricsReport overall;
  std::vector<Vector> predictions;
  std::vector<std::size_t> labels;
};

inline RunSummary run_prepared(const Prepared& p, const LossPlugin& plugin, const SgdConfig& sgd) {
  AdaptConfig ac;
  ac.sgd = sgd;
  return std::visit(
      [&](const auto& source) {
        auto res = run_protocol(source, p.stream, p.mode, plugin, ac);
        return RunSummary{std::move(res.shifts), std::move(res.overall), std::move(res.predictions),
                          std::move(res.labels)};
      },
      p.source);
}

/// Accuracy of the source model on the stream with no adaptation.
inline double no_adapt_accuracy(const Prepared& p) {
  return run_prepared(p, EmLoss{}, SgdConfig{0.0, 0.0, UpdateScope::all}).overall.accuracy;
}

inline std::size_t stream_samples(const Prepared& p) {
  std::size_t n = 0;
  for (const auto& seg : p.stream) {
    for (const auto& b : seg.batches) {
      n += b.labels.size();
    }
  }
  return n;
}

struct DemSearchOutcome {
  GridSearchResult grid;
  double best_full_accuracy = 0.0;
  double classical_subset_accuracy = 0.0;
  double classical_full_accuracy = 0.0;
};

/// DEM* selection: every admissible (tau, alpha) runs the full protocol and
/// is scored on a fixed labeled subset of the stream. Only this routine reads
/// stream labels for a decision.
inline DemSearchOutcome dem_grid_search(const Prepared& p, const ExperimentConfig& cfg,
                                        std::size_t threads = configured_threads()) {
  Rng mask_rng = seeded(cfg.seed, SeedStream::scoring_subset);
  const std::vector<bool> mask = subset_mask(stream_samples(p), cfg.search.subset_fraction, mask_rng);
  auto run_at = [&](double tau, double alpha) {
    return run_prepared(p, DemLoss{DemConfig{tau, alpha, cfg.loss.direction}}, cfg.optimizer);
  };
  DemSearchOutcome out;
  out.grid = grid_search(
      [&](double tau, double alpha) {
        const RunSummary r = run_at(tau, alpha);
        return masked_accuracy(r.predictions, r.labels, mask);
      },
      cfg.search, threads);
  out.best_full_accuracy = run_at(out.grid.best.tau, out.grid.best.alpha).overall.accuracy;
  const RunSummary classical = run_at(1.0, 1.0);
  out.classical_subset_accuracy = masked_accuracy(classical.predictions, classical.labels, mask);
  out.classical_full_accuracy = classical.overall.accuracy;
  return out;
}

/// Overall online accuracy of the configured loss at each learning rate.
inline LrSweepResult run_lr_sweep(const Prepared& p, const ExperimentConfig& cfg,
                                  std::size_t threads = configured_threads()) {
  const LossPlugin plugin = make_plugin(cfg.loss, p.mixture.classes);
  return lr_sweep(
      [&](double lr) {
        SgdConfig sgd = cfg.optimizer;
        sgd.lr = lr;
        return run_prepared(p, plugin, sgd).overall.accuracy;
      },
      cfg.lr_sweep, threads);
}

} // namespace demkit
