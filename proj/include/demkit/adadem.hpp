#pragma once

// Adaptive decoupled entropy minimization. Each sample's CADF reward is
// normalized by its own norm (delta), and the GMC penalty is replaced by a
// per-pseudo-class exponential moving average of predicted probability
// vectors (the marginal entropy calibrator, MEC).

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "demkit/em_losses.hpp"
#include "demkit/numkit.hpp"

namespace demkit {

enum class NormKind { l1, l2, linf };

enum class DeltaSource {
  cadf,        // delta = ||R_T||
  full_entropy // delta_v = ||-dH/dz||
};

enum class AdaDemMode { full, norm_only, mec_only };

struct AdaDemVariant {
  AdaDemMode mode = AdaDemMode::full;
  double mec_alpha = 1.0;
  DeltaSource delta_source = DeltaSource::cadf;
  NormKind norm = NormKind::l1;
};

inline constexpr double kDeltaFloor = 1e-8;
inline constexpr double kDefaultMomentum = 0.1;

inline double vector_norm(std::span<const double> v, NormKind kind) noexcept {
  double acc = 0.0;
  switch (kind) {
  case NormKind::l1:
    for (double x : v) {
      acc += std::abs(x);
    }
    return acc;
  case NormKind::l2:
    for (double x : v) {
      acc += x * x;
    }
    return std::sqrt(acc);
  case NormKind::linf:
    for (double x : v) {
      acc = std::max(acc, std::abs(x));
    }
    return acc;
  }
  return acc;
}

/// Reward norm used to rescale a sample. Unclamped; callers divide by
/// max(delta, kDeltaFloor).
inline double delta(const Logits& z, NormKind kind = NormKind::l1,
                    DeltaSource source = DeltaSource::cadf) {
  if (source == DeltaSource::cadf) {
    // Dividing by the computed probability mass (1 up to rounding) makes the
    // L1 norm exactly 1 at equal logits.
    double mass = 0.0;
    for (double v : softmax(z.span())) {
      mass += v;
    }
    return vector_norm(cadf_reward(z).span(), kind) / mass;
  }
  return vector_norm(em_eval(z).grad.span(), kind);
}

/// Argmax with ties going to the lowest index.
inline std::size_t pseudo_label(std::span<const double> p) {
  if (p.empty()) {
    throw std::domain_error("pseudo_label of an empty vector");
  }
  return argmax(p);
}

inline std::size_t pseudo_label(const Vector& p) { return pseudo_label(p.span()); }

/// EMA table of per-pseudo-class probability vectors. Row k starts uniform
/// and moves as row_k <- (1 - pi) row_k + pi * mean(p | pseudo-label k).
class MecState {
public:
  MecState() = default;
  explicit MecState(std::size_t classes, double momentum = kDefaultMomentum)
      : table_(classes, classes, classes == 0 ? 0.0 : 1.0 / static_cast<double>(classes)),
        momentum_(momentum) {
    if (classes < 2) {
      throw std::domain_error("MEC needs at least two classes");
    }
    if (!(momentum > 0.0 && momentum <= 1.0)) {
      throw std::domain_error("MEC momentum must lie in (0, 1]");
    }
  }

  /// Restores a checkpoint; rows are taken as given.
  MecState(Matrix table, double momentum, std::size_t steps)
      : table_(std::move(table)), momentum_(momentum), steps_(steps) {
    if (table_.rows() != table_.cols() || table_.rows() < 2) {
      throw std::domain_error("MEC table must be square with at least two classes");
    }
    if (!(momentum > 0.0 && momentum <= 1.0)) {
      throw std::domain_error("MEC momentum must lie in (0, 1]");
    }
  }

  std::size_t classes() const noexcept { return table_.rows(); }
  double momentum() const noexcept { return momentum_; }
  std::size_t steps() const noexcept { return steps_; }
  const Matrix& table() const noexcept { return table_; }
  std::span<const double> row(std::size_t k) const noexcept { return table_.row(k); }

  void reset() {
    const double u = 1.0 / static_cast<double>(classes());
    for (double& v : table_.flat()) {
      v = u;
    }
    steps_ = 0;
  }

  /// One EMA step. Classes absent from the batch keep their rows. Within a
  /// batch, samples are averaged per class before blending.
  void update(std::span<const Vector> probs, std::span<const std::size_t> labels) {
    if (probs.size() != labels.size()) {
      throw std::invalid_argument("MEC update: probs and labels differ in length");
    }
    const std::size_t c = classes();
    Matrix sums(c, c, 0.0);
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t s = 0; s < probs.size(); ++s) {
      const std::size_t k = labels[s];
      if (k >= c) {
        throw std::domain_error("MEC update: pseudo-label " + std::to_string(k) +
                                " out of range for " + std::to_string(c) + " classes");
      }
      if (probs[s].size() != c) {
        throw std::domain_error("MEC update: probability vector has wrong length");
      }
      for (std::size_t i = 0; i < c; ++i) {
        sums(k, i) += probs[s][i];
      }
      ++counts[k];
    }
    for (std::size_t k = 0; k < c; ++k) {
      if (counts[k] == 0) {
        continue;
      }
      const double inv = 1.0 / static_cast<double>(counts[k]);
      for (std::size_t i = 0; i < c; ++i) {
        table_(k, i) = (1.0 - momentum_) * table_(k, i) + momentum_ * sums(k, i) * inv;
      }
    }
    ++steps_;
  }

private:
  Matrix table_;
  double momentum_ = kDefaultMomentum;
  std::size_t steps_ = 0;
};

inline MecState mec_init(std::size_t classes, double momentum = kDefaultMomentum) {
  return MecState(classes, momentum);
}

/// Functional form of MecState::update.
inline MecState mec_update(MecState state, std::span<const Vector> probs,
                           std::span<const std::size_t> labels) {
  state.update(probs, labels);
  return state;
}

/// Per-sample constants of the AdaDEM surrogate, fixed before differentiation.
struct AdaDemConstants {
  std::size_t pseudo_label = 0;
  double delta = 1.0; // already clamped
  Vector calibrator;  // c: scaled MEC row, or the detached copy of p
};

/// Value and gradient of -(1/delta) sum_i (p_i - c_i) z_i with c and delta
/// held constant: grad_i = -(1/delta) (p_i (z_i + 1 - S) - c_i), S = sum p_j z_j.
inline LossEval adadem_surrogate(const Logits& z, const AdaDemConstants& k) {
  const Vector p = softmax(z.span());
  const double s = detail::dot(p.span(), z.span());
  const double inv = 1.0 / k.delta;
  LossEval out{0.0, Vector(z.classes())};
  for (std::size_t i = 0; i < p.size(); ++i) {
    out.value -= inv * (p[i] - k.calibrator[i]) * z[i];
    out.grad[i] = -inv * (p[i] * (z[i] + 1.0 - s) - k.calibrator[i]);
  }
  return out;
}

/// Constants for one sample given an (already updated) MEC state.
inline AdaDemConstants adadem_constants(const Logits& z, const MecState& state,
                                        const AdaDemVariant& variant) {
  const Vector p = softmax(z.span());
  AdaDemConstants k;
  k.pseudo_label = pseudo_label(p);
  if (variant.mode == AdaDemMode::norm_only) {
    k.calibrator = p;
  } else {
    const auto row = state.row(k.pseudo_label);
    k.calibrator = Vector(row);
    for (double& v : k.calibrator) {
      v *= variant.mec_alpha;
    }
  }
  if (variant.mode == AdaDemMode::mec_only) {
    k.delta = 1.0;
  } else {
    k.delta = std::max(delta(z, variant.norm, variant.delta_source), kDeltaFloor);
  }
  return k;
}

/// Batch evaluation. The MEC state absorbs the batch first, then each sample
/// is scored against the updated rows.
inline std::vector<LossEval> adadem_eval(std::span<const Logits> batch, MecState& state,
                                         const AdaDemVariant& variant,
                                         Direction dir = Direction::minimize) {
  std::vector<Vector> probs;
  std::vector<std::size_t> labels;
  probs.reserve(batch.size());
  labels.reserve(batch.size());
  for (const Logits& z : batch) {
    if (z.classes() != state.classes()) {
      throw std::domain_error("AdaDEM: logit length " + std::to_string(z.classes()) +
                              " does not match MEC classes " +
                              std::to_string(state.classes()));
    }
    probs.push_back(softmax(z.span()));
    labels.push_back(pseudo_label(probs.back()));
  }
  state.update(probs, labels);

  std::vector<LossEval> out;
  out.reserve(batch.size());
  for (const Logits& z : batch) {
    out.push_back(apply_direction(adadem_surrogate(z, adadem_constants(z, state, variant)), dir));
  }
  return out;
}

} // namespace demkit
