#pragma once

// Synthetic Gaussian-mixture source data, covariate shifts with five severity
// levels, single-domain and continual adaptation protocols, and the
// diagnostics used to watch reward collapse and easy-class bias.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "demkit/model.hpp"
#include "demkit/numkit.hpp"

namespace demkit {

struct MixtureSpec {
  std::size_t classes = 10;
  std::size_t dim = 2;
  std::vector<Vector> means;
  Vector sigma; // per class
  Vector priors;

  void validate() const {
    if (classes < 2 || dim < 1) {
      throw std::invalid_argument("mixture needs >= 2 classes and dim >= 1");
    }
    if (means.size() != classes || sigma.size() != classes || priors.size() != classes) {
      throw std::invalid_argument("mixture means/sigma/priors must have one entry per class");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      if (means[k].size() != dim) {
        throw std::invalid_argument("mixture mean has wrong dimension");
      }
      if (!(sigma[k] > 0.0)) {
        throw std::invalid_argument("mixture sigma must be > 0");
      }
      if (!(priors[k] >= 0.0)) {
        throw std::invalid_argument("mixture priors must be nonnegative");
      }
      total += priors[k];
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("mixture priors must sum to 1");
    }
  }
};

/// Class means evenly spaced on a circle of the given radius in the first two
/// coordinates; remaining coordinates zero. Uniform priors.
inline MixtureSpec circle_mixture(std::size_t classes = 10, std::size_t dim = 2,
                                  double radius = 4.0, double sigma = 1.0) {
  if (dim < 2) {
    throw std::invalid_argument("circle mixture needs dim >= 2");
  }
  MixtureSpec spec;
  spec.classes = classes;
  spec.dim = dim;
  spec.sigma = Vector(classes, sigma);
  spec.priors = Vector(classes, 1.0 / static_cast<double>(classes));
  for (std::size_t k = 0; k < classes; ++k) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(classes);
    Vector mu(dim, 0.0);
    mu[0] = radius * std::cos(angle);
    mu[1] = radius * std::sin(angle);
    spec.means.push_back(std::move(mu));
  }
  spec.validate();
  return spec;
}

/// prior_k proportional to rho^(-k / (C - 1)); prior_0 / prior_{C-1} = rho.
inline Vector long_tail_priors(std::size_t classes, double rho) {
  if (classes < 2) {
    throw std::invalid_argument("long_tail_priors needs >= 2 classes");
  }
  if (!(rho >= 1.0) || !std::isfinite(rho)) {
    throw std::invalid_argument("imbalance ratio rho must be >= 1");
  }
  Vector p(classes);
  double total = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    p[k] = std::pow(rho, -static_cast<double>(k) / static_cast<double>(classes - 1));
    total += p[k];
  }
  for (double& v : p) {
    v /= total;
  }
  return p;
}

/// Labels from `priors`, features x ~ N(mean_y, sigma_y^2 I).
inline LabeledBatch sample_batch(const MixtureSpec& spec, const Vector& priors, std::size_t n,
                                 Rng& rng) {
  if (n == 0) {
    throw std::invalid_argument("sample_batch needs n >= 1");
  }
  if (priors.size() != spec.classes) {
    throw std::invalid_argument("priors length must equal class count");
  }
  LabeledBatch out{Matrix(n, spec.dim), std::vector<std::size_t>(n)};
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t y = rng.categorical(priors.span());
    out.y[s] = y;
    auto row = out.x.row(s);
    for (std::size_t j = 0; j < spec.dim; ++j) {
      row[j] = spec.means[y][j] + spec.sigma[y] * rng.normal();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shifts
// ---------------------------------------------------------------------------

enum class ShiftKind { translate, rotate2d, feature_noise, feature_scale };

inline constexpr std::array<double, 5> kSeverityMultipliers{0.5, 1.0, 1.5, 2.0, 2.5};

struct ShiftSpec {
  ShiftKind kind = ShiftKind::feature_noise;
  double magnitude = 1.0;
  int level = 3;

  double effective_magnitude() const {
    if (level < 1 || level > 5) {
      throw std::invalid_argument("shift level must be in 1..5");
    }
    return magnitude * kSeverityMultipliers[static_cast<std::size_t>(level - 1)];
  }

  friend bool operator==(const ShiftSpec&, const ShiftSpec&) = default;
};

inline std::string shift_kind_name(ShiftKind k) {
  switch (k) {
  case ShiftKind::translate:
    return "translate";
  case ShiftKind::rotate2d:
    return "rotate2d";
  case ShiftKind::feature_noise:
    return "feature_noise";
  case ShiftKind::feature_scale:
    return "feature_scale";
  }
  return "unknown";
}

/// translate: X + m u with u = (1, ..., 1) / sqrt(d); rotate2d: rotation by m
/// radians; feature_noise: X + m N(0, I); feature_scale: X (1 + m).
inline Matrix apply_shift(Matrix x, const ShiftSpec& spec, Rng& rng) {
  const double m = spec.effective_magnitude();
  const std::size_t d = x.cols();
  switch (spec.kind) {
  case ShiftKind::translate: {
    const double step = m / std::sqrt(static_cast<double>(d));
    for (double& v : x.flat()) {
      v += step;
    }
    break;
  }
  case ShiftKind::rotate2d: {
    if (d != 2) {
      throw std::invalid_argument("rotate2d shift requires 2-dimensional features");
    }
    const double c = std::cos(m);
    const double s = std::sin(m);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      auto row = x.row(r);
      const double a = row[0];
      const double b = row[1];
      row[0] = c * a - s * b;
      row[1] = s * a + c * b;
    }
    break;
  }
  case ShiftKind::feature_noise:
    for (double& v : x.flat()) {
      v += m * rng.normal();
    }
    break;
  case ShiftKind::feature_scale:
    for (double& v : x.flat()) {
      v *= 1.0 + m;
    }
    break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

enum class ProtocolMode { single_domain, continual };

struct StreamSpec {
  ProtocolMode mode = ProtocolMode::single_domain;
  std::vector<ShiftSpec> shifts;
  std::size_t batches_per_shift = 100;
  std::size_t batch_size = 64;
  Vector label_priors; // empty: mixture priors

  void validate(std::size_t classes) const {
    if (shifts.empty()) {
      throw std::invalid_argument("stream needs at least one shift");
    }
    if (mode == ProtocolMode::continual && shifts.size() < 2) {
      throw std::invalid_argument("continual stream needs at least two shifts");
    }
    if (batches_per_shift == 0 || batch_size == 0) {
      throw std::invalid_argument("stream needs batches_per_shift >= 1 and batch_size >= 1");
    }
    if (!label_priors.empty()) {
      if (label_priors.size() != classes) {
        throw std::invalid_argument("label_priors length must equal class count");
      }
      double total = 0.0;
      for (double v : label_priors) {
        if (!(v >= 0.0)) {
          throw std::invalid_argument("label_priors must be nonnegative");
        }
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("label_priors must sum to 1");
      }
    }
    for (const auto& s : shifts) {
      (void)s.effective_magnitude();
    }
  }
};

struct ShiftSegment {
  ShiftSpec shift;
  std::vector<StreamBatch> batches;
};

namespace detail {

/// Stream id for a shift's data: depends on what the shift is and how many
/// identical shifts preceded it, never on its position in the list.
inline std::uint64_t shift_stream_id(const ShiftSpec& s, std::size_t occurrence) {
  std::uint64_t h = 0x6A09E667F3BCC909ULL;
  auto mix = [&h](std::uint64_t v) {
    std::uint64_t st = h ^ v;
    h = splitmix64(st);
  };
  mix(static_cast<std::uint64_t>(s.kind));
  mix(static_cast<std::uint64_t>(s.level));
  mix(std::bit_cast<std::uint64_t>(s.magnitude));
  mix(static_cast<std::uint64_t>(occurrence));
  return h;
}

} // namespace detail

/// Materializes the labeled target stream. Each shift's batches are drawn from
/// a generator derived from (seed, shift identity), so a shift produces the
/// same data wherever it sits in the sequence.
inline std::vector<ShiftSegment> build_stream(const MixtureSpec& mixture, const StreamSpec& spec,
                                              std::uint64_t seed) {
  mixture.validate();
  spec.validate(mixture.classes);
  const Vector& priors = spec.label_priors.empty() ? mixture.priors : spec.label_priors;
  const Rng root(seed);
  std::vector<ShiftSegment> out;
  for (std::size_t i = 0; i < spec.shifts.size(); ++i) {
    const ShiftSpec& shift = spec.shifts[i];
    const auto occurrence = static_cast<std::size_t>(
        std::count(spec.shifts.begin(), spec.shifts.begin() + static_cast<std::ptrdiff_t>(i), shift));
    Rng rng = root.split(detail::shift_stream_id(shift, occurrence));
    ShiftSegment seg{shift, {}};
    seg.batches.reserve(spec.batches_per_shift);
    for (std::size_t b = 0; b < spec.batches_per_shift; ++b) {
      LabeledBatch clean = sample_batch(mixture, priors, spec.batch_size, rng);
      StreamBatch batch;
      batch.x = apply_shift(std::move(clean.x), shift, rng);
      batch.labels = std::move(clean.y);
      seg.batches.push_back(std::move(batch));
    }
    out.push_back(std::move(seg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr double kKlSmoothing = 1e-12;

struct MetricsReport {
  std::size_t samples = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Vector per_class_f1;
  double marginal_entropy = 0.0;
  double kl_output_vs_label = 0.0;
  Vector sorted_class_proportions;
  double avg_max_prob = 0.0;
};

/// KL(p || q) after adding `eps` to every entry of both and renormalizing.
inline double kl_divergence(std::span<const double> p, std::span<const double> q,
                            double eps = kKlSmoothing) {
  if (p.size() != q.size() || p.empty()) {
    throw std::invalid_argument("kl_divergence: lengths differ or empty");
  }
  double zp = 0.0;
  double zq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    zp += p[i] + eps;
    zq += q[i] + eps;
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = (p[i] + eps) / zp;
    const double qi = (q[i] + eps) / zq;
    kl += pi * std::log(pi / qi);
  }
  return std::max(kl, 0.0);
}

/// Mean of probability rows.
inline Vector mean_prediction(std::span<const Vector> preds) {
  if (preds.empty()) {
    throw std::invalid_argument("mean_prediction of no samples");
  }
  Vector mean(preds.front().size(), 0.0);
  for (const auto& p : preds) {
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] += p[i];
    }
  }
  for (double& v : mean) {
    v /= static_cast<double>(preds.size());
  }
  return mean;
}

inline MetricsReport metrics(std::span<const Vector> preds, std::span<const std::size_t> labels) {
  if (preds.empty() || preds.size() != labels.size()) {
    throw std::invalid_argument("metrics needs one label per prediction and at least one sample");
  }
  const std::size_t c = preds.front().size();
  const auto n = static_cast<double>(preds.size());
  MetricsReport r;
  r.samples = preds.size();

  std::vector<double> tp(c, 0.0), fp(c, 0.0), fn(c, 0.0), pred_count(c, 0.0), label_count(c, 0.0);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].size() != c) {
      throw std::invalid_argument("metrics: prediction rows differ in length");
    }
    if (labels[s] >= c) {
      throw std::invalid_argument("metrics: label out of range");
    }
    const std::size_t k = argmax(preds[s].span());
    r.avg_max_prob += preds[s][k];
    pred_count[k] += 1.0;
    label_count[labels[s]] += 1.0;
    if (k == labels[s]) {
      ++correct;
      tp[k] += 1.0;
    } else {
      fp[k] += 1.0;
      fn[labels[s]] += 1.0;
    }
  }
  r.accuracy = static_cast<double>(correct) / n;
  r.avg_max_prob /= n;

  r.per_class_f1 = Vector(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    const double denom = 2.0 * tp[k] + fp[k] + fn[k];
    r.per_class_f1[k] = denom > 0.0 ? 2.0 * tp[k] / denom : 0.0;
    r.macro_f1 += r.per_class_f1[k];
  }
  r.macro_f1 /= static_cast<double>(c);

  const Vector marginal = mean_prediction(preds);
  for (double v : marginal) {
    if (v > 0.0) {
      r.marginal_entropy -= v * std::log(v);
    }
  }
  r.marginal_entropy = std::clamp(r.marginal_entropy, 0.0, std::log(static_cast<double>(c)));

  Vector label_marginal(c);
  for (std::size_t k = 0; k < c; ++k) {
    label_marginal[k] = label_count[k] / n;
  }
  r.kl_output_vs_label = kl_divergence(marginal.span(), label_marginal.span());

  std::vector<double> props(c);
  for (std::size_t k = 0; k < c; ++k) {
    props[k] = pred_count[k] / n;
  }
  std::sort(props.begin(), props.end(), std::greater<>());
  r.sorted_class_proportions = Vector(std::move(props));
  return r;
}

/// Heuristic starting temperature from source confidence on target data:
/// clamp(a + b * avg_max_prob, 0.1, alpha > 0 ? 2 / alpha : 2).
struct TauHeuristic {
  double intercept = 0.5;
  double slope = 1.5;
};

inline double suggest_tau(double avg_max_prob, double alpha, TauHeuristic h = {}) {
  if (!(avg_max_prob >= 0.0 && avg_max_prob <= 1.0)) {
    throw std::invalid_argument("avg_max_prob must lie in [0, 1]");
  }
  const double hi = alpha > 0.0 ? 2.0 / alpha : 2.0;
  return std::clamp(h.intercept + h.slope * avg_max_prob, std::min(0.1, hi), hi);
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct ShiftOutcome {
  ShiftSpec shift;
  MetricsReport report;
  std::vector<BatchTrace> trace;
};

template <std::size_t Depth>
struct ProtocolResult {
  std::vector<ShiftOutcome> shifts;
  MetricsReport overall;
  /// All online predictions and labels in stream order.
  std::vector<Vector> predictions;
  std::vector<std::size_t> labels;
  FeedForward<Depth> final_model;
};

/// single_domain: every shift starts from a copy of the source model and a
/// fresh copy of the plugin. continual: one model and one plugin state run
/// through the whole sequence. Metrics are computed on online predictions.
template <std::size_t Depth>
ProtocolResult<Depth> run_protocol(const FeedForward<Depth>& source,
                                   const std::vector<ShiftSegment>& stream,
                                   ProtocolMode mode, const LossPlugin& plugin,
                                   const AdaptConfig& cfg) {
  if (stream.empty()) {
    throw std::invalid_argument("run_protocol needs a nonempty stream");
  }
  ProtocolResult<Depth> out;
  FeedForward<Depth> model = source;
  LossPlugin running = plugin;
  for (const ShiftSegment& seg : stream) {
    if (mode == ProtocolMode::single_domain) {
      model = source;
      running = plugin;
    }
    auto res = adapt_stream(model, std::span<const StreamBatch>(seg.batches), running, cfg);
    ShiftOutcome so{seg.shift, metrics(res.predictions, res.labels), std::move(res.trace)};
    out.shifts.push_back(std::move(so));
    out.predictions.insert(out.predictions.end(), std::make_move_iterator(res.predictions.begin()),
                           std::make_move_iterator(res.predictions.end()));
    out.labels.insert(out.labels.end(), res.labels.begin(), res.labels.end());
    model = std::move(res.model);
  }
  out.overall = metrics(out.predictions, out.labels);
  out.final_model = std::move(model);
  return out;
}

/// Accuracy restricted to the rows where mask is true.
inline double masked_accuracy(std::span<const Vector> preds, std::span<const std::size_t> labels,
                              const std::vector<bool>& mask) {
  std::size_t hit = 0;
  std::size_t total = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (!mask[s]) {
      continue;
    }
    ++total;
    if (argmax(preds[s].span()) == labels[s]) {
      ++hit;
    }
  }
  if (total == 0) {
    throw std::invalid_argument("masked_accuracy: empty subset");
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

/// Bernoulli(fraction) row mask; at least one row is always selected.
inline std::vector<bool> subset_mask(std::size_t n, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("subset fraction must lie in (0, 1]");
  }
  std::vector<bool> mask(n, false);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    mask[i] = rng.uniform() < fraction;
    any = any || mask[i];
  }
  if (!any && n > 0) {
    mask[rng.index(n)] = true;
  }
  return mask;
}

} // namespace demkit
