#pragma once

// Entropy-minimization losses on a single logit vector: conditional entropy,
// its decoupled parts (CADF = -sum p_i z_i and GMC = logsumexp z), the
// tempered/weighted DEM combination and the temperature validity bound.
// Every *_eval returns the loss value together with d loss / d z.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "demkit/numkit.hpp"

namespace demkit {

/// Raised for (tau, alpha) pairs outside 0 < tau <= 2 / alpha.
class InvalidHyperparameters : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Logit vector with at least two finite entries.
class Logits {
public:
  explicit Logits(Vector z) : z_(std::move(z)) {
    if (z_.size() < 2) {
      throw std::domain_error("logits need at least two classes");
    }
    if (!z_.all_finite()) {
      throw std::domain_error("logits must be finite");
    }
  }
  Logits(std::initializer_list<double> z) : Logits(Vector(z)) {}
  explicit Logits(std::span<const double> z) : Logits(Vector(z)) {}

  std::size_t classes() const noexcept { return z_.size(); }
  double operator[](std::size_t i) const noexcept { return z_[i]; }
  const Vector& vec() const noexcept { return z_; }
  std::span<const double> span() const noexcept { return z_.span(); }

private:
  Vector z_;
};

struct LossEval {
  double value = 0.0;
  Vector grad;
};

enum class Direction { minimize, maximize };

inline LossEval apply_direction(LossEval e, Direction dir) {
  if (dir == Direction::maximize) {
    e.value = -e.value;
    for (double& g : e.grad) {
      g = -g;
    }
  }
  return e;
}

struct DemConfig {
  double tau = 1.0;
  double alpha = 1.0;
  Direction direction = Direction::minimize;
};

inline constexpr double kValidityTolerance = 1e-12;

/// True iff tau > 0 and (alpha == 0 or tau <= 2 / alpha). alpha = 0 is the
/// pure-CADF ablation and bypasses the upper bound.
inline bool validate_config(double tau, double alpha) noexcept {
  if (!(tau > 0.0) || !std::isfinite(tau) || !(alpha >= 0.0) || !std::isfinite(alpha)) {
    return false;
  }
  if (alpha == 0.0) {
    return true;
  }
  return tau <= 2.0 / alpha + kValidityTolerance;
}

inline void require_valid(const DemConfig& cfg) {
  if (validate_config(cfg.tau, cfg.alpha)) {
    return;
  }
  std::ostringstream msg;
  msg.precision(9);
  if (!(cfg.tau > 0.0)) {
    msg << "invalid DEM temperature: tau = " << cfg.tau << " violates tau > 0";
  } else if (!(cfg.alpha >= 0.0)) {
    msg << "invalid DEM weight: alpha = " << cfg.alpha << " must be >= 0";
  } else {
    msg << "invalid DEM hyperparameters: tau = " << cfg.tau << " exceeds 2/alpha = "
        << 2.0 / cfg.alpha << " (alpha = " << cfg.alpha << "); valid range is 0 < tau <= 2/alpha";
  }
  throw InvalidHyperparameters(msg.str());
}

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

} // namespace detail

/// Shannon entropy of softmax(z), evaluated from log-probabilities.
inline double conditional_entropy(const Logits& z) {
  const Vector logp = log_softmax(z.span());
  double h = 0.0;
  for (double lp : logp) {
    h -= std::exp(lp) * lp;
  }
  return h;
}

/// T(z) = -sum_i p_i z_i
inline double cadf(const Logits& z) {
  const Vector p = softmax(z.span());
  return -detail::dot(p.span(), z.span());
}

/// Q(z) = logsumexp(z)
inline double gmc(const Logits& z) { return logsumexp(z.span()); }

/// R_T,i = -dT/dz_i = p_i (T + z_i + 1). T + z_i is shift invariant, so it is
/// formed from max-shifted logits; equal logits then give exactly p_i.
inline Vector cadf_reward(const Logits& z) {
  const Vector p = softmax(z.span());
  const double top = *std::max_element(z.span().begin(), z.span().end());
  Vector shifted(z.classes());
  for (std::size_t i = 0; i < shifted.size(); ++i) {
    shifted[i] = z[i] - top;
  }
  const double t = -detail::dot(p.span(), shifted.span());
  Vector r(z.classes());
  for (std::size_t i = 0; i < r.size(); ++i) {
    r[i] = p[i] * (t + shifted[i] + 1.0);
  }
  return r;
}

/// R_Q,i = -dQ/dz_i = -p_i
inline Vector gmc_reward(const Logits& z) {
  Vector r = softmax(z.span());
  for (double& v : r) {
    v = -v;
  }
  return r;
}

/// Classical entropy loss. The gradient is assembled from the two decoupled
/// rewards: dH/dz = -(R_T + R_Q).
inline LossEval em_eval(const Logits& z, Direction dir = Direction::minimize) {
  const Vector rt = cadf_reward(z);
  const Vector rq = gmc_reward(z);
  LossEval out{conditional_entropy(z), Vector(z.classes())};
  for (std::size_t i = 0; i < rt.size(); ++i) {
    out.grad[i] = -(rt[i] + rq[i]);
  }
  return apply_direction(std::move(out), dir);
}

/// Detached surrogate -sum (p_i - sg(p)_i) z_i, where sg(p) is a constant copy
/// of p. Its value is zero at the evaluation point; its gradient equals the
/// entropy gradient. The gradient is taken through the softmax Jacobian
/// J_ij = p_i (delta_ij - p_j) rather than the closed form used by em_eval.
inline LossEval detached_em_eval(const Logits& z) {
  const std::size_t c = z.classes();
  const Vector p = softmax(z.span());
  const Vector frozen = p;
  LossEval out{0.0, Vector(c)};
  for (std::size_t i = 0; i < c; ++i) {
    out.value -= (p[i] - frozen[i]) * z[i];
  }
  for (std::size_t j = 0; j < c; ++j) {
    double jt_z = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      const double jac = p[i] * ((i == j ? 1.0 : 0.0) - p[j]);
      jt_z += jac * z[i];
    }
    out.grad[j] = -jt_z - (p[j] - frozen[j]);
  }
  return out;
}

/// T_tau(z) = -sum_i softmax(z / tau)_i z_i with
/// dT_tau/dz_i = -(1/tau) p_tau,i (T_tau + z_i + tau).
inline LossEval cadf_tempered_eval(const Logits& z, double tau) {
  if (!(tau > 0.0)) {
    throw std::domain_error("temperature must be positive");
  }
  const Vector pt = tempered_softmax(z.span(), tau);
  const double t = -detail::dot(pt.span(), z.span());
  LossEval out{t, Vector(z.classes())};
  for (std::size_t i = 0; i < pt.size(); ++i) {
    out.grad[i] = -(pt[i] / tau) * (t + z[i] + tau);
  }
  return out;
}

/// DEM: T_tau(z) + alpha * Q(z).
inline LossEval dem_eval(const Logits& z, const DemConfig& cfg) {
  require_valid(cfg);
  LossEval out = cadf_tempered_eval(z, cfg.tau);
  out.value += cfg.alpha * gmc(z);
  if (cfg.alpha != 0.0) {
    const Vector p = softmax(z.span());
    for (std::size_t i = 0; i < p.size(); ++i) {
      out.grad[i] += cfg.alpha * p[i];
    }
  }
  return apply_direction(std::move(out), cfg.direction);
}

/// d^2 H_DEM / dz_i^2 at uniform logits: (1 - 1/C)(alpha/C - 2/(tau C)).
inline double boundary_second_derivative(double tau, double alpha, std::size_t classes) {
  if (!(tau > 0.0)) {
    throw std::domain_error("temperature must be positive");
  }
  if (classes < 2) {
    throw std::domain_error("need at least two classes");
  }
  const double c = static_cast<double>(classes);
  return (1.0 - 1.0 / c) * (alpha / c - 2.0 / (tau * c));
}

struct RewardPoint {
  double m = 0.0;
  double p_max = 0.0;
  double reward = 0.0;
};

/// Reward of the leading class along z = (m, 0, ..., 0).
inline std::vector<RewardPoint> reward_curve(std::size_t classes, const DemConfig& cfg,
                                             std::span<const double> m_grid) {
  if (classes < 2) {
    throw std::domain_error("need at least two classes");
  }
  require_valid(cfg);
  std::vector<RewardPoint> out;
  out.reserve(m_grid.size());
  Vector z(classes, 0.0);
  for (double m : m_grid) {
    z[0] = m;
    const Logits logits(z);
    const LossEval e = dem_eval(logits, cfg);
    out.push_back({m, softmax(z)[0], -e.grad[0]});
  }
  return out;
}

/// Inclusive arithmetic grid lo, lo + step, ... up to hi (with 1e-9 slack).
inline std::vector<double> linear_grid(double lo, double hi, double step) {
  if (!(step > 0.0) || !(hi >= lo)) {
    throw std::invalid_argument("grid needs step > 0 and hi >= lo");
  }
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = lo + static_cast<double>(i) * step;
  }
  return out;
}

} // namespace demkit
