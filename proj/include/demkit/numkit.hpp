#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace demkit {

/// Dense vector of doubles. Holds logits, probabilities and parameter rows.
class Vector {
public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> xs) : data_(xs) {}
  explicit Vector(std::vector<double> xs) : data_(std::move(xs)) {}
  explicit Vector(std::span<const double> xs) : data_(xs.begin(), xs.end()) {}

  /// Construction path for user-supplied data: rejects empty input and NaN/Inf.
  static Vector checked(std::vector<double> xs) {
    if (xs.empty()) {
      throw std::domain_error("vector must have at least one entry");
    }
    for (double x : xs) {
      if (!std::isfinite(x)) {
        throw std::domain_error("vector entries must be finite");
      }
    }
    return Vector(std::move(xs));
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Vector&, const Vector&) = default;

private:
  std::vector<double> data_;
};

/// Row-major dense matrix.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix data length must equal rows * cols");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// xoshiro256** seeded through splitmix64. Normals come from the Box-Muller
/// transform and uniforms from the top 53 bits, so streams do not depend on
/// the standard library's distribution implementations.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : s_) {
      s = splitmix64(sm);
    }
  }

  std::uint64_t seed() const noexcept { return seed_; }

  /// Independent generator for a sub-stream: seed xor a scrambled stream id.
  Rng split(std::uint64_t stream_id) const noexcept {
    std::uint64_t sm = stream_id;
    return Rng(seed_ ^ splitmix64(sm));
  }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by rejection, no modulo bias.
  std::size_t index(std::size_t n) {
    if (n == 0) {
      throw std::domain_error("index range must be nonempty");
    }
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = next_u64();
    while (x >= limit) {
      x = next_u64();
    }
    return static_cast<std::size_t>(x % bound);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
      u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  /// Draws an index from a (not necessarily normalized) nonnegative weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
      total += w;
    }
    if (!(total > 0.0)) {
      throw std::domain_error("categorical weights must have positive mass");
    }
    const double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      acc += weights[i];
      if (u < acc) {
        return i;
      }
    }
    // u landed in the rounding gap at the top; return the last positive entry.
    for (std::size_t i = weights.size(); i-- > 0;) {
      if (weights[i] > 0.0) {
        return i;
      }
    }
    return weights.size() - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& xs) {
    for (std::size_t i = xs.size(); i > 1; --i) {
      std::swap(xs[i - 1], xs[index(i)]);
    }
  }

private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t s_[4]{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

inline double logsumexp(std::span<const double> z) {
  if (z.empty()) {
    throw std::domain_error("logsumexp of an empty vector");
  }
  const double m = *std::max_element(z.begin(), z.end());
  double acc = 0.0;
  for (double v : z) {
    acc += std::exp(v - m);
  }
  return m + std::log(acc);
}

inline double logsumexp(const Vector& z) { return logsumexp(z.span()); }

/// log softmax(z), computed as z - logsumexp(z).
inline Vector log_softmax(std::span<const double> z) {
  const double lse = logsumexp(z);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = z[i] - lse;
  }
  return out;
}

inline Vector softmax(std::span<const double> z) {
  Vector out = log_softmax(z);
  for (double& v : out) {
    v = std::exp(v);
  }
  return out;
}

inline Vector softmax(const Vector& z) { return softmax(z.span()); }

/// softmax(z / tau).
inline Vector tempered_softmax(std::span<const double> z, double tau) {
  if (!(tau > 0.0)) {
    throw std::domain_error("temperature must be positive");
  }
  std::vector<double> scaled(z.begin(), z.end());
  for (double& v : scaled) {
    v /= tau;
  }
  return softmax(std::span<const double>(scaled));
}

inline Vector tempered_softmax(const Vector& z, double tau) {
  return tempered_softmax(z.span(), tau);
}

/// Index of the largest entry; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) {
    if (xs[i] > xs[best]) {
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

inline constexpr double kDefaultFdStep = 1e-5;

/// Central-difference gradient of a scalar function. A non-finite function
/// value aborts with std::domain_error.
template <class F>
Vector finite_diff_grad(F&& f, const Vector& z, double h = kDefaultFdStep) {
  if (!(h > 0.0)) {
    throw std::domain_error("finite-difference step must be positive");
  }
  Vector probe = z;
  Vector grad(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(static_cast<const Vector&>(probe));
    probe[i] = orig - h;
    const double down = f(static_cast<const Vector&>(probe));
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw std::domain_error("function value is not finite at coordinate " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// |a - b| / max(1, |a|, |b|)
inline double rel_error(double a, double b) noexcept {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("max_rel_error: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, rel_error(a[i], b[i]));
  }
  return worst;
}

inline double max_rel_error(const Vector& a, const Vector& b) {
  return max_rel_error(a.span(), b.span());
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("max_abs_diff: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  return worst;
}

inline double max_abs_diff(const Vector& a, const Vector& b) {
  return max_abs_diff(a.span(), b.span());
}

} // namespace demkit
