#pragma once

// Exhaustive (tau, alpha) grid search for DEM and the learning-rate sweep.
// Grid points are scored independently and may run on several threads; the
// table always comes back in grid order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "demkit/em_losses.hpp"

namespace demkit {

struct GridSpec {
  double tau_min = 0.0;
  double tau_max = 2.0;
  double alpha_min = 0.0;
  double alpha_max = 2.0;
  double step = 0.1;
  double subset_fraction = 0.2;

  void validate() const {
    if (!(step > 0.0)) {
      throw std::invalid_argument("grid step must be > 0");
    }
    if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
      throw std::invalid_argument("subset_fraction must lie in (0, 1]");
    }
    if (!(tau_max >= tau_min) || !(alpha_max >= alpha_min) || tau_min < 0.0 || alpha_min < 0.0) {
      throw std::invalid_argument("grid bounds must be nonnegative with max >= min");
    }
  }
};

struct TrialResult {
  double tau = 0.0;
  double alpha = 0.0;
  bool valid = false;
  std::optional<double> accuracy; // empty for skipped points
};

struct GridSearchResult {
  TrialResult best;
  std::vector<TrialResult> table; // every raw grid point, tau-major order
  std::size_t evaluated = 0;
};

/// Points tested by the search: tau > 0, and alpha == 0 or tau <= 2 / alpha.
inline bool grid_point_admissible(double tau, double alpha) {
  return tau > 0.0 && validate_config(tau, alpha);
}

/// Worker count: DEMKIT_THREADS if set and positive, else hardware threads.
inline std::size_t configured_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DEMKIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) {
      n = static_cast<std::size_t>(v);
    }
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The first exception
/// thrown by any call is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) {
            failure = std::current_exception();
          }
          next.store(n);
        }
      }
    });
  }
  for (auto& th : pool) {
    th.join();
  }
  if (failure) {
    std::rethrow_exception(failure);
  }
}

namespace detail {

/// True when a beats b: higher accuracy, then smaller |tau - 1|, then smaller
/// |alpha - 1|. Remaining ties keep the earlier grid point.
inline bool better_trial(const TrialResult& a, const TrialResult& b) {
  if (*a.accuracy != *b.accuracy) {
    return *a.accuracy > *b.accuracy;
  }
  const double da = std::abs(a.tau - 1.0);
  const double db = std::abs(b.tau - 1.0);
  if (da != db) {
    return da < db;
  }
  return std::abs(a.alpha - 1.0) < std::abs(b.alpha - 1.0);
}

} // namespace detail

/// Scores every admissible grid point with score(tau, alpha) and returns the
/// best one. Throws InvalidHyperparameters if no point is admissible.
template <class Score>
GridSearchResult grid_search(Score&& score, const GridSpec& grid,
                             std::size_t threads = configured_threads()) {
  grid.validate();
  const std::vector<double> taus = linear_grid(grid.tau_min, grid.tau_max, grid.step);
  const std::vector<double> alphas = linear_grid(grid.alpha_min, grid.alpha_max, grid.step);

  GridSearchResult out;
  out.table.reserve(taus.size() * alphas.size());
  std::vector<std::size_t> todo;
  for (double tau : taus) {
    for (double alpha : alphas) {
      TrialResult r{tau, alpha, grid_point_admissible(tau, alpha), std::nullopt};
      if (r.valid) {
        todo.push_back(out.table.size());
      }
      out.table.push_back(r);
    }
  }
  if (todo.empty()) {
    throw InvalidHyperparameters("grid contains no admissible (tau, alpha) point");
  }
  parallel_for(todo.size(), threads, [&](std::size_t i) {
    TrialResult& r = out.table[todo[i]];
    r.accuracy = score(r.tau, r.alpha);
  });
  out.evaluated = todo.size();

  const TrialResult* best = nullptr;
  for (std::size_t idx : todo) {
    const TrialResult& r = out.table[idx];
    if (best == nullptr || detail::better_trial(r, *best)) {
      best = &r;
    }
  }
  out.best = *best;
  return out;
}

/// Learning rates 1e-4 ... 1e-1 used for sensitivity sweeps.
inline const std::vector<double>& default_lr_grid() {
  static const std::vector<double> lrs{1e-4, 2.5e-4, 5e-4, 1e-3, 2.5e-3,
                                       5e-3, 1e-2,   2.5e-2, 5e-2, 1e-1};
  return lrs;
}

struct LrPoint {
  double lr = 0.0;
  double accuracy = 0.0;
};

struct LrSweepResult {
  double baseline = 0.0; // accuracy with lr = 0 (no adaptation)
  std::vector<LrPoint> table;
  std::size_t tolerance_count = 0; // lrs with accuracy >= baseline
};

/// One run per learning rate plus an lr = 0 baseline run.
template <class Score>
LrSweepResult lr_sweep(Score&& score, const std::vector<double>& lrs,
                       std::size_t threads = configured_threads()) {
  if (lrs.empty()) {
    throw std::invalid_argument("lr_sweep needs at least one learning rate");
  }
  for (double lr : lrs) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
      throw std::invalid_argument("learning rates must be finite and >= 0");
    }
  }
  LrSweepResult out;
  std::vector<double> acc(lrs.size() + 1);
  parallel_for(acc.size(), threads, [&](std::size_t i) {
    acc[i] = score(i == 0 ? 0.0 : lrs[i - 1]);
  });
  out.baseline = acc[0];
  for (std::size_t i = 0; i < lrs.size(); ++i) {
    out.table.push_back({lrs[i], acc[i + 1]});
    if (acc[i + 1] >= out.baseline) {
      ++out.tolerance_count;
    }
  }
  return out;
}

} // namespace demkit
