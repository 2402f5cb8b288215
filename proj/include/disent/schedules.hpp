#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

#include "disent/tensor.hpp"

namespace disent {

namespace detail {

inline double linear_ramp(double start, double end, std::uint64_t ramp_iters, std::uint64_t iter) {
  if (iter >= ramp_iters) return end;
  const double t = static_cast<double>(iter) / static_cast<double>(ramp_iters);
  return start + (end - start) * t;
}

}  // namespace detail

/// Target KL level C, ramped linearly from c_start to c_max.
struct CapacitySchedule {
  double c_start = 0.0;
  double c_max = 25.0;
  std::uint64_t ramp_iters = 1;

  void validate() const {
    if (!(c_start >= 0.0) || !(c_max >= c_start)) throw ConfigError("capacity schedule requires 0 <= c_start <= c_max");
    if (ramp_iters < 1) throw ConfigError("capacity schedule requires ramp_iters >= 1");
  }
};

inline double capacity_at(const CapacitySchedule& s, std::uint64_t iter) {
  return detail::linear_ramp(s.c_start, s.c_max, s.ramp_iters, iter);
}

/// Weight on the reconstruction term, interpolated from w_start to w_end.
struct ReconWeightSchedule {
  double w_start = 1.0;
  double w_end = 1.0;
  std::uint64_t ramp_iters = 1;

  void validate() const {
    if (!(w_start > 0.0) || !(w_end > 0.0)) throw ConfigError("reconstruction weights must be positive");
    if (ramp_iters < 1) throw ConfigError("reconstruction weight schedule requires ramp_iters >= 1");
  }
};

inline double recon_weight_at(const ReconWeightSchedule& s, std::uint64_t iter) {
  if (s.w_start == s.w_end) return s.w_start;
  return detail::linear_ramp(s.w_start, s.w_end, s.ramp_iters, iter);
}

/// Reduce-on-plateau learning-rate state, stepped once per epoch.
struct PlateauLRState {
  double current_lr = 1e-3;
  double factor = 0.95;
  std::uint64_t patience = 3;
  double threshold = 1e-4;  // relative improvement required to reset the counter
  double min_lr = 1e-5;
  double best_value = std::numeric_limits<double>::infinity();
  std::uint64_t epochs_since_best = 0;

  void validate() const {
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0, 1)");
    if (!(min_lr >= 0.0) || !(current_lr >= min_lr)) throw ConfigError("plateau requires 0 <= min_lr <= lr");
    if (!(threshold >= 0.0)) throw ConfigError("plateau threshold must be non-negative");
  }
};

/// Feeds one epoch-mean objective; returns the (possibly reduced) learning rate.
inline double plateau_update(PlateauLRState& s, double epoch_mean_objective) {
  if (std::isnan(epoch_mean_objective)) throw NumericError("plateau_update: NaN epoch objective");
  // First observation (best = +inf) always counts as an improvement.
  const bool improved = std::isinf(s.best_value) ? epoch_mean_objective < s.best_value
                                                 : epoch_mean_objective < s.best_value - std::abs(s.best_value) * s.threshold;
  if (improved) {
    s.best_value = epoch_mean_objective;
    s.epochs_since_best = 0;
  } else {
    s.epochs_since_best += 1;
  }
  if (s.epochs_since_best > s.patience) {
    s.current_lr = std::max(s.current_lr * s.factor, s.min_lr);
    s.epochs_since_best = 0;
  }
  return s.current_lr;
}

}  // namespace disent
