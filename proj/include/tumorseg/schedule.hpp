#pragma once

// Learning-rate schedules: linear warm-up, then cosine annealing over
// batches or polynomial decay over epochs.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tumorseg/core/error.hpp"

namespace tumorseg {

// eta_t = 0.5 (1 + cos(t pi / T)) eta; zero past the end.
inline double cosine_lr(double t, double T, double eta) {
  if (T <= 0 || t >= T) return 0.0;
  return 0.5 * (1.0 + std::cos(std::max(t, 0.0) * std::numbers::pi / T)) * eta;
}

// eta_0 (1 - e / N_e)^power; zero past the end.
inline double poly_lr(double e, double n_e, double eta0, double power = 0.9) {
  if (n_e <= 0 || e >= n_e) return 0.0;
  return eta0 * std::pow(1.0 - std::max(e, 0.0) / n_e, power);
}

inline double warmup_lr(double progress, double eta_base) { return std::clamp(progress, 0.0, 1.0) * eta_base; }

enum class ScheduleKind { cosine, polynomial };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::cosine ? "cosine" : "polynomial"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "cosine") return ScheduleKind::cosine;
  if (s == "polynomial" || s == "poly") return ScheduleKind::polynomial;
  throw ConfigError("scheduler.kind: expected cosine|polynomial, got '" + s + "'");
}

struct SchedulerConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  double base_lr = 1e-3;
  int total_epochs = 200;
  int warmup_epochs = 10;
  int batches_per_epoch = 1;  // set from the dataset size when training
  double poly_power = 0.9;

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("scheduler.base_lr: must be > 0");
    if (total_epochs < 1) throw ConfigError("scheduler.total_epochs: must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= total_epochs)
      throw ConfigError("scheduler.warmup_epochs: must satisfy 0 <= warmup_epochs < total_epochs");
    if (batches_per_epoch < 1) throw ConfigError("scheduler.batches_per_epoch: must be >= 1");
    if (!(poly_power > 0)) throw ConfigError("scheduler.poly_power: must be > 0");
  }

  long long warmup_steps() const { return static_cast<long long>(warmup_epochs) * batches_per_epoch; }
  long long total_steps() const { return static_cast<long long>(total_epochs) * batches_per_epoch; }

  // Learning rate for global batch index `step` (0-based). Warm-up batch s
  // uses progress (s + 1) / warmup_steps, so it ends exactly at base_lr,
  // which is also where the main schedule starts.
  double lr_at(long long step) const {
    const long long w = warmup_steps();
    if (step < w) return warmup_lr(static_cast<double>(step + 1) / static_cast<double>(w), base_lr);
    const long long post = step - w;
    if (kind == ScheduleKind::cosine)
      return cosine_lr(static_cast<double>(post), static_cast<double>(total_steps() - w), base_lr);
    const long long epoch = post / batches_per_epoch;
    return poly_lr(static_cast<double>(epoch), static_cast<double>(total_epochs - warmup_epochs), base_lr, poly_power);
  }
};

}  // namespace tumorseg
