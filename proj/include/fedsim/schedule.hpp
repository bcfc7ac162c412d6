#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/param_store.hpp"

namespace fedsim {

// Local training configuration. The schedule spans the whole federated run:
// rounds * epochs_per_round epochs, indexed by a global epoch counter that
// clients carry across rounds.

enum class LocalMode {
  kFixedLr,   // plain SGD at a constant rate, no momentum, no decay
  kOneCycle,  // warmup + cosine schedule, Nesterov momentum, weight decay
};

inline const char* to_string(LocalMode m) {
  return m == LocalMode::kFixedLr ? "fixed" : "onecycle";
}

inline LocalMode local_mode_from_string(const std::string& s) {
  if (s == "fixed") return LocalMode::kFixedLr;
  if (s == "onecycle") return LocalMode::kOneCycle;
  throw ConfigError("unknown local mode '" + s + "'");
}

struct TrainConfig {
  int rounds = 1;            // R
  int epochs_per_round = 1;  // E
  int batch_size = 32;       // B
  LocalMode mode = LocalMode::kFixedLr;

  double fixed_lr = 0.01;

  // One-cycle parameters. Per-group warmup starts, shared peak and floor.
  int warmup_epochs = 3;
  double lr_bias_init = 0.1;
  double lr_other_init = 0.0;
  double lr_peak = 0.01;
  double lr_final = 0.001;
  double momentum_init = 0.8;
  double momentum_final = 0.937;
  double weight_decay = 0.0005;

  int total_epochs() const { return rounds * epochs_per_round; }

  void validate() const {
    if (rounds < 1) throw InvalidHyperparameter("rounds must be >= 1");
    if (epochs_per_round < 1) throw InvalidHyperparameter("epochs_per_round must be >= 1");
    if (batch_size < 1) throw InvalidHyperparameter("batch_size must be >= 1");
    if (mode == LocalMode::kFixedLr) {
      if (!(fixed_lr > 0.0)) throw InvalidHyperparameter("fixed_lr must be positive");
      return;
    }
    if (warmup_epochs < 0 || warmup_epochs > total_epochs()) {
      throw InvalidHyperparameter("warmup_epochs must lie in [0, rounds*epochs_per_round]");
    }
    if (!(lr_peak > 0.0) || !(lr_final > 0.0)) {
      throw InvalidHyperparameter("lr_peak and lr_final must be positive");
    }
    if (lr_bias_init < 0.0 || lr_other_init < 0.0) {
      throw InvalidHyperparameter("warmup start rates must be non-negative");
    }
    if (!(momentum_init >= 0.0 && momentum_init < 1.0) ||
        !(momentum_final >= 0.0 && momentum_final < 1.0)) {
      throw InvalidHyperparameter("momentum values must be in [0,1)");
    }
    if (weight_decay < 0.0) throw InvalidHyperparameter("weight_decay must be >= 0");
  }
};

struct GroupLr {
  double bias = 0.0;
  double norm = 0.0;
  double decay = 0.0;

  double for_group(ParamGroup g) const {
    switch (g) {
      case ParamGroup::kBias: return bias;
      case ParamGroup::kNorm: return norm;
      case ParamGroup::kDecay: return decay;
    }
    return 0.0;
  }
};

struct SchedulePoint {
  GroupLr lr;
  double momentum = 0.0;
};

// Learning rate and momentum at a global epoch. Warmup interpolates linearly
// from per-group starts to the shared peak; afterwards a half-cosine decays
// the rate to lr_final at the last epoch. The schedule depends only on
// (config, epoch), so resuming mid-run reproduces it exactly.
inline SchedulePoint schedule_at(const TrainConfig& cfg, int global_epoch) {
  cfg.validate();
  const int total = cfg.total_epochs();
  if (global_epoch < 0 || global_epoch >= total) {
    throw EpochOutOfRange("epoch " + std::to_string(global_epoch) + " outside [0, " +
                          std::to_string(total) + ")");
  }
  if (cfg.mode == LocalMode::kFixedLr) {
    return {{cfg.fixed_lr, cfg.fixed_lr, cfg.fixed_lr}, 0.0};
  }
  const int w = cfg.warmup_epochs;
  if (global_epoch < w) {
    const double f = static_cast<double>(global_epoch) / static_cast<double>(w);
    SchedulePoint p;
    p.lr.bias = cfg.lr_bias_init + f * (cfg.lr_peak - cfg.lr_bias_init);
    p.lr.norm = cfg.lr_other_init + f * (cfg.lr_peak - cfg.lr_other_init);
    p.lr.decay = cfg.lr_other_init + f * (cfg.lr_peak - cfg.lr_other_init);
    p.momentum = cfg.momentum_init + f * (cfg.momentum_final - cfg.momentum_init);
    return p;
  }
  // Cosine section. progress is 0 at the first post-warmup epoch and 1 at the
  // final epoch of the run.
  const int span = total - 1 - w;
  const double progress =
      span > 0 ? static_cast<double>(global_epoch - w) / static_cast<double>(span) : 1.0;
  const double cosine = (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
  const double rate = cfg.lr_final + (cfg.lr_peak - cfg.lr_final) * cosine;
  return {{rate, rate, rate}, cfg.momentum_final};
}

}  // namespace fedsim
