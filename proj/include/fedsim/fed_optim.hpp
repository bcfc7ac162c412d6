#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/param_store.hpp"

namespace fedsim {

// Server-side optimization. Clients report pseudo-gradients
// delta_i = w_global - w_local after local training; the server combines them
// into a sample-weighted mean and applies one of the server rules below.

struct ClientUpdate {
  int client_id = 0;
  uint64_t sample_count = 0;
  ParameterSet delta;
  double mean_loss = 0.0;
};

// Sample-weighted mean of client deltas: sum_i (n_i / n) * delta_i.
inline ParameterSet aggregate(std::span<const ClientUpdate> updates) {
  if (updates.empty()) throw EmptyRound("no client updates to aggregate");
  uint64_t total = 0;
  for (const auto& u : updates) total += u.sample_count;
  if (total == 0) throw EmptyRound("all client updates report zero samples");
  for (size_t i = 1; i < updates.size(); ++i) {
    require_same_structure(updates[0].delta, updates[i].delta, "aggregate");
  }
  ParameterSet out = zeros_like(updates[0].delta);
  const double n = static_cast<double>(total);
  for (const auto& u : updates) {
    const double w = static_cast<double>(u.sample_count) / n;
    for (size_t e = 0; e < out.size(); ++e) {
      const auto& src = u.delta.entries()[e].values;
      auto& dst = out.entries()[e].values;
      for (size_t j = 0; j < dst.size(); ++j) dst[j] += w * src[j];
    }
  }
  return out;
}

enum class ServerOptKind { kFedAvg, kFedAvgM, kFedAdagrad, kFedAdam, kFedYogi };

inline const char* to_string(ServerOptKind k) {
  switch (k) {
    case ServerOptKind::kFedAvg: return "fedavg";
    case ServerOptKind::kFedAvgM: return "fedavgm";
    case ServerOptKind::kFedAdagrad: return "fedadagrad";
    case ServerOptKind::kFedAdam: return "fedadam";
    case ServerOptKind::kFedYogi: return "fedyogi";
  }
  return "?";
}

inline ServerOptKind server_opt_kind_from_string(const std::string& s) {
  if (s == "fedavg") return ServerOptKind::kFedAvg;
  if (s == "fedavgm") return ServerOptKind::kFedAvgM;
  if (s == "fedadagrad") return ServerOptKind::kFedAdagrad;
  if (s == "fedadam") return ServerOptKind::kFedAdam;
  if (s == "fedyogi") return ServerOptKind::kFedYogi;
  throw ConfigError("unknown server optimizer '" + s + "'");
}

struct ServerOptConfig {
  ServerOptKind kind = ServerOptKind::kFedAvg;
  double lr = 1.0;        // server step size
  double momentum = 0.0;  // beta, fedavgm only
  double beta1 = 0.9;     // first-moment decay, adaptive family
  double beta2 = 0.99;    // second-moment decay, adaptive family
  double tau = 1e-3;      // adaptivity floor

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
      throw InvalidHyperparameter("server lr must be positive, got " + std::to_string(lr));
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw InvalidHyperparameter("server momentum must be in [0,1), got " +
                                  std::to_string(momentum));
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0)) {
      throw InvalidHyperparameter("beta1 must be in [0,1), got " + std::to_string(beta1));
    }
    if (!(beta2 >= 0.0 && beta2 < 1.0)) {
      throw InvalidHyperparameter("beta2 must be in [0,1), got " + std::to_string(beta2));
    }
    if (!(tau > 0.0)) {
      throw InvalidHyperparameter("tau must be positive, got " + std::to_string(tau));
    }
  }
};

// Holds the slow state (server momentum / moment estimates) between rounds.
// Copyable, so snapshots of optimizer state are plain value copies.
class ServerOptimizer {
 public:
  ServerOptimizer(ServerOptConfig cfg, const ParameterSet& shape) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.kind != ServerOptKind::kFedAvg) momentum_ = zeros_like(shape);
    if (is_adaptive()) accumulator_ = zeros_like(shape);
  }

  const ServerOptConfig& config() const { return cfg_; }
  const ParameterSet& momentum_state() const { return momentum_; }
  const ParameterSet& accumulator_state() const { return accumulator_; }

  // Applies one server update and returns the new global weights.
  ParameterSet step(const ParameterSet& w, const ParameterSet& delta) {
    require_same_structure(w, delta, "server step");
    switch (cfg_.kind) {
      case ServerOptKind::kFedAvg: {
        return axpy(w, -cfg_.lr, delta);
      }
      case ServerOptKind::kFedAvgM: {
        require_same_structure(w, momentum_, "server momentum");
        ParameterSet out = w;
        for (size_t e = 0; e < out.size(); ++e) {
          auto& v = momentum_.entries()[e].values;
          const auto& d = delta.entries()[e].values;
          auto& wv = out.entries()[e].values;
          for (size_t j = 0; j < v.size(); ++j) {
            v[j] = cfg_.momentum * v[j] + d[j];
            wv[j] -= cfg_.lr * v[j];
          }
        }
        return out;
      }
      default: {
        require_same_structure(w, momentum_, "server momentum");
        ParameterSet out = w;
        for (size_t e = 0; e < out.size(); ++e) {
          auto& m = momentum_.entries()[e].values;
          auto& s = accumulator_.entries()[e].values;
          const auto& d = delta.entries()[e].values;
          auto& wv = out.entries()[e].values;
          for (size_t j = 0; j < m.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * d[j];
            const double d2 = d[j] * d[j];
            switch (cfg_.kind) {
              case ServerOptKind::kFedAdagrad:
                s[j] += d2;
                break;
              case ServerOptKind::kFedAdam:
                s[j] = cfg_.beta2 * s[j] + (1.0 - cfg_.beta2) * d2;
                break;
              case ServerOptKind::kFedYogi: {
                const double diff = s[j] - d2;
                const double sgn = (diff > 0.0) - (diff < 0.0);
                s[j] -= (1.0 - cfg_.beta2) * d2 * sgn;
                break;
              }
              default: break;
            }
            wv[j] -= cfg_.lr * m[j] / (std::sqrt(s[j]) + cfg_.tau);
          }
        }
        return out;
      }
    }
  }

 private:
  bool is_adaptive() const {
    return cfg_.kind == ServerOptKind::kFedAdagrad || cfg_.kind == ServerOptKind::kFedAdam ||
           cfg_.kind == ServerOptKind::kFedYogi;
  }

  ServerOptConfig cfg_;
  ParameterSet momentum_;
  ParameterSet accumulator_;
};

}  // namespace fedsim
