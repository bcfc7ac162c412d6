#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "fedsim/errors.hpp"
#include "fedsim/param_store.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/schedule.hpp"

namespace fedsim {

struct EvalMetrics {
  std::optional<double> loss;
  std::optional<double> accuracy;
  std::optional<double> map;
  std::vector<double> map_per_threshold;

  // Checkpoint selection score: mAP when the task defines one, otherwise
  // negative loss so that lower loss ranks higher.
  double primary() const {
    if (map) return *map;
    if (loss) return -*loss;
    return -std::numeric_limits<double>::infinity();
  }
};

// A task-specific model bound to its local dataset. Implementations must be
// deterministic: identical parameters and batch indices give identical loss,
// gradients and metrics.
class LocalModel {
 public:
  virtual ~LocalModel() = default;

  virtual const ParameterSet& params() const = 0;
  virtual void set_params(ParameterSet p) = 0;
  virtual size_t sample_count() const = 0;

  // Mean loss over the batch; mean gradient accumulated into `grad`, which
  // arrives zeroed with the same structure as params().
  virtual double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const = 0;

  // Metrics over the model's own dataset.
  virtual EvalMetrics evaluate() const = 0;

  // Inference-form weights. Identity for most models; architectures with a
  // separate deploy structure fold branches here.
  virtual ParameterSet reparameterize() const { return params(); }
};

struct TrainOutcome {
  ParameterSet weights;
  uint64_t sample_count = 0;
  double mean_loss = 0.0;
  int epochs_run = 0;
};

// Minibatch SGD over one federated round at a time. Momentum buffers and the
// global epoch counter persist on this object across rounds, so the one-cycle
// schedule continues where the previous round stopped.
class ClientTrainer {
 public:
  ClientTrainer(std::shared_ptr<LocalModel> model, TrainConfig cfg)
      : model_(std::move(model)), cfg_(cfg) {
    cfg_.validate();
  }

  TrainOutcome train_round(uint64_t round_seed) {
    const size_t n = model_->sample_count();
    if (n == 0) throw EmptyDataset("cannot train on an empty dataset");

    if (cfg_.mode == LocalMode::kOneCycle && !momentum_ready_) {
      momentum_ = zeros_like(model_->params());
      momentum_ready_ = true;
    }

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;

    double loss_sum = 0.0;
    const size_t batch = static_cast<size_t>(cfg_.batch_size);
    for (int e = 0; e < cfg_.epochs_per_round; ++e) {
      const SchedulePoint sp = schedule_at(cfg_, global_epoch_);
      DetRng rng(derive_seed(round_seed, "shuffle", static_cast<uint64_t>(global_epoch_)));
      rng.shuffle(order);
      for (size_t start = 0; start < n; start += batch) {
        const size_t len = std::min(batch, n - start);
        const std::span<const size_t> idx(order.data() + start, len);
        ParameterSet grad = zeros_like(model_->params());
        const double bl = model_->batch_loss_grad(idx, grad);
        if (!std::isfinite(bl)) {
          throw DivergedLoss("loss became non-finite at global epoch " +
                             std::to_string(global_epoch_));
        }
        loss_sum += bl * static_cast<double>(len);
        apply_update(sp, grad);
      }
      ++global_epoch_;
    }

    TrainOutcome out;
    out.weights = model_->params();
    out.sample_count = n;
    out.mean_loss = loss_sum / (static_cast<double>(cfg_.epochs_per_round) *
                                static_cast<double>(n));
    out.epochs_run = cfg_.epochs_per_round;
    return out;
  }

  int global_epoch() const { return global_epoch_; }
  const ParameterSet& momentum_buffers() const { return momentum_; }
  LocalModel& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  void apply_update(const SchedulePoint& sp, const ParameterSet& grad) {
    ParameterSet w = model_->params();
    if (cfg_.mode == LocalMode::kFixedLr) {
      for (size_t e = 0; e < w.size(); ++e) {
        auto& wv = w.entries()[e].values;
        const auto& g = grad.entries()[e].values;
        for (size_t j = 0; j < wv.size(); ++j) wv[j] -= cfg_.fixed_lr * g[j];
      }
      model_->set_params(std::move(w));
      return;
    }
    // Nesterov momentum with coupled weight decay on the decay group only.
    const double mu = sp.momentum;
    for (size_t e = 0; e < w.size(); ++e) {
      auto& wv = w.entries()[e].values;
      const auto& g = grad.entries()[e].values;
      auto& buf = momentum_.entries()[e].values;
      const ParamGroup group = w.entries()[e].group;
      const double lr = sp.lr.for_group(group);
      const bool decayed = group == ParamGroup::kDecay;
      for (size_t j = 0; j < wv.size(); ++j) {
        const double geff = g[j] + (decayed ? cfg_.weight_decay * wv[j] : 0.0);
        buf[j] = mu * buf[j] + geff;
        wv[j] -= lr * (geff + mu * buf[j]);
      }
    }
    model_->set_params(std::move(w));
  }

  std::shared_ptr<LocalModel> model_;
  TrainConfig cfg_;
  int global_epoch_ = 0;
  ParameterSet momentum_;
  bool momentum_ready_ = false;
};

}  // namespace fedsim
