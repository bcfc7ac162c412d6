#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "fedsim/detection_metrics.hpp"
#include "fedsim/local_trainer.hpp"
#include "fedsim/param_store.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

// Small closed-form tasks used to exercise the federation end to end. Each
// model owns a view of its dataset and implements exact gradients.

struct ToySample {
  std::vector<double> features;
  double target = 0.0;
};

struct ToyDataset {
  std::vector<ToySample> samples;
  size_t size() const { return samples.size(); }
};

// Box in center form as produced by a detector head.
struct CenterBox {
  int class_id = 0;
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  double confidence = 1.0;
};

inline Box to_corner(const CenterBox& b) {
  return Box{b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0,
             b.class_id, b.confidence};
}

// One image worth of paired detector output and ground truth. Predictions are
// index-aligned with the truths they originate from, which gives the
// calibration task a well-defined regression target.
struct DetectionSample {
  std::vector<CenterBox> truths;
  std::vector<CenterBox> preds;
};

struct DetectionSet {
  std::vector<DetectionSample> samples;
  size_t size() const { return samples.size(); }
};

// ---- linear regression, squared loss ----

class LinearRegressionModel : public LocalModel {
 public:
  LinearRegressionModel(std::shared_ptr<const ToyDataset> data, size_t features)
      : data_(std::move(data)) {
    std::vector<ParamEntry> e;
    e.push_back({"weight", ParamGroup::kDecay, {static_cast<uint32_t>(features)},
                 std::vector<double>(features, 0.0)});
    e.push_back({"bias", ParamGroup::kBias, {1}, {0.0}});
    params_ = ParameterSet(std::move(e));
  }

  const ParameterSet& params() const override { return params_; }
  void set_params(ParameterSet p) override {
    require_same_structure(params_, p, "linear model");
    params_ = std::move(p);
  }
  size_t sample_count() const override { return data_->size(); }

  double predict(std::span<const double> x) const {
    const auto& w = params_.entries()[0].values;
    double y = params_.entries()[1].values[0];
    for (size_t i = 0; i < w.size(); ++i) y += w[i] * x[i];
    return y;
  }

  // Mean squared error over the batch; gradient of the mean.
  double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const override {
    auto& gw = grad.entries()[0].values;
    auto& gb = grad.entries()[1].values;
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (size_t idx : batch) {
      const auto& s = data_->samples[idx];
      const double err = predict(s.features) - s.target;
      loss += err * err;
      const double scale = 2.0 * err * inv;
      for (size_t i = 0; i < gw.size(); ++i) gw[i] += scale * s.features[i];
      gb[0] += scale;
    }
    return loss * inv;
  }

  EvalMetrics evaluate() const override {
    EvalMetrics m;
    m.loss = dataset_loss(*data_);
    return m;
  }

  double dataset_loss(const ToyDataset& ds) const {
    double loss = 0.0;
    for (const auto& s : ds.samples) {
      const double err = predict(s.features) - s.target;
      loss += err * err;
    }
    return loss / static_cast<double>(ds.samples.size());
  }

 private:
  std::shared_ptr<const ToyDataset> data_;
  ParameterSet params_;
};

// ---- logistic regression, cross-entropy loss ----

class LogisticRegressionModel : public LocalModel {
 public:
  LogisticRegressionModel(std::shared_ptr<const ToyDataset> data, size_t features)
      : data_(std::move(data)) {
    std::vector<ParamEntry> e;
    e.push_back({"weight", ParamGroup::kDecay, {static_cast<uint32_t>(features)},
                 std::vector<double>(features, 0.0)});
    e.push_back({"bias", ParamGroup::kBias, {1}, {0.0}});
    params_ = ParameterSet(std::move(e));
  }

  const ParameterSet& params() const override { return params_; }
  void set_params(ParameterSet p) override {
    require_same_structure(params_, p, "logistic model");
    params_ = std::move(p);
  }
  size_t sample_count() const override { return data_->size(); }

  double logit(std::span<const double> x) const {
    const auto& w = params_.entries()[0].values;
    double z = params_.entries()[1].values[0];
    for (size_t i = 0; i < w.size(); ++i) z += w[i] * x[i];
    return z;
  }

  static double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

  double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const override {
    auto& gw = grad.entries()[0].values;
    auto& gb = grad.entries()[1].values;
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (size_t idx : batch) {
      const auto& s = data_->samples[idx];
      const double z = logit(s.features);
      const double p = sigmoid(z);
      // Numerically stable cross entropy: log(1+e^-|z|) + max(z,0) - z*y.
      loss += std::log1p(std::exp(-std::fabs(z))) + std::max(z, 0.0) - z * s.target;
      const double scale = (p - s.target) * inv;
      for (size_t i = 0; i < gw.size(); ++i) gw[i] += scale * s.features[i];
      gb[0] += scale;
    }
    return loss * inv;
  }

  EvalMetrics evaluate() const override {
    EvalMetrics m;
    double loss = 0.0;
    size_t correct = 0;
    for (const auto& s : data_->samples) {
      const double z = logit(s.features);
      loss += std::log1p(std::exp(-std::fabs(z))) + std::max(z, 0.0) - z * s.target;
      if ((z >= 0.0) == (s.target >= 0.5)) ++correct;
    }
    m.loss = loss / static_cast<double>(data_->size());
    m.accuracy = static_cast<double>(correct) / static_cast<double>(data_->size());
    return m;
  }

 private:
  std::shared_ptr<const ToyDataset> data_;
  ParameterSet params_;
};

// ---- two-layer perceptron, squared loss, tanh hidden layer ----

class MlpRegressionModel : public LocalModel {
 public:
  MlpRegressionModel(std::shared_ptr<const ToyDataset> data, size_t features, size_t hidden,
                     uint64_t init_seed)
      : data_(std::move(data)), d_(features), h_(hidden) {
    DetRng rng(init_seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(features));
    std::vector<double> w1(h_ * d_);
    for (auto& v : w1) v = scale * rng.next_normal();
    std::vector<double> w2(h_);
    const double scale2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (auto& v : w2) v = scale2 * rng.next_normal();
    std::vector<ParamEntry> e;
    e.push_back({"l1.weight", ParamGroup::kDecay,
                 {static_cast<uint32_t>(h_), static_cast<uint32_t>(d_)}, std::move(w1)});
    e.push_back({"l1.bias", ParamGroup::kBias, {static_cast<uint32_t>(h_)},
                 std::vector<double>(h_, 0.0)});
    e.push_back({"l2.weight", ParamGroup::kDecay, {1, static_cast<uint32_t>(h_)},
                 std::move(w2)});
    e.push_back({"l2.bias", ParamGroup::kBias, {1}, {0.0}});
    params_ = ParameterSet(std::move(e));
  }

  const ParameterSet& params() const override { return params_; }
  void set_params(ParameterSet p) override {
    require_same_structure(params_, p, "mlp model");
    params_ = std::move(p);
  }
  size_t sample_count() const override { return data_->size(); }

  double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const override {
    const auto& w1 = params_.entries()[0].values;
    const auto& b1 = params_.entries()[1].values;
    const auto& w2 = params_.entries()[2].values;
    const double b2 = params_.entries()[3].values[0];
    auto& gw1 = grad.entries()[0].values;
    auto& gb1 = grad.entries()[1].values;
    auto& gw2 = grad.entries()[2].values;
    auto& gb2 = grad.entries()[3].values;

    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<double> hidden(h_);
    for (size_t idx : batch) {
      const auto& s = data_->samples[idx];
      double y = b2;
      for (size_t j = 0; j < h_; ++j) {
        double z = b1[j];
        for (size_t i = 0; i < d_; ++i) z += w1[j * d_ + i] * s.features[i];
        hidden[j] = std::tanh(z);
        y += w2[j] * hidden[j];
      }
      const double err = y - s.target;
      loss += err * err;
      const double dy = 2.0 * err * inv;
      gb2[0] += dy;
      for (size_t j = 0; j < h_; ++j) {
        gw2[j] += dy * hidden[j];
        const double dz = dy * w2[j] * (1.0 - hidden[j] * hidden[j]);
        gb1[j] += dz;
        for (size_t i = 0; i < d_; ++i) gw1[j * d_ + i] += dz * s.features[i];
      }
    }
    return loss * inv;
  }

  EvalMetrics evaluate() const override {
    EvalMetrics m;
    std::vector<size_t> all(data_->size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    ParameterSet scratch = zeros_like(params_);
    m.loss = batch_loss_grad(all, scratch);
    return m;
  }

 private:
  std::shared_ptr<const ToyDataset> data_;
  size_t d_, h_;
  ParameterSet params_;
};

// ---- linear model with a parallel branch that folds at deploy time ----
//
// Trains y = (direct + skip) . x + bias with two separate weight tensors;
// reparameterize() collapses them into one, the way multi-branch conv blocks
// fold into a single kernel for inference.

class BranchedLinearModel : public LocalModel {
 public:
  BranchedLinearModel(std::shared_ptr<const ToyDataset> data, size_t features)
      : data_(std::move(data)) {
    std::vector<ParamEntry> e;
    e.push_back({"direct", ParamGroup::kDecay, {static_cast<uint32_t>(features)},
                 std::vector<double>(features, 0.0)});
    e.push_back({"skip", ParamGroup::kDecay, {static_cast<uint32_t>(features)},
                 std::vector<double>(features, 0.0)});
    e.push_back({"bias", ParamGroup::kBias, {1}, {0.0}});
    params_ = ParameterSet(std::move(e));
  }

  const ParameterSet& params() const override { return params_; }
  void set_params(ParameterSet p) override {
    require_same_structure(params_, p, "branched model");
    params_ = std::move(p);
  }
  size_t sample_count() const override { return data_->size(); }

  double predict(std::span<const double> x) const {
    const auto& a = params_.entries()[0].values;
    const auto& b = params_.entries()[1].values;
    double y = params_.entries()[2].values[0];
    for (size_t i = 0; i < a.size(); ++i) y += (a[i] + b[i]) * x[i];
    return y;
  }

  double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const override {
    auto& ga = grad.entries()[0].values;
    auto& gb = grad.entries()[1].values;
    auto& gbias = grad.entries()[2].values;
    double loss = 0.0;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (size_t idx : batch) {
      const auto& s = data_->samples[idx];
      const double err = predict(s.features) - s.target;
      loss += err * err;
      const double scale = 2.0 * err * inv;
      for (size_t i = 0; i < ga.size(); ++i) {
        ga[i] += scale * s.features[i];
        gb[i] += scale * s.features[i];
      }
      gbias[0] += scale;
    }
    return loss * inv;
  }

  EvalMetrics evaluate() const override {
    EvalMetrics m;
    double loss = 0.0;
    for (const auto& s : data_->samples) {
      const double err = predict(s.features) - s.target;
      loss += err * err;
    }
    m.loss = loss / static_cast<double>(data_->size());
    return m;
  }

  ParameterSet reparameterize() const override {
    const auto& a = params_.entries()[0].values;
    const auto& b = params_.entries()[1].values;
    std::vector<double> fused(a.size());
    for (size_t i = 0; i < a.size(); ++i) fused[i] = a[i] + b[i];
    std::vector<ParamEntry> e;
    e.push_back({"weight", ParamGroup::kDecay, params_.entries()[0].shape, std::move(fused)});
    e.push_back({"bias", ParamGroup::kBias, {1}, {params_.entries()[2].values[0]}});
    return ParameterSet(std::move(e));
  }

 private:
  std::shared_ptr<const ToyDataset> data_;
  ParameterSet params_;
};

// ---- detector output calibration ----
//
// Learns a global (dx, dy) shift that moves predicted box centers onto their
// paired ground truths; squared center error as loss, detection metrics on
// the shifted predictions for evaluation.

class DetectionCalibrationModel : public LocalModel {
 public:
  explicit DetectionCalibrationModel(std::shared_ptr<const DetectionSet> data)
      : data_(std::move(data)) {
    std::vector<ParamEntry> e;
    e.push_back({"offset", ParamGroup::kBias, {2}, {0.0, 0.0}});
    params_ = ParameterSet(std::move(e));
  }

  const ParameterSet& params() const override { return params_; }
  void set_params(ParameterSet p) override {
    require_same_structure(params_, p, "calibration model");
    params_ = std::move(p);
  }
  size_t sample_count() const override { return data_->size(); }

  double batch_loss_grad(std::span<const size_t> batch, ParameterSet& grad) const override {
    auto& g = grad.entries()[0].values;
    const auto& off = params_.entries()[0].values;
    double loss = 0.0;
    size_t pairs = 0;
    for (size_t idx : batch) {
      const auto& s = data_->samples[idx];
      const size_t n = std::min(s.truths.size(), s.preds.size());
      for (size_t i = 0; i < n; ++i) {
        const double ex = s.preds[i].cx + off[0] - s.truths[i].cx;
        const double ey = s.preds[i].cy + off[1] - s.truths[i].cy;
        loss += ex * ex + ey * ey;
        g[0] += 2.0 * ex;
        g[1] += 2.0 * ey;
        ++pairs;
      }
    }
    if (pairs == 0) return 0.0;
    const double inv = 1.0 / static_cast<double>(pairs);
    g[0] *= inv;
    g[1] *= inv;
    return loss * inv;
  }

  std::vector<DetectionRecord> corrected_records() const {
    const auto& off = params_.entries()[0].values;
    std::vector<DetectionRecord> recs;
    recs.reserve(data_->size());
    for (size_t i = 0; i < data_->size(); ++i) {
      const auto& s = data_->samples[i];
      DetectionRecord rec;
      rec.image_id = std::to_string(i);
      for (const auto& t : s.truths) rec.ground_truths.push_back(to_corner(t));
      for (const auto& p : s.preds) {
        CenterBox shifted = p;
        shifted.cx += off[0];
        shifted.cy += off[1];
        rec.predictions.push_back(to_corner(shifted));
      }
      recs.push_back(std::move(rec));
    }
    return recs;
  }

  EvalMetrics evaluate() const override {
    EvalMetrics m;
    std::vector<size_t> all(data_->size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = i;
    ParameterSet scratch = zeros_like(params_);
    m.loss = batch_loss_grad(all, scratch);
    const auto recs = corrected_records();
    const auto thresholds = standard_iou_thresholds();
    const MapResult r = mean_ap(recs, thresholds);
    m.map = r.mean;
    for (double t : thresholds) m.map_per_threshold.push_back(r.by_threshold.at(t));
    return m;
  }

 private:
  std::shared_ptr<const DetectionSet> data_;
  ParameterSet params_;
};

}  // namespace fedsim
