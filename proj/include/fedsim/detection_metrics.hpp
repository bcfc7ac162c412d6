#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedsim/errors.hpp"

namespace fedsim {

// Axis-aligned box in corner form.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  int class_id = 0;
  double confidence = 0.0;
};

inline double box_area(const Box& b) {
  const double w = b.x2 - b.x1;
  const double h = b.y2 - b.y1;
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = box_area(a) + box_area(b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Greedy non-maximum suppression. Predictions below the confidence threshold
// are dropped; survivors are kept in descending confidence order and suppress
// any remaining box of the same class (or any class when agnostic) whose IoU
// with them exceeds the threshold.
inline std::vector<Box> nms(std::vector<Box> preds, double iou_threshold,
                            double conf_threshold, bool class_agnostic = false) {
  std::erase_if(preds, [&](const Box& b) { return b.confidence < conf_threshold; });
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Box& a, const Box& b) { return a.confidence > b.confidence; });
  std::vector<Box> kept;
  std::vector<bool> dead(preds.size(), false);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(preds[i]);
    for (size_t j = i + 1; j < preds.size(); ++j) {
      if (dead[j]) continue;
      if (!class_agnostic && preds[j].class_id != preds[i].class_id) continue;
      if (iou(preds[i], preds[j]) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

struct DetectionRecord {
  std::string image_id;
  std::vector<Box> ground_truths;
  std::vector<Box> predictions;
};

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
};

struct ApResult {
  double ap = 0.0;
  std::vector<PrPoint> curve;
  size_t gt_count = 0;
  size_t tp = 0;
  size_t fp = 0;
};

namespace detail {

struct RankedPred {
  size_t record;
  size_t box;
  double confidence;
};

inline std::vector<RankedPred> ranked_predictions(std::span<const DetectionRecord> records,
                                                  int class_id) {
  std::vector<RankedPred> out;
  for (size_t r = 0; r < records.size(); ++r) {
    const auto& preds = records[r].predictions;
    for (size_t b = 0; b < preds.size(); ++b) {
      if (preds[b].class_id == class_id) out.push_back({r, b, preds[b].confidence});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedPred& a, const RankedPred& b) {
    return a.confidence > b.confidence;
  });
  return out;
}

}  // namespace detail

inline size_t ground_truth_count(std::span<const DetectionRecord> records, int class_id) {
  size_t n = 0;
  for (const auto& rec : records) {
    for (const auto& g : rec.ground_truths) {
      if (g.class_id == class_id) ++n;
    }
  }
  return n;
}

// Average precision for one class at one IoU threshold, using greedy matching
// in descending confidence order and all-point interpolation of the
// precision-recall curve.
inline ApResult average_precision(std::span<const DetectionRecord> records, int class_id,
                                  double iou_threshold) {
  ApResult res;
  res.gt_count = ground_truth_count(records, class_id);
  if (res.gt_count == 0) {
    throw NoGroundTruth("class " + std::to_string(class_id) +
                        " has no ground truth boxes; AP is undefined");
  }

  std::vector<std::vector<bool>> used(records.size());
  for (size_t r = 0; r < records.size(); ++r) {
    used[r].assign(records[r].ground_truths.size(), false);
  }

  const auto ranked = detail::ranked_predictions(records, class_id);
  size_t tp = 0, fp = 0;
  res.curve.reserve(ranked.size());
  for (const auto& rp : ranked) {
    const auto& rec = records[rp.record];
    const Box& pred = rec.predictions[rp.box];
    double best = -1.0;
    size_t best_g = 0;
    for (size_t g = 0; g < rec.ground_truths.size(); ++g) {
      if (used[rp.record][g]) continue;
      const Box& gt = rec.ground_truths[g];
      if (gt.class_id != class_id) continue;
      const double v = iou(pred, gt);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    if (best >= iou_threshold && best >= 0.0) {
      used[rp.record][best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    res.curve.push_back({static_cast<double>(tp) / static_cast<double>(res.gt_count),
                         static_cast<double>(tp) / static_cast<double>(tp + fp)});
  }
  res.tp = tp;
  res.fp = fp;

  // Area under the interpolated curve: precision envelope from the right,
  // summed over recall increments.
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  for (const auto& p : res.curve) {
    mrec.push_back(p.recall);
    mpre.push_back(p.precision);
  }
  for (size_t i = mpre.size() - 1; i > 0; --i) {
    mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  }
  double ap = 0.0;
  for (size_t i = 1; i < mrec.size(); ++i) {
    ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  res.ap = ap;
  return res;
}

// The usual evaluation grid: 0.50 to 0.95 in steps of 0.05.
inline std::vector<double> standard_iou_thresholds() {
  std::vector<double> t;
  for (int i = 50; i <= 95; i += 5) t.push_back(static_cast<double>(i) / 100.0);
  return t;
}

struct MapResult {
  double mean = 0.0;                              // mean over classes and thresholds
  std::map<double, double> by_threshold;          // mAP at each threshold
  std::map<int, double> by_class;                 // per-class AP averaged over thresholds
  std::map<int, std::map<double, double>> ap;     // full (class, threshold) table
  std::vector<int> evaluated_classes;
  std::vector<int> skipped_classes;               // classes never seen in ground truth
};

// Mean average precision over every class present in the ground truth.
// `candidate_classes` may add classes to consider; any without ground truth
// are reported as skipped rather than dragging the mean down.
inline MapResult mean_ap(std::span<const DetectionRecord> records,
                         std::span<const double> thresholds,
                         const std::set<int>& candidate_classes = {}) {
  std::set<int> classes = candidate_classes;
  for (const auto& rec : records) {
    for (const auto& g : rec.ground_truths) classes.insert(g.class_id);
  }
  MapResult res;
  for (int c : classes) {
    if (ground_truth_count(records, c) == 0) {
      res.skipped_classes.push_back(c);
      continue;
    }
    res.evaluated_classes.push_back(c);
  }
  if (res.evaluated_classes.empty()) {
    throw NoGroundTruth("no class has ground truth boxes; mAP is undefined");
  }
  double total = 0.0;
  for (double t : thresholds) {
    double at_t = 0.0;
    for (int c : res.evaluated_classes) {
      const double a = average_precision(records, c, t).ap;
      res.ap[c][t] = a;
      at_t += a;
    }
    at_t /= static_cast<double>(res.evaluated_classes.size());
    res.by_threshold[t] = at_t;
    total += at_t;
  }
  res.mean = total / static_cast<double>(thresholds.size());
  for (int c : res.evaluated_classes) {
    double s = 0.0;
    for (double t : thresholds) s += res.ap[c][t];
    res.by_class[c] = s / static_cast<double>(thresholds.size());
  }
  return res;
}

}  // namespace fedsim
