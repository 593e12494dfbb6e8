// COCO-style detection metrics: 101-point interpolated AP and AR@K, both
// computed per class and averaged over classes that have ground truth.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "sdetr/geometry.hpp"

namespace sdetr {

struct Detection {
  std::size_t image_id = 0;
  BoxXYXY box;
  int cls = 0;
  float score = 0;
};

struct GroundTruth {
  std::size_t image_id = 0;
  BoxXYXY box;
  int cls = 0;
};

struct APValue {
  double value = 0;
  bool undefined = false;  // no ground truth and no detections; value reported as 1
};

struct MetricReport {
  double ap = 0, ap50 = 0, ap75 = 0, ar1 = 0, ar10 = 0;
};

inline constexpr double kIouSlack = 1e-9;

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.50 + 0.05 * k);
  return t;
}

namespace detail {

// Detection indices sorted by descending score; ties keep input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy matching in score order: each detection takes the unmatched
// ground truth of its image with the highest IoU, if that IoU reaches the
// threshold. Returns a TP flag per position in `order`.
inline std::vector<char> greedy_match(const std::vector<Detection>& dets, const std::vector<std::size_t>& order,
                                      const std::vector<GroundTruth>& gts, double threshold) {
  std::map<std::size_t, std::vector<std::size_t>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image_id].push_back(g);
  std::vector<char> used(gts.size(), 0), tp(order.size(), 0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& d = dets[order[k]];
    auto it = by_image.find(d.image_id);
    if (it == by_image.end()) continue;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g : it->second) {
      if (used[g]) continue;
      const double iou = box_iou(d.box, gts[g].box);
      if (iou > best) {
        best = iou;
        best_g = g;
      }
    }
    if (best >= threshold - kIouSlack) {
      used[best_g] = 1;
      tp[k] = 1;
    }
  }
  return tp;
}

}  // namespace detail

/// Single-class AP at one IoU threshold (classes are ignored; filter first).
inline APValue average_precision_single(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                        double threshold) {
  if (gts.empty()) return dets.empty() ? APValue{1.0, true} : APValue{0.0, false};
  if (dets.empty()) return {0.0, false};
  const auto order = detail::score_order(dets);
  const auto tp = detail::greedy_match(dets, order, gts, threshold);
  std::vector<double> precision(order.size()), recall(order.size());
  double hits = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    hits += tp[k];
    precision[k] = hits / static_cast<double>(k + 1);
    recall[k] = hits / static_cast<double>(gts.size());
  }
  for (std::size_t k = order.size() - 1; k > 0; --k) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double total = 0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - kIouSlack);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return {total / 101.0, false};
}

/// Single-class AR@K averaged over IoU 0.50:0.05:0.95; top-K per image.
inline double average_recall_single(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                    std::size_t k) {
  if (gts.empty()) return 0.0;
  std::map<std::size_t, std::vector<std::size_t>> per_image;
  for (std::size_t i : detail::score_order(dets)) per_image[dets[i].image_id].push_back(i);
  std::vector<Detection> kept;
  for (auto& [id, idx] : per_image) {
    for (std::size_t j = 0; j < std::min(k, idx.size()); ++j) kept.push_back(dets[idx[j]]);
  }
  const auto order = detail::score_order(kept);
  double sum = 0;
  const auto thresholds = coco_iou_thresholds();
  for (double t : thresholds) {
    const auto tp = detail::greedy_match(kept, order, gts, t);
    sum += static_cast<double>(std::count(tp.begin(), tp.end(), 1)) / static_cast<double>(gts.size());
  }
  return sum / static_cast<double>(thresholds.size());
}

namespace detail {

template <class F>
double class_average(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, F per_class) {
  std::set<int> classes;
  for (const auto& g : gts) classes.insert(g.cls);
  if (classes.empty()) return dets.empty() ? 1.0 : 0.0;
  double sum = 0;
  for (int c : classes) {
    std::vector<Detection> d;
    std::vector<GroundTruth> g;
    for (const auto& x : dets) {
      if (x.cls == c) d.push_back(x);
    }
    for (const auto& x : gts) {
      if (x.cls == c) g.push_back(x);
    }
    sum += per_class(d, g);
  }
  return sum / static_cast<double>(classes.size());
}

}  // namespace detail

inline double average_precision(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts,
                                double threshold) {
  return detail::class_average(dets, gts, [&](const auto& d, const auto& g) {
    return average_precision_single(d, g, threshold).value;
  });
}

inline double average_recall(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts, std::size_t k) {
  return detail::class_average(dets, gts,
                               [&](const auto& d, const auto& g) { return average_recall_single(d, g, k); });
}

inline MetricReport evaluate_detections(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  MetricReport r;
  const auto thresholds = coco_iou_thresholds();
  for (double t : thresholds) {
    const double ap = average_precision(dets, gts, t);
    r.ap += ap / static_cast<double>(thresholds.size());
    if (t == thresholds.front()) r.ap50 = ap;
    if (std::abs(t - 0.75) < 1e-9) r.ap75 = ap;
  }
  r.ar1 = average_recall(dets, gts, 1);
  r.ar10 = average_recall(dets, gts, 10);
  return r;
}

}  // namespace sdetr
