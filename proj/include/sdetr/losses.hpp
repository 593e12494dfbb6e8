// Matching costs and the pretraining / finetuning objectives.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/geometry.hpp"
#include "sdetr/hungarian.hpp"
#include "sdetr/ops.hpp"
#include "sdetr/tensor.hpp"

namespace sdetr {

inline constexpr double kProbClamp = 1e-7;

/// Weights of the matching cost: match/class log-probability, 1 − GIoU, ℓ₁.
/// The same GIoU and ℓ₁ weights are reused in the box loss.
struct MatchCoefficients {
  double match = 1.0;
  double giou = 2.0;
  double l1 = 5.0;
};

struct LossWeights {
  double region = 1.0;  // λ₀
  double global = 1.0;  // λ₁
  double loc = 1.0;     // λ₂

  static LossWeights imagenet() { return {3.0, 10.0, 1.0}; }
  static LossWeights coco() { return {0.3, 3.0, 1.0}; }
  static LossWeights desk() { return {1.0, 1.0, 1.0}; }

  void validate() const {
    if (region < 0 || global < 0 || loc < 0) throw std::invalid_argument("loss weights must be non-negative");
  }
};

struct LossBreakdown {
  double loc = 0, global_disc = 0, region_disc = 0, total = 0;
  LossWeights weights;
};

/// Weighted sum of already-computed parts.
inline LossBreakdown total_loss(double loc, double global_disc, double region_disc, const LossWeights& w) {
  w.validate();
  return {loc, global_disc, region_disc, w.region * region_disc + w.global * global_disc + w.loc * loc, w};
}

template <class T>
BasicTensor<T> weighted_total(const BasicTensor<T>& loc, const BasicTensor<T>& global_disc,
                              const BasicTensor<T>& region_disc, const LossWeights& w) {
  w.validate();
  return add(add(scale(region_disc, static_cast<T>(w.region)), scale(global_disc, static_cast<T>(w.global))),
             scale(loc, static_cast<T>(w.loc)));
}

/// Stacks normalized boxes into an m×4 constant tensor.
template <class T>
BasicTensor<T> box_tensor(const std::vector<BoxCxCyWH>& boxes) {
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes) {
    v.push_back(static_cast<T>(b.cx));
    v.push_back(static_cast<T>(b.cy));
    v.push_back(static_cast<T>(b.w));
    v.push_back(static_cast<T>(b.h));
  }
  return BasicTensor<T>({boxes.size(), 4}, std::move(v));
}

/// GIoU of two cxcywh boxes computed in double (same convention as the
/// differentiable version below).
inline double giou_cxcywh(const double* a, const double* b) {
  const double ax1 = a[0] - 0.5 * a[2], ay1 = a[1] - 0.5 * a[3], ax2 = a[0] + 0.5 * a[2], ay2 = a[1] + 0.5 * a[3];
  const double bx1 = b[0] - 0.5 * b[2], by1 = b[1] - 0.5 * b[3], bx2 = b[0] + 0.5 * b[2], by2 = b[1] + 0.5 * b[3];
  const double iw = std::max(0.0, std::min(ax2, bx2) - std::max(ax1, bx1));
  const double ih = std::max(0.0, std::min(ay2, by2) - std::max(ay1, by1));
  const double inter = iw * ih;
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  const double hull = (std::max(ax2, bx2) - std::min(ax1, bx1)) * (std::max(ay2, by2) - std::min(ay1, by1));
  const double iou = inter / std::max(uni, kGeomEpsilon);
  return iou - (hull - uni) / std::max(hull, kGeomEpsilon);
}

/// Row-wise GIoU of m×4 cxcywh tensors, differentiable in both: m.
template <class T>
BasicTensor<T> giou_rows(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != 4) {
    throw shape_error("giou_rows", pred.shape(), target.shape());
  }
  auto col = [](const BasicTensor<T>& t, std::size_t k) { return reshape(slice(t, 1, k, 1), {t.dim(0)}); };
  auto corners = [&](const BasicTensor<T>& t) {
    const auto cx = col(t, 0), cy = col(t, 1), hw = scale(col(t, 2), T(0.5)), hh = scale(col(t, 3), T(0.5));
    return std::vector<BasicTensor<T>>{sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  const auto p = corners(pred), g = corners(target);
  const auto iw = relu(sub(minimum(p[2], g[2]), maximum(p[0], g[0])));
  const auto ih = relu(sub(minimum(p[3], g[3]), maximum(p[1], g[1])));
  const auto inter = mul(iw, ih);
  const auto area_p = mul(sub(p[2], p[0]), sub(p[3], p[1]));
  const auto area_g = mul(sub(g[2], g[0]), sub(g[3], g[1]));
  const auto uni = sub(add(area_p, area_g), inter);
  const auto hull = mul(sub(maximum(p[2], g[2]), minimum(p[0], g[0])), sub(maximum(p[3], g[3]), minimum(p[1], g[1])));
  const T eps = static_cast<T>(kGeomEpsilon);
  const auto iou = div(inter, add_scalar(uni, eps));
  return sub(iou, div(sub(hull, uni), add_scalar(hull, eps)));
}

/// Per-row box loss giou·(1 − GIoU) + l1·‖pred − target‖₁, averaged.
template <class T>
BasicTensor<T> box_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target, const MatchCoefficients& k = {}) {
  if (pred.dim(0) == 0) throw std::invalid_argument("box_loss: no matched pairs");
  const auto giou_term = scale(add_scalar(neg(giou_rows(pred, target)), T(1)), static_cast<T>(k.giou));
  const auto l1_term = scale(sum_last(abs(sub(pred, target))), static_cast<T>(k.l1));
  return mean(add(giou_term, l1_term));
}

/// Cost[i][j] for target i and prediction j given a per-prediction
/// −log probability column.
inline CostMatrix box_matching_cost(const std::vector<double>& pred_boxes, const std::vector<double>& neg_log_prob,
                                    const std::vector<BoxCxCyWH>& targets, std::size_t label_stride,
                                    const std::vector<int>* labels, const MatchCoefficients& k) {
  const std::size_t n = pred_boxes.size() / 4;
  CostMatrix cost(targets.size(), n);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double t[4] = {targets[i].cx, targets[i].cy, targets[i].w, targets[i].h};
    for (std::size_t j = 0; j < n; ++j) {
      const double* b = pred_boxes.data() + 4 * j;
      double l1 = 0.0;
      for (int c = 0; c < 4; ++c) l1 += std::abs(b[c] - t[c]);
      const std::size_t prob_index = labels ? j * label_stride + static_cast<std::size_t>((*labels)[i]) : j;
      cost(i, j) = k.match * neg_log_prob[prob_index] + k.giou * (1.0 - giou_cxcywh(b, t)) + k.l1 * l1;
    }
  }
  return cost;
}

/// Pretraining matching cost from predicted boxes (N×4) and match scores
/// (N×1): −log k̂ (clamped) + 2(1 − GIoU) + 5ℓ₁.
template <class T>
CostMatrix matching_cost(const BasicTensor<T>& boxes, const BasicTensor<T>& match,
                         const std::vector<BoxCxCyWH>& targets, const MatchCoefficients& k = {}) {
  if (boxes.rank() != 2 || boxes.dim(1) != 4 || match.numel() != boxes.dim(0)) {
    throw shape_error("matching_cost", boxes.shape(), match.shape());
  }
  std::vector<double> b(boxes.values().begin(), boxes.values().end());
  std::vector<double> nlp(match.numel());
  for (std::size_t j = 0; j < nlp.size(); ++j) {
    nlp[j] = -std::log(std::clamp(static_cast<double>(match[j]), kProbClamp, 1.0 - kProbClamp));
  }
  return box_matching_cost(b, nlp, targets, 1, nullptr, k);
}

/// One direction of the localization loss: matched box loss plus binary
/// cross-entropy of k̂ over all N queries (target 1 when matched).
template <class T>
BasicTensor<T> loc_loss_direction(const BasicTensor<T>& boxes, const BasicTensor<T>& match,
                                  const std::vector<BoxCxCyWH>& targets, const MatchAssignment& sigma,
                                  const MatchCoefficients& k = {}) {
  if (sigma.size() == 0 || sigma.size() != targets.size()) {
    throw std::invalid_argument("loc_loss: need a non-empty matching covering every target");
  }
  const std::size_t n = boxes.dim(0);
  const auto matched = index_rows(boxes, sigma.target_to_pred);
  const auto boxes_term = box_loss(matched, box_tensor<T>(targets), k);
  std::vector<T> is_matched(n, T(0));
  for (std::size_t j : sigma.target_to_pred) is_matched[j] = T(1);
  const BasicTensor<T> y({n}, is_matched);
  const BasicTensor<T> one_minus_y({n}, [&] {
    std::vector<T> v(n);
    for (std::size_t j = 0; j < n; ++j) v[j] = T(1) - is_matched[j];
    return v;
  }());
  const auto kk = clamp(reshape(match, {n}), static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
  const auto bce = neg(add(mul(y, log(kk)), mul(one_minus_y, log(add_scalar(neg(kk), T(1))))));
  return add(boxes_term, mean(bce));
}

/// Stop-gradient negative cosine: −mean_b cos(projected[b], target[b]) with
/// the target detached. Inputs are B×C.
template <class T>
BasicTensor<T> negative_cosine(const BasicTensor<T>& projected, const BasicTensor<T>& target) {
  return neg(mean(cosine(projected, detach(target))));
}

/// L_g from projected and pooled contexts of both views (B×C each).
template <class T>
BasicTensor<T> global_disc_loss(const BasicTensor<T>& proj1, const BasicTensor<T>& pooled1,
                                const BasicTensor<T>& proj2, const BasicTensor<T>& pooled2) {
  return add(negative_cosine(proj1, pooled2), negative_cosine(proj2, pooled1));
}

/// One direction of L_r: mean over matched pairs of
/// ‖p̂[σ(i)]/‖p̂[σ(i)]‖ − p[i]/‖p[i]‖‖², with p treated as constant.
template <class T>
BasicTensor<T> region_disc_direction(const BasicTensor<T>& semantic, const BasicTensor<T>& targets,
                                     const MatchAssignment& sigma) {
  if (sigma.size() == 0 || sigma.size() != targets.dim(0)) {
    throw std::invalid_argument("region_disc: need a non-empty matching covering every target");
  }
  const auto a = l2_normalize(index_rows(semantic, sigma.target_to_pred));
  const auto b = l2_normalize(detach(targets));
  const auto d = sub(a, b);
  return mean(sum_last(mul(d, d)));
}

/// Finetuning cost: −log p(label) + 2(1 − GIoU) + 5ℓ₁.
template <class T>
CostMatrix finetune_matching_cost(const BasicTensor<T>& logits, const BasicTensor<T>& boxes,
                                  const std::vector<BoxCxCyWH>& targets, const std::vector<int>& labels,
                                  const MatchCoefficients& k = {}) {
  if (labels.size() != targets.size()) throw std::invalid_argument("finetune cost: labels/targets length mismatch");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) + 1 >= classes) throw std::invalid_argument("finetune cost: label out of range");
  }
  std::vector<double> nlp(n * classes);
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) mx = std::max(mx, static_cast<double>(logits[j * classes + c]));
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(logits[j * classes + c] - mx);
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(logits[j * classes + c] - mx) / z;
      nlp[j * classes + c] = -std::log(std::clamp(p, kProbClamp, 1.0));
    }
  }
  std::vector<double> b(boxes.values().begin(), boxes.values().end());
  return box_matching_cost(b, nlp, targets, classes, &labels, k);
}

inline constexpr double kNoObjectWeight = 0.1;

/// DETR set loss: weighted cross-entropy over all N queries (no-object
/// class is the last column, weight 0.1 when unmatched) averaged over N,
/// plus the box loss on matched pairs.
template <class T>
BasicTensor<T> finetune_set_loss(const BasicTensor<T>& logits, const BasicTensor<T>& boxes,
                                 const std::vector<BoxCxCyWH>& targets, const std::vector<int>& labels,
                                 MatchAssignment* sigma_out = nullptr, const MatchCoefficients& k = {}) {
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() > n) throw std::invalid_argument("finetune loss: more targets than queries");
  MatchAssignment sigma;
  if (!targets.empty()) sigma = hungarian(finetune_matching_cost(logits, boxes, targets, labels, k));
  std::vector<T> onehot(n * classes, T(0)), weight(n, static_cast<T>(kNoObjectWeight));
  std::vector<std::size_t> cls(n, classes - 1);
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    cls[sigma[i]] = static_cast<std::size_t>(labels[i]);
    weight[sigma[i]] = T(1);
  }
  for (std::size_t j = 0; j < n; ++j) onehot[j * classes + cls[j]] = T(1);
  const auto nll = neg(sum_last(mul(log_softmax(logits, 1), BasicTensor<T>({n, classes}, std::move(onehot)))));
  auto loss = mean(mul(nll, BasicTensor<T>({n}, std::move(weight))));
  if (!targets.empty()) {
    loss = add(loss, box_loss(index_rows(boxes, sigma.target_to_pred), box_tensor<T>(targets), k));
  }
  if (sigma_out) *sigma_out = std::move(sigma);
  return loss;
}

}  // namespace sdetr
