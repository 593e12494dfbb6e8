// Box algebra, frame transforms, and RoIAlign.
#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "sdetr/ops.hpp"
#include "sdetr/tensor.hpp"

namespace sdetr {

inline constexpr double kGeomEpsilon = 1e-9;

/// Pixel-space corner box; half-open in continuous coordinates.
struct BoxXYXY {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return std::max(0.0f, width()) * std::max(0.0f, height()); }
  float center_x() const { return 0.5f * (x1 + x2); }
  float center_y() const { return 0.5f * (y1 + y2); }
  bool valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 <= x2 && y1 <= y2;
  }
  bool operator==(const BoxXYXY&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, const BoxXYXY& b) {
  return os << '[' << b.x1 << ", " << b.y1 << ", " << b.x2 << ", " << b.y2 << ']';
}

/// Center-size box normalized to [0,1] by the frame dims.
struct BoxCxCyWH {
  float cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const BoxCxCyWH&) const = default;
};

inline BoxXYXY intersection(const BoxXYXY& a, const BoxXYXY& b) {
  return {std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
}

inline BoxXYXY hull(const BoxXYXY& a, const BoxXYXY& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
}

inline bool contains(const BoxXYXY& outer, const BoxXYXY& inner, float slack = 0.0f) {
  return inner.x1 >= outer.x1 - slack && inner.y1 >= outer.y1 - slack && inner.x2 <= outer.x2 + slack &&
         inner.y2 <= outer.y2 + slack;
}

/// Intersection over union; zero-area inputs give 0.
inline float box_iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b).area();
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  if (uni <= kGeomEpsilon) return 0.0f;
  return static_cast<float>(inter / uni);
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not covered
/// by the union. In [-1, 1].
inline float box_giou(const BoxXYXY& a, const BoxXYXY& b) {
  const double inter = intersection(a, b).area();
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  const double enclosing = hull(a, b).area();
  const double iou = uni <= kGeomEpsilon ? 0.0 : inter / uni;
  if (enclosing <= kGeomEpsilon) return static_cast<float>(iou);
  return static_cast<float>(iou - (enclosing - uni) / enclosing);
}

struct ConvertResult {
  BoxXYXY box;
  bool clamped = false;
};

struct NormalizedResult {
  BoxCxCyWH box;
  bool clamped = false;
};

/// Pixel corners -> normalized center-size in a width×height frame.
inline NormalizedResult to_cxcywh(const BoxXYXY& b, float width, float height) {
  if (!(width > 0 && height > 0)) throw std::invalid_argument("to_cxcywh: frame dims must be positive");
  BoxCxCyWH out{b.center_x() / width, b.center_y() / height, b.width() / width, b.height() / height};
  bool clamped = false;
  for (float* v : {&out.cx, &out.cy, &out.w, &out.h}) {
    const float c = std::clamp(*v, 0.0f, 1.0f);
    clamped = clamped || c != *v;
    *v = c;
  }
  return {out, clamped};
}

/// Normalized center-size -> pixel corners. Components outside [0,1] are
/// clamped and the result flagged.
inline ConvertResult to_xyxy(BoxCxCyWH b, float width, float height) {
  if (!(width > 0 && height > 0)) throw std::invalid_argument("to_xyxy: frame dims must be positive");
  bool clamped = false;
  for (float* v : {&b.cx, &b.cy, &b.w, &b.h}) {
    const float c = std::clamp(*v, 0.0f, 1.0f);
    clamped = clamped || c != *v;
    *v = c;
  }
  return {{(b.cx - 0.5f * b.w) * width, (b.cy - 0.5f * b.h) * height, (b.cx + 0.5f * b.w) * width,
           (b.cy + 0.5f * b.h) * height},
          clamped};
}

/// Maps image-frame coordinates into a view frame: subtract the crop
/// offset, scale, then optionally mirror horizontally within frame_width.
struct FrameTransform {
  float dx = 0, dy = 0;
  float sx = 1, sy = 1;
  bool flip = false;
  float frame_width = 0, frame_height = 0;

  static FrameTransform identity(float width, float height) { return {0, 0, 1, 1, false, width, height}; }

  /// Image -> view transform for cropping `crop` and resizing it to out_w×out_h.
  static FrameTransform crop_resize(const BoxXYXY& crop, float out_w, float out_h) {
    return {crop.x1, crop.y1, out_w / crop.width(), out_h / crop.height(), false, out_w, out_h};
  }

  double apply_x(double x) const {
    const double v = (x - dx) * sx;
    return flip ? frame_width - v : v;
  }
  double apply_y(double y) const { return (y - dy) * sy; }
  double invert_x(double v) const { return (flip ? frame_width - v : v) / sx + dx; }
  double invert_y(double v) const { return v / sy + dy; }

  FrameTransform flipped() const {
    FrameTransform t = *this;
    t.flip = !t.flip;
    return t;
  }
};

namespace detail {
inline BoxXYXY sorted_box(double xa, double ya, double xb, double yb) {
  return {static_cast<float>(std::min(xa, xb)), static_cast<float>(std::min(ya, yb)),
          static_cast<float>(std::max(xa, xb)), static_cast<float>(std::max(ya, yb))};
}
}  // namespace detail

/// Expresses an image-frame box in the transform's view frame, clamped to
/// the view. Throws if nothing of the box survives.
inline BoxXYXY map_box(const BoxXYXY& box, const FrameTransform& t) {
  BoxXYXY out = detail::sorted_box(t.apply_x(box.x1), t.apply_y(box.y1), t.apply_x(box.x2), t.apply_y(box.y2));
  out.x1 = std::clamp(out.x1, 0.0f, t.frame_width);
  out.x2 = std::clamp(out.x2, 0.0f, t.frame_width);
  out.y1 = std::clamp(out.y1, 0.0f, t.frame_height);
  out.y2 = std::clamp(out.y2, 0.0f, t.frame_height);
  if (!(out.x2 > out.x1 && out.y2 > out.y1)) throw std::domain_error("map_box: box does not intersect the target frame");
  return out;
}

/// View-frame box back to the image frame (no clamping).
inline BoxXYXY inverse_map_box(const BoxXYXY& box, const FrameTransform& t) {
  return detail::sorted_box(t.invert_x(box.x1), t.invert_y(box.y1), t.invert_x(box.x2), t.invert_y(box.y2));
}

/// Scales a box by 1/stride into feature-map coordinates.
inline BoxXYXY to_feature_frame(const BoxXYXY& b, float stride) {
  return {b.x1 / stride, b.y1 / stride, b.x2 / stride, b.y2 / stride};
}

// ---- RoIAlign ------------------------------------------------------------------

namespace detail {

struct BilinearTap {
  std::size_t idx[4];
  double w[4];
};

// Bilinear sample position in pixel-index coordinates (pixel i has its
// center at i), clamped to the map border.
inline BilinearTap bilinear_tap(double y, double x, std::size_t height, std::size_t width) {
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  return {{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
          {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx}};
}

}  // namespace detail

inline constexpr int kRoiSamples = 2;

/// RoIAlign over an H×W×C map. Boxes are in feature-frame continuous
/// coordinates; each out_h×out_w bin averages 2×2 bilinear samples with the
/// half-pixel (aligned) offset. Samples beyond the map clamp to its border.
/// Returns n×out_h×out_w×C.
template <class T>
BasicTensor<T> roi_align(const BasicTensor<T>& features, const std::vector<BoxXYXY>& boxes, std::size_t out_h,
                         std::size_t out_w) {
  if (features.rank() != 3 || features.numel() == 0) {
    throw ShapeError("roi_align: features must be a nonempty H×W×C map, got " + shape_str(features.shape()));
  }
  if (out_h == 0 || out_w == 0) throw ShapeError("roi_align: output size must be positive");
  const std::size_t height = features.dim(0), width = features.dim(1), channels = features.dim(2);
  const std::size_t bins = out_h * out_w;
  // Every (box, bin) averages kRoiSamples² taps.
  std::vector<detail::BilinearTap> taps;
  taps.reserve(boxes.size() * bins * kRoiSamples * kRoiSamples);
  for (const auto& box : boxes) {
    if (!box.valid()) throw std::invalid_argument("roi_align: invalid box");
    const double x0 = box.x1 - 0.5, y0 = box.y1 - 0.5;
    const double bin_w = static_cast<double>(box.width()) / static_cast<double>(out_w);
    const double bin_h = static_cast<double>(box.height()) / static_cast<double>(out_h);
    for (std::size_t by = 0; by < out_h; ++by) {
      for (std::size_t bx = 0; bx < out_w; ++bx) {
        for (int sy = 0; sy < kRoiSamples; ++sy) {
          for (int sx = 0; sx < kRoiSamples; ++sx) {
            const double y = y0 + bin_h * (static_cast<double>(by) + (sy + 0.5) / kRoiSamples);
            const double x = x0 + bin_w * (static_cast<double>(bx) + (sx + 0.5) / kRoiSamples);
            taps.push_back(detail::bilinear_tap(y, x, height, width));
          }
        }
      }
    }
  }
  constexpr double kSampleWeight = 1.0 / (kRoiSamples * kRoiSamples);
  constexpr int kTapsPerBin = kRoiSamples * kRoiSamples;
  std::vector<T> out(boxes.size() * bins * channels, T(0));
  const auto& f = features.values();
  for (std::size_t b = 0; b < boxes.size() * bins; ++b) {
    T* dst = out.data() + b * channels;
    for (int s = 0; s < kTapsPerBin; ++s) {
      const auto& tap = taps[b * kTapsPerBin + static_cast<std::size_t>(s)];
      for (int k = 0; k < 4; ++k) {
        const T w = static_cast<T>(tap.w[k] * kSampleWeight);
        const T* src = f.data() + tap.idx[k] * channels;
        for (std::size_t c = 0; c < channels; ++c) dst[c] += w * src[c];
      }
    }
  }
  return detail::make_result<T>(
      "roi_align", {boxes.size(), out_h, out_w, channels}, std::move(out), {features},
      [taps = std::move(taps), channels, kSampleWeight](Node<T>& self) {
        auto* gf = detail::input_grad(self, 0);
        if (!gf) return;
        const std::size_t total_bins = self.grad.size() / channels;
        for (std::size_t b = 0; b < total_bins; ++b) {
          const T* g = self.grad.data() + b * channels;
          for (int s = 0; s < kTapsPerBin; ++s) {
            const auto& tap = taps[b * kTapsPerBin + static_cast<std::size_t>(s)];
            for (int k = 0; k < 4; ++k) {
              const T w = static_cast<T>(tap.w[k] * kSampleWeight);
              T* dst = gf->data() + tap.idx[k] * channels;
              for (std::size_t c = 0; c < channels; ++c) dst[c] += w * g[c];
            }
          }
        }
      });
}

}  // namespace sdetr
