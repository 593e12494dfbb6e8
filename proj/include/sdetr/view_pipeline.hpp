// Two-view construction with IoU-constrained rectangles, photometric and
// flip augmentation, proposal generation inside the view overlap, and
// per-view box jitter.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/geometry.hpp"
#include "sdetr/image.hpp"
#include "sdetr/rng.hpp"

namespace sdetr {

enum class ProposalMode { kRandom, kObjectness };

struct AugmentConfig {
  double flip_p = 0.5;
  double color_jitter_p = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.4;
  double grayscale_p = 0.2;
  double blur_p = 0.5;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 2.0;

  static AugmentConfig none() { return {0, 0, 0, 0, 0, 0, 0, 0.1, 2.0}; }
};

struct ViewConfig {
  float tau = 0.5f;
  int n = 10;
  int view_size = 128;
  float jitter = 0.1f;
  float base_min_ratio = 0.5f;
  float base_max_ratio = 1.0f;
  ProposalMode mode = ProposalMode::kObjectness;
  int proposal_pool = 30;  // proposals generated before the random pick of n
  float min_proposal_side = 8.0f;
  AugmentConfig augment;
};

struct AugmentRecord {
  bool flip = false;
  float brightness = 1, contrast = 1, saturation = 1;
  bool grayscale = false;
  float blur_sigma = 0;  // 0 = no blur
};

struct ViewPair {
  Image view1, view2;
  BoxXYXY rect1, rect2;  // pre-augmentation view rectangles, image frame
  FrameTransform t1, t2;  // image -> view, including any flip
  AugmentRecord aug1, aug2;
  std::vector<BoxXYXY> proposals1, proposals2;  // view-local, index-aligned
  bool repeated_proposals = false;
  std::uint64_t seed = 0;
};

/// Random rectangle covering [min_ratio, max_ratio] of the image area, with
/// aspect ratio log-uniform in [3/4, 4/3] (clipped to the image).
inline BoxXYXY sample_base_rect(int width, int height, Rng& rng, float min_ratio = 0.5f, float max_ratio = 1.0f) {
  if (width < 32 || height < 32) throw std::invalid_argument("sample_base_rect: image must be at least 32x32");
  const double img_area = static_cast<double>(width) * height;
  if (min_ratio >= 1.0f) return {0, 0, static_cast<float>(width), static_cast<float>(height)};
  // Pull the range in slightly so float rounding of the corners cannot push
  // the realized ratio across a bound.
  const double lo = min_ratio * (1 + 1e-5), hi = std::min(1.0, max_ratio * (1 - 1e-5));
  const double ratio = rng.uniform(lo, std::max(lo, hi));
  const double log_aspect = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double area = ratio * img_area;
  double w = std::min(std::sqrt(area * std::exp(log_aspect)), static_cast<double>(width));
  double h = area / w;
  if (h > height) {
    h = height;
    w = area / h;
  }
  const double x1 = rng.uniform(0.0, width - w), y1 = rng.uniform(0.0, height - h);
  return {static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(std::min<double>(x1 + w, width)),
          static_cast<float>(std::min<double>(y1 + h, height))};
}

/// Grows copies of `base` outward along its diagonal (the first toward the
/// top-left, the second toward the bottom-right) by fractions in
/// [0, max_expand] of its size, clamped to the image. Both therefore keep the
/// base center inside and overlap exactly in `base`. Draws are rejected until
/// IoU >= tau; after 100 misses both rectangles fall back to `base`.
inline std::pair<BoxXYXY, BoxXYXY> sample_view_rects(const BoxXYXY& base, float tau, int width, int height, Rng& rng,
                                                     float max_expand = 1.0f) {
  if (!(tau > 0 && tau <= 1)) throw std::invalid_argument("sample_view_rects: tau must be in (0, 1]");
  const float w = base.width(), h = base.height();
  const auto fw = static_cast<float>(width), fh = static_cast<float>(height);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto e1 = static_cast<float>(rng.uniform(0.0, max_expand));
    const auto e2 = static_cast<float>(rng.uniform(0.0, max_expand));
    BoxXYXY r1{std::max(0.0f, base.x1 - e1 * w), std::max(0.0f, base.y1 - e1 * h), base.x2, base.y2};
    BoxXYXY r2{base.x1, base.y1, std::min(fw, base.x2 + e2 * w), std::min(fh, base.y2 + e2 * h)};
    if (box_iou(r1, r2) >= tau) return {r1, r2};
  }
  return {base, base};
}

namespace detail {

inline float luminance(const float* px) { return 0.299f * px[0] + 0.587f * px[1] + 0.114f * px[2]; }

inline void gaussian_blur(Image& img, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= total;
  Image tmp(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(std::clamp(x + i, 0, img.width - 1), y, c);
        }
        tmp.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[static_cast<std::size_t>(i + radius)] * tmp.at(x, std::clamp(y + i, 0, img.height - 1), c);
        }
        img.at(x, y, c) = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace detail

struct Augmented {
  Image image;
  AugmentRecord record;

  /// Folds this augmentation's geometric part into a view transform.
  FrameTransform apply_to(const FrameTransform& t) const { return record.flip ? t.flipped() : t; }
};

/// Random flip, color jitter (brightness, contrast, saturation), grayscale
/// and Gaussian blur, each gated by its probability. Output stays in [0,1].
inline Augmented augment(const Image& view, const AugmentConfig& cfg, Rng& rng) {
  Augmented out{view, {}};
  AugmentRecord& rec = out.record;
  Image& img = out.image;
  // Every draw happens unconditionally so the stream position does not depend
  // on which branches fire.
  const bool flip = rng.bernoulli(cfg.flip_p);
  const bool jitter = rng.bernoulli(cfg.color_jitter_p);
  const auto b = static_cast<float>(rng.uniform(1 - cfg.brightness, 1 + cfg.brightness));
  const auto c = static_cast<float>(rng.uniform(1 - cfg.contrast, 1 + cfg.contrast));
  const auto s = static_cast<float>(rng.uniform(1 - cfg.saturation, 1 + cfg.saturation));
  const bool gray = rng.bernoulli(cfg.grayscale_p);
  const bool blur = rng.bernoulli(cfg.blur_p);
  const double sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);

  if (flip) {
    img = flip_horizontal(img);
    rec.flip = true;
  }
  if (jitter) {
    rec.brightness = b;
    rec.contrast = c;
    rec.saturation = s;
    for (auto& v : img.rgb) v = std::clamp(v * b, 0.0f, 1.0f);
    double mean_gray = 0;
    for (std::size_t p = 0; p < img.rgb.size(); p += 3) mean_gray += detail::luminance(&img.rgb[p]);
    const auto m = static_cast<float>(mean_gray / (img.rgb.size() / 3));
    for (auto& v : img.rgb) v = std::clamp((v - m) * c + m, 0.0f, 1.0f);
    for (std::size_t p = 0; p < img.rgb.size(); p += 3) {
      const float g = detail::luminance(&img.rgb[p]);
      for (int k = 0; k < 3; ++k) img.rgb[p + k] = std::clamp((img.rgb[p + k] - g) * s + g, 0.0f, 1.0f);
    }
  }
  if (gray) {
    rec.grayscale = true;
    for (std::size_t p = 0; p < img.rgb.size(); p += 3) {
      const float g = detail::luminance(&img.rgb[p]);
      img.rgb[p] = img.rgb[p + 1] = img.rgb[p + 2] = g;
    }
  }
  if (blur) {
    rec.blur_sigma = static_cast<float>(sigma);
    detail::gaussian_blur(img, sigma);
    for (auto& v : img.rgb) v = std::clamp(v, 0.0f, 1.0f);
  }
  return out;
}

// ---- proposals -----------------------------------------------------------------

/// Sobel gradient magnitude of the luminance, row-major width×height.
inline std::vector<double> sobel_magnitude(const Image& img) {
  const int w = img.width, h = img.height;
  std::vector<float> lum(static_cast<std::size_t>(w * h));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) lum[static_cast<std::size_t>(y * w + x)] = detail::luminance(&img.rgb[img.offset(x, y)]);
  }
  auto at = [&](int x, int y) {
    return lum[static_cast<std::size_t>(std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1))];
  };
  std::vector<double> mag(lum.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
      const double gy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)) -
                        (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
      mag[static_cast<std::size_t>(y * w + x)] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return mag;
}

/// Summed-area table for O(1) box sums over whole pixels.
class IntegralImage {
 public:
  IntegralImage(const std::vector<double>& values, int width, int height)
      : width_(width), height_(height), table_(static_cast<std::size_t>((width + 1) * (height + 1)), 0.0) {
    for (int y = 0; y < height; ++y) {
      double row = 0;
      for (int x = 0; x < width; ++x) {
        row += values[static_cast<std::size_t>(y * width + x)];
        table_[idx(x + 1, y + 1)] = table_[idx(x + 1, y)] + row;
      }
    }
  }

  /// Sum over pixel columns [x1, x2) and rows [y1, y2), clipped to the image.
  double sum(int x1, int y1, int x2, int y2) const {
    x1 = std::clamp(x1, 0, width_);
    x2 = std::clamp(x2, 0, width_);
    y1 = std::clamp(y1, 0, height_);
    y2 = std::clamp(y2, 0, height_);
    if (x2 <= x1 || y2 <= y1) return 0.0;
    return table_[idx(x2, y2)] - table_[idx(x1, y2)] - table_[idx(x2, y1)] + table_[idx(x1, y1)];
  }
  static double count(int x1, int y1, int x2, int y2) {
    return std::max(0, x2 - x1) * static_cast<double>(std::max(0, y2 - y1));
  }

 private:
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y * (width_ + 1) + x); }
  int width_, height_;
  std::vector<double> table_;
};

/// Mean interior gradient minus mean gradient in the ring just outside the
/// box (ring width max(2, 15% of the shorter side)).
inline double objectness_score(const IntegralImage& grad, const BoxXYXY& box, int width, int height) {
  const int x1 = static_cast<int>(std::floor(box.x1)), y1 = static_cast<int>(std::floor(box.y1));
  const int x2 = static_cast<int>(std::ceil(box.x2)), y2 = static_cast<int>(std::ceil(box.y2));
  const int ring = std::max(2, static_cast<int>(0.15 * std::min(x2 - x1, y2 - y1)));
  const double inner = grad.sum(x1, y1, x2, y2);
  const double inner_n = IntegralImage::count(x1, y1, x2, y2);
  const int ox1 = std::max(0, x1 - ring), oy1 = std::max(0, y1 - ring);
  const int ox2 = std::min(width, x2 + ring), oy2 = std::min(height, y2 + ring);
  const double outer = grad.sum(ox1, oy1, ox2, oy2) - inner;
  const double outer_n = IntegralImage::count(ox1, oy1, ox2, oy2) - inner_n;
  const double inner_mean = inner_n > 0 ? inner / inner_n : 0.0;
  const double ring_mean = outer_n > 0 ? outer / outer_n : 0.0;
  return inner_mean - ring_mean;
}

class ProposalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Boxes inside `overlap` (image frame) with sides >= min_side. Random mode
/// returns `count` uniform boxes; objectness mode draws 4×count of them and
/// keeps the `count` best by objectness_score (stable on ties).
inline std::vector<BoxXYXY> generate_proposals(const Image& image, const BoxXYXY& overlap, ProposalMode mode,
                                               std::size_t count, Rng& rng, float min_side = 8.0f) {
  if (overlap.area() < 64.0f || overlap.width() < min_side || overlap.height() < min_side) {
    throw ProposalError("generate_proposals: overlap area too small for proposals");
  }
  auto draw = [&]() {
    const double w = rng.uniform(min_side, overlap.width());
    const double h = rng.uniform(min_side, overlap.height());
    const double x1 = rng.uniform(overlap.x1, overlap.x2 - w);
    const double y1 = rng.uniform(overlap.y1, overlap.y2 - h);
    return BoxXYXY{static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(std::min<double>(x1 + w, overlap.x2)),
                   static_cast<float>(std::min<double>(y1 + h, overlap.y2))};
  };
  if (mode == ProposalMode::kRandom) {
    std::vector<BoxXYXY> out(count);
    for (auto& b : out) b = draw();
    return out;
  }
  std::vector<BoxXYXY> candidates(4 * count);
  for (auto& b : candidates) b = draw();
  const IntegralImage grad(sobel_magnitude(image), image.width, image.height);
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    scores[i] = objectness_score(grad, candidates[i], image.width, image.height);
  }
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<BoxXYXY> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(candidates[order[i]]);
  return out;
}

/// Shifts the center by U(-j, j)·side and scales each side by U(1-j, 1+j),
/// then clamps to the view; sides stay at least 2 px.
inline BoxXYXY jitter_box(const BoxXYXY& b, float j, float view_w, float view_h, Rng& rng) {
  const double w = b.width(), h = b.height();
  const double cx = b.center_x() + rng.uniform(-j, j) * w;
  const double cy = b.center_y() + rng.uniform(-j, j) * h;
  const double nw = w * rng.uniform(1 - j, 1 + j);
  const double nh = h * rng.uniform(1 - j, 1 + j);
  auto clamp_span = [](double lo, double hi, double limit) {
    lo = std::clamp(lo, 0.0, limit);
    hi = std::clamp(hi, 0.0, limit);
    if (hi - lo < 2.0) {
      const double mid = std::clamp(0.5 * (lo + hi), 1.0, limit - 1.0);
      lo = mid - 1.0;
      hi = mid + 1.0;
    }
    return std::pair{lo, hi};
  };
  const auto [x1, x2] = clamp_span(cx - 0.5 * nw, cx + 0.5 * nw, view_w);
  const auto [y1, y2] = clamp_span(cy - 0.5 * nh, cy + 0.5 * nh, view_h);
  return {static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x2), static_cast<float>(y2)};
}

/// Builds one training pair from an image; a pure function of
/// (image, seed, config).
inline ViewPair build_view_pair(const Image& image, const ViewConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ViewPair pair;
  pair.seed = seed;
  const auto vs = static_cast<float>(cfg.view_size);
  const auto n = static_cast<std::size_t>(cfg.n);
  std::vector<BoxXYXY> pool;
  for (int attempt = 0;; ++attempt) {
    const BoxXYXY base = sample_base_rect(image.width, image.height, rng, cfg.base_min_ratio, cfg.base_max_ratio);
    std::tie(pair.rect1, pair.rect2) = sample_view_rects(base, cfg.tau, image.width, image.height, rng);
    const BoxXYXY overlap = intersection(pair.rect1, pair.rect2);
    try {
      pool = generate_proposals(image, overlap, cfg.mode, std::max<std::size_t>(n, static_cast<std::size_t>(cfg.proposal_pool)),
                                rng, cfg.min_proposal_side);
      break;
    } catch (const ProposalError&) {
      if (attempt >= 99) throw;
    }
  }
  // Random pick of n distinct proposals from the pool.
  std::vector<std::size_t> pick(pool.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  rng.shuffle(pick.begin(), pick.end());
  pick.resize(std::min(n, pick.size()));

  pair.view1 = crop_resize(image, pair.rect1, cfg.view_size, cfg.view_size);
  pair.view2 = crop_resize(image, pair.rect2, cfg.view_size, cfg.view_size);
  Augmented a1 = augment(pair.view1, cfg.augment, rng);
  Augmented a2 = augment(pair.view2, cfg.augment, rng);
  pair.t1 = a1.apply_to(FrameTransform::crop_resize(pair.rect1, vs, vs));
  pair.t2 = a2.apply_to(FrameTransform::crop_resize(pair.rect2, vs, vs));
  pair.view1 = std::move(a1.image);
  pair.view2 = std::move(a2.image);
  pair.aug1 = a1.record;
  pair.aug2 = a2.record;

  std::vector<BoxXYXY> mapped1, mapped2;
  for (std::size_t i : pick) {
    try {
      BoxXYXY b1 = map_box(pool[i], pair.t1);
      BoxXYXY b2 = map_box(pool[i], pair.t2);
      mapped1.push_back(b1);
      mapped2.push_back(b2);
    } catch (const std::domain_error&) {
      // dropped; refilled below
    }
  }
  if (mapped1.empty()) throw ProposalError("build_view_pair: no proposal survived frame mapping");
  const std::size_t valid = mapped1.size();
  if (valid < n) pair.repeated_proposals = true;
  for (std::size_t i = 0; i < n; ++i) {
    pair.proposals1.push_back(jitter_box(mapped1[i % valid], cfg.jitter, vs, vs, rng));
    pair.proposals2.push_back(jitter_box(mapped2[i % valid], cfg.jitter, vs, vs, rng));
  }
  return pair;
}

}  // namespace sdetr
