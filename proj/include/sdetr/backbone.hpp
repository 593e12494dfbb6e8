// Frozen convolutional feature extractor: three 3×3 stride-2 conv+ReLU
// layers with seeded He-normal weights, never trained.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>

#include "sdetr/geometry.hpp"
#include "sdetr/image.hpp"
#include "sdetr/rng.hpp"
#include "sdetr/tensor.hpp"

namespace sdetr {

struct ConvLayer {
  int in_channels = 0;
  int out_channels = 0;
  // [9·in, out], row index (ky·3 + kx)·in + c
  std::vector<float> weight;
  std::vector<float> bias;
};

class FrozenBackbone {
 public:
  static constexpr int kStride = 8;
  static constexpr int kCropSize = 64;
  static constexpr int kRoiBins = 4;

  explicit FrozenBackbone(std::uint64_t seed, std::vector<int> channels = {16, 32, 64}) : seed_(seed) {
    Rng rng(mix_seed(seed));
    int in = 3;
    for (int out : channels) {
      ConvLayer layer{in, out, std::vector<float>(static_cast<std::size_t>(9 * in * out)),
                      std::vector<float>(static_cast<std::size_t>(out))};
      const double std_dev = std::sqrt(2.0 / (9.0 * in));
      for (auto& w : layer.weight) w = static_cast<float>(rng.normal(0.0, std_dev));
      for (auto& b : layer.bias) b = static_cast<float>(rng.normal(0.0, 0.05));
      layers_.push_back(std::move(layer));
      in = out;
    }
  }

  std::uint64_t seed() const { return seed_; }
  int out_channels() const { return layers_.back().out_channels; }
  const std::vector<ConvLayer>& layers() const { return layers_; }

  /// Image (dims divisible by 8) -> (H/8)×(W/8)×C feature map, no gradient.
  Tensor extract(const Image& image) const {
    if (image.width % kStride != 0 || image.height % kStride != 0) {
      throw std::invalid_argument("backbone: image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                  " is not divisible by 8; resize the view first");
    }
    int h = image.height, w = image.width;
    std::vector<float> act(image.rgb.size());
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = (image.rgb[i] - 0.5f) * 4.0f;
    for (const auto& layer : layers_) act = conv_stride2(act, h, w, layer);
    return Tensor({static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                   static_cast<std::size_t>(out_channels())},
                  std::move(act));
  }

  /// RoIAlign (4×4 bins) on a feature map, then spatial mean: n×C.
  /// Boxes are in the view's pixel frame.
  Tensor object_level_features(const Tensor& features, const std::vector<BoxXYXY>& view_boxes) const {
    std::vector<BoxXYXY> fboxes;
    fboxes.reserve(view_boxes.size());
    for (const auto& b : view_boxes) fboxes.push_back(to_feature_frame(b, kStride));
    NoGradGuard no_grad;
    const Tensor roi = roi_align(features, fboxes, kRoiBins, kRoiBins);
    const std::size_t c = features.dim(2), bins = kRoiBins * kRoiBins;
    std::vector<float> out(view_boxes.size() * c, 0.0f);
    for (std::size_t i = 0; i < view_boxes.size(); ++i) {
      for (std::size_t b = 0; b < bins; ++b) {
        for (std::size_t k = 0; k < c; ++k) out[i * c + k] += roi[(i * bins + b) * c + k];
      }
      for (std::size_t k = 0; k < c; ++k) out[i * c + k] /= static_cast<float>(bins);
    }
    return Tensor({view_boxes.size(), c}, std::move(out));
  }

  /// Crop each box from the view, resize to 64×64, extract, pool: n×C.
  Tensor crop_level_features(const Image& view, const std::vector<BoxXYXY>& boxes) const {
    const auto c = static_cast<std::size_t>(out_channels());
    std::vector<float> out;
    out.reserve(boxes.size() * c);
    for (const auto& b : boxes) {
      if (b.width() < 2.0f || b.height() < 2.0f) throw std::invalid_argument("crop_level_features: box side below 2 px");
      const Tensor f = extract(crop_resize(view, b, kCropSize, kCropSize));
      const auto pooled = pool(f);
      out.insert(out.end(), pooled.begin(), pooled.end());
    }
    return Tensor({boxes.size(), c}, std::move(out));
  }

  /// Spatial mean of an H×W×C map.
  static std::vector<float> pool(const Tensor& f) {
    const std::size_t c = f.dim(2), hw = f.dim(0) * f.dim(1);
    std::vector<double> acc(c, 0.0);
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t k = 0; k < c; ++k) acc[k] += f[p * c + k];
    }
    std::vector<float> out(c);
    for (std::size_t k = 0; k < c; ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(hw));
    return out;
  }

 private:
  // 3×3, stride 2, zero padding 1, followed by ReLU. HWC layout.
  static std::vector<float> conv_stride2(const std::vector<float>& in, int& h, int& w, const ConvLayer& layer) {
    const int oh = (h + 1) / 2, ow = (w + 1) / 2, cin = layer.in_channels;
    const int k = 9 * cin;
    using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    RowMat cols = RowMat::Zero(oh * ow, k);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float* row = cols.data() + static_cast<std::ptrdiff_t>(oy * ow + ox) * k;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = 2 * oy - 1 + ky;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = 2 * ox - 1 + kx;
            if (ix < 0 || ix >= w) continue;
            const float* src = in.data() + static_cast<std::ptrdiff_t>(iy * w + ix) * cin;
            std::copy_n(src, cin, row + (ky * 3 + kx) * cin);
          }
        }
      }
    }
    std::vector<float> out(static_cast<std::size_t>(oh * ow * layer.out_channels));
    Eigen::Map<RowMat> y(out.data(), oh * ow, layer.out_channels);
    y.noalias() = cols * Eigen::Map<const RowMat>(layer.weight.data(), k, layer.out_channels);
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(layer.bias.data(), layer.out_channels);
    y = y.cwiseMax(0.0f);
    h = oh;
    w = ow;
    return out;
  }

  std::uint64_t seed_;
  std::vector<ConvLayer> layers_;
};

}  // namespace sdetr
