// DETR-style encoder/decoder with multi-view cross-attention and the
// prediction heads used in pretraining and finetuning.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdetr/nn.hpp"
#include "sdetr/ops.hpp"
#include "sdetr/rng.hpp"
#include "sdetr/tensor.hpp"

namespace sdetr {

struct TransformerConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t queries = 10;
  std::size_t backbone_channels = 64;  // C_b; also the semantic head width C'
  bool identity_projector = false;

  std::size_t semantic_dim() const { return backbone_channels; }

  void validate() const {
    if (d_model == 0 || heads == 0 || d_model % heads != 0) {
      throw std::invalid_argument("transformer: d_model must be a positive multiple of heads");
    }
    if (queries == 0) throw std::invalid_argument("transformer: need at least one query");
    if (d_model % 4 != 0) throw std::invalid_argument("transformer: d_model must be divisible by 4 (sine embedding)");
  }

  /// Full-size architecture from the original setup (not used by the desk runs).
  static TransformerConfig full_scale() { return {256, 8, 6, 6, 2048, 100, 2048, false}; }
};

/// Fixed 2-D sine/cosine embedding: C/2 channels for y then C/2 for x,
/// positions normalized to (0, 2π], temperature 10000. Row-major H·W×C.
template <class T>
BasicTensor<T> sine_position_embedding(std::size_t height, std::size_t width, std::size_t channels) {
  const std::size_t half = channels / 2;
  constexpr double kTemperature = 10000.0;
  constexpr double kScale = 2.0 * std::numbers::pi;
  constexpr double kEps = 1e-6;
  std::vector<double> dim_t(half);
  for (std::size_t k = 0; k < half; ++k) {
    dim_t[k] = std::pow(kTemperature, 2.0 * static_cast<double>(k / 2) / static_cast<double>(half));
  }
  std::vector<T> out(height * width * channels);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double ey = static_cast<double>(y + 1) / (static_cast<double>(height) + kEps) * kScale;
      const double ex = static_cast<double>(x + 1) / (static_cast<double>(width) + kEps) * kScale;
      T* row = out.data() + (y * width + x) * channels;
      for (std::size_t k = 0; k < half; ++k) {
        const double vy = ey / dim_t[k], vx = ex / dim_t[k];
        row[k] = static_cast<T>(k % 2 == 0 ? std::sin(vy) : std::cos(vy));
        row[half + k] = static_cast<T>(k % 2 == 0 ? std::sin(vx) : std::cos(vx));
      }
    }
  }
  return BasicTensor<T>({height * width, channels}, std::move(out));
}

/// Head-averaged attention weights captured from one attention call.
template <class T>
struct AttentionMap {
  std::size_t queries = 0, keys = 0;
  std::vector<T> weights;  // queries×keys, rows sum to 1
};

/// Multi-head attention. Inputs are projected by <prefix>.f_q/f_k/f_v, each
/// head attends with softmax(q kᵀ/√d_k), and the concatenated heads pass
/// through <prefix>.out.
template <class T>
BasicTensor<T> mha(const ParamStore<T>& ps, const std::string& prefix, const BasicTensor<T>& query_in,
                   const BasicTensor<T>& key_in, const BasicTensor<T>& value_in, std::size_t heads,
                   AttentionMap<T>* capture = nullptr) {
  if (key_in.rank() != 2 || value_in.rank() != 2 || key_in.dim(0) != value_in.dim(0)) {
    throw shape_error("mha(key/value)", key_in.shape(), value_in.shape());
  }
  const auto q = linear(ps, prefix + ".f_q", query_in);
  const auto k = linear(ps, prefix + ".f_k", key_in);
  const auto v = linear(ps, prefix + ".f_v", value_in);
  std::vector<T>* weights = nullptr;
  if (capture) {
    capture->queries = q.dim(0);
    capture->keys = k.dim(0);
    weights = &capture->weights;
  }
  const auto merged = multi_head_attention(q, k, v, heads, weights);
  return linear(ps, prefix + ".out", merged);
}

template <class T>
void add_attention(ParamStore<T>& ps, const std::string& prefix, std::size_t c, Rng& rng) {
  for (const char* p : {".f_q", ".f_k", ".f_v", ".out"}) add_linear(ps, prefix + p, c, c, rng);
}

/// Encoder output for one view: tokens are H₁W₁×C, pos the matching
/// positional embedding.
template <class T>
struct Context {
  BasicTensor<T> tokens;
  BasicTensor<T> pos;
  std::size_t height = 0, width = 0;
};

template <class T>
struct Predictions {
  BasicTensor<T> boxes;    // N×4 normalized cxcywh, in (0,1)
  BasicTensor<T> semantic; // N×C'
  BasicTensor<T> match;    // N×1 in (0,1)
};

/// The trainable transformer with every head. Parameters are created in a
/// fixed order from `seed`; the finetuning class head is added separately
/// so its initialization does not depend on the rest.
template <class T>
class DetrModel {
 public:
  DetrModel(TransformerConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
    config_.validate();
    Rng rng(mix_seed(seed));
    const std::size_t c = config_.d_model, cb = config_.backbone_channels;
    add_linear(params_, "input_proj", cb, c, rng);
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l);
      add_attention(params_, p + ".self", c, rng);
      add_norm(params_, p + ".norm1", c);
      add_linear(params_, p + ".ffn.lin1", c, config_.ffn_dim, rng);
      add_linear(params_, p + ".ffn.lin2", config_.ffn_dim, c, rng);
      add_norm(params_, p + ".norm2", c);
    }
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      add_attention(params_, p + ".self", c, rng);
      add_norm(params_, p + ".norm1", c);
      add_attention(params_, p + ".cross", c, rng);
      add_norm(params_, p + ".norm2", c);
      add_linear(params_, p + ".ffn.lin1", c, config_.ffn_dim, rng);
      add_linear(params_, p + ".ffn.lin2", config_.ffn_dim, c, rng);
      add_norm(params_, p + ".norm3", c);
    }
    add_norm(params_, "decoder.norm", c);
    {
      std::vector<T> q(config_.queries * c);
      for (auto& v : q) v = static_cast<T>(rng.normal());
      params_.add("query_embed", BasicTensor<T>({config_.queries, c}, std::move(q)));
    }
    add_linear(params_, "region_proj", cb, c, rng, /*bias=*/false);
    add_linear(params_, "box.lin0", c, c, rng);
    add_linear(params_, "box.lin1", c, c, rng);
    add_linear(params_, "box.lin2", c, 4, rng);
    add_linear(params_, "sem", c, config_.semantic_dim(), rng);
    add_linear(params_, "match", c, 1, rng);
    if (!config_.identity_projector) {
      add_linear(params_, "projector.fc0", c, c, rng);
      add_norm(params_, "projector.bn0", c);
      add_linear(params_, "projector.fc1", c, c, rng);
      add_norm(params_, "projector.bn1", c);
      add_linear(params_, "projector.fc2", c, c, rng);
    }
  }

  const TransformerConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  bool has_class_head() const { return params_.contains("class.weight"); }
  std::size_t num_classes() const { return has_class_head() ? params_.get("class.weight").dim(0) - 1 : 0; }

  /// Adds a fresh (K+1)-way classifier; its init depends only on `seed`.
  void add_class_head(std::size_t num_classes, std::uint64_t seed) {
    Rng rng(mix_seed(seed ^ 0xC1A55EEDULL));
    add_linear(params_, "class", config_.d_model, num_classes + 1, rng);
  }

  /// Backbone map H₁×W₁×C_b -> global context.
  Context<T> encode(const BasicTensor<T>& features) const {
    if (features.rank() != 3 || features.dim(2) != config_.backbone_channels) {
      throw ShapeError("encode: expected H×W×" + std::to_string(config_.backbone_channels) + " features, got " +
                       shape_str(features.shape()));
    }
    Context<T> ctx;
    ctx.height = features.dim(0);
    ctx.width = features.dim(1);
    const std::size_t len = ctx.height * ctx.width;
    ctx.pos = sine_position_embedding<T>(ctx.height, ctx.width, config_.d_model);
    auto x = linear(params_, "input_proj", reshape(features, {len, config_.backbone_channels}));
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l);
      const auto qk = add(x, ctx.pos);
      x = layer_norm(params_, p + ".norm1", add(x, mha(params_, p + ".self", qk, qk, x, config_.heads)));
      x = layer_norm(params_, p + ".norm2", add(x, ffn(p + ".ffn", x)));
    }
    ctx.tokens = x;
    return ctx;
  }

  /// Decoder pass. With `region` (N×C_b, index-aligned with the queries) the
  /// projected region features are added to the object queries, so every
  /// cross-attention query is f_q(z + φ_q + tgt); without it this is the
  /// plain DETR decoder. Returns the normalized output of every layer; the
  /// last one is q̂.
  std::vector<BasicTensor<T>> decode_layers(const Context<T>& ctx, const std::optional<BasicTensor<T>>& region,
                                            AttentionMap<T>* final_cross = nullptr) const {
    const std::size_t n = config_.queries, c = config_.d_model;
    BasicTensor<T> query_pos = params_.get("query_embed");
    if (region) {
      if (region->rank() != 2 || region->dim(0) != n || region->dim(1) != config_.backbone_channels) {
        throw ShapeError("decode: region features must be " + std::to_string(n) + "×" +
                         std::to_string(config_.backbone_channels) + " (one per query), got " +
                         shape_str(region->shape()));
      }
      query_pos = add(query_pos, linear(params_, "region_proj", *region));
    }
    const auto key = add(ctx.tokens, ctx.pos);
    auto tgt = BasicTensor<T>::zeros({n, c});
    std::vector<BasicTensor<T>> outputs;
    for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      const auto qk = add(tgt, query_pos);
      tgt = layer_norm(params_, p + ".norm1", add(tgt, mha(params_, p + ".self", qk, qk, tgt, config_.heads)));
      AttentionMap<T>* cap = (l + 1 == config_.decoder_layers) ? final_cross : nullptr;
      tgt = layer_norm(params_, p + ".norm2",
                       add(tgt, mha(params_, p + ".cross", add(tgt, query_pos), key, ctx.tokens, config_.heads, cap)));
      tgt = layer_norm(params_, p + ".norm3", add(tgt, ffn(p + ".ffn", tgt)));
      outputs.push_back(layer_norm(params_, "decoder.norm", tgt));
    }
    if (outputs.empty()) outputs.push_back(layer_norm(params_, "decoder.norm", tgt));
    return outputs;
  }

  BasicTensor<T> decode(const Context<T>& ctx, const std::optional<BasicTensor<T>>& region,
                        AttentionMap<T>* final_cross = nullptr) const {
    return decode_layers(ctx, region, final_cross).back();
  }

  /// Box (sigmoid cxcywh), semantic and match heads on decoder output.
  Predictions<T> predict(const BasicTensor<T>& qhat) const {
    Predictions<T> out;
    out.boxes = predict_boxes(qhat);
    out.semantic = linear(params_, "sem", qhat);
    out.match = sigmoid(linear(params_, "match", qhat));
    return out;
  }

  BasicTensor<T> predict_boxes(const BasicTensor<T>& qhat) const {
    auto h = relu(linear(params_, "box.lin0", qhat));
    h = relu(linear(params_, "box.lin1", h));
    return sigmoid(linear(params_, "box.lin2", h));
  }

  BasicTensor<T> classify(const BasicTensor<T>& qhat) const {
    if (!has_class_head()) throw std::logic_error("classify: model has no class head");
    return linear(params_, "class", qhat);
  }

  /// Spatial mean of the context tokens: C.
  static BasicTensor<T> pool_context(const Context<T>& ctx) { return mean_leading(ctx.tokens); }

  /// Projector over a batch of pooled contexts (B×C). The MLP variant is
  /// FC-BN-ReLU, FC-BN-ReLU, FC with batch statistics, so B must be >= 2.
  BasicTensor<T> project(const BasicTensor<T>& pooled) const {
    if (config_.identity_projector) return pooled;
    auto h = relu(batch_norm_1d(linear(params_, "projector.fc0", pooled), params_.get("projector.bn0.gamma"),
                                params_.get("projector.bn0.beta")));
    h = relu(batch_norm_1d(linear(params_, "projector.fc1", h), params_.get("projector.bn1.gamma"),
                           params_.get("projector.bn1.beta")));
    return linear(params_, "projector.fc2", h);
  }

  /// Copy with parameters converted to another scalar type.
  template <class To>
  DetrModel<To> cast() const {
    DetrModel<To> out(config_, seed_);
    if (has_class_head()) out.add_class_head(num_classes(), 0);
    for (const auto& name : params_.names()) {
      const auto& src = params_.get(name).values();
      out.params().assign(name, std::vector<To>(src.begin(), src.end()));
    }
    return out;
  }

 private:
  BasicTensor<T> ffn(const std::string& prefix, const BasicTensor<T>& x) const {
    return linear(params_, prefix + ".lin2", relu(linear(params_, prefix + ".lin1", x)));
  }

  TransformerConfig config_;
  std::uint64_t seed_;
  ParamStore<T> params_;
};

}  // namespace sdetr
