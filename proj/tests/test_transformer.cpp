#include <gtest/gtest.h>

#include <cmath>

#include "sdetr/transformer.hpp"

namespace sdetr {
namespace {

using D = BasicTensor<double>;

ParamStore<double> identity_attention(std::size_t c) {
  ParamStore<double> ps;
  for (const char* p : {"a.f_q", "a.f_k", "a.f_v", "a.out"}) {
    std::vector<double> eye(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;
    ps.add(std::string(p) + ".weight", D({c, c}, eye));
    ps.add(std::string(p) + ".bias", D::zeros({c}));
  }
  return ps;
}

D random_d(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return D(std::move(shape), std::move(v));
}

TEST(Attention, HandComputedSingleHead) {
  const auto ps = identity_attention(2);
  const D x({2, 2}, {1.0, 0.0, 0.0, 2.0});
  const D out = mha(ps, "a", x, x, x, 1);
  const double s = 1.0 / std::sqrt(2.0);
  // Row 0 scores: [1, 0]·s, row 1 scores: [0, 4]·s.
  const double w00 = std::exp(s) / (std::exp(s) + 1.0);
  const double w11 = std::exp(4 * s) / (1.0 + std::exp(4 * s));
  EXPECT_NEAR(out[0], w00 * 1.0, 1e-12);
  EXPECT_NEAR(out[1], (1 - w00) * 2.0, 1e-12);
  EXPECT_NEAR(out[2], (1 - w11) * 1.0, 1e-12);
  EXPECT_NEAR(out[3], w11 * 2.0, 1e-12);
}

TEST(Attention, SingleKeyAndIdenticalKeys) {
  const auto ps = identity_attention(4);
  Rng rng(1);
  const D q = random_d({3, 4}, rng);
  const D v1 = random_d({1, 4}, rng);
  const D one = mha(ps, "a", q, v1, v1, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(one[r * 4 + k], v1[k], 1e-12);
  }

  // Keys equal, values differ: each query receives the mean value.
  const D keys({3, 4}, std::vector<double>{0.5, -1, 2, 0, 0.5, -1, 2, 0, 0.5, -1, 2, 0});
  const D values = random_d({3, 4}, rng);
  const D mean = mha(ps, "a", q, keys, values, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(mean[r * 4 + k], (values[k] + values[4 + k] + values[8 + k]) / 3, 1e-12);
    }
  }
  EXPECT_THROW(mha(ps, "a", q, keys, v1, 2), ShapeError);
}

TEST(Encoder, NoLayersIsInputProjection) {
  TransformerConfig cfg;
  cfg.encoder_layers = 0;
  const DetrModel<double> m(cfg, 5);
  Rng rng(2);
  const D f = random_d({4, 4, 64}, rng);
  const auto ctx = m.encode(f);
  const D want = linear(m.params(), "input_proj", reshape(f, {16, 64}));
  EXPECT_EQ(ctx.tokens.values(), want.values());
}

TEST(Encoder, OutputShapeAndBadInput) {
  const DetrModel<float> m(TransformerConfig{}, 1);
  Rng rng(3);
  std::vector<float> v(16 * 16 * 64);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const auto ctx = m.encode(Tensor({16, 16, 64}, v));
  EXPECT_EQ(ctx.tokens.shape(), (Shape{256, 64}));
  EXPECT_EQ(ctx.pos.shape(), (Shape{256, 64}));
  EXPECT_THROW(m.encode(Tensor::zeros({4, 4, 32})), ShapeError);
}

TEST(PositionEmbedding, SineCosinePattern) {
  const auto pe = sine_position_embedding<double>(2, 3, 8);
  ASSERT_EQ(pe.shape(), (Shape{6, 8}));
  const double two_pi = 2 * std::numbers::pi;
  // Row (y=1, x=2): first y channel is sin of the normalized y position.
  EXPECT_NEAR(pe[(1 * 3 + 2) * 8 + 0], std::sin(2.0 / (2.0 + 1e-6) * two_pi), 1e-9);
  EXPECT_NEAR(pe[(1 * 3 + 2) * 8 + 1], std::cos(2.0 / (2.0 + 1e-6) * two_pi), 1e-9);
  EXPECT_NEAR(pe[(1 * 3 + 2) * 8 + 4], std::sin(3.0 / (3.0 + 1e-6) * two_pi), 1e-9);
}

class DecoderTest : public ::testing::Test {
 protected:
  DecoderTest() : model(TransformerConfig{}, 7) {
    Rng rng(4);
    features = random_d({8, 8, 64}, rng);
    region = random_d({10, 64}, rng);
  }
  DetrModel<double> model;
  D features, region;
};

TEST_F(DecoderTest, ZeroRegionEqualsPlainDecoderBitwise) {
  const auto ctx = model.encode(features);
  const D plain = model.decode(ctx, std::nullopt);
  const D zero = model.decode(ctx, D::zeros({10, 64}));
  EXPECT_EQ(plain.values(), zero.values());
  EXPECT_EQ(plain.shape(), (Shape{10, 64}));
  EXPECT_NE(model.decode(ctx, region).values(), plain.values());
}

TEST_F(DecoderTest, EquivariantUnderJointQueryPermutation) {
  const auto ctx = model.encode(features);
  const D base = model.decode(ctx, region);
  const std::vector<std::size_t> perm{3, 0, 9, 1, 8, 2, 7, 4, 6, 5};
  auto& qe = model.params().get("query_embed");
  model.params().assign("query_embed", index_rows(qe, perm).values());
  const D permuted = model.decode(ctx, index_rows(region, perm));
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t k = 0; k < 64; ++k) EXPECT_NEAR(permuted[i * 64 + k], base[perm[i] * 64 + k], 1e-9);
  }
}

TEST_F(DecoderTest, RegionCountMustMatchQueries) {
  const auto ctx = model.encode(features);
  EXPECT_THROW(model.decode(ctx, D::zeros({9, 64})), ShapeError);
  EXPECT_THROW(model.decode(ctx, D::zeros({10, 32})), ShapeError);
}

TEST_F(DecoderTest, HeadsShapesAndRanges) {
  const auto ctx = model.encode(features);
  const auto pred = model.predict(model.decode(ctx, region));
  EXPECT_EQ(pred.boxes.shape(), (Shape{10, 4}));
  EXPECT_EQ(pred.semantic.shape(), (Shape{10, 64}));
  EXPECT_EQ(pred.match.shape(), (Shape{10, 1}));
  for (double v : pred.boxes.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  model.params().assign("box.lin2.weight", std::vector<double>(4 * 64, 0.0));
  model.params().assign("box.lin2.bias", std::vector<double>(4, 0.0));
  const D centered = model.predict_boxes(model.decode(ctx, region));
  for (double v : centered.values()) EXPECT_EQ(v, 0.5);
}

TEST_F(DecoderTest, QueryEmbeddingReceivesGradient) {
  const auto ctx = model.encode(features);
  backward(sum(model.predict_boxes(model.decode(ctx, region))));
  const auto g = model.params().get("query_embed").grad();
  double norm = 0;
  for (double v : g) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST_F(DecoderTest, CapturedCrossAttentionRowsSumToOne) {
  const auto ctx = model.encode(features);
  AttentionMap<double> map;
  model.decode(ctx, region, &map);
  ASSERT_EQ(map.queries, 10u);
  ASSERT_EQ(map.keys, 64u);
  for (std::size_t q = 0; q < map.queries; ++q) {
    double s = 0;
    for (std::size_t k = 0; k < map.keys; ++k) s += map.weights[q * map.keys + k];
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Projector, IdentityAndMlpShapes) {
  TransformerConfig cfg;
  cfg.identity_projector = true;
  const DetrModel<double> id(cfg, 1);
  Rng rng(5);
  const D pooled = random_d({3, 64}, rng);
  EXPECT_EQ(id.project(pooled).values(), pooled.values());
  EXPECT_FALSE(id.params().contains("projector.fc0.weight"));

  const DetrModel<double> mlp(TransformerConfig{}, 1);
  EXPECT_EQ(mlp.project(pooled).shape(), (Shape{3, 64}));
  EXPECT_THROW(mlp.project(random_d({1, 64}, rng)), ShapeError);
}

TEST(Model, SameSeedSameParameters) {
  const DetrModel<float> a(TransformerConfig{}, 9), b(TransformerConfig{}, 9), c(TransformerConfig{}, 10);
  bool any_diff = false;
  for (const auto& name : a.params().names()) {
    EXPECT_EQ(a.params().get(name).values(), b.params().get(name).values()) << name;
    any_diff = any_diff || a.params().get(name).values() != c.params().get(name).values();
  }
  EXPECT_TRUE(any_diff);
  TransformerConfig bad;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

}  // namespace
}  // namespace sdetr
