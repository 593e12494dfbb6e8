#include <gtest/gtest.h>

#include <algorithm>

#include "sdetr/synthetic_data.hpp"
#include "sdetr/view_pipeline.hpp"

namespace sdetr {
namespace {

double area_ratio(const BoxXYXY& b, int w, int h) {
  return (static_cast<double>(b.x2) - b.x1) * (static_cast<double>(b.y2) - b.y1) / (static_cast<double>(w) * h);
}

Image textured(std::uint64_t seed) { return render_scene(SceneSpec{}, seed).image; }

TEST(BaseRect, AreaRatioWithinBounds) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const BoxXYXY b = sample_base_rect(256, 256, rng);
    const double r = area_ratio(b, 256, 256);
    ASSERT_GE(r, 0.5);
    ASSERT_LE(r, 1.0);
    ASSERT_TRUE(contains({0, 0, 256, 256}, b));
  }
}

TEST(BaseRect, DegenerateRangeAndDeterminism) {
  Rng rng(2);
  EXPECT_EQ(sample_base_rect(100, 80, rng, 1.0f, 1.0f), (BoxXYXY{0, 0, 100, 80}));
  Rng a(42), b(42);
  EXPECT_EQ(sample_base_rect(128, 128, a), sample_base_rect(128, 128, b));
  EXPECT_THROW(sample_base_rect(16, 128, a), std::invalid_argument);
}

TEST(ViewRects, IouConstraint) {
  Rng rng(3);
  float worst = 1.0f;
  for (int i = 0; i < 10000; ++i) {
    const BoxXYXY base = sample_base_rect(128, 128, rng);
    const auto [r1, r2] = sample_view_rects(base, 0.5f, 128, 128, rng);
    worst = std::min(worst, box_iou(r1, r2));
    ASSERT_TRUE(contains({0, 0, 128, 128}, r1));
    ASSERT_TRUE(contains({0, 0, 128, 128}, r2));
  }
  EXPECT_GE(worst, 0.5f);
}

TEST(ViewRects, DegenerateCases) {
  Rng rng(4);
  const BoxXYXY base{10, 20, 90, 100};
  const auto [a1, a2] = sample_view_rects(base, 0.5f, 128, 128, rng, 0.0f);
  EXPECT_EQ(a1, a2);
  EXPECT_FLOAT_EQ(box_iou(a1, a2), 1.0f);
  const auto [b1, b2] = sample_view_rects(base, 1.0f, 128, 128, rng);
  EXPECT_EQ(b1, b2);
  EXPECT_THROW(sample_view_rects(base, 0.0f, 128, 128, rng), std::invalid_argument);
}

TEST(Augment, DisabledIsIdentity) {
  const Image img = textured(5);
  Rng rng(5);
  const auto out = augment(img, AugmentConfig::none(), rng);
  EXPECT_EQ(out.image.rgb, img.rgb);
  EXPECT_FALSE(out.record.flip);
  const FrameTransform t = FrameTransform::identity(128, 128);
  EXPECT_EQ(out.apply_to(t).flip, t.flip);
}

TEST(Augment, FlipTwiceAndGrayscale) {
  const Image img = textured(6);
  EXPECT_EQ(flip_horizontal(flip_horizontal(img)).rgb, img.rgb);

  AugmentConfig cfg = AugmentConfig::none();
  cfg.flip_p = 1.0;
  Rng r1(6);
  const auto flipped = augment(img, cfg, r1);
  EXPECT_TRUE(flipped.record.flip);
  EXPECT_EQ(flipped.image.rgb, flip_horizontal(img).rgb);
  EXPECT_TRUE(flipped.apply_to(FrameTransform::identity(128, 128)).flip);

  cfg = AugmentConfig::none();
  cfg.grayscale_p = 1.0;
  Rng r2(7);
  const auto gray = augment(img, cfg, r2);
  for (std::size_t p = 0; p < gray.image.rgb.size(); p += 3) {
    ASSERT_EQ(gray.image.rgb[p], gray.image.rgb[p + 1]);
    ASSERT_EQ(gray.image.rgb[p], gray.image.rgb[p + 2]);
  }
}

TEST(Augment, DefaultsStayInRange) {
  const Image img = textured(8);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto out = augment(img, AugmentConfig{}, rng);
    for (float v : out.image.rgb) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    const auto& r = out.record;
    EXPECT_GE(r.brightness, 0.6f);
    EXPECT_LE(r.brightness, 1.4f);
    EXPECT_TRUE(r.blur_sigma == 0.0f || (r.blur_sigma >= 0.1f && r.blur_sigma <= 2.0f));
  }
}

TEST(Proposals, RandomModeContract) {
  const Image img = textured(9);
  const BoxXYXY overlap{20, 30, 100, 110};
  Rng a(10), b(10);
  const auto p = generate_proposals(img, overlap, ProposalMode::kRandom, 25, a);
  EXPECT_EQ(p, generate_proposals(img, overlap, ProposalMode::kRandom, 25, b));
  ASSERT_EQ(p.size(), 25u);
  for (const auto& box : p) {
    EXPECT_TRUE(contains(overlap, box));
    EXPECT_GE(box.width(), 8.0f - 1e-4f);
    EXPECT_GE(box.height(), 8.0f - 1e-4f);
  }
  Rng c(11);
  EXPECT_THROW(generate_proposals(img, {0, 0, 6, 50}, ProposalMode::kRandom, 5, c), ProposalError);
}

TEST(Proposals, UniformImageKeepsCandidateOrder) {
  // Every score ties, so the stable ranking returns the first draws, which
  // are exactly what random mode returns from the same stream.
  const Image flat(96, 96, 0.4f);
  const BoxXYXY overlap{0, 0, 96, 96};
  Rng a(12), b(12);
  EXPECT_EQ(generate_proposals(flat, overlap, ProposalMode::kObjectness, 7, a),
            generate_proposals(flat, overlap, ProposalMode::kRandom, 7, b));
}

TEST(Proposals, ObjectnessFindsBrightSquare) {
  // The score rewards interior gradient, so the square carries a fine
  // checkerboard; a flat square only has gradient along its outline.
  Image img(96, 96, 0.0f);
  const BoxXYXY square{38, 38, 58, 58};
  for (int y = 38; y < 58; ++y) {
    for (int x = 38; x < 58; ++x) {
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = (x / 3 + y / 3) % 2 ? 1.0f : 0.6f;
    }
  }
  const BoxXYXY overlap{24, 24, 72, 72};
  int ranked = 0, random = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng a(seed), b(seed);
    const auto best = generate_proposals(img, overlap, ProposalMode::kObjectness, 1, a);
    ASSERT_EQ(best.size(), 1u);
    ranked += box_iou(best[0], square) > 0.3f;
    random += box_iou(generate_proposals(img, overlap, ProposalMode::kRandom, 1, b)[0], square) > 0.3f;
  }
  EXPECT_GE(ranked, 65);
  EXPECT_GE(ranked, random + 15);
}

TEST(ViewPair, ContractAtDefaults) {
  ViewConfig cfg;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const ViewPair p = build_view_pair(textured(100 + seed), cfg, seed);
    ASSERT_EQ(p.proposals1.size(), 10u);
    ASSERT_EQ(p.proposals2.size(), 10u);
    EXPECT_GE(box_iou(p.rect1, p.rect2), 0.5f);
    EXPECT_EQ(p.view1.width, 128);
    const BoxXYXY view{0, 0, 128, 128};
    for (std::size_t i = 0; i < 10; ++i) {
      EXPECT_TRUE(contains(view, p.proposals1[i]));
      EXPECT_TRUE(contains(view, p.proposals2[i]));
    }
  }
}

TEST(ViewPair, PureFunctionOfImageSeedConfig) {
  const Image img = textured(13);
  const ViewPair a = build_view_pair(img, ViewConfig{}, 77), b = build_view_pair(img, ViewConfig{}, 77);
  EXPECT_EQ(a.view1.rgb, b.view1.rgb);
  EXPECT_EQ(a.view2.rgb, b.view2.rgb);
  EXPECT_EQ(a.proposals1, b.proposals1);
  EXPECT_EQ(a.proposals2, b.proposals2);
}

TEST(ViewPair, IdenticalRectsWithoutJitterGiveEqualProposals) {
  ViewConfig cfg;
  cfg.tau = 1.0f;
  cfg.jitter = 0.0f;
  cfg.augment = AugmentConfig::none();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ViewPair p = build_view_pair(textured(seed), cfg, seed);
    EXPECT_EQ(p.rect1, p.rect2);
    EXPECT_EQ(p.proposals1, p.proposals2);
  }
}

TEST(ViewPair, ZeroJitterProposalsCorrespondAcrossFrames) {
  ViewConfig cfg;
  cfg.jitter = 0.0f;
  cfg.augment = AugmentConfig::none();
  cfg.augment.flip_p = 0.5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ViewPair p = build_view_pair(textured(seed + 50), cfg, seed);
    for (std::size_t i = 0; i < p.proposals1.size(); ++i) {
      const BoxXYXY via_image = map_box(inverse_map_box(p.proposals1[i], p.t1), p.t2);
      EXPECT_NEAR(via_image.x1, p.proposals2[i].x1, 1e-3);
      EXPECT_NEAR(via_image.y1, p.proposals2[i].y1, 1e-3);
      EXPECT_NEAR(via_image.x2, p.proposals2[i].x2, 1e-3);
      EXPECT_NEAR(via_image.y2, p.proposals2[i].y2, 1e-3);
    }
  }
}

}  // namespace
}  // namespace sdetr
