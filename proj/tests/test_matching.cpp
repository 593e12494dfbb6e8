#include <gtest/gtest.h>

#include <cmath>

#include "sdetr/losses.hpp"
#include "sdetr/training.hpp"
#include "support/grad_cases.hpp"
#include "support/oracles.hpp"

namespace sdetr {
namespace {

using D = BasicTensor<double>;

TEST(Hungarian, SmallExamples) {
  const auto one = hungarian(CostMatrix(1, 1, std::vector<double>{0.0}));
  EXPECT_EQ(one.target_to_pred, (std::vector<std::size_t>{0}));

  const auto swap = hungarian(CostMatrix(2, 2, std::vector<double>{1, 2, 2, 1}));
  EXPECT_EQ(swap.target_to_pred, (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(swap.cost, 2.0);

  const auto three = hungarian(CostMatrix(3, 3, std::vector<double>{4, 1, 3, 2, 0, 5, 3, 2, 2}));
  EXPECT_EQ(three.target_to_pred, (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_DOUBLE_EQ(three.cost, 5.0);

  EXPECT_TRUE(hungarian(CostMatrix(0, 4)).target_to_pred.empty());
  EXPECT_THROW(hungarian(CostMatrix(3, 2)), std::invalid_argument);
  EXPECT_THROW(hungarian(CostMatrix(1, 2, std::vector<double>{1, NAN})), std::invalid_argument);
}

TEST(Hungarian, MatchesBruteForce) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(7), m = 1 + rng.index(n);
    CostMatrix c(m, n);
    for (auto& v : c.data) v = rng.uniform(-5, 5);
    const auto got = hungarian(c);
    ASSERT_NEAR(got.cost, testing::brute_force_assignment(c), 1e-9) << "trial " << trial;
    ASSERT_NEAR(assignment_cost(c, got.target_to_pred), got.cost, 1e-9);
  }
}

TEST(Hungarian, TiesResolveToLexicographicallySmallest) {
  Rng rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.index(6), m = 1 + rng.index(n);
    CostMatrix c(m, n);
    for (auto& v : c.data) v = static_cast<double>(rng.index(3));
    const auto got = hungarian(c);
    ASSERT_EQ(got.target_to_pred, testing::brute_force_lexicographic(c)) << "trial " << trial;
    ASSERT_EQ(got.target_to_pred, hungarian(c).target_to_pred);
  }
}

TEST(Hungarian, RowConstantDoesNotChangeAssignment) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    CostMatrix c(4, 6);
    for (auto& v : c.data) v = rng.uniform(0, 1);
    CostMatrix shifted = c;
    const double k = rng.uniform(-10, 10);
    for (std::size_t j = 0; j < 6; ++j) shifted(2, j) += k;
    EXPECT_EQ(hungarian(c).target_to_pred, hungarian(shifted).target_to_pred);
  }
}

TEST(MatchingCost, Coefficients) {
  const MatchCoefficients k;
  EXPECT_EQ(k.match, 1.0);
  EXPECT_EQ(k.giou, 2.0);
  EXPECT_EQ(k.l1, 5.0);
  const D boxes({1, 4}, {0.5, 0.5, 0.2, 0.2});
  const D match({1, 1}, {0.5});
  const CostMatrix c = matching_cost(boxes, match, {{0.5f, 0.5f, 0.2f, 0.2f}});
  EXPECT_NEAR(c(0, 0), -std::log(0.5), 1e-6);
  const CostMatrix off = matching_cost(boxes, match, {{0.6f, 0.5f, 0.2f, 0.2f}});
  // Shifted by 0.1: ℓ₁ = 0.1, IoU = 1/3, hull equals union.
  EXPECT_NEAR(off(0, 0), -std::log(0.5) + 2 * (1 - 1.0 / 3) + 5 * 0.1, 1e-6);
}

TEST(LocLoss, PerfectPredictionIsNearZero) {
  const std::vector<BoxCxCyWH> targets{{0.3f, 0.3f, 0.2f, 0.2f}, {0.7f, 0.6f, 0.3f, 0.4f}};
  const D boxes = box_tensor<double>(targets);
  const D match({2, 1}, {1 - 1e-9, 1 - 1e-9});
  const auto sigma = hungarian(matching_cost(boxes, match, targets));
  EXPECT_EQ(sigma.target_to_pred, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(loc_loss_direction(boxes, match, targets, sigma).item(), 0.0, 1e-5);
}

TEST(LocLoss, L1TermExample) {
  // Prediction [0.5,0.5,0.4,0.4] vs target [0.6,0.6,0.4,0.4]: ℓ₁ = 0.2, so 5ℓ₁ = 1.
  const D pred({1, 4}, {0.5, 0.5, 0.4, 0.4}), tgt({1, 4}, {0.6, 0.6, 0.4, 0.4});
  const double giou = giou_rows(pred, tgt).item();
  EXPECT_NEAR(box_loss(pred, tgt).item(), 2 * (1 - giou) + 1.0, 1e-9);
  const D pred2({1, 4}, {0.5, 0.5, 0.4, 0.4}), tgt2({1, 4}, {0.7, 0.7, 0.4, 0.4});
  EXPECT_NEAR(box_loss(pred2, tgt2).item() - 2 * (1 - giou_rows(pred2, tgt2).item()), 2.0, 1e-9);
}

TEST(LocLoss, GiouMatchesGeometry) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const double a[4] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
    const double b[4] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)};
    const BoxXYXY ax{static_cast<float>(a[0] - a[2] / 2), static_cast<float>(a[1] - a[3] / 2),
                     static_cast<float>(a[0] + a[2] / 2), static_cast<float>(a[1] + a[3] / 2)};
    const BoxXYXY bx{static_cast<float>(b[0] - b[2] / 2), static_cast<float>(b[1] - b[3] / 2),
                     static_cast<float>(b[0] + b[2] / 2), static_cast<float>(b[1] + b[3] / 2)};
    EXPECT_NEAR(giou_cxcywh(a, b), box_giou(ax, bx), 1e-5);
    EXPECT_NEAR(giou_cxcywh(a, b), giou_cxcywh(b, a), 1e-12);
  }
}

TEST(GlobalLoss, IdentityProjectorValues) {
  Rng rng(5);
  const D p = testing::random_tensor({3, 8}, rng);
  EXPECT_NEAR(global_disc_loss(p, p, p, p).item(), -2.0, 1e-12);
  const D e1({1, 2}, {1.0, 0.0}), e2({1, 2}, {0.0, 1.0});
  EXPECT_NEAR(global_disc_loss(e1, e1, e2, e2).item(), 0.0, 1e-12);
}

TEST(GlobalLoss, TargetBranchReceivesNoGradient) {
  Rng rng(6);
  D proj = testing::random_tensor({4, 8}, rng), target = testing::random_tensor({4, 8}, rng);
  proj.set_requires_grad(true);
  target.set_requires_grad(true);
  backward(negative_cosine(proj, target));
  for (double g : target.grad()) EXPECT_EQ(g, 0.0);
  double norm = 0;
  for (double g : proj.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(RegionLoss, ClosedForms) {
  Rng rng(7);
  const D p = testing::random_tensor({3, 6}, rng);
  MatchAssignment sigma{{0, 1, 2}, 0};
  EXPECT_NEAR(region_disc_direction(scale(p, 2.5), p, sigma).item(), 0.0, 1e-12);
  EXPECT_NEAR(region_disc_direction(neg(p), p, sigma).item(), 4.0, 1e-12);

  for (int trial = 0; trial < 50; ++trial) {
    const D a = testing::random_tensor({1, 6}, rng), b = testing::random_tensor({1, 6}, rng);
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < 6; ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    const double cos = dot / std::sqrt(na * nb);
    EXPECT_NEAR(region_disc_direction(a, b, MatchAssignment{{0}, 0}).item(), 2 - 2 * cos, 1e-6);
  }
}

TEST(RegionLoss, UsesMatchedPrediction) {
  const D semantic({2, 2}, {0.0, 1.0, 1.0, 0.0});
  const D target({1, 2}, {3.0, 0.0});
  EXPECT_NEAR(region_disc_direction(semantic, target, MatchAssignment{{1}, 0}).item(), 0.0, 1e-12);
  EXPECT_NEAR(region_disc_direction(semantic, target, MatchAssignment{{0}, 0}).item(), 2.0, 1e-12);
}

TEST(TotalLoss, WeightedSum) {
  const auto b = total_loss(1.0, -0.5, 0.2, LossWeights{1.0, 3.0, 5.0});
  EXPECT_NEAR(b.total, 0.2 - 1.5 + 5.0, 1e-12);
  EXPECT_NEAR(total_loss(2.0, 0.5, 0.3, LossWeights{1.0, 1.0, 1.0}).total, 2.8, 1e-12);
  EXPECT_NEAR(total_loss(2.0, 0.5, 0.3, LossWeights{0.0, 0.0, 1.0}).total, 2.0, 1e-12);
  EXPECT_THROW(total_loss(1.0, 1.0, 1.0, LossWeights{-1.0, 1.0, 1.0}), std::invalid_argument);
  const auto coco = LossWeights::coco(), inet = LossWeights::imagenet();
  EXPECT_EQ(coco.region, 0.3);
  EXPECT_EQ(coco.global, 3.0);
  EXPECT_EQ(inet.region, 3.0);
  EXPECT_EQ(inet.global, 10.0);
}

TEST(FinetuneLoss, EmptyAndPerfect) {
  // Uniform logits over 4 columns, no targets: every query pays 0.1·ln 4.
  const D logits = D::zeros({5, 4});
  const D boxes = D::full({5, 4}, 0.5);
  EXPECT_NEAR(finetune_set_loss(logits, boxes, {}, {}).item(), 0.1 * std::log(4.0), 1e-12);

  std::vector<double> l(3 * 4, -20.0);
  l[0 * 4 + 2] = 20;  // query 0 -> class 2
  l[1 * 4 + 3] = 20;  // query 1 -> no object
  l[2 * 4 + 0] = 20;  // query 2 -> class 0
  const std::vector<BoxCxCyWH> targets{{0.3f, 0.3f, 0.2f, 0.2f}, {0.6f, 0.7f, 0.3f, 0.2f}};
  const D pbox({3, 4}, {0.3, 0.3, 0.2, 0.2, 0.5, 0.5, 0.5, 0.5, 0.6, 0.7, 0.3, 0.2});
  MatchAssignment sigma;
  EXPECT_LT(finetune_set_loss(D({3, 4}, l), pbox, targets, {2, 0}, &sigma).item(), 0.01);
  EXPECT_EQ(sigma.target_to_pred, (std::vector<std::size_t>{0, 2}));
}

TEST(FinetuneLoss, ClassTermDrivesMatching) {
  // Identical boxes; only the class probabilities separate the queries.
  std::vector<double> l(2 * 3, 0.0);
  l[0 * 3 + 1] = 5;
  l[1 * 3 + 0] = 5;
  const D boxes({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.5, 0.5, 0.2, 0.2});
  const std::vector<BoxCxCyWH> targets{{0.5f, 0.5f, 0.2f, 0.2f}, {0.5f, 0.5f, 0.2f, 0.2f}};
  const auto sigma = hungarian(finetune_matching_cost(D({2, 3}, l), boxes, targets, {0, 1}));
  EXPECT_EQ(sigma.target_to_pred, (std::vector<std::size_t>{1, 0}));
  EXPECT_THROW(finetune_matching_cost(D({2, 3}, l), boxes, targets, {0, 2}), std::invalid_argument);
}

TEST(PretrainLoss, InvariantToViewSwap) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const DetrModel<double> model(testing::tiny_config(), seed);
    auto batch = testing::tiny_batch(seed + 100, 3);
    const auto a = pretrain_loss(model, batch, LossWeights{1, 1, 1}).breakdown(LossWeights{1, 1, 1});
    for (auto& f : batch) {
      std::swap(f.features1, f.features2);
      std::swap(f.z1, f.z2);
      std::swap(f.target1, f.target2);
      std::swap(f.boxes1, f.boxes2);
    }
    const auto b = pretrain_loss(model, batch, LossWeights{1, 1, 1}).breakdown(LossWeights{1, 1, 1});
    EXPECT_NEAR(a.total, b.total, 1e-5);
    EXPECT_NEAR(a.loc, b.loc, 1e-5);
    EXPECT_NEAR(a.global_disc, b.global_disc, 1e-5);
    EXPECT_NEAR(a.region_disc, b.region_disc, 1e-5);
    EXPECT_NEAR(a.total, a.loc + a.global_disc + a.region_disc, 1e-6);
  }
}

}  // namespace
}  // namespace sdetr
