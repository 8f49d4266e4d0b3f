#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "vdet/detloss.hpp"
#include "vdet/error.hpp"

using namespace vdet;
using namespace vdet::detloss;

namespace {

diff::Tensor filled(const GridLayout& layout, float value) { return diff::Tensor(layout.tensor_shape(), value); }

}  // namespace

TEST(AssignTargets, CenterRule) {
  const auto t = assign_targets({{0, {0.3, 0.3, 0.2, 0.2}}}, 2, 1);
  EXPECT_TRUE(t.obj_mask[t.slot(0, 0, 0)]);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const auto s = t.slot(r, c, 0);
      EXPECT_NE(t.obj_mask[s], t.noobj_mask[s]);
      if (r || c) EXPECT_TRUE(t.noobj_mask[s]);
    }
}

TEST(AssignTargets, EmptyGroundTruth) {
  const auto t = assign_targets({}, 3, 2);
  for (std::size_t s = 0; s < t.obj_mask.size(); ++s) {
    EXPECT_FALSE(t.obj_mask[s]);
    EXPECT_TRUE(t.noobj_mask[s]);
  }
}

TEST(AssignTargets, ExcessBoxesAreDroppedAndCounted) {
  const BBox b{0.5, 0.5, 0.2, 0.2};
  const auto t = assign_targets({{0, b}, {1, b}, {2, b}}, 4, 2);
  EXPECT_EQ(t.object_count(), 2u);
  EXPECT_EQ(t.dropped, 1u);
  EXPECT_EQ(t.gt_class[t.slot(2, 2, 0)], 0);
  EXPECT_EQ(t.gt_class[t.slot(2, 2, 1)], 1);
}

TEST(AssignTargets, OutOfRangeCenterIsSkipped) {
  const auto t = assign_targets({{0, {1.2, 0.5, 0.2, 0.2}}, {0, {0.5, 0.5, 0.0, 0.2}}}, 2, 1);
  EXPECT_EQ(t.skipped, 2u);
  EXPECT_EQ(t.object_count(), 0u);
}

TEST(Loss, NoObjectsAtHalfObjectness) {
  const GridLayout layout{2, 1, 3};
  const auto t = assign_targets({}, 2, 1);
  const auto r = evaluate_loss(filled(layout, 0.5f), t, 3, 0.5);
  EXPECT_NEAR(r.total, 1.386294, 1e-5);
  EXPECT_NEAR(r.total, 0.5 * 4 * std::log(2.0), 1e-6);
  EXPECT_EQ(r.obj, 0.0);
  EXPECT_EQ(r.cls, 0.0);
}

TEST(Loss, PerfectPredictionIsNearZero) {
  const int K = 4;
  const auto t = assign_targets({{1, {0.3, 0.3, 0.2, 0.4}}, {3, {0.8, 0.6, 0.3, 0.1}}}, 4, 2);
  const auto r = evaluate_loss(encode_targets(t, K), t, K, 0.5);
  EXPECT_LT(r.total, 1e-4);
  EXPECT_GE(r.total, 0.0);
}

TEST(Loss, SingleObjectAtHalfObjectness) {
  const int K = 2;
  const auto t = assign_targets({{1, {0.3, 0.3, 0.2, 0.4}}}, 2, 1);
  auto pred = encode_targets(t, K);
  const GridLayout layout{2, 1, K};
  pred[layout.slot_offset(0, 0, 0) + 4] = 0.5f;
  const auto r = evaluate_loss(pred, t, K, 0.5);
  EXPECT_NEAR(r.obj, std::log(2.0), 1e-6);
  EXPECT_LT(r.ciou, 1e-6);
}

TEST(Loss, LambdaScalesOnlyNoObjectTerm) {
  SplitMix64 rng(4);
  const GridLayout layout{3, 2, 3};
  diff::Tensor pred(layout.tensor_shape());
  for (float& v : pred.data()) v = static_cast<float>(rng.uniform(0.05, 0.95));
  const auto t = assign_targets({{0, {0.2, 0.2, 0.3, 0.3}}, {2, {0.7, 0.5, 0.2, 0.4}}}, 3, 2);
  const auto a = evaluate_loss(pred, t, 3, 0.5);
  const auto b = evaluate_loss(pred, t, 3, 2.0);
  EXPECT_EQ(a.ciou, b.ciou);
  EXPECT_EQ(a.obj, b.obj);
  EXPECT_EQ(a.cls, b.cls);
  EXPECT_EQ(a.noobj, b.noobj);
  EXPECT_NEAR(b.total - a.total, 1.5 * a.noobj, 1e-9);
  EXPECT_NEAR(a.total, a.ciou + a.obj + 0.5 * a.noobj + a.cls, 1e-9);
}

TEST(Loss, ComponentsNonNegativeOnRandomInputs) {
  SplitMix64 rng(8);
  const GridLayout layout{4, 2, 3};
  for (int i = 0; i < 50; ++i) {
    diff::Tensor pred(layout.tensor_shape());
    for (float& v : pred.data()) v = static_cast<float>(rng.uniform());
    std::vector<Annotation> gt;
    for (int k = 0; k < 3; ++k) gt.push_back({static_cast<int>(rng.below(3)), oracle::random_box(rng, 0.05, 0.5)});
    const auto r = evaluate_loss(pred, assign_targets(gt, 4, 2), 3, 0.5);
    EXPECT_GE(r.ciou, 0.0);
    EXPECT_GE(r.obj, 0.0);
    EXPECT_GE(r.noobj, 0.0);
    EXPECT_GE(r.cls, 0.0);
  }
}

TEST(Loss, GradientOnTwoByTwoGridMatchesOracle) {
  SplitMix64 rng(21);
  const int K = 2;
  const GridLayout layout{2, 1, K};
  diff::BasicTensor<double> pred(layout.tensor_shape());
  for (double& v : pred.data()) v = rng.uniform(0.1, 0.9);
  const auto t = assign_targets({{1, {0.3, 0.3, 0.3, 0.4}}, {0, {0.7, 0.8, 0.2, 0.2}}}, 2, 1);
  std::vector<double> grad;
  const auto report = evaluate_loss(pred, t, K, 0.5, &grad);
  const auto alphas = oracle::slot_alphas(pred, t, K);
  EXPECT_NEAR(report.total, oracle::oracle_total_loss(pred, t, K, 0.5, alphas), 1e-12);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto up = pred, down = pred;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double n = (oracle::oracle_total_loss(up, t, K, 0.5, alphas) -
                      oracle::oracle_total_loss(down, t, K, 0.5, alphas)) / 2e-6;
    EXPECT_LT(oracle::rel_error(grad[i], n, 1e-6), 1e-3) << i;
  }
}

TEST(Loss, DifferentiableScalarMatchesReport) {
  const GridLayout layout{2, 1, 2};
  diff::Tensor pred = filled(layout, 0.3f);
  auto leaf = diff::Var<float>::leaf(pred, true);
  const auto t = assign_targets({{0, {0.3, 0.3, 0.2, 0.2}}}, 2, 1);
  auto r = total_loss(leaf, t, 2);
  EXPECT_FLOAT_EQ(r.loss.value()[0], static_cast<float>(r.report.total));
  r.loss.backward();
  std::vector<double> grad;
  evaluate_loss(pred, t, 2, kDefaultLambdaNoobj, &grad);
  for (std::size_t i = 0; i < grad.size(); ++i) EXPECT_FLOAT_EQ(pred.grad()[i], static_cast<float>(grad[i]));
}

TEST(Decode, ProductOfObjectnessAndClassScore) {
  const GridLayout layout{2, 1, 3};
  auto pred = filled(layout, 0.0f);
  const auto o = layout.slot_offset(1, 0, 0);
  pred[o] = 0.5f;
  pred[o + 1] = 0.5f;
  pred[o + 2] = 0.3f;
  pred[o + 3] = 0.2f;
  pred[o + 4] = 0.9f;
  pred[o + 5 + 1] = 0.8f;
  pred[o + 5 + 2] = 0.1f;
  const auto dets = decode_predictions(pred, layout, 0.5);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 1);
  EXPECT_NEAR(dets[0].confidence, 0.72, 1e-6);
  EXPECT_NEAR(dets[0].box.cx, 0.25, 1e-7);
  EXPECT_NEAR(dets[0].box.cy, 0.75, 1e-7);
}

TEST(Decode, ThresholdBoundaries) {
  const GridLayout layout{2, 2, 2};
  EXPECT_TRUE(decode_predictions(filled(layout, 0.0f), layout, 0.25).empty());
  EXPECT_TRUE(decode_predictions(filled(layout, 1.0f), layout, 1.0).empty());
}

TEST(Decode, EncodeDecodeRoundTrip) {
  SplitMix64 rng(13);
  const int K = 3;
  const GridLayout layout{8, 2, K};
  for (int i = 0; i < 50; ++i) {
    std::vector<Annotation> gt;
    for (int k = 0; k < 3; ++k) gt.push_back({static_cast<int>(rng.below(K)), oracle::random_box(rng, 0.05, 0.6)});
    const auto t = assign_targets(gt, 8, 2);
    const auto dets = decode_predictions(encode_targets(t, K), layout, 0.5);
    ASSERT_EQ(dets.size(), t.object_count());
    for (const auto& d : dets) {
      bool found = false;
      for (const auto& g : gt) {
        found = found || (g.class_id == d.class_id && std::abs(g.box.cx - d.box.cx) < 1e-6 &&
                          std::abs(g.box.cy - d.box.cy) < 1e-6 && std::abs(g.box.w - d.box.w) < 1e-6 &&
                          std::abs(g.box.h - d.box.h) < 1e-6);
      }
      EXPECT_TRUE(found);
    }
  }
}

TEST(Nms, SuppressesOverlapsWithinClassOnly) {
  std::vector<Detection> dets{{0, {0.5, 0.5, 0.2, 0.2}, 0.9},
                              {0, {0.51, 0.5, 0.2, 0.2}, 0.8},
                              {1, {0.51, 0.5, 0.2, 0.2}, 0.7},
                              {0, {0.2, 0.2, 0.1, 0.1}, 0.6}};
  const auto kept = non_max_suppression(dets);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_DOUBLE_EQ(kept[0].confidence, 0.9);
  EXPECT_EQ(kept[1].class_id, 1);
  EXPECT_DOUBLE_EQ(kept[2].confidence, 0.6);
}
