#include <random>

#include <gtest/gtest.h>

#include "graspnet/eval.hpp"
#include "graspnet/geometry.hpp"
#include "oracles/raster_iou.hpp"

using namespace graspnet;

namespace {

GraspCandidate random_grasp(std::mt19937_64& rng, double lo = 5.0, double hi = 100.0) {
  std::uniform_real_distribution<double> pos(0.0, 120.0), size(lo, hi), ang(0.0, 180.0);
  return GraspCandidate(pos(rng), pos(rng), size(rng), size(rng), ang(rng));
}

oracle::Rect as_rect(const GraspCandidate& g) { return {g.x(), g.y(), g.width(), g.height(), g.theta()}; }

}  // namespace

TEST(GraspCandidate, RejectsDegenerateExtents) {
  EXPECT_THROW(GraspCandidate(0, 0, 0.0, 1.0, 0), std::invalid_argument);
  EXPECT_THROW(GraspCandidate(0, 0, 1.0, -2.0, 0), std::invalid_argument);
  EXPECT_THROW(GraspCandidate(0, 0, std::nan(""), 1.0, 0), std::invalid_argument);
  EXPECT_THROW(GraspCandidate(std::numeric_limits<double>::infinity(), 0, 1.0, 1.0, 0), std::invalid_argument);
}

TEST(GraspCandidate, NormalizesAngle) {
  EXPECT_DOUBLE_EQ(GraspCandidate(0, 0, 1, 1, 190).theta(), 10.0);
  EXPECT_DOUBLE_EQ(GraspCandidate(0, 0, 1, 1, -30).theta(), 150.0);
  EXPECT_DOUBLE_EQ(GraspCandidate(0, 0, 1, 1, 180).theta(), 0.0);
  EXPECT_LT(normalize_angle(-1e-17), 180.0);
}

TEST(Corners, PositiveAreaAndWidthAlongTheta) {
  const GraspCandidate g(10, 20, 8, 4, 90);
  const auto c = corners(g);
  const std::vector<Point2> poly(c.begin(), c.end());
  EXPECT_NEAR(polygon_area(poly), 32.0, 1e-9);
  // corners 0 -> 1 run along the opening axis, which points down at 90 degrees
  EXPECT_NEAR(c[1].x - c[0].x, 0.0, 1e-9);
  EXPECT_NEAR(c[1].y - c[0].y, 8.0, 1e-9);
}

TEST(RotatedIou, BasicCases) {
  const GraspCandidate a(50, 50, 20, 10, 30);
  EXPECT_NEAR(rotated_iou(a, a), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(rotated_iou(a, GraspCandidate(500, 500, 20, 10, 30)), 0.0);
  // axis-aligned half overlap: intersection 10x10 of two 20x10 boxes
  EXPECT_NEAR(rotated_iou(GraspCandidate(0, 0, 20, 10, 0), GraspCandidate(10, 0, 20, 10, 0)), 100.0 / 300.0, 1e-12);
  // a square is invariant under a 90 degree turn
  EXPECT_NEAR(rotated_iou(GraspCandidate(0, 0, 10, 10, 0), GraspCandidate(0, 0, 10, 10, 90)), 1.0, 1e-9);
  // containment: IoU = small / large
  EXPECT_NEAR(rotated_iou(GraspCandidate(0, 0, 40, 40, 0), GraspCandidate(1, 2, 4, 5, 37)), 20.0 / 1600.0, 1e-9);
}

TEST(RotatedIou, PropertiesOnRandomPairs) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 500; ++i) {
    const auto a = random_grasp(rng), b = random_grasp(rng);
    const double v = rotated_iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v, rotated_iou(b, a), 1e-9);
    // 180 degree symmetry of the rectangle
    EXPECT_NEAR(v, rotated_iou(GraspCandidate(a.x(), a.y(), a.width(), a.height(), a.theta() + 180.0), b), 1e-9);
  }
}

TEST(RotatedIou, MatchesRasterOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> jitter(-30.0, 30.0);
  for (int i = 0; i < 60; ++i) {
    const auto a = random_grasp(rng);
    // keep pairs close enough to overlap most of the time
    const GraspCandidate b(a.x() + jitter(rng), a.y() + jitter(rng), a.height(), a.width(), a.theta() + jitter(rng) * 2);
    EXPECT_NEAR(rotated_iou(a, b), oracle::raster_iou(as_rect(a), as_rect(b)), 0.02);
  }
}

TEST(AngleDelta, SymmetricAndWrapped) {
  EXPECT_DOUBLE_EQ(angle_delta(10, 170), 20.0);
  EXPECT_DOUBLE_EQ(angle_delta(170, 10), 20.0);
  EXPECT_DOUBLE_EQ(angle_delta(0, 90), 90.0);
  EXPECT_DOUBLE_EQ(signed_angle_delta(10, 170), 20.0);
  EXPECT_DOUBLE_EQ(signed_angle_delta(170, 10), -20.0);
}

TEST(OrientationBinning, BinsAndRepresentatives) {
  const OrientationBinning b(18);
  EXPECT_DOUBLE_EQ(b.bin_width(), 10.0);
  EXPECT_EQ(b.bin_of(0.0), 0);
  EXPECT_EQ(b.bin_of(9.999), 0);
  EXPECT_EQ(b.bin_of(10.0), 1);
  EXPECT_EQ(b.bin_of(179.9), 17);
  EXPECT_DOUBLE_EQ(b.representative(0), 5.0);
  EXPECT_DOUBLE_EQ(b.representative(17), 175.0);
  EXPECT_EQ(b.null_class(), 18);
  EXPECT_THROW(b.representative(18), std::out_of_range);
  EXPECT_THROW(b.representative(-1), std::out_of_range);
}

TEST(Encoding, RoundTripRandomPairs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(0.0, 200.0), size(2.0, 150.0);
  const OrientationBinning bins;
  for (int i = 0; i < 1000; ++i) {
    const auto g = random_grasp(rng, 2.0, 150.0);
    const RegionProposal r(pos(rng), pos(rng), size(rng), size(rng));
    const auto f = encode_targets(g, r);
    const auto d = decode_candidate(r, f, bins.bin_of(g.theta()), bins);
    EXPECT_NEAR(d.x(), g.x(), 1e-6 * std::max(1.0, std::abs(g.x())));
    EXPECT_NEAR(d.y(), g.y(), 1e-6 * std::max(1.0, std::abs(g.y())));
    EXPECT_NEAR(d.width(), g.width(), 1e-6 * g.width());
    EXPECT_NEAR(d.height(), g.height(), 1e-6 * g.height());
  }
}

TEST(Encoding, KnownValues) {
  const RegionProposal r(10, 20, 4, 8);
  const GraspCandidate g(12, 24, 8, 8, 0);
  const auto f = encode_targets(g, r);
  EXPECT_DOUBLE_EQ(f.t_x, 0.5);
  EXPECT_DOUBLE_EQ(f.t_y, 0.5);  // height is the y denominator
  EXPECT_NEAR(f.t_w, std::log(2.0), 1e-15);
  EXPECT_NEAR(f.t_h, 0.0, 1e-15);
  EXPECT_THROW(decode_candidate(r, f, 18), std::invalid_argument);
}

TEST(SmoothL1, Values) {
  EXPECT_DOUBLE_EQ(smooth_l1(0.5), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(-0.5), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(2.0), 1.5);
  EXPECT_DOUBLE_EQ(smooth_l1(1.0), 0.5);
}

TEST(EnclosingBox, RotatedRectangle) {
  const auto b = enclosing_aabb(GraspCandidate(0, 0, 10, 2, 90));
  EXPECT_NEAR(b.width(), 2.0, 1e-9);
  EXPECT_NEAR(b.height(), 10.0, 1e-9);
}

TEST(Nms, SuppressesOverlapsKeepsDistinct) {
  std::vector<ScoredGrasp> c{{GraspCandidate(0, 0, 10, 10, 0), 0.5},
                             {GraspCandidate(1, 0, 10, 10, 0), 0.9},
                             {GraspCandidate(50, 50, 10, 10, 0), 0.7}};
  const auto keep = nms_rotated_indices(c, 0.5);
  ASSERT_EQ(keep.size(), 2u);
  EXPECT_EQ(keep[0], 1u);
  EXPECT_EQ(keep[1], 2u);
  std::vector<RegionProposal> boxes{RegionProposal(0, 0, 10, 10, 0.2), RegionProposal(0.5, 0, 10, 10, 0.3)};
  EXPECT_EQ(nms_aabb_indices(boxes, 0.7), std::vector<std::size_t>{1});
}

TEST(Jaccard, ThresholdsAreStrict) {
  // a square keeps IoU high under rotation, isolating the angle test
  const GraspCandidate gt(50, 50, 20, 20, 40);
  EXPECT_TRUE(jaccard_correct(gt, {gt}));
  EXPECT_TRUE(jaccard_correct(GraspCandidate(50, 50, 20, 20, 69.9), {gt}));
  EXPECT_FALSE(jaccard_correct(GraspCandidate(50, 50, 20, 20, 70.0), {gt}));  // exactly 30 degrees
  EXPECT_FALSE(jaccard_correct(gt, {}));
  EXPECT_TRUE(jaccard_correct(gt, {GraspCandidate(0, 0, 5, 5, 0), gt}));
}

TEST(Jaccard, MonotoneInAngle) {
  const GraspCandidate gt(50, 50, 30, 10, 0);
  bool was_correct = true;
  for (double d = 0.0; d < 90.0; d += 0.5) {
    const bool c = jaccard_correct(GraspCandidate(50, 50, 30, 10, d), {gt});
    if (!was_correct) EXPECT_FALSE(c) << "flipped back at " << d;
    was_correct = c;
  }
}

TEST(Contains, PixelCenters) {
  const GraspCandidate g(10, 10, 4, 2, 0);
  EXPECT_TRUE(contains(g, {10, 10}));
  EXPECT_TRUE(contains(g, {11.9, 10.9}));
  EXPECT_FALSE(contains(g, {12.1, 10}));
}
