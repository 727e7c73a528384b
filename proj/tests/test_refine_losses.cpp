// Refinement head and training objectives.

#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "graspnet/grasp_branch.hpp"
#include "graspnet/losses.hpp"
#include "graspnet/refinement.hpp"

using namespace graspnet;

TEST(CropMask, WholeImageOutsideAndHalf) {
  torch::manual_seed(0);
  auto map = torch::rand({10, 12});
  EXPECT_TRUE(torch::equal(crop_mask(map, RegionProposal(6, 5, 40, 40)), map));
  EXPECT_EQ(crop_mask(map, RegionProposal(100, 100, 5, 5)).abs().sum().item<double>(), 0.0);
  // box covering columns 0..5 (centers 0.5..5.5) and every row
  auto half = crop_mask(map, RegionProposal(3, 5, 6, 10));
  EXPECT_NEAR(half.sum().item<double>(), map.narrow(1, 0, 6).sum().item<double>(), 1e-5);
  EXPECT_NEAR(half.narrow(1, 6, 6).abs().sum().item<double>(), 0.0, 0.0);
}

TEST(CropMask, IdempotentAndNonIncreasing) {
  torch::manual_seed(1);
  auto map = torch::rand({2, 32, 32});
  const GraspCandidate g(14, 17, 10, 5, 33);
  auto once = crop_mask(map, g, 1.2);
  EXPECT_TRUE(torch::equal(crop_mask(once, g, 1.2), once));
  EXPECT_TRUE((once <= map).all().item<bool>());
}

TEST(BuildStack, ShapesAndSharedFullChannel) {
  torch::manual_seed(2);
  auto feas = torch::rand({48, 64});
  EXPECT_EQ(build_stack(feas, {}, 96, 1.2).size(0), 0);
  const std::vector<GraspCandidate> cands{GraspCandidate(10, 10, 8, 4, 0), GraspCandidate(40, 20, 12, 6, 60),
                                          GraspCandidate(60, 40, 6, 6, 120)};
  auto s = build_stack(feas, cands, 96, 1.2);
  EXPECT_EQ(s.sizes(), (std::vector<int64_t>{3, 2, 96, 96}));
  EXPECT_TRUE(torch::equal(s[0][0], s[1][0]));
  EXPECT_TRUE(torch::equal(s[0][0], s[2][0]));
  EXPECT_FALSE(torch::equal(s[0][1], s[1][1]));
  // the masked channel is the full channel restricted to the candidate's neighbourhood
  EXPECT_TRUE((s.select(1, 1) <= s.select(1, 0)).all().item<bool>());
  // constant map stays constant under area resizing
  auto c = build_stack(torch::full({48, 64}, 0.3), {cands[0]}, 96, 1.2);
  EXPECT_LT((c[0][0] - 0.3).abs().max().item<double>(), 1e-6);
}

TEST(RefineNet, ShapeDeterminismAndEquivariance) {
  torch::manual_seed(3);
  RefineNet net(RefineConfig{});
  net->eval();
  torch::NoGradGuard ng;
  auto x = torch::rand({4, 2, 96, 96});
  auto y = net(x);
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{4, 5}));
  auto same = net(x[0].unsqueeze(0).expand({3, 2, 96, 96}).contiguous());
  EXPECT_TRUE(torch::allclose(same[0], same[1]));
  EXPECT_TRUE(torch::allclose(same[0], same[2]));
  EXPECT_TRUE(torch::isfinite(net(torch::zeros({2, 2, 96, 96}))).all().item<bool>());
  auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
  EXPECT_TRUE(torch::allclose(net(x.index_select(0, perm)), y.index_select(0, perm), 1e-5, 1e-7));
}

TEST(RefineConfig, Validation) {
  EXPECT_NO_THROW(RefineConfig{}.validate());
  RefineConfig c;
  c.margin = 0.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ApplyRefinement, IdentityAndAngleStep) {
  const GraspCandidate g(20, 30, 12, 5, 175);
  const auto same = apply_refinement(g, CorrectionFactors{}, 10.0);
  EXPECT_EQ(same.x(), g.x());
  EXPECT_EQ(same.y(), g.y());
  EXPECT_EQ(same.width(), g.width());
  EXPECT_EQ(same.height(), g.height());
  EXPECT_EQ(same.theta(), g.theta());
  CorrectionFactors f;
  f.t_theta = 1.0;
  EXPECT_NEAR(apply_refinement(g, f, 10.0).theta(), 5.0, 1e-12);  // wraps past 180
  f = {0.5, -0.25, std::log(2.0), 0.0, 0.0};
  const auto m = apply_refinement(g, f, 10.0);
  EXPECT_NEAR(m.x(), 26.0, 1e-12);
  EXPECT_NEAR(m.y(), 28.75, 1e-12);
  EXPECT_NEAR(m.width(), 24.0, 1e-12);
}

TEST(ApplyRefinement, EncodeRoundTrip) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.0, 100.0), size(3.0, 60.0), ang(0.0, 180.0);
  for (int i = 0; i < 500; ++i) {
    const GraspCandidate g(pos(rng), pos(rng), size(rng), size(rng), ang(rng));
    const CorrectionFactors f{u(rng), u(rng), u(rng), u(rng), 4.0 * u(rng)};
    const auto back = encode_refinement(g, apply_refinement(g, f, 10.0), 10.0);
    EXPECT_NEAR(back.t_x, f.t_x, 1e-6);
    EXPECT_NEAR(back.t_y, f.t_y, 1e-6);
    EXPECT_NEAR(back.t_w, f.t_w, 1e-6);
    EXPECT_NEAR(back.t_h, f.t_h, 1e-6);
    ASSERT_TRUE(back.t_theta.has_value());
    EXPECT_NEAR(*back.t_theta, *f.t_theta, 1e-6);
  }
}

TEST(MeanFeasibility, ShrunkRectangle) {
  auto feas = torch::zeros({40, 40});
  feas.narrow(1, 0, 20).fill_(1.0);
  EXPECT_NEAR(mean_feasibility(feas, GraspCandidate(10, 20, 10, 10, 0), 0.5), 1.0, 1e-9);
  EXPECT_NEAR(mean_feasibility(feas, GraspCandidate(30, 20, 10, 10, 0), 0.5), 0.0, 1e-9);
  const double straddle = mean_feasibility(feas, GraspCandidate(20, 20, 20, 8, 0), 0.5);
  EXPECT_GT(straddle, 0.3);
  EXPECT_LT(straddle, 0.7);
}

namespace {

// logits whose softmax puts probability p on column c of an n-column row
torch::Tensor logits_with(double p, int c, int n) {
  auto row = torch::full({n}, std::log((1.0 - p) / (n - 1)), torch::kDouble);
  row[c] = std::log(p);
  return row;
}

}  // namespace

TEST(LossRot, ReferenceValues) {
  EXPECT_NEAR(loss_rot(logits_with(1.0 - 1e-15, 2, 19).unsqueeze(0), {2}).item<double>(), 0.0, 1e-9);
  EXPECT_NEAR(loss_rot(logits_with(std::exp(-1.0), 18, 19).unsqueeze(0), {18}).item<double>(), 1.0, 1e-9);
  auto two = torch::stack({logits_with(std::exp(-1.0), 4, 19), logits_with(std::exp(-2.0), 18, 19)});
  EXPECT_NEAR(loss_rot(two, {4, 18}).item<double>(), 1.5, 1e-9);
  EXPECT_EQ(loss_rot(torch::zeros({0, 19}), {}).item<double>(), 0.0);
}

TEST(LossBox, ReferenceValues) {
  const std::vector<CorrectionFactors> t{{0.1, 0.2, 0.3, 0.4, 0.0}};
  auto corr = torch::zeros({1, 8}, torch::kDouble);
  for (int k = 0; k < 4; ++k) corr[0][4 + k] = 0.1 * (k + 1);
  EXPECT_NEAR(loss_box(corr, {1}, t, 2).item<double>(), 0.0, 1e-12);
  EXPECT_NEAR(loss_box(corr + 0.5, {1}, t, 2).item<double>(), 0.5, 1e-12);
  auto off = corr.clone();
  off[0][4] += 2.0;
  EXPECT_NEAR(loss_box(off, {1}, t, 2).item<double>(), 1.5, 1e-12);
  // rows of the null class carry no regression loss
  EXPECT_EQ(loss_box(corr + 3.0, {2}, t, 2).item<double>(), 0.0);
}

TEST(LossRpn, ReferenceValues) {
  auto obj = torch::zeros({1}, torch::kDouble);
  auto deltas = torch::zeros({1, 4}, torch::kDouble);
  EXPECT_NEAR(loss_rpn(obj, deltas, {kPositive}, {CorrectionFactors{}}).item<double>(), std::log(2.0), 1e-12);
  auto perfect = torch::tensor({50.0, -50.0}, torch::kDouble);
  EXPECT_NEAR(loss_rpn(perfect, torch::zeros({2, 4}, torch::kDouble), {kPositive, kNegative},
                       {CorrectionFactors{}, CorrectionFactors{}})
                  .item<double>(),
              0.0, 1e-12);
  // negatives only: regression is not penalised
  EXPECT_NEAR(loss_rpn(torch::tensor({-50.0}, torch::kDouble), torch::ones({1, 4}, torch::kDouble) * 7.0, {kNegative},
                       {CorrectionFactors{}})
                  .item<double>(),
              0.0, 1e-12);
  EXPECT_EQ(loss_rpn(obj, deltas, {kIgnore}, {CorrectionFactors{}}).item<double>(), 0.0);
}

TEST(HardNegative, FourByFourSelectsFourPixels) {
  auto nll = torch::arange(16, torch::kDouble).view({4, 4});
  auto w = hard_negative_weights(nll);
  EXPECT_EQ((w > 0).sum().item<int64_t>(), 4);
  EXPECT_NEAR(w.sum().item<double>(), 1.0, 1e-12);
  EXPECT_TRUE(torch::equal(w.flatten().narrow(0, 12, 4), torch::full({4}, 0.25, torch::kDouble)));
  // all tied: the first four in row-major order
  auto tied = hard_negative_weights(torch::ones({4, 4}, torch::kDouble));
  EXPECT_TRUE(torch::equal(tied.flatten().narrow(0, 0, 4), torch::full({4}, 0.25, torch::kDouble)));
  EXPECT_EQ(tied.flatten().narrow(0, 4, 12).sum().item<double>(), 0.0);
}

TEST(LossSeg, PerfectAndUniform) {
  auto target = torch::randint(0, 5, {2, 4, 4}, torch::kLong);
  auto perfect = torch::full({2, 5, 4, 4}, -1e9, torch::kDouble);
  perfect.scatter_(1, target.unsqueeze(1), 0.0);
  EXPECT_NEAR(loss_seg(torch::log_softmax(perfect, 1), target).item<double>(), 0.0, 1e-12);
  auto uniform = torch::log_softmax(torch::zeros({2, 5, 4, 4}, torch::kDouble), 1);
  EXPECT_NEAR(loss_seg(uniform, target).item<double>(), std::log(5.0), 1e-6);
}

TEST(LossRefine, ReferenceValues) {
  auto zero = torch::zeros({2, 5}, torch::kDouble);
  EXPECT_EQ(loss_refine(zero, {CorrectionFactors{}, CorrectionFactors{}}, {true, true}).item<double>(), 0.0);
  EXPECT_EQ(loss_refine(zero + 4.0, {CorrectionFactors{}, CorrectionFactors{}}, {false, false}).item<double>(), 0.0);
  // a candidate one bin away from its truth with a perfect box
  const GraspCandidate truth(20, 20, 10, 5, 40), cand(20, 20, 10, 5, 30);
  const auto t = encode_refinement(cand, truth, 10.0);
  EXPECT_NEAR(loss_refine(torch::zeros({1, 5}, torch::kDouble), {t}, {true}).item<double>(), 0.5, 1e-12);
}

TEST(TotalLoss, WeightingAndGradients) {
  auto a = torch::tensor(1.5, torch::requires_grad());
  auto b = torch::tensor(2.0, torch::requires_grad());
  auto c = torch::tensor(0.25, torch::requires_grad());
  auto seg = torch::tensor(3.0, torch::requires_grad());
  auto ref = torch::tensor(4.0, torch::requires_grad());
  const LossParts parts{a, b, c, seg, ref};
  EXPECT_DOUBLE_EQ(total_loss(parts, {}).item<double>(), 1.5 + 2.0 + 0.25 + 3.0 + 4.0);

  total_loss(parts, {1.0, 1.0, 0.0}).backward();
  EXPECT_EQ(ref.grad().item<double>(), 0.0);
  const double g1 = seg.grad().item<double>();
  seg.grad().zero_();
  total_loss(parts, {1.0, 2.0, 1.0}).backward();
  EXPECT_DOUBLE_EQ(seg.grad().item<double>(), 2.0 * g1);

  LossWeights bad;
  bad.seg = -1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
