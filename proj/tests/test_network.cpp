// Backbone, grasp branch and segmentation branch.

#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "graspnet/backbone.hpp"
#include "graspnet/grasp_branch.hpp"
#include "graspnet/segmentation.hpp"

using namespace graspnet;

TEST(Backbone, PyramidShapesAndStrides) {
  torch::manual_seed(0);
  Backbone net(BackboneConfig::tiny());
  auto maps = net(torch::randn({2, 3, 64, 96}));
  ASSERT_EQ(maps.levels.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    const int s = FeaturePyramidMaps::kStrides[l];
    EXPECT_EQ(maps.levels[l].sizes(), (std::vector<int64_t>{2, 64, 64 / s, 96 / s}));
  }
  EXPECT_THROW(net(torch::randn({1, 3, 50, 64})), std::invalid_argument);
}

TEST(Backbone, PresetsAndValidation) {
  EXPECT_THROW(BackboneConfig::from_preset("resnet7"), std::invalid_argument);
  const auto big = BackboneConfig::resnet101();
  EXPECT_EQ(big.stage_block_counts, (std::array<int, 4>{3, 4, 23, 3}));
  EXPECT_EQ(big.frozen_stage_count, 2);
  auto bad = BackboneConfig::tiny();
  bad.frozen_stage_count = 5;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Backbone, FrozenStagesGetNoGradient) {
  auto cfg = BackboneConfig::tiny();
  cfg.frozen_stage_count = 2;
  ResNet trunk(3, cfg);
  trunk->train();
  auto out = trunk(torch::randn({2, 3, 64, 64}));
  out.back().sum().backward();
  for (int s = 0; s < 5; ++s) {
    for (const auto& p : trunk->stage(s)->parameters()) {
      if (s < 2) {
        EXPECT_FALSE(p.requires_grad());
        EXPECT_FALSE(p.grad().defined());
      } else {
        ASSERT_TRUE(p.grad().defined());
      }
    }
  }
  // frozen stages keep eval-mode normalization even when the trunk trains
  EXPECT_FALSE(trunk->stage(0)->is_training());
  EXPECT_TRUE(trunk->stage(3)->is_training());
}

TEST(Backbone, UnfrozenParametersAllReceiveGradient) {
  torch::manual_seed(1);
  Backbone net(BackboneConfig::tiny());
  net->train();
  auto maps = net(torch::randn({2, 3, 64, 64}));
  torch::Tensor loss = torch::zeros({});
  for (auto& l : maps.levels) loss = loss + l.pow(2).mean();
  loss.backward();
  for (const auto& p : net->named_parameters()) {
    ASSERT_TRUE(p.value().grad().defined()) << p.key();
    EXPECT_GT(p.value().grad().abs().sum().item<double>(), 0.0) << p.key();
  }
}

TEST(Backbone, TinyPresetContract) {
  Backbone net(BackboneConfig::tiny());
  EXPECT_LT(count_parameters(*net), 2'000'000);
  NormAct2d na(1);
  na->eval();
  EXPECT_NEAR(na(torch::full({1, 1, 1, 1}, -1.0)).item<double>(), -0.01, 1e-4);  // unit running variance
  net->eval();
  torch::NoGradGuard ng;
  auto a = net(torch::zeros({1, 3, 64, 64}));
  auto b = net(torch::zeros({1, 3, 64, 64}));
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_TRUE(torch::isfinite(a.levels[l]).all().item<bool>());
    EXPECT_TRUE(torch::equal(a.levels[l], b.levels[l]));
  }
}

TEST(Backbone, FrozenStagesUnchangedByOptimizerStep) {
  auto cfg = BackboneConfig::tiny();
  cfg.frozen_stage_count = 2;
  Backbone net(cfg);
  net->train();
  std::vector<torch::Tensor> before;
  for (const auto& p : net->trunk->stage(1)->parameters()) before.push_back(p.clone());
  torch::optim::SGD opt(net->parameters(), torch::optim::SGDOptions(0.1).momentum(0.9).weight_decay(1e-2));
  auto maps = net(torch::randn({2, 3, 64, 64}));
  maps.levels[0].pow(2).mean().backward();
  opt.step();
  std::size_t i = 0;
  for (const auto& p : net->trunk->stage(1)->parameters()) EXPECT_TRUE(torch::equal(p, before[i++]));
}

TEST(Backbone, WeightLoadingReportsAllProblems) {
  Backbone net(BackboneConfig::tiny());
  std::map<std::string, torch::Tensor> w;
  w["trunk.conv1.conv.weight"] = torch::zeros({16, 3, 7, 7});
  EXPECT_NO_THROW(load_named_weights(*net, w));
  EXPECT_EQ(net->named_parameters()["trunk.conv1.conv.weight"].abs().sum().item<double>(), 0.0);
  w["nope.weight"] = torch::zeros({1});
  w["fpn.lateral2.weight"] = torch::zeros({3});
  try {
    load_named_weights(*net, w);
    FAIL();
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("nope.weight"), std::string::npos);
    EXPECT_NE(msg.find("fpn.lateral2.weight"), std::string::npos);
  }
  EXPECT_GT(count_parameters(*net), count_parameters(*net->fpn));
}

TEST(Anchors, CountAndOrdering) {
  AnchorConfig cfg;
  const auto a = generate_anchors(cfg, 64, 96);
  const std::size_t expected = 3 * (16 * 24 + 8 * 12 + 4 * 6 + 2 * 3);
  ASSERT_EQ(a.size(), expected);
  // first anchors: level P2, cell (0, 0), ratios 0.5, 1, 2 (height / width)
  EXPECT_DOUBLE_EQ(a[0].x(), 2.0);
  EXPECT_DOUBLE_EQ(a[0].y(), 2.0);
  EXPECT_NEAR(a[0].height() / a[0].width(), 0.5, 1e-12);
  EXPECT_NEAR(a[1].width(), 12.0, 1e-12);
  EXPECT_NEAR(a[2].height() / a[2].width(), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(a[3].x(), 6.0);  // next column
  EXPECT_NEAR(std::sqrt(a[0].area()), 12.0, 1e-9);
}

TEST(RpnHead, OutputLayoutMatchesAnchors) {
  torch::manual_seed(0);
  AnchorConfig cfg;
  RpnHead head(8, cfg.anchors_per_location());
  FeaturePyramidMaps maps;
  for (int s : FeaturePyramidMaps::kStrides) maps.levels.push_back(torch::randn({2, 8, 64 / s, 64 / s}));
  auto out = head(maps);
  const auto n = std::int64_t(generate_anchors(cfg, 64, 64).size());
  EXPECT_EQ(out.objectness.sizes(), (std::vector<int64_t>{2, n}));
  EXPECT_EQ(out.deltas.sizes(), (std::vector<int64_t>{2, n, 4}));
}

TEST(RpnTargets, PositiveNegativeIgnoreAndBestMatch) {
  AnchorConfig cfg;
  std::vector<RegionProposal> anchors{RegionProposal(10, 10, 10, 10), RegionProposal(11, 10, 10, 10),
                                      RegionProposal(14, 10, 10, 10), RegionProposal(80, 80, 10, 10),
                                      RegionProposal(62, 60, 10, 10)};
  std::vector<RegionProposal> gts{RegionProposal(10, 10, 10, 10), RegionProposal(60, 60, 14, 14)};
  const auto t = assign_rpn_targets(anchors, gts, cfg);
  EXPECT_EQ(t.labels[0], kPositive);
  EXPECT_EQ(t.labels[1], kPositive);  // IoU 0.818
  EXPECT_EQ(t.labels[2], kIgnore);    // IoU 0.43
  EXPECT_EQ(t.labels[3], kNegative);
  EXPECT_EQ(t.labels[4], kPositive);  // best match of the second box despite low IoU
  EXPECT_NEAR(t.targets[1].t_x, -0.1, 1e-12);
  const auto none = assign_rpn_targets(anchors, {}, cfg);
  for (int l : none.labels) EXPECT_EQ(l, kNegative);
}

TEST(RpnTargets, SubsamplingRespectsBudget) {
  AnchorConfig cfg;
  cfg.batch_per_image = 10;
  RpnTargets t;
  t.labels.assign(100, kNegative);
  for (int i = 0; i < 20; ++i) t.labels[std::size_t(i)] = kPositive;
  t.targets.resize(100);
  std::mt19937_64 rng(1);
  subsample_rpn_targets(t, cfg, rng);
  EXPECT_EQ(std::count(t.labels.begin(), t.labels.end(), kPositive), 5);
  EXPECT_EQ(std::count(t.labels.begin(), t.labels.end(), kNegative), 5);
}

TEST(Proposals, DecodeClipAndSort) {
  AnchorConfig cfg;
  const auto anchors = generate_anchors(cfg, 64, 64);
  const auto n = std::int64_t(anchors.size());
  RpnOutputs out{torch::full({1, n}, -10.0), torch::zeros({1, n, 4})};
  out.objectness[0][5] = 5.0;
  out.objectness[0][100] = 3.0;
  const auto p = generate_proposals(out, anchors, cfg, 64, 64);
  ASSERT_FALSE(p[0].empty());
  EXPECT_LE(p[0].size(), std::size_t(cfg.post_nms_top_n));
  EXPECT_NEAR(p[0][0].score(), 1.0 / (1.0 + std::exp(-5.0)), 1e-6);
  for (std::size_t i = 1; i < p[0].size(); ++i) EXPECT_GE(p[0][i - 1].score(), p[0][i].score());
  for (const auto& b : p[0]) {
    EXPECT_GE(b.x1(), 0.0);
    EXPECT_LE(b.x2(), 64.0);
  }
}

TEST(PyramidLevel, Formula) {
  EXPECT_EQ(pyramid_level_for(RegionProposal(0, 0, 224, 224)), 4);
  EXPECT_EQ(pyramid_level_for(RegionProposal(0, 0, 112, 112)), 3);
  EXPECT_EQ(pyramid_level_for(RegionProposal(0, 0, 8, 8)), 2);
  EXPECT_EQ(pyramid_level_for(RegionProposal(0, 0, 1000, 1000)), 5);
}

TEST(RoiAlign, MatchesManualBilinearSampling) {
  torch::manual_seed(3);
  auto feat = torch::randn({1, 2, 8, 8}, torch::kDouble);
  const RegionProposal box(13.0, 11.0, 10.0, 6.0);
  auto pooled = roi_align_level(feat, 4, {box}, 2, 1);
  ASSERT_EQ(pooled.sizes(), (std::vector<int64_t>{1, 2, 2, 2}));
  auto acc = feat.accessor<double, 4>();
  auto bilinear = [&](int c, double x, double y) {
    // image point -> feature coordinates with pixel centers at integers
    double fx = std::clamp(x / 4.0 - 0.5, 0.0, 7.0), fy = std::clamp(y / 4.0 - 0.5, 0.0, 7.0);
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
    int x1 = std::min(x0 + 1, 7), y1 = std::min(y0 + 1, 7);
    double ax = fx - x0, ay = fy - y0;
    return (1 - ay) * ((1 - ax) * acc[0][c][y0][x0] + ax * acc[0][c][y0][x1]) +
           ay * ((1 - ax) * acc[0][c][y1][x0] + ax * acc[0][c][y1][x1]);
  };
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        const double x = box.x1() + (j + 0.5) * box.width() / 2, y = box.y1() + (i + 0.5) * box.height() / 2;
        EXPECT_NEAR(pooled[0][c][i][j].item<double>(), bilinear(c, x, y), 1e-9);
      }
    }
  }
}

TEST(RoiAlign, KeepsImageMajorOrderAcrossLevels) {
  FeaturePyramidMaps maps;
  for (int l = 0; l < 4; ++l) maps.levels.push_back(torch::full({2, 1, 32 >> l, 32 >> l}, double(l)));
  maps.levels[0][1].fill_(10.0);
  std::vector<std::vector<RegionProposal>> props{{RegionProposal(40, 40, 200, 200), RegionProposal(20, 20, 8, 8)},
                                                 {RegionProposal(60, 60, 8, 8)}};
  auto pooled = roi_align(maps, props, 2, 1);
  ASSERT_EQ(pooled.size(0), 3);
  EXPECT_DOUBLE_EQ(pooled[0].mean().item<double>(), 1.0);   // level 3
  EXPECT_DOUBLE_EQ(pooled[1].mean().item<double>(), 0.0);   // level 2 of image 0
  EXPECT_DOUBLE_EQ(pooled[2].mean().item<double>(), 10.0);  // level 2 of image 1
  EXPECT_EQ(roi_align(maps, {{}, {}}, 2, 1).size(0), 0);
}

TEST(RoiAlign, ConstantAndRampMaps) {
  auto c = torch::full({1, 3, 16, 16}, 2.5);
  auto pc = roi_align_level(c, 4, {RegionProposal(20, 30, 17, 9)}, 14, 2);
  EXPECT_LT((pc - 2.5).abs().max().item<double>(), 1e-6);
  // bilinear sampling reproduces a linear ramp: cell (i, j) of a box covering
  // the whole map averages to the ramp at its center
  auto ramp = torch::arange(16, torch::kDouble).view({1, 1, 1, 16}).expand({1, 1, 16, 16}).contiguous();
  auto pr = roi_align_level(ramp, 1, {RegionProposal(8, 8, 14, 14)}, 7, 2);
  for (int j = 0; j < 7; ++j) {
    const double x = 1.0 + (j + 0.5) * 2.0;  // image coordinate of the cell center
    EXPECT_NEAR(pr[0][0][3][j].item<double>(), x - 0.5, 1e-9);
  }
}

TEST(Proposals, UntrainedNetworkGivesTopKInsideImage) {
  torch::manual_seed(4);
  AnchorConfig cfg;
  cfg.post_nms_top_n = 20;
  Backbone net(BackboneConfig::tiny());
  RpnHead rpn(64, cfg.anchors_per_location());
  net->eval();
  torch::NoGradGuard ng;
  auto out = rpn(net(torch::randn({1, 3, 96, 96})));
  const auto p = generate_proposals(out, generate_anchors(cfg, 96, 96), cfg, 96, 96);
  ASSERT_EQ(p[0].size(), 20u);
  for (const auto& b : p[0]) {
    EXPECT_GE(b.x1(), 0.0);
    EXPECT_GE(b.y1(), 0.0);
    EXPECT_LE(b.x2(), 96.0);
    EXPECT_LE(b.y2(), 96.0);
  }
}

TEST(GraspHead, PermutingRegionsPermutesOutputs) {
  torch::manual_seed(5);
  GraspHead head(4, HeadConfig{});
  head->eval();
  auto x = torch::randn({6, 4, 14, 14});
  auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kLong);
  auto a = head(x), b = head(x.index_select(0, perm));
  EXPECT_TRUE(torch::allclose(a.logits.index_select(0, perm), b.logits, 1e-5, 1e-6));
  EXPECT_TRUE(torch::allclose(a.corrections.index_select(0, perm), b.corrections, 1e-5, 1e-6));
}

TEST(GraspHead, ShapesAndEmptyInput) {
  torch::manual_seed(0);
  HeadConfig cfg;
  GraspHead head(8, cfg);
  head->eval();
  auto out = head(torch::randn({5, 8, 14, 14}));
  EXPECT_EQ(out.logits.sizes(), (std::vector<int64_t>{5, 19}));
  EXPECT_EQ(out.corrections.sizes(), (std::vector<int64_t>{5, 72}));
  EXPECT_NEAR(out.probabilities().sum(1).sub(1).abs().max().item<double>(), 0.0, 1e-6);
  auto empty = head(torch::zeros({0, 8, 14, 14}));
  EXPECT_EQ(empty.logits.size(0), 0);
  head->train();
  EXPECT_NO_THROW(head(torch::randn({1, 8, 14, 14})));  // single region in training
}

TEST(SelectAndDecode, DropsNullAndLowScores) {
  const OrientationBinning bins;
  std::vector<RegionProposal> props{RegionProposal(10, 10, 10, 10), RegionProposal(50, 50, 10, 10),
                                    RegionProposal(80, 80, 10, 10)};
  auto probs = torch::full({3, 19}, 0.01);
  probs[0][3] = 0.8;   // class 3, confident
  probs[1][18] = 0.9;  // null
  probs[2][5] = 0.3;   // below threshold
  auto corr = torch::zeros({3, 72}, torch::kDouble);
  corr[0][12] = 0.1;  // t_x of class 3
  const auto sel = select_and_decode(props, probs, corr, 0.5, 0.5, bins);
  ASSERT_EQ(sel.size(), 1u);
  EXPECT_EQ(sel[0].orientation_class, 3);
  EXPECT_NEAR(sel[0].grasp.theta(), 35.0, 1e-9);
  EXPECT_NEAR(sel[0].grasp.x(), 11.0, 1e-9);
  EXPECT_EQ(sel[0].proposal_index, 0);

  // two near-identical confident proposals collapse under rotated NMS
  auto p2 = torch::full({2, 19}, 0.01);
  p2[0][3] = 0.8;
  p2[1][3] = 0.7;
  const auto dup = select_and_decode({RegionProposal(10, 10, 10, 10), RegionProposal(10.5, 10, 10, 10)}, p2,
                                     torch::zeros({2, 72}), 0.5, 0.5, bins);
  EXPECT_EQ(dup.size(), 1u);
  auto all_null = torch::zeros({2, 19});
  all_null.select(1, 18).fill_(1.0);
  EXPECT_TRUE(select_and_decode({RegionProposal(10, 10, 10, 10), RegionProposal(50, 50, 10, 10)}, all_null,
                                torch::zeros({2, 72}), 0.5, 0.5, bins)
                  .empty());
}

TEST(HeadTargets, ValidityClassAndSampling) {
  HeadConfig cfg;
  const OrientationBinning bins;
  const GraspCandidate g(30, 30, 20, 10, 25);
  const auto box = enclosing_aabb(g);
  std::vector<RegionProposal> props{box, RegionProposal(box.x() + 2, box.y(), box.width(), box.height()),
                                    RegionProposal(80, 80, 10, 10)};
  const auto t = assign_head_targets(props, {g}, cfg, bins);
  EXPECT_EQ(t.classes[0], 2);
  EXPECT_EQ(t.classes[1], 2);
  EXPECT_EQ(t.classes[2], bins.null_class());
  EXPECT_EQ(t.matched_gt[2], -1);
  EXPECT_NEAR(t.targets[0].t_w, std::log(20.0 / box.width()), 1e-12);

  std::vector<RegionProposal> many;
  for (int i = 0; i < 300; ++i) many.emplace_back(5 + i % 90, 5 + i / 90 * 20, 12, 12);
  for (int i = 0; i < 60; ++i) many.push_back(RegionProposal(box.x() + 0.01 * i, box.y(), box.width(), box.height()));
  std::mt19937_64 rng(2);
  const auto s = sample_head_targets(many, {g}, cfg, bins, rng);
  EXPECT_EQ(int(s.classes.size()), cfg.samples_per_image);
  const auto valid = std::count_if(s.matched_gt.begin(), s.matched_gt.end(), [](int m) { return m >= 0; });
  EXPECT_EQ(valid, std::lround(cfg.samples_per_image * cfg.valid_fraction));
}

TEST(Segmentation, ConfigInvariants) {
  SegConfig c;
  EXPECT_NO_THROW(c.validate());
  c.feasible_ids = {1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SegConfig{};
  c.num_classes = 2;
  c.feasible_ids = {};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Segmentation, MiniContextShapesAndBroadcast) {
  torch::manual_seed(0);
  MiniContext m(4, 6, 6);
  m->eval();
  auto y = m(torch::randn({1, 4, 10, 12}));
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{1, 6, 10, 12}));
  // with the local and atrous weights zeroed only the pooled branch is left,
  // and its output is broadcast to every pixel
  {
    torch::NoGradGuard ng;
    m->local->weight.zero_();
    m->atrous->weight.zero_();
  }
  auto z = m(torch::randn({1, 4, 7, 9}));
  EXPECT_LT((z - z.mean({2, 3}, true)).abs().max().item<double>(), 1e-6);
  // dilation-6 3x3 kernel spans 13 pixels
  EXPECT_EQ((m->atrous->options.kernel_size()->at(0) - 1) * m->atrous->options.dilation()->at(0) + 1, 13);
}

TEST(Segmentation, QuarterResolutionAndDependsOnAllLevels) {
  torch::manual_seed(0);
  SegConfig cfg;
  SegmentationBranch seg(8, cfg);
  seg->eval();
  FeaturePyramidMaps maps;
  for (int s : FeaturePyramidMaps::kStrides) maps.levels.push_back(torch::randn({1, 8, 256 / s, 256 / s}));
  auto base = seg(maps);
  EXPECT_EQ(base.sizes(), (std::vector<int64_t>{1, 5, 64, 64}));
  for (int l = 0; l < 4; ++l) {
    auto m = maps;
    m.levels[std::size_t(l)] = torch::zeros_like(maps.levels[std::size_t(l)]);
    EXPECT_GT((seg(m) - base).abs().max().item<double>(), 1e-6) << "level " << l;
  }
}

TEST(Segmentation, ProbabilityMapContract) {
  SegConfig cfg;
  auto logits = torch::randn({2, 5, 8, 8});
  auto pm = probability_map(logits, cfg, 32, 32);
  EXPECT_EQ(pm.probs.sizes(), (std::vector<int64_t>{2, 5, 32, 32}));
  EXPECT_LT((pm.probs.sum(1) - 1).abs().max().item<double>(), 1e-5);
  auto expected = pm.probs.narrow(1, 2, 3).sum(1);
  EXPECT_LT((pm.feasibility - expected).abs().max().item<double>(), 1e-6);
  EXPECT_GE(pm.feasibility.min().item<double>(), 0.0);
  EXPECT_LE(pm.feasibility.max().item<double>(), 1.0);

  auto uniform = probability_map(torch::zeros({1, 5, 4, 4}), cfg, 16, 16);
  EXPECT_NEAR(uniform.probs.max().item<double>(), 0.2, 1e-6);
  auto spike = torch::zeros({1, 5, 4, 4});
  spike.select(1, 0).fill_(50.0);
  auto bg = probability_map(spike, cfg, 16, 16);
  EXPECT_GT(bg.probs.select(1, 0).min().item<double>(), 0.999);
  EXPECT_LT(bg.feasibility.max().item<double>(), 1e-6);
}
