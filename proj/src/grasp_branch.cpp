#include "graspnet/grasp_branch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

namespace {

constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

std::vector<std::size_t> argsort_desc(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

}  // namespace

void AnchorConfig::validate() const {
  if (!(negative_iou > 0.0 && positive_iou < 1.0 && positive_iou > negative_iou)) {
    throw std::invalid_argument("anchor IoU thresholds must satisfy 0 < negative < positive < 1");
  }
  if (aspect_ratios.empty()) throw std::invalid_argument("at least one aspect ratio is required");
}

std::vector<RegionProposal> generate_anchors(const AnchorConfig& config, int image_height, int image_width) {
  std::vector<RegionProposal> anchors;
  for (std::size_t l = 0; l < 4; ++l) {
    const int stride = FeaturePyramidMaps::kStrides[l];
    const int h = (image_height + stride - 1) / stride;
    const int w = (image_width + stride - 1) / stride;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (double r : config.aspect_ratios) {
          const double aw = config.base_sizes[l] / std::sqrt(r);
          const double ah = config.base_sizes[l] * std::sqrt(r);
          anchors.emplace_back((j + 0.5) * stride, (i + 0.5) * stride, aw, ah);
        }
      }
    }
  }
  return anchors;
}

RpnHeadImpl::RpnHeadImpl(int channels, int anchors_per_location) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
  cls = register_module("cls", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, anchors_per_location, 1)));
  reg = register_module("reg", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 4 * anchors_per_location, 1)));
  for (auto* c : {conv.get(), cls.get(), reg.get()}) {
    torch::nn::init::normal_(c->weight, 0.0, 0.01);
    torch::nn::init::zeros_(c->bias);
  }
}

RpnOutputs RpnHeadImpl::forward(const FeaturePyramidMaps& pyramid) {
  std::vector<torch::Tensor> logits, deltas;
  for (const auto& level : pyramid.levels) {
    auto t = F::leaky_relu(conv(level), F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
    const auto n = t.size(0);
    logits.push_back(cls(t).permute({0, 2, 3, 1}).reshape({n, -1}));
    auto d = reg(t);
    const auto a = d.size(1) / 4;
    deltas.push_back(d.view({n, a, 4, d.size(2), d.size(3)}).permute({0, 3, 4, 1, 2}).reshape({n, -1, 4}));
  }
  return {torch::cat(logits, 1), torch::cat(deltas, 1)};
}

std::vector<std::vector<RegionProposal>> generate_proposals(const RpnOutputs& outputs,
                                                            const std::vector<RegionProposal>& anchors,
                                                            const AnchorConfig& config, int image_height,
                                                            int image_width) {
  torch::NoGradGuard guard;
  const auto scores_t = torch::sigmoid(outputs.objectness.detach()).to(torch::kCPU, torch::kDouble).contiguous();
  const auto deltas_t = outputs.deltas.detach().to(torch::kCPU, torch::kDouble).contiguous();
  const auto n_images = scores_t.size(0);
  const auto n_anchors = static_cast<std::int64_t>(anchors.size());
  TORCH_CHECK(scores_t.size(1) == n_anchors, "anchor count mismatch: ", scores_t.size(1), " vs ", n_anchors);

  std::vector<std::int64_t> level_begin{0};
  for (std::size_t l = 0; l < 4; ++l) {
    const int stride = FeaturePyramidMaps::kStrides[l];
    const auto cells = std::int64_t((image_height + stride - 1) / stride) * ((image_width + stride - 1) / stride);
    level_begin.push_back(level_begin.back() + cells * config.anchors_per_location());
  }

  std::vector<std::vector<RegionProposal>> result(static_cast<std::size_t>(n_images));
  for (std::int64_t b = 0; b < n_images; ++b) {
    const double* s = scores_t[b].data_ptr<double>();
    const double* d = deltas_t[b].data_ptr<double>();
    std::vector<RegionProposal> boxes;
    for (std::size_t l = 0; l < 4; ++l) {
      std::vector<double> level_scores(s + level_begin[l], s + level_begin[l + 1]);
      auto order = argsort_desc(level_scores);
      if (int(order.size()) > config.pre_nms_top_n) order.resize(std::size_t(config.pre_nms_top_n));
      for (auto k : order) {
        const auto a = level_begin[l] + std::int64_t(k);
        const auto& anc = anchors[std::size_t(a)];
        CorrectionFactors f{d[4 * a], d[4 * a + 1], std::min(d[4 * a + 2], kMaxLogScale),
                            std::min(d[4 * a + 3], kMaxLogScale), std::nullopt};
        const double cx = anc.x() + f.t_x * anc.width();
        const double cy = anc.y() + f.t_y * anc.height();
        const double w = anc.width() * std::exp(f.t_w);
        const double h = anc.height() * std::exp(f.t_h);
        const double x1 = std::clamp(cx - 0.5 * w, 0.0, double(image_width));
        const double x2 = std::clamp(cx + 0.5 * w, 0.0, double(image_width));
        const double y1 = std::clamp(cy - 0.5 * h, 0.0, double(image_height));
        const double y2 = std::clamp(cy + 0.5 * h, 0.0, double(image_height));
        if (x2 - x1 < 1.0 || y2 - y1 < 1.0) continue;
        boxes.push_back(RegionProposal::from_corners(x1, y1, x2, y2, s[a]));
      }
    }
    auto keep = nms_aabb_indices(boxes, config.nms_iou);
    if (int(keep.size()) > config.post_nms_top_n) keep.resize(std::size_t(config.post_nms_top_n));
    for (auto k : keep) result[std::size_t(b)].push_back(boxes[k]);
  }
  return result;
}

RpnTargets assign_rpn_targets(const std::vector<RegionProposal>& anchors, const std::vector<RegionProposal>& gt_aabbs,
                              const AnchorConfig& config) {
  RpnTargets t;
  t.labels.assign(anchors.size(), kNegative);
  t.targets.assign(anchors.size(), CorrectionFactors{});
  if (gt_aabbs.empty()) return t;
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int> best_gt(anchors.size(), 0);
  std::vector<double> gt_best(gt_aabbs.size(), 0.0);
  std::vector<std::vector<double>> iou(anchors.size(), std::vector<double>(gt_aabbs.size()));
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    for (std::size_t g = 0; g < gt_aabbs.size(); ++g) {
      const double v = aabb_iou(anchors[a], gt_aabbs[g]);
      iou[a][g] = v;
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = int(g);
      }
      gt_best[g] = std::max(gt_best[g], v);
    }
  }
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    bool positive = best_iou[a] >= config.positive_iou;
    for (std::size_t g = 0; g < gt_aabbs.size() && !positive; ++g) {
      if (gt_best[g] > 0.0 && iou[a][g] == gt_best[g]) {
        positive = true;
        best_gt[a] = int(g);
      }
    }
    if (positive) {
      t.labels[a] = kPositive;
      t.targets[a] = encode_targets(gt_aabbs[std::size_t(best_gt[a])], anchors[a]);
    } else if (best_iou[a] < config.negative_iou) {
      t.labels[a] = kNegative;
    } else {
      t.labels[a] = kIgnore;
    }
  }
  return t;
}

void subsample_rpn_targets(RpnTargets& targets, const AnchorConfig& config, std::mt19937_64& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < targets.labels.size(); ++i) {
    if (targets.labels[i] == kPositive) pos.push_back(i);
    if (targets.labels[i] == kNegative) neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  const std::size_t max_pos = std::size_t(config.batch_per_image * config.positive_fraction);
  const std::size_t n_pos = std::min(pos.size(), max_pos);
  const std::size_t n_neg = std::min(neg.size(), std::size_t(config.batch_per_image) - n_pos);
  for (std::size_t i = n_pos; i < pos.size(); ++i) targets.labels[pos[i]] = kIgnore;
  for (std::size_t i = n_neg; i < neg.size(); ++i) targets.labels[neg[i]] = kIgnore;
}

int pyramid_level_for(const RegionProposal& box) {
  const double scale = std::sqrt(box.width() * box.height());
  const int level = static_cast<int>(std::floor(4.0 + std::log2(scale / 224.0)));
  return std::clamp(level, 2, 5);
}

torch::Tensor roi_align_level(const torch::Tensor& feature, int stride, const std::vector<RegionProposal>& boxes,
                              int output_size, int sampling_ratio) {
  TORCH_CHECK(feature.dim() == 4 && feature.size(0) == 1, "roi_align_level expects a (1, C, H, W) map");
  const auto c = feature.size(1);
  const auto fh = feature.size(2), fw = feature.size(3);
  const int s = output_size * sampling_ratio;
  if (boxes.empty()) return torch::zeros({0, c, output_size, output_size}, feature.options());
  // grid_sample with align_corners=false maps normalized g to pixel (g + 1) W / 2 - 0.5,
  // so image coordinate x lands at g = 2 x / (stride W) - 1.
  std::vector<double> grid(boxes.size() * std::size_t(s) * s * 2);
  std::size_t k = 0;
  for (const auto& b : boxes) {
    for (int i = 0; i < s; ++i) {
      const double y = b.y1() + (i + 0.5) * b.height() / s;
      for (int j = 0; j < s; ++j) {
        const double x = b.x1() + (j + 0.5) * b.width() / s;
        grid[k++] = 2.0 * x / (double(stride) * fw) - 1.0;
        grid[k++] = 2.0 * y / (double(stride) * fh) - 1.0;
      }
    }
  }
  // copy=true: grid_sample keeps the grid for backward, and `grid` dies with this frame
  auto g = torch::from_blob(grid.data(), {1, std::int64_t(boxes.size()) * s, s, 2}, torch::kDouble)
               .to(feature.options().dtype(), false, true);
  auto sampled = F::grid_sample(feature, g,
                                F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(false));
  sampled = sampled.view({c, std::int64_t(boxes.size()), s, s}).permute({1, 0, 2, 3});
  return F::avg_pool2d(sampled, F::AvgPool2dFuncOptions(sampling_ratio));
}

torch::Tensor roi_align(const FeaturePyramidMaps& pyramid, const std::vector<std::vector<RegionProposal>>& proposals,
                        int output_size, int sampling_ratio) {
  const auto& ref = pyramid.levels.front();
  std::vector<torch::Tensor> pieces;
  std::vector<std::int64_t> order;
  std::int64_t offset = 0;
  for (std::size_t b = 0; b < proposals.size(); ++b) {
    std::array<std::vector<RegionProposal>, 4> by_level;
    std::array<std::vector<std::int64_t>, 4> idx;
    for (std::size_t r = 0; r < proposals[b].size(); ++r) {
      const int l = pyramid_level_for(proposals[b][r]) - 2;
      by_level[std::size_t(l)].push_back(proposals[b][r]);
      idx[std::size_t(l)].push_back(offset + std::int64_t(r));
    }
    for (std::size_t l = 0; l < 4; ++l) {
      if (by_level[l].empty()) continue;
      pieces.push_back(roi_align_level(pyramid.levels[l].narrow(0, std::int64_t(b), 1), FeaturePyramidMaps::kStrides[l],
                                       by_level[l], output_size, sampling_ratio));
      order.insert(order.end(), idx[l].begin(), idx[l].end());
    }
    offset += std::int64_t(proposals[b].size());
  }
  if (pieces.empty()) return torch::zeros({0, ref.size(1), output_size, output_size}, ref.options());
  auto stacked = torch::cat(pieces, 0);
  // rows come out grouped by level; restore image-major proposal order
  std::vector<std::int64_t> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[std::size_t(order[i])] = std::int64_t(i);
  auto inv = torch::tensor(inverse, torch::kLong);
  return stacked.index_select(0, inv);
}

GraspHeadImpl::GraspHeadImpl(int channels, const HeadConfig& config) : config_(config) {
  const int pooled = config.pooled_size / 2;
  const int in = channels * pooled * pooled;
  const int w = config.fc_width;
  fc1 = register_module("fc1", torch::nn::Linear(in, w));
  norm1 = register_module("norm1", NormAct1d(w));
  fc2 = register_module("fc2", torch::nn::Linear(w, w));
  norm2 = register_module("norm2", NormAct1d(w));
  orient_fc = register_module("orient_fc", torch::nn::Linear(w, w));
  orient_norm = register_module("orient_norm", NormAct1d(w));
  orient_out = register_module("orient_out", torch::nn::Linear(w, config.n_classes + 1));
  rect_fc = register_module("rect_fc", torch::nn::Linear(w, w));
  rect_norm = register_module("rect_norm", NormAct1d(w));
  rect_out = register_module("rect_out", torch::nn::Linear(w, 4 * config.n_classes));
  torch::nn::init::normal_(orient_out->weight, 0.0, 0.01);
  torch::nn::init::zeros_(orient_out->bias);
  torch::nn::init::normal_(rect_out->weight, 0.0, 0.001);
  torch::nn::init::zeros_(rect_out->bias);
}

HeadOutputs GraspHeadImpl::forward(const torch::Tensor& pooled) {
  const auto r = pooled.size(0);
  if (r == 0) {
    return {torch::zeros({0, config_.n_classes + 1}, pooled.options()),
            torch::zeros({0, 4 * config_.n_classes}, pooled.options())};
  }
  auto x = F::avg_pool2d(pooled, F::AvgPool2dFuncOptions(2)).flatten(1);
  x = norm1(fc1(x));
  x = norm2(fc2(x));
  auto logits = orient_out(orient_norm(orient_fc(x)));
  auto corr = rect_out(rect_norm(rect_fc(x)));
  return {logits, corr};
}

std::vector<SelectedGrasp> select_and_decode(const std::vector<RegionProposal>& proposals,
                                             const torch::Tensor& probabilities, const torch::Tensor& corrections,
                                             double score_threshold, double nms_iou,
                                             const OrientationBinning& binning) {
  const auto probs = probabilities.detach().to(torch::kCPU, torch::kDouble).contiguous();
  const auto corr = corrections.detach().to(torch::kCPU, torch::kDouble).contiguous();
  TORCH_CHECK(probs.size(0) == std::int64_t(proposals.size()), "one score row per proposal expected");
  const int n_cls = binning.n_classes();
  std::vector<SelectedGrasp> decoded;
  std::vector<ScoredGrasp> scored;
  for (std::size_t r = 0; r < proposals.size(); ++r) {
    const double* p = probs[std::int64_t(r)].data_ptr<double>();
    const int c = int(std::max_element(p, p + n_cls + 1) - p);
    if (c == binning.null_class() || p[c] < score_threshold) continue;
    const double* t = corr[std::int64_t(r)].data_ptr<double>() + 4 * c;
    CorrectionFactors f{t[0], t[1], std::clamp(t[2], -kMaxLogScale, kMaxLogScale),
                        std::clamp(t[3], -kMaxLogScale, kMaxLogScale), std::nullopt};
    auto g = decode_candidate(proposals[r], f, c, binning);
    decoded.push_back({g, p[c], c, int(r)});
    scored.push_back({g, p[c]});
  }
  std::vector<SelectedGrasp> out;
  for (auto k : nms_rotated_indices(scored, nms_iou)) out.push_back(decoded[k]);
  return out;
}

HeadTargets assign_head_targets(const std::vector<RegionProposal>& proposals, const std::vector<GraspCandidate>& gts,
                                const HeadConfig& config, const OrientationBinning& binning) {
  HeadTargets t;
  t.proposals = proposals;
  std::vector<RegionProposal> gt_boxes;
  for (const auto& g : gts) gt_boxes.push_back(enclosing_aabb(g));
  for (const auto& p : proposals) {
    double best = 0.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = aabb_iou(p, gt_boxes[g]);
      if (v > best) {
        best = v;
        best_g = int(g);
      }
    }
    if (best_g >= 0 && best >= config.valid_iou) {
      const auto& g = gts[std::size_t(best_g)];
      t.classes.push_back(binning.bin_of(g.theta()));
      t.targets.push_back(encode_targets(g, p));
      t.matched_gt.push_back(best_g);
    } else {
      t.classes.push_back(binning.null_class());
      t.targets.push_back({});
      t.matched_gt.push_back(-1);
    }
  }
  return t;
}

HeadTargets sample_head_targets(std::vector<RegionProposal> proposals, const std::vector<GraspCandidate>& gts,
                                const HeadConfig& config, const OrientationBinning& binning, std::mt19937_64& rng) {
  for (const auto& g : gts) proposals.push_back(enclosing_aabb(g));
  const HeadTargets all = assign_head_targets(proposals, gts, config, binning);
  std::vector<std::size_t> valid, invalid;
  for (std::size_t i = 0; i < all.classes.size(); ++i) {
    (all.matched_gt[i] >= 0 ? valid : invalid).push_back(i);
  }
  std::shuffle(valid.begin(), valid.end(), rng);
  std::shuffle(invalid.begin(), invalid.end(), rng);
  const std::size_t n_valid =
      std::min(valid.size(), std::size_t(std::lround(config.samples_per_image * config.valid_fraction)));
  const std::size_t n_invalid = std::min(invalid.size(), std::size_t(config.samples_per_image) - n_valid);
  HeadTargets t;
  auto take = [&](std::size_t i) {
    t.proposals.push_back(all.proposals[i]);
    t.classes.push_back(all.classes[i]);
    t.targets.push_back(all.targets[i]);
    t.matched_gt.push_back(all.matched_gt[i]);
  };
  for (std::size_t i = 0; i < n_valid; ++i) take(valid[i]);
  for (std::size_t i = 0; i < n_invalid; ++i) take(invalid[i]);
  return t;
}

}  // namespace graspnet
