#include "graspnet/model.hpp"

#include <algorithm>
#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

ModelConfig ModelConfig::from_preset(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  c.backbone = BackboneConfig::from_preset(name);
  c.refine = RefineConfig::from_preset(name);
  if (name == "resnet101") {
    c.head.fc_width = 1024;
    c.seg.width = 128;
    c.anchors.base_sizes = {32.0, 64.0, 128.0, 256.0};
  }
  return c;
}

void ModelConfig::validate() const {
  backbone.validate();
  anchors.validate();
  seg.validate();
  refine.validate();
  if (head.n_classes < 1 || head.fc_width < 1 || head.samples_per_image < 1) {
    throw std::invalid_argument("head sizes must be positive");
  }
  if (head.pooled_size % 2 != 0) throw std::invalid_argument("pooled size must be even");
}

torch::Tensor image_to_tensor(const Image8& image) {
  if (image.channels != 3) throw std::invalid_argument("expected a 3-channel image");
  auto t = torch::from_blob(const_cast<std::uint8_t*>(image.data.data()), {image.height, image.width, 3}, torch::kUInt8)
               .permute({2, 0, 1})
               .to(torch::kFloat);
  return (t / 255.0 - 0.5) / 0.25;
}

namespace {

torch::Tensor pad32(const torch::Tensor& images) {
  const auto h = images.size(2), w = images.size(3);
  const auto ph = (32 - h % 32) % 32, pw = (32 - w % 32) % 32;
  if (ph == 0 && pw == 0) return images;
  return F::pad(images, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
}

torch::Tensor mask_to_tensor(const Image8& mask) {
  return torch::from_blob(const_cast<std::uint8_t*>(mask.data.data()), {mask.height, mask.width}, torch::kUInt8)
      .to(torch::kLong);
}

}  // namespace

Batch make_batch(const std::vector<SceneSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  Batch b;
  b.height = samples.front().image.height;
  b.width = samples.front().image.width;
  std::vector<torch::Tensor> images, masks;
  for (const auto& s : samples) {
    if (s.image.height != b.height || s.image.width != b.width) {
      throw std::invalid_argument("batch images must share one size; '" + s.name + "' differs");
    }
    images.push_back(image_to_tensor(s.image));
    masks.push_back(mask_to_tensor(s.semantic_mask));
    b.grasps.push_back(s.grasp_list());
  }
  b.images = pad32(torch::stack(images));
  b.masks = torch::stack(masks);
  return b;
}

GraspNetImpl::GraspNetImpl(const ModelConfig& config) : config_(config), binning_(config.head.n_classes) {
  config.validate();
  backbone = register_module("backbone", Backbone(config.backbone));
  rpn = register_module("rpn", RpnHead(config.backbone.fpn_channels, config.anchors.anchors_per_location()));
  head = register_module("head", GraspHead(config.backbone.fpn_channels, config.head));
  seg = register_module("seg", SegmentationBranch(config.backbone.fpn_channels, config.seg));
  refine = register_module("refine", RefineNet(config.refine));
}

const std::vector<RegionProposal>& GraspNetImpl::anchors_for(int height, int width) {
  if (height != anchor_h_ || width != anchor_w_) {
    anchors_ = generate_anchors(config_.anchors, height, width);
    anchor_h_ = height;
    anchor_w_ = width;
  }
  return anchors_;
}

std::vector<GraspCandidate> GraspNetImpl::refine_candidates(const std::vector<SelectedGrasp>& selected,
                                                            const std::vector<GraspCandidate>& gts,
                                                            std::mt19937_64& rng) const {
  std::vector<GraspCandidate> out;
  for (const auto& s : selected) {
    if (int(out.size()) >= config_.refine.train_candidates) break;
    out.push_back(s.grasp);
  }
  // perturbed ground truth keeps the refinement loss populated while the head is still poor
  std::uniform_real_distribution<double> shift(-0.15, 0.15), scale(-0.2, 0.2), turn(-15.0, 15.0);
  for (const auto& g : gts) {
    for (int j = 0; j < config_.refine.jitter_per_gt; ++j) {
      out.emplace_back(g.x() + shift(rng) * g.width(), g.y() + shift(rng) * g.height(),
                       g.width() * std::exp(scale(rng)), g.height() * std::exp(scale(rng)), g.theta() + turn(rng));
    }
  }
  return out;
}

LossParts GraspNetImpl::compute_losses(const Batch& batch, TrainPlan& plan, std::mt19937_64& rng) {
  const bool build = plan.empty();
  const auto n = batch.images.size(0);
  const int hp = int(batch.images.size(2)), wp = int(batch.images.size(3));
  if (!build && std::int64_t(plan.images.size()) != n) throw std::invalid_argument("plan does not match the batch");
  if (build) plan.images.resize(std::size_t(n));

  auto pyramid = backbone(batch.images);
  auto rpn_out = rpn(pyramid);
  const auto& anchors = anchors_for(hp, wp);

  std::vector<std::vector<RegionProposal>> proposals;
  if (build) proposals = generate_proposals(rpn_out, anchors, config_.anchors, hp, wp);

  std::vector<int> anchor_labels;
  std::vector<CorrectionFactors> anchor_targets;
  std::vector<std::vector<RegionProposal>> head_props;
  std::vector<int> head_classes;
  std::vector<CorrectionFactors> head_targets;
  for (std::int64_t b = 0; b < n; ++b) {
    auto& ip = plan.images[std::size_t(b)];
    const auto& gts = batch.grasps[std::size_t(b)];
    if (build) {
      std::vector<RegionProposal> gt_boxes;
      for (const auto& g : gts) gt_boxes.push_back(enclosing_aabb(g));
      ip.rpn = assign_rpn_targets(anchors, gt_boxes, config_.anchors);
      subsample_rpn_targets(ip.rpn, config_.anchors, rng);
      ip.head = sample_head_targets(proposals[std::size_t(b)], gts, config_.head, binning_, rng);
    }
    anchor_labels.insert(anchor_labels.end(), ip.rpn.labels.begin(), ip.rpn.labels.end());
    anchor_targets.insert(anchor_targets.end(), ip.rpn.targets.begin(), ip.rpn.targets.end());
    head_props.push_back(ip.head.proposals);
    head_classes.insert(head_classes.end(), ip.head.classes.begin(), ip.head.classes.end());
    head_targets.insert(head_targets.end(), ip.head.targets.begin(), ip.head.targets.end());
  }

  LossParts parts;
  parts.rpn = loss_rpn(rpn_out.objectness.reshape({-1}), rpn_out.deltas.reshape({-1, 4}), anchor_labels, anchor_targets);

  auto pooled = roi_align(pyramid, head_props, config_.head.pooled_size, config_.head.sampling_ratio);
  auto head_out = head(pooled);
  parts.rot = loss_rot(head_out.logits, head_classes);
  parts.box = loss_box(head_out.corrections, head_classes, head_targets, binning_.null_class());

  auto logits = upsample_logits(seg(pyramid), hp, wp)
                    .narrow(2, 0, batch.height)
                    .narrow(3, 0, batch.width);
  auto log_probs = torch::log_softmax(logits, 1);
  parts.seg = loss_seg(log_probs, batch.masks);

  // trained end to end: the refinement loss also shapes the segmentation
  auto feasibility = feasibility_from_probs(log_probs.exp(), config_.seg);
  std::vector<torch::Tensor> stacks;
  std::vector<CorrectionFactors> refine_targets;
  std::vector<bool> refine_matched;
  std::int64_t row = 0;
  torch::Tensor probs_cpu, corr_cpu;
  if (build) {
    probs_cpu = head_out.probabilities().detach();
    corr_cpu = head_out.corrections.detach();
  }
  for (std::int64_t b = 0; b < n; ++b) {
    auto& ip = plan.images[std::size_t(b)];
    const auto& gts = batch.grasps[std::size_t(b)];
    const auto r = std::int64_t(ip.head.proposals.size());
    if (build) {
      auto selected = select_and_decode(ip.head.proposals, probs_cpu.narrow(0, row, r), corr_cpu.narrow(0, row, r),
                                        0.0, config_.head.nms_iou, binning_);
      ip.refine_candidates = refine_candidates(selected, gts, rng);
      ip.refine_targets.clear();
      ip.refine_matched.clear();
      for (const auto& c : ip.refine_candidates) {
        double best = 0.0;
        const GraspCandidate* match = nullptr;
        for (const auto& g : gts) {
          const double v = rotated_iou(c, g);
          if (v > best) {
            best = v;
            match = &g;
          }
        }
        const bool ok = match && best >= config_.refine.match_iou;
        ip.refine_matched.push_back(ok);
        ip.refine_targets.push_back(ok ? encode_refinement(c, *match, binning_.bin_width()) : CorrectionFactors{});
      }
    }
    row += r;
    stacks.push_back(build_stack(feasibility[b], ip.refine_candidates, config_.refine.working_size,
                                 config_.refine.margin));
    refine_targets.insert(refine_targets.end(), ip.refine_targets.begin(), ip.refine_targets.end());
    refine_matched.insert(refine_matched.end(), ip.refine_matched.begin(), ip.refine_matched.end());
  }
  auto factors = refine(torch::cat(stacks, 0));
  parts.refine = loss_refine(factors, refine_targets, refine_matched);
  return parts;
}

Prediction GraspNetImpl::predict(const Image8& image) {
  torch::NoGradGuard guard;
  const auto dtype = backbone->trunk->parameters().front().scalar_type();
  auto x = pad32(image_to_tensor(image).unsqueeze(0)).to(dtype);
  const int hp = int(x.size(2)), wp = int(x.size(3));
  auto pyramid = backbone(x);
  auto rpn_out = rpn(pyramid);
  auto proposals = generate_proposals(rpn_out, anchors_for(hp, wp), config_.anchors, hp, wp);
  auto head_out = head(roi_align(pyramid, proposals, config_.head.pooled_size, config_.head.sampling_ratio));
  auto probs = head_out.probabilities();
  auto selected = select_and_decode(proposals[0], probs, head_out.corrections, config_.head.score_threshold,
                                    config_.head.nms_iou, binning_);
  if (selected.empty()) {
    // nothing confident: keep the best non-null guess so top-1 is defined
    selected = select_and_decode(proposals[0], probs, head_out.corrections, 0.0, config_.head.nms_iou, binning_);
    if (selected.size() > 1) selected.resize(1);
  }
  if (int(selected.size()) > config_.refine.top_k) selected.resize(std::size_t(config_.refine.top_k));

  auto logits = upsample_logits(seg(pyramid), hp, wp).narrow(2, 0, image.height).narrow(3, 0, image.width);
  auto prob_map = torch::softmax(logits, 1);
  Prediction out;
  out.feasibility = feasibility_from_probs(prob_map, config_.seg)[0].to(torch::kFloat).contiguous();
  auto labels = prob_map[0].argmax(0).to(torch::kUInt8).contiguous();
  out.semantic = Image8(image.height, image.width, 1);
  std::copy_n(labels.data_ptr<std::uint8_t>(), out.semantic.data.size(), out.semantic.data.begin());

  std::vector<GraspCandidate> cands;
  for (const auto& s : selected) {
    cands.push_back(s.grasp);
    out.unrefined.push_back({s.grasp, s.score});
  }
  if (cands.empty()) return out;
  auto factors = refine(build_stack(out.feasibility.to(dtype), cands, config_.refine.working_size,
                                    config_.refine.margin))
                     .to(torch::kCPU, torch::kDouble)
                     .contiguous();
  const double* f = factors.data_ptr<double>();
  for (std::size_t i = 0; i < cands.size(); ++i) {
    CorrectionFactors cf{f[5 * i], f[5 * i + 1], std::clamp(f[5 * i + 2], -1.0, 1.0),
                         std::clamp(f[5 * i + 3], -1.0, 1.0), f[5 * i + 4]};
    auto g = apply_refinement(cands[i], cf, binning_.bin_width());
    if (mean_feasibility(out.feasibility, g, config_.refine.gate_shrink) < config_.refine.gate_threshold) continue;
    out.grasps.push_back({g, selected[i].score});
  }
  std::stable_sort(out.grasps.begin(), out.grasps.end(),
                   [](const ScoredGrasp& a, const ScoredGrasp& b) { return a.score > b.score; });
  return out;
}

ModelPredictor::ModelPredictor(GraspNet model) : model_(std::move(model)) {}

Prediction ModelPredictor::predict(const Image8& image) {
  model_->eval();
  return model_->predict(image);
}

}  // namespace graspnet
