#pragma once

// Region proposal network and the grasp detection head: anchors, target
// assignment, region feature pooling, orientation classification and
// class-specific rectangle regression.

#include <array>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "graspnet/backbone.hpp"
#include "graspnet/geometry.hpp"

namespace graspnet {

struct AnchorConfig {
  std::array<double, 4> base_sizes{12.0, 24.0, 48.0, 96.0};  // P2..P5
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};          // height / width
  double positive_iou = 0.7;
  double negative_iou = 0.3;
  int pre_nms_top_n = 1000;  // per level
  double nms_iou = 0.7;
  int post_nms_top_n = 100;
  int batch_per_image = 256;
  double positive_fraction = 0.5;

  int anchors_per_location() const { return static_cast<int>(aspect_ratios.size()); }
  void validate() const;
};

/// All anchors for an image, level-major then row, column, aspect ratio,
/// matching the flattened RPN outputs.
std::vector<RegionProposal> generate_anchors(const AnchorConfig& config, int image_height, int image_width);

struct RpnOutputs {
  torch::Tensor objectness;  // (N, A) logits
  torch::Tensor deltas;      // (N, A, 4) as (t_x, t_y, t_w, t_h)
};

class RpnHeadImpl : public torch::nn::Module {
 public:
  RpnHeadImpl(int channels, int anchors_per_location);
  RpnOutputs forward(const FeaturePyramidMaps& pyramid);

 private:
  torch::nn::Conv2d conv{nullptr}, cls{nullptr}, reg{nullptr};
};
TORCH_MODULE(RpnHead);

/// Decodes, clips, suppresses (axis-aligned NMS) and keeps the top
/// post_nms_top_n proposals per image, sorted by descending objectness.
std::vector<std::vector<RegionProposal>> generate_proposals(const RpnOutputs& outputs,
                                                            const std::vector<RegionProposal>& anchors,
                                                            const AnchorConfig& config, int image_height,
                                                            int image_width);

enum AnchorLabel : int { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct RpnTargets {
  std::vector<int> labels;
  std::vector<CorrectionFactors> targets;  // meaningful for positives
};

/// Positive when IoU >= positive_iou with some box or when the anchor is the
/// best match of a box; negative when max IoU < negative_iou; else ignored.
RpnTargets assign_rpn_targets(const std::vector<RegionProposal>& anchors, const std::vector<RegionProposal>& gt_aabbs,
                              const AnchorConfig& config);
/// Keeps at most batch_per_image labelled anchors, positive_fraction of them positive.
void subsample_rpn_targets(RpnTargets& targets, const AnchorConfig& config, std::mt19937_64& rng);

/// level = clamp(floor(4 + log2(sqrt(w h) / 224)), 2, 5)
int pyramid_level_for(const RegionProposal& box);

/// Bilinear region pooling (sampling_ratio^2 samples per output cell) from the level
/// chosen by pyramid_level_for. Returns (R, C, output, output) with rows in
/// image-major order of `proposals`.
torch::Tensor roi_align(const FeaturePyramidMaps& pyramid, const std::vector<std::vector<RegionProposal>>& proposals,
                        int output_size = 14, int sampling_ratio = 2);

/// Same sampling on one explicit map (1, C, H, W) with the given stride.
torch::Tensor roi_align_level(const torch::Tensor& feature, int stride, const std::vector<RegionProposal>& boxes,
                              int output_size = 14, int sampling_ratio = 2);

struct HeadConfig {
  int n_classes = 18;
  int fc_width = 256;
  int pooled_size = 14;
  int sampling_ratio = 1;  // bilinear samples per pooled cell and axis
  double score_threshold = 0.5;
  double nms_iou = 0.5;
  int samples_per_image = 64;
  double valid_fraction = 0.25;
  double valid_iou = 0.5;
};

struct HeadOutputs {
  torch::Tensor logits;       // (R, n_classes + 1); last column is the null class
  torch::Tensor corrections;  // (R, 4 n_classes) grouped per class
  torch::Tensor probabilities() const { return torch::softmax(logits, 1); }
};

class GraspHeadImpl : public torch::nn::Module {
 public:
  GraspHeadImpl(int channels, const HeadConfig& config);
  /// pooled: (R, C, pooled_size, pooled_size); average-pooled to half size first.
  HeadOutputs forward(const torch::Tensor& pooled);
  const HeadConfig& config() const { return config_; }

 private:
  HeadConfig config_;
  torch::nn::Linear fc1{nullptr}, fc2{nullptr}, orient_fc{nullptr}, orient_out{nullptr}, rect_fc{nullptr},
      rect_out{nullptr};
  NormAct1d norm1{nullptr}, norm2{nullptr}, orient_norm{nullptr}, rect_norm{nullptr};
};
TORCH_MODULE(GraspHead);

struct SelectedGrasp {
  GraspCandidate grasp;
  double score = 0.0;
  int orientation_class = 0;
  int proposal_index = 0;
};

/// argmax class per proposal; drops the null class and scores below the
/// threshold, decodes with that class's corrections, then rotated NMS.
std::vector<SelectedGrasp> select_and_decode(const std::vector<RegionProposal>& proposals,
                                             const torch::Tensor& probabilities, const torch::Tensor& corrections,
                                             double score_threshold, double nms_iou,
                                             const OrientationBinning& binning);

/// Training targets for the head on one image.
struct HeadTargets {
  std::vector<RegionProposal> proposals;
  std::vector<int> classes;                // orientation class, or null_class for invalid proposals
  std::vector<CorrectionFactors> targets;  // meaningful for valid proposals
  std::vector<int> matched_gt;             // -1 for invalid proposals
};

/// Valid iff the best enclosing-box IoU with a ground-truth grasp is >=
/// valid_iou; class is that grasp's orientation bin.
HeadTargets assign_head_targets(const std::vector<RegionProposal>& proposals, const std::vector<GraspCandidate>& gts,
                                const HeadConfig& config, const OrientationBinning& binning);
HeadTargets sample_head_targets(std::vector<RegionProposal> proposals, const std::vector<GraspCandidate>& gts,
                                const HeadConfig& config, const OrientationBinning& binning, std::mt19937_64& rng);

}  // namespace graspnet
