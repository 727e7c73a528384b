#pragma once

// Candidate refinement from the feasibility map: each candidate sees the full
// map and a copy masked to its neighbourhood, and regresses five corrections.

#include <vector>

#include <torch/torch.h>

#include "graspnet/backbone.hpp"
#include "graspnet/geometry.hpp"

namespace graspnet {

struct RefineConfig {
  BackboneConfig trunk = tiny_trunk();
  int working_size = 96;
  double margin = 1.2;
  int top_k = 10;                // post-NMS head candidates refined at inference
  int train_candidates = 8;      // head candidates refined per training image
  int jitter_per_gt = 2;         // perturbed copies of each ground truth added in training
  double match_iou = 0.25;
  double gate_threshold = 0.5;   // minimum mean feasibility under a final candidate
  double gate_shrink = 0.5;      // fraction of the rectangle sampled by the gate

  static BackboneConfig tiny_trunk();
  static RefineConfig from_preset(const std::string& name);
  void validate() const;
};

/// Zero outside `box` (pixel centers tested), input copied inside.
/// map: (..., H, W), box in that map's pixel coordinates.
torch::Tensor crop_mask(const torch::Tensor& map, const RegionProposal& box);
/// Box = enclosing_aabb(g) scaled by `margin` about its center; g in map pixels.
torch::Tensor crop_mask(const torch::Tensor& map, const GraspCandidate& g, double margin);

/// feasibility: (H, W) at image resolution; candidates in image pixels.
/// Returns (N, 2, S, S) with S = working_size.
torch::Tensor build_stack(const torch::Tensor& feasibility, const std::vector<GraspCandidate>& candidates,
                          int working_size, double margin);

class RefineNetImpl : public torch::nn::Module {
 public:
  explicit RefineNetImpl(const RefineConfig& config);
  /// (N, 2, S, S) -> (N, 5) as (t_x, t_y, t_w, t_h, t_theta).
  torch::Tensor forward(const torch::Tensor& stack);
  const RefineConfig& config() const { return config_; }

 private:
  RefineConfig config_;
  ResNet trunk{nullptr};
  NormAct1d norm{nullptr};
  torch::nn::Linear out{nullptr};
};
TORCH_MODULE(RefineNet);

/// x += t_x w, y += t_y h, w *= exp(t_w), h *= exp(t_h), theta += t_theta * bin_width.
GraspCandidate apply_refinement(const GraspCandidate& g, const CorrectionFactors& f, double bin_width);
/// Inverse of apply_refinement: factors taking `from` to `to`.
CorrectionFactors encode_refinement(const GraspCandidate& from, const GraspCandidate& to, double bin_width);

/// Mean feasibility over the rectangle shrunk by `shrink` (pixel-center test).
double mean_feasibility(const torch::Tensor& feasibility, const GraspCandidate& g, double shrink);

}  // namespace graspnet
