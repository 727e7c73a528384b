#pragma once

// Semantic segmentation over the pyramid: one small atrous context module per
// level, fused at quarter resolution, classified per pixel.

#include <vector>

#include <torch/torch.h>

#include "graspnet/backbone.hpp"

namespace graspnet {

struct SegConfig {
  int num_classes = 5;                  // 0 background, 1 infeasible object, >= 2 object classes
  std::vector<int> feasible_ids{2, 3, 4};
  int width = 32;                       // channels of each context module
  int dilation = 6;

  void validate() const;
};

/// Parallel 3x3 (dilation 1), 3x3 (dilation d) and global-pool branches,
/// concatenated and projected back to `width` channels.
class MiniContextImpl : public torch::nn::Module {
 public:
  MiniContextImpl(int in_channels, int width, int dilation);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d local{nullptr}, atrous{nullptr}, pooled{nullptr}, project{nullptr};
  NormAct2d local_norm{nullptr}, atrous_norm{nullptr}, pooled_norm{nullptr}, project_norm{nullptr};
};
TORCH_MODULE(MiniContext);

class SegmentationBranchImpl : public torch::nn::Module {
 public:
  SegmentationBranchImpl(int fpn_channels, const SegConfig& config);
  /// Logits (N, S, H/4, W/4) for an input of size H x W.
  torch::Tensor forward(const FeaturePyramidMaps& pyramid);
  const SegConfig& config() const { return config_; }

 private:
  SegConfig config_;
  std::vector<MiniContext> contexts_;
  torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(SegmentationBranch);

struct SemanticProbabilityMap {
  torch::Tensor probs;        // (N, S, H, W)
  torch::Tensor feasibility;  // (N, H, W)
};

/// Bilinear upsampling of quarter-resolution logits to (height, width).
torch::Tensor upsample_logits(const torch::Tensor& logits, int height, int width);

SemanticProbabilityMap probability_map(const torch::Tensor& logits, const SegConfig& config, int height, int width);

/// Sum of the feasible-class channels of (N, S, H, W) probabilities.
torch::Tensor feasibility_from_probs(const torch::Tensor& probs, const SegConfig& config);

}  // namespace graspnet
