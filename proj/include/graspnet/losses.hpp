#pragma once

// Training objectives. Every loss returns a 0-dim tensor; empty sample sets
// give an exact zero that still participates in autograd.

#include <vector>

#include <torch/torch.h>

#include "graspnet/geometry.hpp"

namespace graspnet {

struct LossWeights {
  double grasp = 1.0;
  double seg = 1.0;
  double refine = 1.0;

  void validate() const;
};

struct LossParts {
  torch::Tensor rpn, box, rot, seg, refine;
};

/// Elementwise smooth-L1 with unit transition point.
torch::Tensor smooth_l1_tensor(const torch::Tensor& x);

/// Stacks correction factors as an (R, 4) or, with t_theta, (R, 5) tensor.
torch::Tensor factors_tensor(const std::vector<CorrectionFactors>& f, bool with_theta, const torch::TensorOptions& opts);

/// Binary cross-entropy over labelled anchors (label >= 0) plus smooth-L1 on
/// the positives' regression, each averaged over its own count.
torch::Tensor loss_rpn(const torch::Tensor& objectness, const torch::Tensor& deltas, const std::vector<int>& labels,
                       const std::vector<CorrectionFactors>& targets);

/// Cross-entropy over orientation classes (null class included), mean over rows.
torch::Tensor loss_rot(const torch::Tensor& logits, const std::vector<int>& classes);

/// Smooth-L1 of the ground-truth class's quadruple, summed over the four
/// factors and averaged over rows whose class is not `null_class`.
torch::Tensor loss_box(const torch::Tensor& corrections, const std::vector<int>& classes,
                       const std::vector<CorrectionFactors>& targets, int null_class);

/// Pixel weights for one image: the floor(H W / 4) pixels with the largest
/// negative log-likelihood get 4 / (H W), ties resolved in row-major order.
/// nll: (H, W). Returns (H, W) without gradient.
torch::Tensor hard_negative_weights(const torch::Tensor& nll);

/// log_probs: (N, S, H, W); target: (N, H, W) class ids. Per-image weighted
/// NLL under hard_negative_weights, averaged over the batch.
torch::Tensor loss_seg(const torch::Tensor& log_probs, const torch::Tensor& target);

/// Smooth-L1 over the five refinement factors, averaged over matched rows.
torch::Tensor loss_refine(const torch::Tensor& factors, const std::vector<CorrectionFactors>& targets,
                          const std::vector<bool>& matched);

torch::Tensor total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace graspnet
