#pragma once

// The full network: shared backbone, grasp branch, segmentation branch and
// refinement head, with the training forward pass and single-image inference.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "graspnet/backbone.hpp"
#include "graspnet/dataset.hpp"
#include "graspnet/grasp_branch.hpp"
#include "graspnet/losses.hpp"
#include "graspnet/refinement.hpp"
#include "graspnet/segmentation.hpp"

namespace graspnet {

struct ModelConfig {
  std::string preset = "tiny";
  BackboneConfig backbone;
  AnchorConfig anchors;
  HeadConfig head;
  SegConfig seg;
  RefineConfig refine;

  /// "tiny" for desk-scale runs, "resnet101" for the full-size network.
  static ModelConfig from_preset(const std::string& name);
  void validate() const;
};

/// (3, H, W) tensor scaled as (v / 255 - 0.5) / 0.25.
torch::Tensor image_to_tensor(const Image8& image);

/// Training batch; all samples must share one image size.
struct Batch {
  torch::Tensor images;  // (N, 3, Hp, Wp), padded to multiples of 32
  torch::Tensor masks;   // (N, H, W) class ids
  std::vector<std::vector<GraspCandidate>> grasps;
  int height = 0;
  int width = 0;
};

Batch make_batch(const std::vector<SceneSample>& samples);

/// Everything sampled during one training step. Reusing a plan evaluates the
/// same objective again, which is what the finite-difference check relies on.
struct ImagePlan {
  RpnTargets rpn;
  HeadTargets head;
  std::vector<GraspCandidate> refine_candidates;
  std::vector<CorrectionFactors> refine_targets;
  std::vector<bool> refine_matched;
};

struct TrainPlan {
  std::vector<ImagePlan> images;
  bool empty() const { return images.empty(); }
};

struct Prediction {
  std::vector<ScoredGrasp> grasps;     // final candidates, best first
  std::vector<ScoredGrasp> unrefined;  // head output after NMS, before refinement
  Image8 semantic;                     // argmax class per pixel
  torch::Tensor feasibility;           // (H, W)
};

class GraspNetImpl : public torch::nn::Module {
 public:
  explicit GraspNetImpl(const ModelConfig& config);

  /// Fills `plan` when it is empty, otherwise replays it.
  LossParts compute_losses(const Batch& batch, TrainPlan& plan, std::mt19937_64& rng);

  /// Inference on one image; switch to eval() first for stable statistics.
  Prediction predict(const Image8& image);

  const ModelConfig& config() const { return config_; }
  const OrientationBinning& binning() const { return binning_; }

  Backbone backbone{nullptr};
  RpnHead rpn{nullptr};
  GraspHead head{nullptr};
  SegmentationBranch seg{nullptr};
  RefineNet refine{nullptr};

 private:
  const std::vector<RegionProposal>& anchors_for(int height, int width);
  std::vector<GraspCandidate> refine_candidates(const std::vector<SelectedGrasp>& selected,
                                                const std::vector<GraspCandidate>& gts, std::mt19937_64& rng) const;

  ModelConfig config_;
  OrientationBinning binning_;
  int anchor_h_ = -1, anchor_w_ = -1;
  std::vector<RegionProposal> anchors_;
};
TORCH_MODULE(GraspNet);

/// Anything that maps an image to grasp candidates and a semantic mask. The
/// evaluator only sees this interface.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Prediction predict(const Image8& image) = 0;
};

class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(GraspNet model);
  Prediction predict(const Image8& image) override;

 private:
  GraspNet model_;
};

}  // namespace graspnet
