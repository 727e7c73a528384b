#pragma once

// Residual feature extractor with a feature pyramid on top. Every
// normalization layer is batch normalization fused with a leaky activation.

#include <array>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace graspnet {

inline constexpr double kLeakySlope = 0.01;

/// Batch normalization followed by leaky ReLU (slope 0.01); `activate=false`
/// gives the identity-activation variant used before residual additions.
class NormAct2dImpl : public torch::nn::Module {
 public:
  NormAct2dImpl(int channels, bool activate = true);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::BatchNorm2d bn{nullptr};

 private:
  bool activate_;
};
TORCH_MODULE(NormAct2d);

class NormAct1dImpl : public torch::nn::Module {
 public:
  explicit NormAct1dImpl(int features);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::BatchNorm1d bn{nullptr};
};
TORCH_MODULE(NormAct1d);

struct BackboneConfig {
  std::string preset = "tiny";
  std::array<int, 4> stage_block_counts{2, 2, 2, 2};
  std::array<int, 4> stage_widths{16, 32, 64, 128};
  int stem_width = 16;
  bool bottleneck = false;
  int frozen_stage_count = 0;
  int fpn_channels = 64;

  static BackboneConfig tiny();
  static BackboneConfig resnet101();
  /// Throws std::invalid_argument for unknown names.
  static BackboneConfig from_preset(const std::string& name);
  void validate() const;
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(int in_channels, int out_channels, int stride, bool bottleneck);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  bool bottleneck_;
  torch::nn::Conv2d conv_a{nullptr}, conv_b{nullptr}, conv_c{nullptr}, proj{nullptr};
  NormAct2d norm_a{nullptr}, norm_b{nullptr}, norm_c{nullptr}, proj_norm{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// ResNet-style trunk exposing stages conv1..conv5. conv2..conv5 outputs
/// have strides 4, 8, 16 and 32.
class ResNetImpl : public torch::nn::Module {
 public:
  ResNetImpl(int in_channels, const BackboneConfig& config);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);
  void train(bool on = true) override;

  /// Stages 1..n (conv1 is stage 1) stop receiving gradient updates and keep
  /// their normalization statistics fixed.
  void freeze_stages(int n);
  int frozen_stage_count() const { return frozen_; }
  std::vector<int> out_channels() const;
  torch::nn::Sequential stage(int index) const { return stages_.at(std::size_t(index)); }

 private:
  BackboneConfig config_;
  std::vector<torch::nn::Sequential> stages_;  // conv1 .. conv5
  int frozen_ = 0;
};
TORCH_MODULE(ResNet);

/// Top-down pathway with lateral 1x1 projections, nearest upsampling and a
/// 3x3 smoothing conv per merged level.
class FeaturePyramidImpl : public torch::nn::Module {
 public:
  FeaturePyramidImpl(const std::vector<int>& in_channels, int out_channels);
  std::vector<torch::Tensor> forward(const std::vector<torch::Tensor>& features);

 private:
  std::vector<torch::nn::Conv2d> lateral_, smooth_;
};
TORCH_MODULE(FeaturePyramid);

/// Pyramid levels P2..P5 (strides 4, 8, 16, 32) with a common channel count.
struct FeaturePyramidMaps {
  std::vector<torch::Tensor> levels;
  static constexpr std::array<int, 4> kStrides{4, 8, 16, 32};
};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(const BackboneConfig& config);
  /// Input (N, 3, H, W) with H and W multiples of 32.
  FeaturePyramidMaps forward(const torch::Tensor& images);
  const BackboneConfig& config() const { return config_; }
  ResNet trunk{nullptr};
  FeaturePyramid fpn{nullptr};

 private:
  BackboneConfig config_;
};
TORCH_MODULE(Backbone);

Backbone build_backbone(const BackboneConfig& config);

std::int64_t count_parameters(const torch::nn::Module& module, bool trainable_only = false);

/// Copies `weights` into the parameters and buffers of `module` by canonical
/// name (torch's dotted module path). Unknown keys and shape mismatches are
/// reported together in a single std::runtime_error.
void load_named_weights(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& weights,
                        bool require_all = false);

}  // namespace graspnet
