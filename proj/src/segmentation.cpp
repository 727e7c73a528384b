#include "graspnet/segmentation.hpp"

#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

void SegConfig::validate() const {
  if (num_classes < 3) throw std::invalid_argument("segmentation needs at least 3 classes");
  if (feasible_ids.empty()) throw std::invalid_argument("feasible class set is empty");
  for (int id : feasible_ids) {
    if (id < 2 || id >= num_classes) {
      throw std::invalid_argument("feasible class id " + std::to_string(id) + " outside [2, " +
                                  std::to_string(num_classes) + ")");
    }
  }
  if (width <= 0 || dilation <= 0) throw std::invalid_argument("context width and dilation must be positive");
}

MiniContextImpl::MiniContextImpl(int in_channels, int width, int dilation) {
  auto opts = [](int in, int out, int k) { return torch::nn::Conv2dOptions(in, out, k).bias(false); };
  local = register_module("local", torch::nn::Conv2d(opts(in_channels, width, 3).padding(1)));
  atrous = register_module("atrous", torch::nn::Conv2d(opts(in_channels, width, 3).padding(dilation).dilation(dilation)));
  pooled = register_module("pooled", torch::nn::Conv2d(opts(in_channels, width, 1)));
  project = register_module("project", torch::nn::Conv2d(opts(3 * width, width, 1)));
  local_norm = register_module("local_norm", NormAct2d(width));
  atrous_norm = register_module("atrous_norm", NormAct2d(width));
  pooled_norm = register_module("pooled_norm", NormAct2d(width));
  project_norm = register_module("project_norm", NormAct2d(width));
  for (auto* c : {local.get(), atrous.get(), pooled.get(), project.get()}) {
    torch::nn::init::kaiming_normal_(c->weight, kLeakySlope, torch::kFanOut, torch::kLeakyReLU);
  }
}

torch::Tensor MiniContextImpl::forward(const torch::Tensor& x) {
  auto a = local_norm(local(x));
  auto b = atrous_norm(atrous(x));
  auto g = pooled_norm(pooled(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1))));
  g = g.expand({-1, -1, x.size(2), x.size(3)});
  return project_norm(project(torch::cat({a, b, g}, 1)));
}

SegmentationBranchImpl::SegmentationBranchImpl(int fpn_channels, const SegConfig& config) : config_(config) {
  config.validate();
  for (int l = 0; l < 4; ++l) {
    contexts_.push_back(
        register_module("context" + std::to_string(l + 2), MiniContext(fpn_channels, config.width, config.dilation)));
  }
  classifier = register_module("classifier", torch::nn::Conv2d(torch::nn::Conv2dOptions(4 * config.width,
                                                                                        config.num_classes, 1)));
  torch::nn::init::normal_(classifier->weight, 0.0, 0.01);
  torch::nn::init::zeros_(classifier->bias);
}

torch::Tensor SegmentationBranchImpl::forward(const FeaturePyramidMaps& pyramid) {
  TORCH_CHECK(pyramid.levels.size() == contexts_.size(), "expected four pyramid levels");
  const auto& p2 = pyramid.levels.front();
  const std::vector<int64_t> size{p2.size(2), p2.size(3)};
  std::vector<torch::Tensor> maps;
  for (std::size_t l = 0; l < contexts_.size(); ++l) {
    auto c = contexts_[l](pyramid.levels[l]);
    if (l > 0) {
      c = F::interpolate(c, F::InterpolateFuncOptions().size(size).mode(torch::kBilinear).align_corners(false));
    }
    maps.push_back(c);
  }
  return classifier(torch::cat(maps, 1));
}

torch::Tensor upsample_logits(const torch::Tensor& logits, int height, int width) {
  return F::interpolate(logits, F::InterpolateFuncOptions()
                                    .size(std::vector<int64_t>{height, width})
                                    .mode(torch::kBilinear)
                                    .align_corners(false));
}

torch::Tensor feasibility_from_probs(const torch::Tensor& probs, const SegConfig& config) {
  std::vector<int64_t> ids(config.feasible_ids.begin(), config.feasible_ids.end());
  auto idx = torch::tensor(ids, torch::kLong).to(probs.device());
  return probs.index_select(1, idx).sum(1).clamp(0.0, 1.0);
}

SemanticProbabilityMap probability_map(const torch::Tensor& logits, const SegConfig& config, int height, int width) {
  auto probs = torch::softmax(upsample_logits(logits, height, width), 1);
  return {probs, feasibility_from_probs(probs, config)};
}

}  // namespace graspnet
