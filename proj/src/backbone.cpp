#include "graspnet/backbone.hpp"

#include <sstream>
#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

NormAct2dImpl::NormAct2dImpl(int channels, bool activate) : activate_(activate) {
  bn = register_module("bn", torch::nn::BatchNorm2d(channels));
}

namespace {

// Batch statistics are undefined for a single value per channel (one pooled
// vector, one region); fall back to the running estimates in that case.
torch::Tensor batch_norm(torch::nn::BatchNormImplBase<2, torch::nn::BatchNorm2dImpl>& bn, const torch::Tensor& x) {
  if (bn.is_training() && x.numel() / x.size(1) < 2) {
    return F::batch_norm(x, bn.running_mean, bn.running_var,
                         F::BatchNormFuncOptions().weight(bn.weight).bias(bn.bias).training(false).eps(bn.options.eps()));
  }
  return bn.forward(x);
}

torch::Tensor batch_norm(torch::nn::BatchNormImplBase<1, torch::nn::BatchNorm1dImpl>& bn, const torch::Tensor& x) {
  if (bn.is_training() && x.numel() / x.size(1) < 2) {
    return F::batch_norm(x, bn.running_mean, bn.running_var,
                         F::BatchNormFuncOptions().weight(bn.weight).bias(bn.bias).training(false).eps(bn.options.eps()));
  }
  return bn.forward(x);
}

}  // namespace

torch::Tensor NormAct2dImpl::forward(const torch::Tensor& x) {
  auto y = batch_norm(*bn, x);
  return activate_ ? F::leaky_relu(y, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope)) : y;
}

NormAct1dImpl::NormAct1dImpl(int features) { bn = register_module("bn", torch::nn::BatchNorm1d(features)); }

torch::Tensor NormAct1dImpl::forward(const torch::Tensor& x) {
  return F::leaky_relu(batch_norm(*bn, x), F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
}

BackboneConfig BackboneConfig::tiny() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::resnet101() {
  BackboneConfig c;
  c.preset = "resnet101";
  c.stage_block_counts = {3, 4, 23, 3};
  c.stage_widths = {256, 512, 1024, 2048};
  c.stem_width = 64;
  c.bottleneck = true;
  c.frozen_stage_count = 2;
  c.fpn_channels = 256;
  return c;
}

BackboneConfig BackboneConfig::from_preset(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "resnet101") return resnet101();
  throw std::invalid_argument("unknown backbone preset '" + name + "' (expected tiny or resnet101)");
}

void BackboneConfig::validate() const {
  if (frozen_stage_count < 0 || frozen_stage_count > 4) throw std::invalid_argument("frozen_stage_count must be in [0, 4]");
  for (int i = 0; i < 4; ++i) {
    if (stage_block_counts[i] <= 0 || stage_widths[i] <= 0) throw std::invalid_argument("stage sizes must be positive");
  }
  if (stem_width <= 0 || fpn_channels <= 0) throw std::invalid_argument("channel widths must be positive");
}

namespace {

torch::nn::Conv2d conv(int in, int out, int k, int stride = 1, int dilation = 1, bool bias = false) {
  return torch::nn::Conv2d(
      torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(dilation * (k / 2)).dilation(dilation).bias(bias));
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(int in_channels, int out_channels, int stride, bool bottleneck)
    : bottleneck_(bottleneck) {
  if (bottleneck) {
    const int mid = std::max(1, out_channels / 4);
    conv_a = register_module("conv_a", conv(in_channels, mid, 1));
    norm_a = register_module("norm_a", NormAct2d(mid));
    conv_b = register_module("conv_b", conv(mid, mid, 3, stride));
    norm_b = register_module("norm_b", NormAct2d(mid));
    conv_c = register_module("conv_c", conv(mid, out_channels, 1));
    norm_c = register_module("norm_c", NormAct2d(out_channels, false));
  } else {
    conv_a = register_module("conv_a", conv(in_channels, out_channels, 3, stride));
    norm_a = register_module("norm_a", NormAct2d(out_channels));
    conv_b = register_module("conv_b", conv(out_channels, out_channels, 3));
    norm_b = register_module("norm_b", NormAct2d(out_channels, false));
  }
  if (stride != 1 || in_channels != out_channels) {
    proj = register_module("proj", conv(in_channels, out_channels, 1, stride));
    proj_norm = register_module("proj_norm", NormAct2d(out_channels, false));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = norm_a(conv_a(x));
  y = norm_b(conv_b(y));
  if (bottleneck_) y = norm_c(conv_c(y));
  auto shortcut = proj ? proj_norm(proj(x)) : x;
  return F::leaky_relu(y + shortcut, F::LeakyReLUFuncOptions().negative_slope(kLeakySlope));
}

ResNetImpl::ResNetImpl(int in_channels, const BackboneConfig& config) : config_(config) {
  config.validate();
  torch::nn::Sequential stem;
  stem->push_back("conv", conv(in_channels, config.stem_width, 7, 2));
  stem->push_back("norm", NormAct2d(config.stem_width));
  stem->push_back("pool", torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(3).stride(2).padding(1)));
  stages_.push_back(register_module("conv1", stem));
  int in = config.stem_width;
  for (int s = 0; s < 4; ++s) {
    torch::nn::Sequential stage;
    const int out = config.stage_widths[s];
    for (int b = 0; b < config.stage_block_counts[s]; ++b) {
      const int stride = (b == 0 && s > 0) ? 2 : 1;
      stage->push_back(ResidualBlock(b == 0 ? in : out, out, stride, config.bottleneck));
    }
    in = out;
    stages_.push_back(register_module("conv" + std::to_string(s + 2), stage));
  }
  for (auto& m : modules(/*include_self=*/false)) {
    if (auto* c = m->as<torch::nn::Conv2d>()) {
      torch::nn::init::kaiming_normal_(c->weight, kLeakySlope, torch::kFanOut, torch::kLeakyReLU);
    }
  }
  freeze_stages(config.frozen_stage_count);
}

std::vector<torch::Tensor> ResNetImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  auto y = stages_[0]->forward(x);
  for (std::size_t s = 1; s < stages_.size(); ++s) {
    y = stages_[s]->forward(y);
    outs.push_back(y);
  }
  return outs;
}

void ResNetImpl::train(bool on) {
  torch::nn::Module::train(on);
  for (int s = 0; s < frozen_; ++s) stages_[std::size_t(s)]->eval();
}

void ResNetImpl::freeze_stages(int n) {
  if (n < 0 || n > 4) throw std::invalid_argument("frozen stage count must be in [0, 4]");
  frozen_ = n;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (auto& p : stages_[s]->parameters()) p.set_requires_grad(int(s) >= n);
  }
  train(is_training());
}

std::vector<int> ResNetImpl::out_channels() const {
  return {config_.stage_widths.begin(), config_.stage_widths.end()};
}

FeaturePyramidImpl::FeaturePyramidImpl(const std::vector<int>& in_channels, int out_channels) {
  for (std::size_t i = 0; i < in_channels.size(); ++i) {
    auto lat = torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels[i], out_channels, 1));
    auto sm = torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1));
    torch::nn::init::xavier_uniform_(lat->weight);
    torch::nn::init::zeros_(lat->bias);
    torch::nn::init::xavier_uniform_(sm->weight);
    torch::nn::init::zeros_(sm->bias);
    lateral_.push_back(register_module("lateral" + std::to_string(i + 2), lat));
    smooth_.push_back(register_module("smooth" + std::to_string(i + 2), sm));
  }
}

std::vector<torch::Tensor> FeaturePyramidImpl::forward(const std::vector<torch::Tensor>& features) {
  TORCH_CHECK(features.size() == lateral_.size(), "expected ", lateral_.size(), " feature levels");
  std::vector<torch::Tensor> merged(features.size());
  merged.back() = lateral_.back()(features.back());
  for (int i = int(features.size()) - 2; i >= 0; --i) {
    auto lat = lateral_[std::size_t(i)](features[std::size_t(i)]);
    auto up = F::interpolate(merged[std::size_t(i) + 1], F::InterpolateFuncOptions()
                                                             .size(std::vector<int64_t>{lat.size(2), lat.size(3)})
                                                             .mode(torch::kNearest));
    merged[std::size_t(i)] = lat + up;
  }
  std::vector<torch::Tensor> outs;
  for (std::size_t i = 0; i < merged.size(); ++i) outs.push_back(smooth_[i](merged[i]));
  return outs;
}

BackboneImpl::BackboneImpl(const BackboneConfig& config) : config_(config) {
  trunk = register_module("trunk", ResNet(3, config));
  fpn = register_module("fpn", FeaturePyramid(trunk->out_channels(), config.fpn_channels));
}

FeaturePyramidMaps BackboneImpl::forward(const torch::Tensor& images) {
  TORCH_CHECK(images.dim() == 4 && images.size(1) == 3, "expected an (N, 3, H, W) batch");
  if (images.size(2) % 32 != 0 || images.size(3) % 32 != 0) {
    std::ostringstream os;
    os << "input " << images.size(2) << "x" << images.size(3) << " is not a multiple of 32; pad it first";
    throw std::invalid_argument(os.str());
  }
  return {fpn(trunk(images))};
}

Backbone build_backbone(const BackboneConfig& config) { return Backbone(config); }

std::int64_t count_parameters(const torch::nn::Module& module, bool trainable_only) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    if (!trainable_only || p.requires_grad()) n += p.numel();
  }
  return n;
}

void load_named_weights(torch::nn::Module& module, const std::map<std::string, torch::Tensor>& weights,
                        bool require_all) {
  auto params = module.named_parameters(true);
  auto buffers = module.named_buffers(true);
  std::vector<std::string> problems;
  std::map<std::string, torch::Tensor> targets;
  for (const auto& p : params) targets[p.key()] = p.value();
  for (const auto& b : buffers) targets[b.key()] = b.value();
  for (const auto& [name, value] : weights) {
    auto it = targets.find(name);
    if (it == targets.end()) {
      problems.push_back(name + " (unknown key)");
    } else if (it->second.sizes() != value.sizes()) {
      std::ostringstream os;
      os << name << " (expected " << it->second.sizes() << ", got " << value.sizes() << ")";
      problems.push_back(os.str());
    }
  }
  if (require_all) {
    for (const auto& [name, _] : targets) {
      if (!weights.count(name)) problems.push_back(name + " (missing)");
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "weight mapping rejected for " << problems.size() << " key(s):";
    for (const auto& p : problems) os << "\n  " << p;
    throw std::runtime_error(os.str());
  }
  torch::NoGradGuard guard;
  for (const auto& [name, value] : weights) {
    auto& dst = targets.at(name);
    dst.copy_(value.to(dst.dtype()));
  }
}

}  // namespace graspnet
