#include "graspnet/refinement.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

BackboneConfig RefineConfig::tiny_trunk() {
  BackboneConfig c = BackboneConfig::tiny();
  c.stage_block_counts = {1, 1, 1, 1};
  return c;
}

RefineConfig RefineConfig::from_preset(const std::string& name) {
  RefineConfig c;
  if (name == "tiny") return c;
  if (name == "resnet101") {
    c.trunk = BackboneConfig::resnet101();
    c.trunk.frozen_stage_count = 0;
    return c;
  }
  throw std::invalid_argument("unknown refinement preset '" + name + "'");
}

void RefineConfig::validate() const {
  trunk.validate();
  if (working_size < 32) throw std::invalid_argument("refinement working size must be at least 32");
  if (!(margin >= 1.0)) throw std::invalid_argument("crop margin must be >= 1");
  if (top_k < 1 || train_candidates < 0 || jitter_per_gt < 0) throw std::invalid_argument("bad candidate counts");
  if (!(gate_shrink > 0.0 && gate_shrink <= 1.0)) throw std::invalid_argument("gate_shrink must be in (0, 1]");
}

torch::Tensor crop_mask(const torch::Tensor& map, const RegionProposal& box) {
  const auto h = map.size(-2), w = map.size(-1);
  auto opts = torch::TensorOptions().dtype(map.scalar_type()).device(map.device());
  auto xs = torch::arange(w, opts) + 0.5;
  auto ys = torch::arange(h, opts) + 0.5;
  auto mx = (xs >= box.x1()).logical_and(xs <= box.x2()).to(map.scalar_type());
  auto my = (ys >= box.y1()).logical_and(ys <= box.y2()).to(map.scalar_type());
  return map * my.unsqueeze(1) * mx.unsqueeze(0);
}

torch::Tensor crop_mask(const torch::Tensor& map, const GraspCandidate& g, double margin) {
  const auto b = enclosing_aabb(g);
  return crop_mask(map, RegionProposal(b.x(), b.y(), b.width() * margin, b.height() * margin));
}

torch::Tensor build_stack(const torch::Tensor& feasibility, const std::vector<GraspCandidate>& candidates,
                          int working_size, double margin) {
  TORCH_CHECK(feasibility.dim() == 2, "feasibility map must be (H, W)");
  const double sx = double(working_size) / double(feasibility.size(1));
  const double sy = double(working_size) / double(feasibility.size(0));
  if (candidates.empty()) return torch::zeros({0, 2, working_size, working_size}, feasibility.options());
  auto small = F::interpolate(feasibility.unsqueeze(0).unsqueeze(0),
                              F::InterpolateFuncOptions()
                                  .size(std::vector<int64_t>{working_size, working_size})
                                  .mode(torch::kArea))
                   .squeeze(0)
                   .squeeze(0);
  std::vector<torch::Tensor> rows;
  for (const auto& g : candidates) {
    const auto b = enclosing_aabb(g);
    RegionProposal scaled(b.x() * sx, b.y() * sy, b.width() * margin * sx, b.height() * margin * sy);
    rows.push_back(torch::stack({small, crop_mask(small, scaled)}));
  }
  return torch::stack(rows);
}

RefineNetImpl::RefineNetImpl(const RefineConfig& config) : config_(config) {
  config.validate();
  trunk = register_module("trunk", ResNet(2, config.trunk));
  const int c = config.trunk.stage_widths.back();
  norm = register_module("norm", NormAct1d(c));
  out = register_module("out", torch::nn::Linear(c, 5));
  torch::nn::init::normal_(out->weight, 0.0, 1e-3);
  torch::nn::init::zeros_(out->bias);
}

torch::Tensor RefineNetImpl::forward(const torch::Tensor& stack) {
  if (stack.size(0) == 0) return torch::zeros({0, 5}, stack.options());
  auto f = trunk(stack).back();
  f = F::adaptive_avg_pool2d(f, F::AdaptiveAvgPool2dFuncOptions(1)).flatten(1);
  return out(norm(f));
}

GraspCandidate apply_refinement(const GraspCandidate& g, const CorrectionFactors& f, double bin_width) {
  return GraspCandidate(g.x() + f.t_x * g.width(), g.y() + f.t_y * g.height(), g.width() * std::exp(f.t_w),
                        g.height() * std::exp(f.t_h), g.theta() + f.t_theta.value_or(0.0) * bin_width);
}

CorrectionFactors encode_refinement(const GraspCandidate& from, const GraspCandidate& to, double bin_width) {
  return {(to.x() - from.x()) / from.width(), (to.y() - from.y()) / from.height(),
          std::log(to.width() / from.width()), std::log(to.height() / from.height()),
          signed_angle_delta(to.theta(), from.theta()) / bin_width};
}

double mean_feasibility(const torch::Tensor& feasibility, const GraspCandidate& g, double shrink) {
  TORCH_CHECK(feasibility.dim() == 2, "feasibility map must be (H, W)");
  const auto map = feasibility.to(torch::kCPU, torch::kFloat).contiguous();
  const int h = int(map.size(0)), w = int(map.size(1));
  const float* p = map.data_ptr<float>();
  const GraspCandidate inner(g.x(), g.y(), g.width() * shrink, g.height() * shrink, g.theta());
  const auto box = enclosing_aabb(inner);
  const int c0 = std::max(0, int(std::floor(box.x1()))), c1 = std::min(w - 1, int(std::ceil(box.x2())));
  const int r0 = std::max(0, int(std::floor(box.y1()))), r1 = std::min(h - 1, int(std::ceil(box.y2())));
  double sum = 0.0;
  int n = 0;
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      if (!contains(inner, {c + 0.5, r + 0.5})) continue;
      sum += p[std::size_t(r) * w + c];
      ++n;
    }
  }
  if (n == 0) {
    // tiny or off-image rectangle: fall back to the nearest pixel to its center
    const int r = std::clamp(int(std::floor(g.y())), 0, h - 1), c = std::clamp(int(std::floor(g.x())), 0, w - 1);
    return p[std::size_t(r) * w + c];
  }
  return sum / n;
}

}  // namespace graspnet
