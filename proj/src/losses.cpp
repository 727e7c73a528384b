#include "graspnet/losses.hpp"

#include <stdexcept>

namespace graspnet {

namespace F = torch::nn::functional;

void LossWeights::validate() const {
  if (!(grasp >= 0.0) || !(seg >= 0.0) || !(refine >= 0.0)) throw std::invalid_argument("loss weights must be >= 0");
}

namespace {

// zero that keeps the graph connected to `like`
torch::Tensor zero_like_graph(const torch::Tensor& like) { return like.sum() * 0.0; }

}  // namespace

torch::Tensor smooth_l1_tensor(const torch::Tensor& x) {
  auto ax = x.abs();
  return torch::where(ax < 1.0, 0.5 * x * x, ax - 0.5);
}

torch::Tensor factors_tensor(const std::vector<CorrectionFactors>& f, bool with_theta,
                             const torch::TensorOptions& opts) {
  const int k = with_theta ? 5 : 4;
  std::vector<double> v;
  v.reserve(f.size() * std::size_t(k));
  for (const auto& t : f) {
    v.insert(v.end(), {t.t_x, t.t_y, t.t_w, t.t_h});
    if (with_theta) v.push_back(t.t_theta.value_or(0.0));
  }
  return torch::tensor(v, torch::kDouble).view({std::int64_t(f.size()), k}).to(opts);
}

torch::Tensor loss_rpn(const torch::Tensor& objectness, const torch::Tensor& deltas, const std::vector<int>& labels,
                       const std::vector<CorrectionFactors>& targets) {
  TORCH_CHECK(objectness.size(0) == std::int64_t(labels.size()), "one label per anchor expected");
  std::vector<std::int64_t> sampled, positive;
  std::vector<double> y;
  std::vector<CorrectionFactors> pos_targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    sampled.push_back(std::int64_t(i));
    y.push_back(labels[i] > 0 ? 1.0 : 0.0);
    if (labels[i] > 0) {
      positive.push_back(std::int64_t(i));
      pos_targets.push_back(targets[i]);
    }
  }
  auto loss = zero_like_graph(objectness) + zero_like_graph(deltas);
  if (!sampled.empty()) {
    auto idx = torch::tensor(sampled, torch::kLong);
    auto logits = objectness.index_select(0, idx);
    auto tgt = torch::tensor(y, torch::kDouble).to(logits.options());
    loss = loss + F::binary_cross_entropy_with_logits(logits, tgt);
  }
  if (!positive.empty()) {
    auto d = deltas.index_select(0, torch::tensor(positive, torch::kLong));
    auto t = factors_tensor(pos_targets, false, d.options());
    loss = loss + smooth_l1_tensor(d - t).sum(1).mean();
  }
  return loss;
}

torch::Tensor loss_rot(const torch::Tensor& logits, const std::vector<int>& classes) {
  TORCH_CHECK(logits.size(0) == std::int64_t(classes.size()), "one class per row expected");
  if (classes.empty()) return zero_like_graph(logits);
  std::vector<std::int64_t> c(classes.begin(), classes.end());
  auto tgt = torch::tensor(c, torch::kLong).to(logits.device());
  return F::nll_loss(torch::log_softmax(logits, 1), tgt);
}

torch::Tensor loss_box(const torch::Tensor& corrections, const std::vector<int>& classes,
                       const std::vector<CorrectionFactors>& targets, int null_class) {
  TORCH_CHECK(corrections.size(0) == std::int64_t(classes.size()), "one class per row expected");
  std::vector<std::int64_t> rows, cols;
  std::vector<CorrectionFactors> tgt;
  for (std::size_t r = 0; r < classes.size(); ++r) {
    if (classes[r] == null_class) continue;
    rows.push_back(std::int64_t(r));
    for (int k = 0; k < 4; ++k) cols.push_back(4 * std::int64_t(classes[r]) + k);
    tgt.push_back(targets[r]);
  }
  if (rows.empty()) return zero_like_graph(corrections);
  auto sel = corrections.index_select(0, torch::tensor(rows, torch::kLong));
  auto col = torch::tensor(cols, torch::kLong).view({std::int64_t(rows.size()), 4});
  auto pred = sel.gather(1, col);
  return smooth_l1_tensor(pred - factors_tensor(tgt, false, pred.options())).sum(1).mean();
}

torch::Tensor hard_negative_weights(const torch::Tensor& nll) {
  TORCH_CHECK(nll.dim() == 2, "expected an (H, W) map");
  const auto n = nll.numel();
  const auto k = n / 4;
  auto flat = nll.detach().reshape({-1});
  auto order = std::get<1>(torch::sort(flat, /*stable=*/true, /*dim=*/0, /*descending=*/true));
  auto w = torch::zeros({n}, nll.options().requires_grad(false));
  if (k > 0) w.index_fill_(0, order.narrow(0, 0, k), 4.0 / double(n));
  return w.view_as(nll);
}

torch::Tensor loss_seg(const torch::Tensor& log_probs, const torch::Tensor& target) {
  TORCH_CHECK(log_probs.dim() == 4 && target.dim() == 3, "expected (N, S, H, W) log-probabilities and (N, H, W) labels");
  auto nll = -log_probs.gather(1, target.to(torch::kLong).unsqueeze(1)).squeeze(1);
  std::vector<torch::Tensor> per_image;
  for (std::int64_t b = 0; b < nll.size(0); ++b) {
    per_image.push_back((hard_negative_weights(nll[b]) * nll[b]).sum());
  }
  if (per_image.empty()) return zero_like_graph(log_probs);
  return torch::stack(per_image).mean();
}

torch::Tensor loss_refine(const torch::Tensor& factors, const std::vector<CorrectionFactors>& targets,
                          const std::vector<bool>& matched) {
  TORCH_CHECK(factors.size(0) == std::int64_t(targets.size()) && targets.size() == matched.size(),
              "refinement rows, targets and match flags must align");
  std::vector<std::int64_t> rows;
  std::vector<CorrectionFactors> tgt;
  for (std::size_t i = 0; i < matched.size(); ++i) {
    if (!matched[i]) continue;
    rows.push_back(std::int64_t(i));
    tgt.push_back(targets[i]);
  }
  if (rows.empty()) return zero_like_graph(factors);
  auto pred = factors.index_select(0, torch::tensor(rows, torch::kLong));
  return smooth_l1_tensor(pred - factors_tensor(tgt, true, pred.options())).sum(1).mean();
}

torch::Tensor total_loss(const LossParts& parts, const LossWeights& weights) {
  return weights.grasp * (parts.rpn + parts.box + parts.rot) + weights.seg * parts.seg +
         weights.refine * parts.refine;
}

}  // namespace graspnet
