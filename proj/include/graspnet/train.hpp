#pragma once

// Training configuration, the training loop and versioned checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "graspnet/dataset.hpp"
#include "graspnet/model.hpp"

namespace graspnet {

/// Flat key=value configuration. Every key has a default; '#' starts a
/// comment. See TrainConfig::keys() for the accepted names.
struct TrainConfig {
  int epochs = 150;
  int batch_size = 4;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double grad_clip = 10.0;  // global L2 norm, <= 0 disables
  int warmup_steps = 20;
  std::uint64_t seed = 1;
  std::string preset = "tiny";
  bool dihedral_augment = true;
  bool noise_augment = true;
  double noise_prob = 0.5;
  NoiseConfig noise;
  int checkpoint_interval = 0;  // epochs between intermediate checkpoints, 0 = final only
  LossWeights weights;
  int head_samples = 64;
  double score_threshold = 0.5;
  int frozen_stages = -1;  // -1 keeps the preset's value

  static TrainConfig desk_defaults() { return {}; }
  static TrainConfig full_scale_defaults();
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();

  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  ModelConfig model_config() const;
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double total = 0, rpn = 0, box = 0, rot = 0, seg = 0, refine = 0;
  double learning_rate = 0;
};

struct TrainResult {
  GraspNet model{nullptr};
  std::vector<EpochStats> history;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Mini-batch SGD with momentum and cosine decay. When `out_dir` is non-empty,
/// writes model.ckpt, loss_curve.csv and intermediate checkpoints there.
/// A non-finite loss throws std::runtime_error naming the epoch and batch.
TrainResult train(const TrainConfig& config, const std::vector<SceneSample>& data,
                  const std::filesystem::path& out_dir = {}, const EpochCallback& on_epoch = {});

/// Applies the augmentation used for sample `index` in `epoch`.
SceneSample augment_sample(const SceneSample& sample, const TrainConfig& config, int epoch, std::size_t index);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, GraspNet& model, const TrainConfig& config);
struct LoadedCheckpoint {
  GraspNet model{nullptr};
  TrainConfig config;
};
/// Throws std::runtime_error on bad magic, version mismatch, unknown or
/// missing tensors.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace graspnet
