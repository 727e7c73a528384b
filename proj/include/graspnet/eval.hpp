#pragma once

// Jaccard grasp metric, dataset evaluation, prediction export and overlays.

#include <filesystem>
#include <string>
#include <vector>

#include "graspnet/dataset.hpp"
#include "graspnet/model.hpp"

namespace graspnet {

inline constexpr double kJaccardMaxAngle = 30.0;
inline constexpr double kJaccardMinIou = 0.25;

/// Correct iff some ground truth is within 30 degrees (strict) and overlaps
/// with rotated IoU strictly above 0.25.
bool jaccard_correct(const GraspCandidate& pred, const std::vector<GraspCandidate>& gts);

struct ImageRecord {
  std::string name;
  std::vector<ScoredGrasp> candidates;
  std::vector<bool> correct;
  bool top1_correct = false;
  double seconds = 0.0;
};

struct EvalReport {
  double grasp_accuracy = 0.0;       // fraction of images whose best candidate is correct
  double candidate_precision = 0.0;  // fraction of all emitted candidates that are correct
  double seg_iou = 0.0;              // mean over classes present in prediction or ground truth
  std::vector<double> class_iou;     // -1 for classes absent from both
  double images_per_sec = 0.0;
  std::vector<ImageRecord> per_image;

  std::string to_json() const;
};

struct EvalOptions {
  int num_classes = semantic::kNumClasses;
  int warmup = 1;  // untimed predictions before measuring throughput
};

EvalReport evaluate(Predictor& predictor, const std::vector<SceneSample>& samples, const EvalOptions& options = {});

/// Intersection over union of two label maps per class, accumulated into
/// `inter` / `uni` (sized num_classes).
void accumulate_class_iou(const Image8& pred, const Image8& gt, std::vector<long long>& inter,
                          std::vector<long long>& uni);

/// Lines "image_id cx cy w h theta_deg score", one per candidate.
void write_prediction_dump(const EvalReport& report, const std::filesystem::path& path);
std::string prediction_dump_lines(const std::string& image_id, const std::vector<ScoredGrasp>& candidates);

/// Rectangles with the plate edges (the h-long sides) in red, the opening
/// edges in blue, or green for candidates flagged incorrect. `correct` may be
/// empty (all drawn as correct).
Image8 render_overlay(const Image8& image, const std::vector<GraspCandidate>& candidates,
                      const std::vector<bool>& correct = {});
void save_overlay(const Image8& image, const std::vector<GraspCandidate>& candidates, const std::vector<bool>& correct,
                  const std::filesystem::path& path);

}  // namespace graspnet
