#pragma once

// Scene samples, the on-disk dataset layout, feasibility relabeling and the
// synthetic tabletop generator.
//
// Layout under root/split/:
//   rgb/NAME.png      8-bit RGB image
//   mask/NAME.png     8-bit semantic class ids
//   grasps/NAME.txt   one grasp per line: cx cy w h theta_deg instance_id
//   inst/NAME.png     optional 8-bit instance ids (0 = background)
//   meta/NAME.txt     optional per-instance lines: id class full_area visible_area supports

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "graspnet/geometry.hpp"
#include "graspnet/image.hpp"

namespace graspnet {

namespace semantic {
inline constexpr int kBackground = 0;
inline constexpr int kInfeasible = 1;
inline constexpr int kBar = 2;
inline constexpr int kEllipse = 3;
inline constexpr int kBox = 4;
inline constexpr int kNumClasses = 5;
}  // namespace semantic

struct LabeledGrasp {
  GraspCandidate grasp;
  int instance_id = 0;
};

struct InstanceInfo {
  int id = 0;
  int class_id = 0;
  int full_area = 0;
  int visible_area = 0;
  std::vector<int> supports;
  bool feasible = true;

  double occlusion() const { return full_area > 0 ? 1.0 - double(visible_area) / full_area : 0.0; }
};

struct SceneSample {
  std::string name;
  Image8 image;
  std::vector<LabeledGrasp> grasps;
  Image8 semantic_mask;
  Image8 instance_mask;  // empty when the dataset does not provide one
  std::vector<InstanceInfo> instances;

  /// Throws std::runtime_error describing the first violated invariant.
  void validate(int num_classes = semantic::kNumClasses) const;
  std::vector<GraspCandidate> grasp_list() const;
  const InstanceInfo* find_instance(int id) const;
};

struct FeasibilityRules {
  double max_occlusion = 0.2;
  bool supporting_is_infeasible = true;
};

/// Marks occluded and supporting instances infeasible, drops their grasps
/// and remaps their mask pixels to the infeasible class.
SceneSample relabel_feasibility(const SceneSample& sample, const FeasibilityRules& rules = {});

std::vector<SceneSample> load_dataset(const std::filesystem::path& root, const std::string& split,
                                      int num_classes = semantic::kNumClasses);
void write_dataset(const std::vector<SceneSample>& samples, const std::filesystem::path& root,
                   const std::string& split);

std::vector<LabeledGrasp> parse_grasp_lines(const std::filesystem::path& path);
/// Cornell-style corner file: four "x y" lines per rectangle.
std::vector<GraspCandidate> parse_corner_rects(const std::filesystem::path& path);
GraspCandidate grasp_from_corners(const std::array<Point2, 4>& pts);

Image8 read_png(const std::filesystem::path& path, int channels);
void write_png(const Image8& image, const std::filesystem::path& path);

/// Dihedral transform k in [0, 8): bit 0 flips x, bit 1 flips y, bit 2
/// transposes (applied last). Grasps and masks follow the image.
SceneSample dihedral_transform(const SceneSample& sample, int k);

struct SyntheticSceneConfig {
  int height = 96;
  int width = 96;
  int min_objects = 1;
  int max_objects = 3;
  bool bars = true;
  bool ellipses = true;
  bool boxes = true;
  double occlusion_prob = 0.2;
  double support_prob = 0.5;
  std::vector<std::array<std::uint8_t, 3>> palette = {
      {200, 40, 40}, {40, 150, 60}, {40, 70, 200}, {220, 170, 30}, {150, 50, 170}, {30, 160, 170}};
  std::vector<std::array<std::uint8_t, 3>> box_palette = {{160, 110, 60}, {130, 90, 50}, {185, 140, 90}};
  std::uint64_t seed = 0;
  FeasibilityRules rules;
};

/// Scene before relabeling: every instance carries its grasp.
SceneSample generate_raw_scene(const SyntheticSceneConfig& config, std::uint64_t seed);
SceneSample generate_synthetic_scene(const SyntheticSceneConfig& config, std::uint64_t seed);
/// `count` scenes with seeds derived from config.seed; names scene_00000...
std::vector<SceneSample> generate_synthetic_split(const SyntheticSceneConfig& config, int count);

std::uint64_t sample_hash(const SceneSample& sample);

}  // namespace graspnet
