#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "anchorpose/anchors.hpp"
#include "anchorpose/camera.hpp"
#include "anchorpose/skeleton.hpp"

namespace anchorpose {

/// One synthetic frame: the camera it was rendered with, the ground-truth
/// people (metric camera-frame 3D poses, their exact pinhole projections,
/// tight boxes over the visible joints with a 5% margin, per-joint
/// visibility), and each person's root depth in meters.
struct SceneSample {
  int64_t image_id = 0;
  Camera camera;
  GroundTruthScene scene;
  std::vector<double> root_depth_m;

  int n_people() const { return scene.n_people(); }

  /// Checks the structural invariants: consistent array sizes, positive
  /// depths, 2D poses equal to the projection of the 3D poses, visible
  /// joints inside the frame, boxes equal to the tight visible-joint bound
  /// plus margin. Throws std::invalid_argument on violation.
  void validate(const Skeleton& skeleton) const;

  friend bool operator==(const SceneSample&, const SceneSample&) = default;
};

/// The camera scenes are generated with unless overridden: 256x160 frame,
/// fx = fy = 220, principal point at the center.
Camera default_camera();

struct GenerateOptions {
  int n_people_min = 1;
  int n_people_max = 6;
  double depth_min_m = 3.0;
  double depth_max_m = 45.0;
  double occlusion_rate = 0.05;
  Camera camera = default_camera();
};

/// Deterministic scene synthesis. People are placed at log-uniform depth
/// (many small far people, few large near ones), articulated by random
/// per-bone rotations within joint limits, and projected through the
/// pinhole camera. Joints outside the frame, covered by a nearer person's
/// box (probability min(1, 3*occlusion_rate)), or dropped at random
/// (probability occlusion_rate) are flagged invisible. People keeping
/// fewer than 3 visible joints or spanning under 2 pixels are discarded.
/// Only the default skeleton is supported.
SceneSample generate_scene(uint64_t seed, const GenerateOptions& opts,
                           const Skeleton& skeleton);

/// n_images scenes with image_id 0..n-1, each from an independent
/// deterministic per-image stream derived from the seed.
std::vector<SceneSample> generate_dataset(uint64_t seed, int n_images,
                                          const GenerateOptions& opts,
                                          const Skeleton& skeleton);

/// Random scale-and-crop augmentation: draws a scale from scale_range,
/// scales the 2D annotations about the origin, and (when random_crop is
/// set) shifts by a random offset so the fixed-size frame crops the scaled
/// content. The camera intrinsics are adjusted so the projection invariant
/// keeps holding; 3D poses are untouched. Joints leaving the frame become
/// invisible; people losing every visible joint are dropped; boxes are
/// rebuilt from the surviving visible joints.
SceneSample augment(const SceneSample& sample, uint64_t seed,
                    std::pair<double, double> scale_range, bool random_crop);

/// JSONL, one scene per line, schema_version field on every line. Numbers
/// survive a round trip exactly; malformed input reports its line number.
void save_dataset(const std::vector<SceneSample>& samples, const std::string& path);
std::vector<SceneSample> load_dataset(const std::string& path);

inline constexpr int kDatasetSchemaVersion = 1;

}  // namespace anchorpose
