#pragma once

#include <string>
#include <utility>
#include <vector>

#include "anchorpose/geometry.hpp"

namespace anchorpose {

/// Kinematic tree over n_joints joints. Edges are (parent, child) pairs and
/// must form a tree rooted at root_index.
struct Skeleton {
  int n_joints = 0;
  std::vector<std::pair<int, int>> edges;
  int root_index = 0;
  std::vector<std::string> joint_names;

  /// Throws std::invalid_argument if the edges do not form a tree over
  /// n_joints joints rooted at root_index.
  void validate() const;

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

/// Sum of segment lengths over the skeleton edges.
double bone_sum(const std::vector<Point3D>& pose, const Skeleton& skeleton);

/// The default 15-joint pelvis-rooted skeleton used by the synthetic data
/// generator: pelvis, spine, head, left/right arm chains, left/right legs.
const Skeleton& default_skeleton();

}  // namespace anchorpose
