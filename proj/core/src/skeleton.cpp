#include "anchorpose/skeleton.hpp"

#include <cmath>
#include <stdexcept>

namespace anchorpose {

void Skeleton::validate() const {
  if (n_joints < 1) throw std::invalid_argument("skeleton: n_joints must be >= 1");
  if (root_index < 0 || root_index >= n_joints)
    throw std::invalid_argument("skeleton: root_index out of range");
  if (static_cast<int>(edges.size()) != n_joints - 1)
    throw std::invalid_argument("skeleton: a tree over n_joints joints needs n_joints-1 edges");
  std::vector<int> parent(n_joints, -2);
  parent[root_index] = -1;
  // Edges may appear in any order; peel them until every joint has a parent.
  std::vector<bool> used(edges.size(), false);
  for (int round = 0; round < n_joints; ++round) {
    bool progress = false;
    for (size_t e = 0; e < edges.size(); ++e) {
      if (used[e]) continue;
      const auto [p, c] = edges[e];
      if (p < 0 || p >= n_joints || c < 0 || c >= n_joints)
        throw std::invalid_argument("skeleton: edge joint index out of range");
      if (parent[p] != -2 && parent[c] == -2) {
        parent[c] = p;
        used[e] = true;
        progress = true;
      }
    }
    if (!progress) break;
  }
  for (int k = 0; k < n_joints; ++k)
    if (parent[k] == -2)
      throw std::invalid_argument("skeleton: edges do not form a tree rooted at root_index");
}

double bone_sum(const std::vector<Point3D>& pose, const Skeleton& skeleton) {
  double total = 0.0;
  for (const auto& [p, c] : skeleton.edges) {
    const double dx = pose[c].x - pose[p].x;
    const double dy = pose[c].y - pose[p].y;
    const double dz = pose[c].z - pose[p].z;
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return total;
}

const Skeleton& default_skeleton() {
  static const Skeleton s = [] {
    Skeleton sk;
    sk.n_joints = 15;
    sk.root_index = 0;
    sk.joint_names = {"pelvis",     "spine",      "head",       "l_shoulder", "l_elbow",
                      "l_wrist",    "r_shoulder", "r_elbow",    "r_wrist",    "l_hip",
                      "l_knee",     "l_ankle",    "r_hip",      "r_knee",     "r_ankle"};
    sk.edges = {{0, 1}, {1, 2},  {1, 3},  {3, 4},   {4, 5},   {1, 6},   {6, 7},
                {7, 8}, {0, 9},  {9, 10}, {10, 11}, {0, 12},  {12, 13}, {13, 14}};
    sk.validate();
    return sk;
  }();
  return s;
}

}  // namespace anchorpose
