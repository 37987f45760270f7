#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "anchorpose/anchors.hpp"

namespace anchorpose {

/// Dense per-anchor prediction maps, stored flat in row-major order:
/// cls_logits [H][W][NA] (pre-sigmoid scores), box_offsets [H][W][NA][4]
/// (tx, ty, tw, th), pose2d [H][W][NA][NK][2] in anchor coordinates,
/// pose3d [H][W][NA][NK][3] in normalized root-relative coordinates.
struct PredictionTensors {
  int height = 0;
  int width = 0;
  int n_anchors = 0;
  int n_joints = 0;

  std::vector<double> cls_logits;
  std::vector<double> box_offsets;
  std::vector<double> pose2d;
  std::vector<double> pose3d;

  static PredictionTensors zeros(int height, int width, int n_anchors, int n_joints);
  static PredictionTensors zeros(const AnchorGrid& grid, int n_joints);

  int64_t cells() const { return static_cast<int64_t>(height) * width * n_anchors; }

  int64_t cls_index(int i, int j, int a) const {
    return (static_cast<int64_t>(i) * width + j) * n_anchors + a;
  }
  int64_t box_index(int i, int j, int a, int c) const { return cls_index(i, j, a) * 4 + c; }
  int64_t pose2d_index(int i, int j, int a, int k, int c) const {
    return (cls_index(i, j, a) * n_joints + k) * 2 + c;
  }
  int64_t pose3d_index(int i, int j, int a, int k, int c) const {
    return (cls_index(i, j, a) * n_joints + k) * 3 + c;
  }

  std::span<const double, 4> offsets_at(int i, int j, int a) const {
    return std::span<const double, 4>(box_offsets.data() + box_index(i, j, a, 0), 4);
  }
  Point2D pose2d_at(int i, int j, int a, int k) const {
    const int64_t base = pose2d_index(i, j, a, k, 0);
    return {pose2d[base], pose2d[base + 1]};
  }
  Point3D pose3d_at(int i, int j, int a, int k) const {
    const int64_t base = pose3d_index(i, j, a, k, 0);
    return {pose3d[base], pose3d[base + 1], pose3d[base + 2]};
  }

  /// Throws std::invalid_argument on a shape mismatch with the grid or the
  /// expected joint count, NumericError if any entry is non-finite.
  void validate(const AnchorGrid& grid, int expected_joints) const;
};

}  // namespace anchorpose
