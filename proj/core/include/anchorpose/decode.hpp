#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "anchorpose/anchors.hpp"
#include "anchorpose/camera.hpp"
#include "anchorpose/tensors.hpp"

namespace anchorpose {

/// One decoded person hypothesis: confidence, pixel-space box and 2D pose,
/// normalized root-relative 3D pose (root pinned to the origin), and the
/// (i, j, a) anchor it came from ({-1,-1,-1} when loaded from a file).
struct Detection {
  double score = 0.0;
  Box2D box;
  std::vector<Point2D> pose2d;
  std::vector<Point3D> pose3d;
  std::array<int, 3> anchor_index{-1, -1, -1};

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Emits one Detection per anchor whose sigmoid score exceeds the threshold:
/// the box from the offset decode, the 2D pose mapped back to pixels, the 3D
/// pose re-centered so the root joint sits exactly at the origin. Sorted by
/// descending score (ties by anchor index). threshold must be in [0, 1).
std::vector<Detection> decode(const PredictionTensors& pred, const AnchorGrid& grid,
                              double score_threshold, int root_index = 0);

/// Greedy non-maximum suppression on boxes: repeatedly keep the best-scoring
/// remaining detection and drop everything overlapping it with IoU strictly
/// above the threshold. Output is sorted by descending score; ties resolve
/// by anchor index so the result is deterministic.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

/// Result of the camera-frame root translation solve.
struct RootRecovery {
  Point3D translation;
  double residual = 0.0;  // final sum of squared reprojection errors, pixels^2
  bool converged = false;
  int iterations = 0;
};

/// Finds the translation T minimizing the reprojection error
/// sum_k |project(pose3d[k] + T) - pose2d[k]|^2 for a pinhole camera:
/// a linear least-squares initialization (exact on noise-free input)
/// followed by Gauss-Newton with step halving to keep all joints in front
/// of the camera. The caller passes only the visible joints, in metric
/// units; fewer than 2 joints or a degenerate configuration throws
/// NumericError. Non-convergence returns the best iterate with
/// converged = false.
RootRecovery recover_root_translation(const std::vector<Point3D>& pose3d_metric,
                                      const std::vector<Point2D>& pose2d,
                                      const Camera& camera, int max_iters = 50);

/// One serialized detection line: the detection plus the image it belongs to.
struct DetectionRecord {
  int64_t image_id = 0;
  Detection detection;

  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

/// JSONL, one object per line with keys box, image_id, pose2d, pose3d,
/// score. Loading reports malformed lines with their line number.
void save_detections(const std::vector<DetectionRecord>& records, const std::string& path);
std::vector<DetectionRecord> load_detections(const std::string& path);

}  // namespace anchorpose
