#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "anchorpose/geometry.hpp"

namespace anchorpose {

/// The prior (width, height) sizes shared by every grid cell, sorted by
/// area ascending.
struct AnchorSet {
  std::vector<std::pair<double, double>> priors;

  int size() const { return static_cast<int>(priors.size()); }

  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;
};

/// Serialized form: {"priors": [[w, h], ...]}.
std::string anchor_set_to_json(const AnchorSet& set);
AnchorSet anchor_set_from_json(const std::string& text);
void save_anchor_set(const AnchorSet& set, const std::string& path);
AnchorSet load_anchor_set(const std::string& path);

/// H x W lattice of prior boxes with a fixed pixel stride. Cell (i, j),
/// prior a is centered at ((j+0.5)*stride, (i+0.5)*stride).
struct AnchorGrid {
  int height = 0;
  int width = 0;
  double stride = 8.0;
  AnchorSet priors;

  int n_anchors() const { return priors.size(); }
  int64_t cell_count() const { return static_cast<int64_t>(height) * width * n_anchors(); }
};

/// The anchor box at cell (i, j), prior a. Throws std::out_of_range on bad
/// indices.
AnchorBox anchor_at(const AnchorGrid& grid, int i, int j, int a);

/// One annotated frame as seen by the matcher: per-person boxes, 2D poses in
/// pixels, metric 3D poses, per-joint visibility.
struct GroundTruthScene {
  std::vector<Box2D> boxes;
  std::vector<std::vector<Point2D>> poses2d;
  std::vector<std::vector<Point3D>> poses3d;
  std::vector<std::vector<uint8_t>> visibility;

  int n_people() const { return static_cast<int>(boxes.size()); }

  /// Throws std::invalid_argument when the per-person lists disagree.
  void validate() const;

  friend bool operator==(const GroundTruthScene&, const GroundTruthScene&) = default;
};

/// Result of assigning every anchor to its best-overlap ground truth.
///
/// pono (per-object normalised overlap) is the anchor's IoU with its matched
/// ground truth divided by the best IoU achieved by any anchor matched to
/// that same ground truth, so every matched person owns at least one anchor
/// with pono exactly 1. Positive anchors are those with pono > 0.5.
struct MatchResult {
  int height = 0;
  int width = 0;
  int n_anchors = 0;

  std::vector<int32_t> match_index;  // -1 where unmatched
  std::vector<double> pono;
  std::vector<uint8_t> positive_mask;
  int n_positive = 0;
  int n_unmatched_gts = 0;  // ground truths no anchor matched

  // Matched per-person payload, indexable through match_index.
  std::vector<Box2D> boxes;
  std::vector<std::vector<Point2D>> poses2d;
  std::vector<std::vector<Point3D>> poses3d;
  std::vector<std::vector<uint8_t>> visibility;

  int64_t flat(int i, int j, int a) const {
    return (static_cast<int64_t>(i) * width + j) * n_anchors + a;
  }
  bool is_positive(int i, int j, int a) const { return positive_mask[flat(i, j, a)] != 0; }
  int32_t matched_gt(int i, int j, int a) const { return match_index[flat(i, j, a)]; }
  const Box2D& matched_box(int i, int j, int a) const { return boxes[matched_gt(i, j, a)]; }
  const std::vector<Point2D>& matched_pose2d(int i, int j, int a) const {
    return poses2d[matched_gt(i, j, a)];
  }
  const std::vector<Point3D>& matched_pose3d(int i, int j, int a) const {
    return poses3d[matched_gt(i, j, a)];
  }
};

/// Assigns each anchor to the ground truth with maximal IoU (ties broken by
/// the lowest ground-truth index, zero-overlap anchors stay unmatched) and
/// derives the pono map and positive mask. An empty scene yields an
/// all-negative result.
MatchResult match(const AnchorGrid& grid, const GroundTruthScene& scene);

/// k-means clustering of box sizes under the 1 - IoU distance between
/// co-centered (w, h) boxes, with k-means++ style seeding. Deterministic
/// given the seed; the returned priors are sorted by area ascending.
///
/// Throws std::invalid_argument for an empty box list or when n_anchors
/// exceeds the number of distinct sizes.
AnchorSet cluster_anchors(const std::vector<Box2D>& boxes, int n_anchors,
                          int max_iters = 100, uint64_t seed = 0);

/// Mean over boxes of the best IoU against any prior in the set, the
/// clustering objective.
double mean_best_iou(const std::vector<Box2D>& boxes, const AnchorSet& set);

}  // namespace anchorpose
