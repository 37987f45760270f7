#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "anchorpose/decode.hpp"
#include "anchorpose/skeleton.hpp"

namespace anchorpose {

/// Detection average precision. When the dataset holds no ground-truth
/// people at all, ap is 0 and no_ground_truth is set.
struct ApResult {
  double ap = 0.0;
  bool no_ground_truth = false;
};

/// PASCAL-VOC style AP: detections across all images are ranked by
/// descending score; each is a true positive iff its IoU with some
/// still-unmatched ground truth of its image is >= iou_threshold (the best
/// such ground truth is consumed); AP is the area under the all-point
/// interpolated precision-recall curve.
ApResult average_precision(const std::vector<std::vector<Detection>>& dets_per_image,
                           const std::vector<std::vector<Box2D>>& gts_per_image,
                           double iou_threshold = 0.5);

/// Detection <-> ground-truth assignment for pose metrics: greedily pair the
/// highest-IoU remaining (detection, ground truth) couple while the IoU
/// exceeds min_iou; each side is used at most once. Unpaired ground truths
/// are misses.
struct PoseEvalPairing {
  std::vector<std::pair<int, int>> pairs;  // (detection index, ground-truth index)
  std::vector<int> missed_gts;
  std::vector<int> unmatched_dets;
};
PoseEvalPairing match_for_pose_eval(const std::vector<Detection>& dets,
                                    const std::vector<Box2D>& gt_boxes,
                                    double min_iou = 0.1);

/// One camera-distance band of the 3DPCK breakdown. max_depth_m is +inf for
/// the last band; a band that saw no people reports pck3d = 0 and n_gts = 0.
struct DistanceBin {
  double min_depth_m = 0.0;
  double max_depth_m = 0.0;
  double pck3d = 0.0;
  int64_t n_gts = 0;
};

struct EvalCounts {
  int64_t detections = 0;
  int64_t ground_truths = 0;
  int64_t matched = 0;
  int64_t misses = 0;
};

struct EvalReport {
  double ap = 0.0;
  bool ap_no_ground_truth = false;
  std::optional<double> mpjpe_mm;  // absent when nothing was matched
  double pck3d = 0.0;              // percentage, miss penalty included
  std::vector<double> pck3d_per_joint;
  std::vector<DistanceBin> pck3d_per_distance_bin;
  EvalCounts counts;
};

struct EvalOptions {
  double ap_iou_threshold = 0.5;
  double pairing_min_iou = 0.1;
  double pck_threshold_mm = 150.0;
};

/// Full evaluation over a dataset. scenes[i] provides the ground truth for
/// dets_per_image[i]; 3D poses are camera-frame metric (meters). Predicted
/// poses are normalized root-relative: before comparison each is root-
/// aligned and rescaled by its paired ground truth's total bone length.
/// A joint is correct when its error is under pck_threshold_mm; every joint
/// of a missed person counts incorrect; distance bands follow the ground
/// truth root depth (<10, 10-20, 20-30, 30-40, >40 meters).
EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                    const std::vector<GroundTruthScene>& scenes, const Skeleton& skeleton,
                    const EvalOptions& opts = {});

/// Report serialization: JSON (machine-readable, stable key order) and an
/// aligned plain-text rendering with the distance-band and per-joint tables.
std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);
std::string report_to_text(const EvalReport& report, const Skeleton& skeleton);

}  // namespace anchorpose
