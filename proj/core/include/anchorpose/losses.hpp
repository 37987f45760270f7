#pragma once

#include <cstdint>
#include <vector>

#include "anchorpose/anchors.hpp"
#include "anchorpose/skeleton.hpp"
#include "anchorpose/tensors.hpp"

namespace anchorpose {

enum class Task { kCls = 0, kLoc = 1, kPose2d = 2, kPose3d = 3 };

/// Range the trainer keeps each log-weight in (see train()): the
/// stationary point of exp(s)*L - s sits at s = -ln(L), which runs away
/// when a branch's loss collapses toward zero — attainable with a direct
/// parameterization — and an unbounded effective weight multiplies the
/// prediction gradients past SGD's stability limit. Each task/per-anchor
/// factor stays within [exp(-3), exp(3)], their product within exp(+-6).
inline constexpr double kWeightLogClamp = 3.0;

/// Log-domain loss weights: every weight enters the objective as
/// lambda = exp(s), so positivity needs no constraint. Storage is one flat
/// vector so an optimizer can treat the whole set as a parameter block:
/// [s_task(4) | s_anchor_cls(NA) | s_anchor_loc(NA) |
///  s_anchor_joint_2d(NA*NK) | s_anchor_joint_3d(NA*NK)].
class LossWeights {
 public:
  LossWeights() = default;
  LossWeights(int n_anchors, int n_joints)
      : na_(n_anchors),
        nk_(n_joints),
        s_(4 + 2 * static_cast<size_t>(n_anchors) * (1 + n_joints), 0.0) {}

  int n_anchors() const { return na_; }
  int n_joints() const { return nk_; }

  double& s_task(Task t) { return s_[static_cast<int>(t)]; }
  double s_task(Task t) const { return s_[static_cast<int>(t)]; }
  double& s_anchor_cls(int a) { return s_[4 + a]; }
  double s_anchor_cls(int a) const { return s_[4 + a]; }
  double& s_anchor_loc(int a) { return s_[4 + na_ + a]; }
  double s_anchor_loc(int a) const { return s_[4 + na_ + a]; }
  double& s_joint2d(int a, int k) { return s_[4 + 2 * na_ + a * nk_ + k]; }
  double s_joint2d(int a, int k) const { return s_[4 + 2 * na_ + a * nk_ + k]; }
  double& s_joint3d(int a, int k) { return s_[4 + 2 * na_ + (na_ + a) * nk_ + k]; }
  double s_joint3d(int a, int k) const { return s_[4 + 2 * na_ + (na_ + a) * nk_ + k]; }

  /// Flat parameter storage, in the layout documented above.
  std::vector<double>& raw() { return s_; }
  const std::vector<double>& raw() const { return s_; }
  int64_t size() const { return static_cast<int64_t>(s_.size()); }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;

 private:
  int na_ = 0;
  int nk_ = 0;
  std::vector<double> s_;
};

/// Scalar summary of one loss evaluation. cls/loc/pose2d/pose3d are the
/// complete per-task terms (weighted sum plus regularizer) and always add up
/// to total. raw_* are the same sums with every lambda at 1 and no
/// regularizer; reg_* are the regularizer values alone.
struct LossBreakdown {
  double cls = 0.0;
  double loc = 0.0;
  double pose2d = 0.0;
  double pose3d = 0.0;
  double total = 0.0;

  double raw_cls = 0.0;
  double raw_loc = 0.0;
  double raw_pose2d = 0.0;
  double raw_pose3d = 0.0;

  double reg_cls = 0.0;
  double reg_loc = 0.0;
  double reg_pose2d = 0.0;
  double reg_pose3d = 0.0;

  int n_positive = 0;
};

/// d(total)/d(every prediction entry) in PredictionTensors layout, plus
/// d(total)/d(every s) aligned with LossWeights::raw(), plus the breakdown
/// and the readout labels used for the classification term.
struct LossGradients {
  std::vector<double> d_cls_logits;
  std::vector<double> d_box_offsets;
  std::vector<double> d_pose2d;
  std::vector<double> d_pose3d;
  std::vector<double> d_weights;
  std::vector<uint8_t> labels;
  LossBreakdown breakdown;
};

/// Box-overlap loss per anchor: (1 - O)^2 at positive anchors where O is the
/// IoU between the decoded box and the matched ground truth; 0 elsewhere.
/// The overlap map is returned alongside for reuse by diagnostics.
struct LocLossMap {
  std::vector<double> loss;     // [H][W][NA]
  std::vector<double> overlap;  // [H][W][NA], 0 at negatives
};
LocLossMap loc_loss_map(const PredictionTensors& pred, const MatchResult& m,
                        const AnchorGrid& grid);

/// Per-joint 2D loss: (1 - O2D)^2 at positive anchors and visible joints,
/// where O2D is the unit-square IoU between predicted and target joints in
/// anchor coordinates; 0 elsewhere. mean_overlap averages the per-joint
/// overlaps over the person's visible joints (0 when none are visible) and
/// feeds the readout labels.
struct Pose2dLossMap {
  std::vector<double> loss;           // [H][W][NA][NK]
  std::vector<double> joint_overlap;  // [H][W][NA][NK], 0 at negatives/invisible
  std::vector<double> mean_overlap;   // [H][W][NA], 0 at negatives
};
Pose2dLossMap pose2d_loss_map(const PredictionTensors& pred, const MatchResult& m,
                              const AnchorGrid& grid);

/// Per-joint squared Euclidean distance between the predicted normalized
/// root-relative pose and the matched target normalized the same way; 0 at
/// negative anchors and invisible joints.
std::vector<double> pose3d_loss_map(const PredictionTensors& pred, const MatchResult& m,
                                    const Skeleton& skeleton);

/// Root-relative, bone-sum-normalized copy of the pose: the root joint moves
/// to the origin and the sum of bone lengths over the skeleton edges becomes
/// 1. Invariant to translation and uniform scaling of the input. Throws
/// NumericError when all joints coincide (zero bone sum).
std::vector<Point3D> normalize_pose3d(const std::vector<Point3D>& pose,
                                      const Skeleton& skeleton);

/// Pose-aware readout labels: label = 1 iff pono * mean_overlap > 0.5. The
/// labels are recomputed from the current predictions but treated as
/// constants by the gradients (no gradient flows through label changes).
std::vector<uint8_t> readout_labels(const MatchResult& m,
                                    const std::vector<double>& mean_overlap);

/// Numerically stable binary cross-entropy from logits per anchor, defined
/// for every finite logit.
std::vector<double> cls_loss_map(const PredictionTensors& pred,
                                 const std::vector<uint8_t>& labels);

/// The automatically weighted total objective:
///   cls:    exp(s_cls)/(H W NA) * sum_a exp(s^a_cls) sum_ij L_cls
///           - s_cls - (1/NA) sum_a s^a_cls
///   loc:    exp(s_loc)/N+ * sum_a exp(s^a_loc) sum_ij L_loc
///           - s_loc - (1/NA) sum_a s^a_loc
///   2D/3D:  exp(s)/(NK N+) * sum_ijak exp(s^{a,k}) L
///           - s - (1/(NK NA)) sum_ak s^{a,k}
/// and total = cls + loc + pose2d + pose3d. When N+ = 0 the weighted sums
/// are 0 and only the regularizers remain. The classification sum runs over
/// every anchor; the regression sums are nonzero only at positives.
///
/// frozen_labels, when given, replaces the pose-aware label computation
/// (used by finite-difference checks, where label flips would introduce
/// discontinuities).
LossBreakdown total_loss(const PredictionTensors& pred, const MatchResult& m,
                         const AnchorGrid& grid, const Skeleton& skeleton,
                         const LossWeights& weights,
                         const std::vector<uint8_t>* frozen_labels = nullptr);

/// total_loss plus hand-derived analytic gradients with respect to every
/// prediction entry and every s. Readout labels are constants with respect
/// to differentiation.
LossGradients gradients(const PredictionTensors& pred, const MatchResult& m,
                        const AnchorGrid& grid, const Skeleton& skeleton,
                        const LossWeights& weights,
                        const std::vector<uint8_t>* frozen_labels = nullptr);

}  // namespace anchorpose
