#include "anchorpose/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "anchorpose/errors.hpp"

namespace anchorpose {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Stable BCE from a logit: max(z, 0) - z*y + log(1 + exp(-|z|)).
double bce_from_logit(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

void check_shapes(const PredictionTensors& pred, const MatchResult& m, const AnchorGrid& grid) {
  if (pred.height != grid.height || pred.width != grid.width ||
      pred.n_anchors != grid.n_anchors())
    throw std::invalid_argument("losses: prediction shape disagrees with the grid");
  if (m.height != grid.height || m.width != grid.width || m.n_anchors != grid.n_anchors())
    throw std::invalid_argument("losses: match result shape disagrees with the grid");
  const auto cells = static_cast<size_t>(pred.cells());
  if (pred.cls_logits.size() != cells || pred.box_offsets.size() != cells * 4 ||
      pred.pose2d.size() != cells * 2 * pred.n_joints ||
      pred.pose3d.size() != cells * 3 * pred.n_joints)
    throw std::invalid_argument("losses: prediction tensor sizes disagree with their shape");
}

void check_joints(const MatchResult& m, int gt, int n_joints) {
  if (static_cast<int>(m.poses2d[gt].size()) != n_joints)
    throw std::invalid_argument("losses: ground-truth joint count disagrees with predictions");
}

}  // namespace

PredictionTensors PredictionTensors::zeros(int height, int width, int n_anchors, int n_joints) {
  PredictionTensors p;
  p.height = height;
  p.width = width;
  p.n_anchors = n_anchors;
  p.n_joints = n_joints;
  const auto cells = static_cast<size_t>(p.cells());
  p.cls_logits.assign(cells, 0.0);
  p.box_offsets.assign(cells * 4, 0.0);
  p.pose2d.assign(cells * 2 * n_joints, 0.0);
  p.pose3d.assign(cells * 3 * n_joints, 0.0);
  return p;
}

PredictionTensors PredictionTensors::zeros(const AnchorGrid& grid, int n_joints) {
  return zeros(grid.height, grid.width, grid.n_anchors(), n_joints);
}

void PredictionTensors::validate(const AnchorGrid& grid, int expected_joints) const {
  if (height != grid.height || width != grid.width || n_anchors != grid.n_anchors() ||
      n_joints != expected_joints)
    throw std::invalid_argument("predictions: shape disagrees with grid/skeleton");
  const auto cells_ = static_cast<size_t>(cells());
  if (cls_logits.size() != cells_ || box_offsets.size() != cells_ * 4 ||
      pose2d.size() != cells_ * 2 * n_joints || pose3d.size() != cells_ * 3 * n_joints)
    throw std::invalid_argument("predictions: tensor sizes disagree with their shape");
  for (const auto* v : {&cls_logits, &box_offsets, &pose2d, &pose3d})
    for (double x : *v)
      if (!std::isfinite(x)) throw NumericError("predictions: non-finite entry");
}

LocLossMap loc_loss_map(const PredictionTensors& pred, const MatchResult& m,
                        const AnchorGrid& grid) {
  check_shapes(pred, m, grid);
  LocLossMap out;
  const auto cells = static_cast<size_t>(pred.cells());
  out.loss.assign(cells, 0.0);
  out.overlap.assign(cells, 0.0);
  for (int i = 0; i < grid.height; ++i)
    for (int j = 0; j < grid.width; ++j)
      for (int a = 0; a < grid.n_anchors(); ++a) {
        if (!m.is_positive(i, j, a)) continue;
        const int64_t idx = m.flat(i, j, a);
        const Box2D box = decode_box(anchor_at(grid, i, j, a), pred.offsets_at(i, j, a));
        const double o = iou(box, m.matched_box(i, j, a));
        out.overlap[idx] = o;
        out.loss[idx] = (1.0 - o) * (1.0 - o);
      }
  return out;
}

Pose2dLossMap pose2d_loss_map(const PredictionTensors& pred, const MatchResult& m,
                              const AnchorGrid& grid) {
  check_shapes(pred, m, grid);
  Pose2dLossMap out;
  const auto cells = static_cast<size_t>(pred.cells());
  const int nk = pred.n_joints;
  out.loss.assign(cells * nk, 0.0);
  out.joint_overlap.assign(cells * nk, 0.0);
  out.mean_overlap.assign(cells, 0.0);
  for (int i = 0; i < grid.height; ++i)
    for (int j = 0; j < grid.width; ++j)
      for (int a = 0; a < grid.n_anchors(); ++a) {
        if (!m.is_positive(i, j, a)) continue;
        const int gt = m.matched_gt(i, j, a);
        check_joints(m, gt, nk);
        const AnchorBox anchor = anchor_at(grid, i, j, a);
        const int64_t base = m.flat(i, j, a) * nk;
        double sum = 0.0;
        int n_visible = 0;
        for (int k = 0; k < nk; ++k) {
          if (!m.visibility[gt][k]) continue;
          const Point2D target = image_to_anchor(m.poses2d[gt][k], anchor);
          const double o = unit_square_iou(pred.pose2d_at(i, j, a, k), target);
          out.joint_overlap[base + k] = o;
          out.loss[base + k] = (1.0 - o) * (1.0 - o);
          sum += o;
          ++n_visible;
        }
        out.mean_overlap[m.flat(i, j, a)] = n_visible > 0 ? sum / n_visible : 0.0;
      }
  return out;
}

std::vector<Point3D> normalize_pose3d(const std::vector<Point3D>& pose,
                                      const Skeleton& skeleton) {
  if (static_cast<int>(pose.size()) != skeleton.n_joints)
    throw std::invalid_argument("normalize_pose3d: pose size disagrees with skeleton");
  const double total = bone_sum(pose, skeleton);
  if (total <= 0.0)
    throw NumericError("normalize_pose3d: zero total bone length (all joints coincident)");
  const Point3D root = pose[skeleton.root_index];
  std::vector<Point3D> out(pose.size());
  for (size_t k = 0; k < pose.size(); ++k)
    out[k] = {(pose[k].x - root.x) / total, (pose[k].y - root.y) / total,
              (pose[k].z - root.z) / total};
  return out;
}

namespace {

/// Normalized 3D targets for every person referenced by a positive anchor.
std::vector<std::vector<Point3D>> normalized_targets(const MatchResult& m,
                                                     const Skeleton& skeleton) {
  std::vector<std::vector<Point3D>> norm(m.poses3d.size());
  const int64_t total = static_cast<int64_t>(m.match_index.size());
  for (int64_t idx = 0; idx < total; ++idx) {
    if (!m.positive_mask[idx]) continue;
    const int gt = m.match_index[idx];
    if (norm[gt].empty()) norm[gt] = normalize_pose3d(m.poses3d[gt], skeleton);
  }
  return norm;
}

}  // namespace

std::vector<double> pose3d_loss_map(const PredictionTensors& pred, const MatchResult& m,
                                    const Skeleton& skeleton) {
  if (pred.height != m.height || pred.width != m.width || pred.n_anchors != m.n_anchors)
    throw std::invalid_argument("losses: prediction shape disagrees with the match result");
  if (pred.n_joints != skeleton.n_joints)
    throw std::invalid_argument("losses: joint count disagrees with the skeleton");
  const int nk = pred.n_joints;
  std::vector<double> out(static_cast<size_t>(pred.cells()) * nk, 0.0);
  const auto norm = normalized_targets(m, skeleton);
  for (int i = 0; i < m.height; ++i)
    for (int j = 0; j < m.width; ++j)
      for (int a = 0; a < m.n_anchors; ++a) {
        if (!m.is_positive(i, j, a)) continue;
        const int gt = m.matched_gt(i, j, a);
        const int64_t base = m.flat(i, j, a) * nk;
        for (int k = 0; k < nk; ++k) {
          if (!m.visibility[gt][k]) continue;
          const Point3D p = pred.pose3d_at(i, j, a, k);
          const Point3D t = norm[gt][k];
          const double dx = p.x - t.x, dy = p.y - t.y, dz = p.z - t.z;
          out[base + k] = dx * dx + dy * dy + dz * dz;
        }
      }
  return out;
}

std::vector<uint8_t> readout_labels(const MatchResult& m,
                                    const std::vector<double>& mean_overlap) {
  if (mean_overlap.size() != m.pono.size())
    throw std::invalid_argument("readout_labels: overlap map size disagrees with the match");
  std::vector<uint8_t> labels(m.pono.size(), 0);
  for (size_t idx = 0; idx < labels.size(); ++idx)
    if (m.pono[idx] * mean_overlap[idx] > 0.5) labels[idx] = 1;
  return labels;
}

std::vector<double> cls_loss_map(const PredictionTensors& pred,
                                 const std::vector<uint8_t>& labels) {
  if (labels.size() != pred.cls_logits.size())
    throw std::invalid_argument("cls_loss_map: label map size disagrees with predictions");
  std::vector<double> out(labels.size());
  for (size_t idx = 0; idx < labels.size(); ++idx)
    out[idx] = bce_from_logit(pred.cls_logits[idx], labels[idx] ? 1.0 : 0.0);
  return out;
}

namespace {

/// Shared core of total_loss and gradients. When grads is non-null it is
/// filled with the analytic derivatives; the breakdown is always computed.
LossBreakdown evaluate(const PredictionTensors& pred, const MatchResult& m,
                       const AnchorGrid& grid, const Skeleton& skeleton,
                       const LossWeights& weights, const std::vector<uint8_t>* frozen_labels,
                       LossGradients* grads) {
  check_shapes(pred, m, grid);
  if (pred.n_joints != skeleton.n_joints)
    throw std::invalid_argument("losses: joint count disagrees with the skeleton");
  if (weights.n_anchors() != pred.n_anchors || weights.n_joints() != pred.n_joints)
    throw std::invalid_argument("losses: weight shapes disagree with predictions");

  const int na = pred.n_anchors;
  const int nk = pred.n_joints;
  const double hwna = static_cast<double>(pred.cells());
  const int n_pos = m.n_positive;

  const LocLossMap loc = loc_loss_map(pred, m, grid);
  const Pose2dLossMap p2 = pose2d_loss_map(pred, m, grid);
  const std::vector<double> p3 = pose3d_loss_map(pred, m, skeleton);
  std::vector<uint8_t> labels =
      frozen_labels ? *frozen_labels : readout_labels(m, p2.mean_overlap);
  if (labels.size() != pred.cls_logits.size())
    throw std::invalid_argument("losses: frozen label map size disagrees with predictions");
  const std::vector<double> cls = cls_loss_map(pred, labels);

  // Per-anchor (and per anchor-joint) raw sums; these drive both the
  // weighted terms and every d/ds.
  std::vector<double> cls_a(na, 0.0), loc_a(na, 0.0);
  std::vector<double> p2_ak(static_cast<size_t>(na) * nk, 0.0);
  std::vector<double> p3_ak(static_cast<size_t>(na) * nk, 0.0);
  for (int i = 0; i < pred.height; ++i)
    for (int j = 0; j < pred.width; ++j)
      for (int a = 0; a < na; ++a) {
        const int64_t idx = m.flat(i, j, a);
        cls_a[a] += cls[idx];
        loc_a[a] += loc.loss[idx];
        for (int k = 0; k < nk; ++k) {
          p2_ak[a * nk + k] += p2.loss[idx * nk + k];
          p3_ak[a * nk + k] += p3[idx * nk + k];
        }
      }

  LossBreakdown b;
  b.n_positive = n_pos;

  const double l_cls = std::exp(weights.s_task(Task::kCls));
  const double l_loc = std::exp(weights.s_task(Task::kLoc));
  const double l_2d = std::exp(weights.s_task(Task::kPose2d));
  const double l_3d = std::exp(weights.s_task(Task::kPose3d));

  // Classification: normalized over every anchor cell.
  double cls_weighted = 0.0, cls_raw = 0.0, cls_reg_anchor = 0.0;
  for (int a = 0; a < na; ++a) {
    cls_weighted += std::exp(weights.s_anchor_cls(a)) * cls_a[a];
    cls_raw += cls_a[a];
    cls_reg_anchor += weights.s_anchor_cls(a);
  }
  const double cls_term = l_cls / hwna * cls_weighted;
  b.raw_cls = cls_raw / hwna;
  b.reg_cls = -weights.s_task(Task::kCls) - cls_reg_anchor / na;
  b.cls = cls_term + b.reg_cls;

  // Localization: normalized over positives; the weighted sum is defined as
  // 0 when there are none.
  const double inv_pos = n_pos > 0 ? 1.0 / n_pos : 0.0;
  double loc_weighted = 0.0, loc_raw = 0.0, loc_reg_anchor = 0.0;
  for (int a = 0; a < na; ++a) {
    loc_weighted += std::exp(weights.s_anchor_loc(a)) * loc_a[a];
    loc_raw += loc_a[a];
    loc_reg_anchor += weights.s_anchor_loc(a);
  }
  const double loc_term = l_loc * inv_pos * loc_weighted;
  b.raw_loc = loc_raw * inv_pos;
  b.reg_loc = -weights.s_task(Task::kLoc) - loc_reg_anchor / na;
  b.loc = loc_term + b.reg_loc;

  // 2D and 3D pose terms: normalized over positives and joints.
  const double inv_kpos = n_pos > 0 ? 1.0 / (static_cast<double>(nk) * n_pos) : 0.0;
  double p2_weighted = 0.0, p2_raw = 0.0, p2_reg = 0.0;
  double p3_weighted = 0.0, p3_raw = 0.0, p3_reg = 0.0;
  for (int a = 0; a < na; ++a)
    for (int k = 0; k < nk; ++k) {
      p2_weighted += std::exp(weights.s_joint2d(a, k)) * p2_ak[a * nk + k];
      p3_weighted += std::exp(weights.s_joint3d(a, k)) * p3_ak[a * nk + k];
      p2_raw += p2_ak[a * nk + k];
      p3_raw += p3_ak[a * nk + k];
      p2_reg += weights.s_joint2d(a, k);
      p3_reg += weights.s_joint3d(a, k);
    }
  const double nkna = static_cast<double>(nk) * na;
  const double p2_term = l_2d * inv_kpos * p2_weighted;
  const double p3_term = l_3d * inv_kpos * p3_weighted;
  b.raw_pose2d = p2_raw * inv_kpos;
  b.raw_pose3d = p3_raw * inv_kpos;
  b.reg_pose2d = -weights.s_task(Task::kPose2d) - p2_reg / nkna;
  b.reg_pose3d = -weights.s_task(Task::kPose3d) - p3_reg / nkna;
  b.pose2d = p2_term + b.reg_pose2d;
  b.pose3d = p3_term + b.reg_pose3d;

  b.total = b.cls + b.loc + b.pose2d + b.pose3d;

  if (!grads) return b;

  grads->d_cls_logits.assign(pred.cls_logits.size(), 0.0);
  grads->d_box_offsets.assign(pred.box_offsets.size(), 0.0);
  grads->d_pose2d.assign(pred.pose2d.size(), 0.0);
  grads->d_pose3d.assign(pred.pose3d.size(), 0.0);
  grads->d_weights.assign(weights.raw().size(), 0.0);
  grads->labels = labels;

  // d/ds: every s enters as exp(s)*X - (regularizer linear in s).
  LossWeights dw(na, nk);
  dw.s_task(Task::kCls) = cls_term - 1.0;
  dw.s_task(Task::kLoc) = loc_term - 1.0;
  dw.s_task(Task::kPose2d) = p2_term - 1.0;
  dw.s_task(Task::kPose3d) = p3_term - 1.0;
  for (int a = 0; a < na; ++a) {
    dw.s_anchor_cls(a) = l_cls / hwna * std::exp(weights.s_anchor_cls(a)) * cls_a[a] - 1.0 / na;
    dw.s_anchor_loc(a) =
        l_loc * inv_pos * std::exp(weights.s_anchor_loc(a)) * loc_a[a] - 1.0 / na;
    for (int k = 0; k < nk; ++k) {
      dw.s_joint2d(a, k) =
          l_2d * inv_kpos * std::exp(weights.s_joint2d(a, k)) * p2_ak[a * nk + k] - 1.0 / nkna;
      dw.s_joint3d(a, k) =
          l_3d * inv_kpos * std::exp(weights.s_joint3d(a, k)) * p3_ak[a * nk + k] - 1.0 / nkna;
    }
  }
  grads->d_weights = dw.raw();

  // d/d(predictions). Classification touches every anchor; the regression
  // terms only the positives. Labels are constants here.
  const auto norm3d = normalized_targets(m, skeleton);
  for (int i = 0; i < pred.height; ++i)
    for (int j = 0; j < pred.width; ++j)
      for (int a = 0; a < na; ++a) {
        const int64_t idx = m.flat(i, j, a);
        const double cls_coef = l_cls * std::exp(weights.s_anchor_cls(a)) / hwna;
        const double y = labels[idx] ? 1.0 : 0.0;
        grads->d_cls_logits[idx] = cls_coef * (sigmoid(pred.cls_logits[idx]) - y);

        if (!m.positive_mask[idx]) continue;
        const int gt = m.match_index[idx];
        const AnchorBox anchor = anchor_at(grid, i, j, a);

        // Box offsets: chain rule through decode_box and the box IoU.
        const DecodeJacobian dj = decode_box_grad(anchor, pred.offsets_at(i, j, a));
        const BoxIouGrad ig = iou_grad(dj.box, m.boxes[gt]);
        const double loc_factor = l_loc * std::exp(weights.s_anchor_loc(a)) * inv_pos *
                                  (-2.0 * (1.0 - ig.iou));
        const auto& dc = ig.d_corners;
        grads->d_box_offsets[idx * 4 + 0] = loc_factor * (dc[0] + dc[2]) * dj.d_x_dtx;
        grads->d_box_offsets[idx * 4 + 1] = loc_factor * (dc[1] + dc[3]) * dj.d_y_dty;
        grads->d_box_offsets[idx * 4 + 2] =
            loc_factor * (dc[0] * dj.d_x0_dtw + dc[2] * dj.d_x1_dtw);
        grads->d_box_offsets[idx * 4 + 3] =
            loc_factor * (dc[1] * dj.d_y0_dth + dc[3] * dj.d_y1_dth);

        for (int k = 0; k < nk; ++k) {
          if (!m.visibility[gt][k]) continue;
          // 2D joints: unit-square IoU in anchor coordinates.
          const Point2D target = image_to_anchor(m.poses2d[gt][k], anchor);
          const UnitSquareIouGrad ug = unit_square_iou_grad(pred.pose2d_at(i, j, a, k), target);
          const double p2_factor = l_2d * std::exp(weights.s_joint2d(a, k)) * inv_kpos *
                                   (-2.0 * (1.0 - ug.iou));
          grads->d_pose2d[pred.pose2d_index(i, j, a, k, 0)] = p2_factor * ug.dx;
          grads->d_pose2d[pred.pose2d_index(i, j, a, k, 1)] = p2_factor * ug.dy;

          // 3D joints: squared Euclidean distance to the normalized target.
          const Point3D p = pred.pose3d_at(i, j, a, k);
          const Point3D t = norm3d[gt][k];
          const double p3_coef = l_3d * std::exp(weights.s_joint3d(a, k)) * inv_kpos * 2.0;
          grads->d_pose3d[pred.pose3d_index(i, j, a, k, 0)] = p3_coef * (p.x - t.x);
          grads->d_pose3d[pred.pose3d_index(i, j, a, k, 1)] = p3_coef * (p.y - t.y);
          grads->d_pose3d[pred.pose3d_index(i, j, a, k, 2)] = p3_coef * (p.z - t.z);
        }
      }

  grads->breakdown = b;
  return b;
}

}  // namespace

LossBreakdown total_loss(const PredictionTensors& pred, const MatchResult& m,
                         const AnchorGrid& grid, const Skeleton& skeleton,
                         const LossWeights& weights,
                         const std::vector<uint8_t>* frozen_labels) {
  return evaluate(pred, m, grid, skeleton, weights, frozen_labels, nullptr);
}

LossGradients gradients(const PredictionTensors& pred, const MatchResult& m,
                        const AnchorGrid& grid, const Skeleton& skeleton,
                        const LossWeights& weights,
                        const std::vector<uint8_t>* frozen_labels) {
  LossGradients g;
  evaluate(pred, m, grid, skeleton, weights, frozen_labels, &g);
  return g;
}

}  // namespace anchorpose
