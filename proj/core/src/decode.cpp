#include "anchorpose/decode.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"

#include "anchorpose/errors.hpp"

namespace anchorpose {

namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

bool score_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.anchor_index < b.anchor_index;
}

/// Solves the 3x3 system A x = b by Gaussian elimination with partial
/// pivoting. Throws NumericError when A is (numerically) singular.
std::array<double, 3> solve3(std::array<std::array<double, 3>, 3> a, std::array<double, 3> b) {
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    if (std::abs(a[pivot][col]) < 1e-12)
      throw NumericError("root recovery: degenerate joint configuration");
    std::swap(a[col], a[pivot]);
    std::swap(b[col], b[pivot]);
    for (int r = col + 1; r < 3; ++r) {
      const double f = a[r][col] / a[col][col];
      for (int c = col; c < 3; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::array<double, 3> x{};
  for (int r = 2; r >= 0; --r) {
    double acc = b[r];
    for (int c = r + 1; c < 3; ++c) acc -= a[r][c] * x[c];
    x[r] = acc / a[r][r];
  }
  return x;
}

constexpr double kMinDepth = 1e-6;

/// Sum of squared reprojection errors; +inf when any joint falls behind the
/// camera (so the line search rejects such steps).
double reprojection_residual(const std::vector<Point3D>& pose, const std::vector<Point2D>& uv,
                             const Camera& cam, const Point3D& t) {
  double total = 0.0;
  for (size_t k = 0; k < pose.size(); ++k) {
    const double z = pose[k].z + t.z;
    if (z <= kMinDepth) return std::numeric_limits<double>::infinity();
    const double du = cam.fx * (pose[k].x + t.x) / z + cam.cx - uv[k].x;
    const double dv = cam.fy * (pose[k].y + t.y) / z + cam.cy - uv[k].y;
    total += du * du + dv * dv;
  }
  return total;
}

}  // namespace

std::vector<Detection> decode(const PredictionTensors& pred, const AnchorGrid& grid,
                              double score_threshold, int root_index) {
  if (score_threshold < 0.0 || score_threshold >= 1.0)
    throw std::invalid_argument("decode: score threshold must be in [0, 1)");
  if (root_index < 0 || root_index >= pred.n_joints)
    throw std::invalid_argument("decode: root index out of range");
  if (pred.height != grid.height || pred.width != grid.width ||
      pred.n_anchors != grid.n_anchors())
    throw std::invalid_argument("decode: prediction shape disagrees with the grid");

  std::vector<Detection> out;
  for (int i = 0; i < grid.height; ++i)
    for (int j = 0; j < grid.width; ++j)
      for (int a = 0; a < grid.n_anchors(); ++a) {
        const double score = sigmoid(pred.cls_logits[pred.cls_index(i, j, a)]);
        if (score <= score_threshold) continue;
        const AnchorBox anchor = anchor_at(grid, i, j, a);
        Detection det;
        det.score = score;
        det.box = decode_box(anchor, pred.offsets_at(i, j, a));
        det.anchor_index = {i, j, a};
        det.pose2d.reserve(pred.n_joints);
        det.pose3d.reserve(pred.n_joints);
        for (int k = 0; k < pred.n_joints; ++k)
          det.pose2d.push_back(anchor_to_image(pred.pose2d_at(i, j, a, k), anchor));
        const Point3D root = pred.pose3d_at(i, j, a, root_index);
        for (int k = 0; k < pred.n_joints; ++k) {
          const Point3D p = pred.pose3d_at(i, j, a, k);
          det.pose3d.push_back({p.x - root.x, p.y - root.y, p.z - root.z});
        }
        out.push_back(std::move(det));
      }
  std::sort(out.begin(), out.end(), score_order);
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<Detection> sorted = dets;
  std::sort(sorted.begin(), sorted.end(), score_order);
  std::vector<Detection> kept;
  std::vector<bool> suppressed(sorted.size(), false);
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (suppressed[i]) continue;
    kept.push_back(sorted[i]);
    for (size_t j = i + 1; j < sorted.size(); ++j)
      if (!suppressed[j] && iou(sorted[i].box, sorted[j].box) > iou_threshold)
        suppressed[j] = true;
  }
  return kept;
}

RootRecovery recover_root_translation(const std::vector<Point3D>& pose3d_metric,
                                      const std::vector<Point2D>& pose2d,
                                      const Camera& camera, int max_iters) {
  if (pose3d_metric.size() != pose2d.size())
    throw std::invalid_argument("root recovery: joint list sizes disagree");
  if (pose3d_metric.size() < 2)
    throw NumericError("root recovery: fewer than 2 visible joints");

  // Linear initialization. Each joint contributes two equations linear in T:
  //   fx*Tx - (u - cx)*Tz = (u - cx)*pz - fx*px
  //   fy*Ty - (v - cy)*Tz = (v - cy)*pz - fy*py
  // solved in the least-squares sense through the 3x3 normal equations.
  std::array<std::array<double, 3>, 3> ata{};
  std::array<double, 3> atb{};
  for (size_t k = 0; k < pose3d_metric.size(); ++k) {
    const Point3D& p = pose3d_metric[k];
    const double a_u = pose2d[k].x - camera.cx;
    const double a_v = pose2d[k].y - camera.cy;
    const std::array<double, 3> row_u = {camera.fx, 0.0, -a_u};
    const std::array<double, 3> row_v = {0.0, camera.fy, -a_v};
    const double rhs_u = a_u * p.z - camera.fx * p.x;
    const double rhs_v = a_v * p.z - camera.fy * p.y;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) ata[r][c] += row_u[r] * row_u[c] + row_v[r] * row_v[c];
      atb[r] += row_u[r] * rhs_u + row_v[r] * rhs_v;
    }
  }
  const std::array<double, 3> init = solve3(ata, atb);

  RootRecovery result;
  result.translation = {init[0], init[1], init[2]};
  result.residual =
      reprojection_residual(pose3d_metric, pose2d, camera, result.translation);
  if (!std::isfinite(result.residual)) {
    // The algebraic solution put joints behind the camera; fall back to a
    // crude all-in-front starting depth.
    double min_z = 0.0;
    for (const auto& p : pose3d_metric) min_z = std::min(min_z, p.z);
    result.translation = {init[0], init[1], std::max(init[2], 1.0 - min_z)};
    result.residual =
        reprojection_residual(pose3d_metric, pose2d, camera, result.translation);
  }

  // Gauss-Newton refinement with step halving.
  for (int iter = 0; iter < max_iters; ++iter) {
    result.iterations = iter;
    std::array<std::array<double, 3>, 3> jtj{};
    std::array<double, 3> jtr{};
    for (size_t k = 0; k < pose3d_metric.size(); ++k) {
      const Point3D& p = pose3d_metric[k];
      const double z = p.z + result.translation.z;
      const double x = p.x + result.translation.x;
      const double y = p.y + result.translation.y;
      const double ru = camera.fx * x / z + camera.cx - pose2d[k].x;
      const double rv = camera.fy * y / z + camera.cy - pose2d[k].y;
      const std::array<double, 3> ju = {camera.fx / z, 0.0, -camera.fx * x / (z * z)};
      const std::array<double, 3> jv = {0.0, camera.fy / z, -camera.fy * y / (z * z)};
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) jtj[r][c] += ju[r] * ju[c] + jv[r] * jv[c];
        jtr[r] += ju[r] * ru + jv[r] * rv;
      }
    }
    std::array<double, 3> step;
    try {
      step = solve3(jtj, {-jtr[0], -jtr[1], -jtr[2]});
    } catch (const NumericError&) {
      if (result.residual < 1e-9) break;  // flat residual at the optimum
      throw;
    }

    double scale = 1.0;
    Point3D next = result.translation;
    double next_res = std::numeric_limits<double>::infinity();
    for (int halving = 0; halving < 30; ++halving) {
      next = {result.translation.x + scale * step[0], result.translation.y + scale * step[1],
              result.translation.z + scale * step[2]};
      next_res = reprojection_residual(pose3d_metric, pose2d, camera, next);
      if (next_res <= result.residual) break;
      scale *= 0.5;
    }
    if (next_res > result.residual) break;  // no improving step found

    const double improvement = result.residual - next_res;
    const double step_norm =
        std::abs(scale) * std::sqrt(step[0] * step[0] + step[1] * step[1] + step[2] * step[2]);
    result.translation = next;
    result.residual = next_res;
    if (step_norm < 1e-10 || improvement < 1e-14 * (1.0 + result.residual)) {
      result.converged = true;
      break;
    }
  }
  if (result.residual < 1e-9) result.converged = true;
  return result;
}

void save_detections(const std::vector<DetectionRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& rec : records) {
    nlohmann::json j;
    j["image_id"] = rec.image_id;
    j["score"] = rec.detection.score;
    const Box2D& b = rec.detection.box;
    j["box"] = {b.xmin, b.ymin, b.xmax, b.ymax};
    j["pose2d"] = nlohmann::json::array();
    for (const auto& p : rec.detection.pose2d) j["pose2d"].push_back({p.x, p.y});
    j["pose3d"] = nlohmann::json::array();
    for (const auto& p : rec.detection.pose3d) j["pose3d"].push_back({p.x, p.y, p.z});
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<DetectionRecord> load_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<DetectionRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": invalid JSON: " + e.what());
    }
    try {
      DetectionRecord rec;
      rec.image_id = j.at("image_id").get<int64_t>();
      rec.detection.score = j.at("score").get<double>();
      const auto& b = j.at("box");
      if (!b.is_array() || b.size() != 4) throw IoError(where + ": box must have 4 numbers");
      rec.detection.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                           b[3].get<double>()};
      for (const auto& p : j.at("pose2d")) {
        if (!p.is_array() || p.size() != 2)
          throw IoError(where + ": pose2d entries must be [x, y]");
        rec.detection.pose2d.push_back({p[0].get<double>(), p[1].get<double>()});
      }
      for (const auto& p : j.at("pose3d")) {
        if (!p.is_array() || p.size() != 3)
          throw IoError(where + ": pose3d entries must be [x, y, z]");
        rec.detection.pose3d.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
      }
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": " + e.what());
    }
  }
  return records;
}

}  // namespace anchorpose
