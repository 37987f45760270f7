#include "anchorpose/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "anchorpose/errors.hpp"

namespace anchorpose {

namespace {

constexpr std::array<double, 5> kBinEdges = {10.0, 20.0, 30.0, 40.0,
                                             std::numeric_limits<double>::infinity()};

int depth_bin(double depth_m) {
  for (int b = 0; b < 4; ++b)
    if (depth_m < kBinEdges[b]) return b;
  return 4;
}

}  // namespace

ApResult average_precision(const std::vector<std::vector<Detection>>& dets_per_image,
                           const std::vector<std::vector<Box2D>>& gts_per_image,
                           double iou_threshold) {
  if (dets_per_image.size() != gts_per_image.size())
    throw std::invalid_argument("average_precision: per-image lists disagree in length");

  int64_t n_gt = 0;
  for (const auto& gts : gts_per_image) n_gt += static_cast<int64_t>(gts.size());
  if (n_gt == 0) return {0.0, true};

  struct Ranked {
    double score;
    int image;
    int det;
  };
  std::vector<Ranked> ranked;
  for (size_t img = 0; img < dets_per_image.size(); ++img)
    for (size_t d = 0; d < dets_per_image[img].size(); ++d)
      ranked.push_back({dets_per_image[img][d].score, static_cast<int>(img), static_cast<int>(d)});
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.det < b.det;
  });

  std::vector<std::vector<bool>> gt_used(gts_per_image.size());
  for (size_t img = 0; img < gts_per_image.size(); ++img)
    gt_used[img].assign(gts_per_image[img].size(), false);

  std::vector<bool> is_tp(ranked.size(), false);
  for (size_t r = 0; r < ranked.size(); ++r) {
    const auto& det = dets_per_image[ranked[r].image][ranked[r].det];
    const auto& gts = gts_per_image[ranked[r].image];
    int best_gt = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[ranked[r].image][g]) continue;
      const double v = iou(det.box, gts[g]);
      if (v > best_iou) {
        best_iou = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best_iou >= iou_threshold) {
      is_tp[r] = true;
      gt_used[ranked[r].image][best_gt] = true;
    }
  }

  // Area under the all-point interpolated precision-recall curve.
  std::vector<double> precision(ranked.size()), recall(ranked.size());
  int64_t tp = 0;
  for (size_t r = 0; r < ranked.size(); ++r) {
    if (is_tp[r]) ++tp;
    precision[r] = static_cast<double>(tp) / static_cast<double>(r + 1);
    recall[r] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  double ap = 0.0;
  double best_precision = 0.0;
  for (int r = static_cast<int>(ranked.size()) - 1; r >= 0; --r) {
    best_precision = std::max(best_precision, precision[r]);
    const double prev_recall = r > 0 ? recall[r - 1] : 0.0;
    ap += (recall[r] - prev_recall) * best_precision;
  }
  return {ap, false};
}

PoseEvalPairing match_for_pose_eval(const std::vector<Detection>& dets,
                                    const std::vector<Box2D>& gt_boxes, double min_iou) {
  struct Candidate {
    double iou;
    int det;
    int gt;
  };
  std::vector<Candidate> cands;
  for (size_t d = 0; d < dets.size(); ++d)
    for (size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(dets[d].box, gt_boxes[g]);
      if (v > min_iou) cands.push_back({v, static_cast<int>(d), static_cast<int>(g)});
    }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.det != b.det) return a.det < b.det;
    return a.gt < b.gt;
  });

  PoseEvalPairing out;
  std::vector<bool> det_used(dets.size(), false), gt_used(gt_boxes.size(), false);
  for (const auto& c : cands) {
    if (det_used[c.det] || gt_used[c.gt]) continue;
    det_used[c.det] = true;
    gt_used[c.gt] = true;
    out.pairs.emplace_back(c.det, c.gt);
  }
  for (size_t g = 0; g < gt_boxes.size(); ++g)
    if (!gt_used[g]) out.missed_gts.push_back(static_cast<int>(g));
  for (size_t d = 0; d < dets.size(); ++d)
    if (!det_used[d]) out.unmatched_dets.push_back(static_cast<int>(d));
  return out;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& dets_per_image,
                    const std::vector<GroundTruthScene>& scenes, const Skeleton& skeleton,
                    const EvalOptions& opts) {
  if (dets_per_image.size() != scenes.size())
    throw std::invalid_argument("evaluate: detections and scenes disagree in image count");

  const int nk = skeleton.n_joints;
  EvalReport report;
  report.pck3d_per_joint.assign(nk, 0.0);
  report.pck3d_per_distance_bin.resize(5);
  for (int b = 0; b < 5; ++b) {
    report.pck3d_per_distance_bin[b].min_depth_m = b == 0 ? 0.0 : kBinEdges[b - 1];
    report.pck3d_per_distance_bin[b].max_depth_m = kBinEdges[b];
  }

  std::vector<std::vector<Box2D>> gts_per_image(scenes.size());
  for (size_t img = 0; img < scenes.size(); ++img) {
    scenes[img].validate();
    gts_per_image[img] = scenes[img].boxes;
  }
  const ApResult ap = average_precision(dets_per_image, gts_per_image, opts.ap_iou_threshold);
  report.ap = ap.ap;
  report.ap_no_ground_truth = ap.no_ground_truth;

  double error_sum_mm = 0.0;
  int64_t matched_joints = 0;
  std::vector<int64_t> correct_per_joint(nk, 0);
  std::array<int64_t, 5> correct_per_bin{};
  std::array<int64_t, 5> gts_per_bin{};
  int64_t correct_total = 0;

  for (size_t img = 0; img < scenes.size(); ++img) {
    const auto& scene = scenes[img];
    const auto& dets = dets_per_image[img];
    report.counts.detections += static_cast<int64_t>(dets.size());
    report.counts.ground_truths += scene.n_people();

    const PoseEvalPairing pairing =
        match_for_pose_eval(dets, scene.boxes, opts.pairing_min_iou);
    report.counts.matched += static_cast<int64_t>(pairing.pairs.size());
    report.counts.misses += static_cast<int64_t>(pairing.missed_gts.size());

    for (int p = 0; p < scene.n_people(); ++p) {
      if (static_cast<int>(scene.poses3d[p].size()) != nk)
        throw std::invalid_argument("evaluate: ground-truth joint count disagrees with skeleton");
      ++gts_per_bin[depth_bin(scene.poses3d[p][skeleton.root_index].z)];
    }

    for (const auto& [d, g] : pairing.pairs) {
      const auto& det = dets[d];
      if (static_cast<int>(det.pose3d.size()) != nk)
        throw std::invalid_argument("evaluate: detection joint count disagrees with skeleton");
      const auto& gt = scene.poses3d[g];
      const Point3D gt_root = gt[skeleton.root_index];
      const double scale_mm = bone_sum(gt, skeleton) * 1000.0;
      if (scale_mm <= 0.0)
        throw NumericError("evaluate: ground-truth pose with zero bone length");
      const Point3D pred_root = det.pose3d[skeleton.root_index];
      const int bin = depth_bin(gt_root.z);
      for (int k = 0; k < nk; ++k) {
        const double ex = (det.pose3d[k].x - pred_root.x) * scale_mm - (gt[k].x - gt_root.x) * 1000.0;
        const double ey = (det.pose3d[k].y - pred_root.y) * scale_mm - (gt[k].y - gt_root.y) * 1000.0;
        const double ez = (det.pose3d[k].z - pred_root.z) * scale_mm - (gt[k].z - gt_root.z) * 1000.0;
        const double err_mm = std::sqrt(ex * ex + ey * ey + ez * ez);
        error_sum_mm += err_mm;
        ++matched_joints;
        if (err_mm < opts.pck_threshold_mm) {
          ++correct_total;
          ++correct_per_joint[k];
          ++correct_per_bin[bin];
        }
      }
    }
    // Missed people contribute only to the denominators: every joint wrong.
  }

  if (matched_joints > 0) report.mpjpe_mm = error_sum_mm / static_cast<double>(matched_joints);
  const int64_t total_gts = report.counts.ground_truths;
  if (total_gts > 0 && nk > 0) {
    report.pck3d = 100.0 * static_cast<double>(correct_total) /
                   (static_cast<double>(total_gts) * static_cast<double>(nk));
    for (int k = 0; k < nk; ++k)
      report.pck3d_per_joint[k] =
          100.0 * static_cast<double>(correct_per_joint[k]) / static_cast<double>(total_gts);
    for (int b = 0; b < 5; ++b) {
      report.pck3d_per_distance_bin[b].n_gts = gts_per_bin[b];
      if (gts_per_bin[b] > 0)
        report.pck3d_per_distance_bin[b].pck3d =
            100.0 * static_cast<double>(correct_per_bin[b]) /
            (static_cast<double>(gts_per_bin[b]) * static_cast<double>(nk));
    }
  }
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["ap"] = report.ap;
  j["ap_no_ground_truth"] = report.ap_no_ground_truth;
  if (report.mpjpe_mm)
    j["mpjpe_mm"] = *report.mpjpe_mm;
  else
    j["mpjpe_mm"] = nullptr;
  j["pck3d"] = report.pck3d;
  j["pck3d_per_joint"] = report.pck3d_per_joint;
  j["pck3d_per_distance_bin"] = nlohmann::json::array();
  for (const auto& bin : report.pck3d_per_distance_bin) {
    nlohmann::json jb;
    jb["min_depth_m"] = bin.min_depth_m;
    if (std::isfinite(bin.max_depth_m))
      jb["max_depth_m"] = bin.max_depth_m;
    else
      jb["max_depth_m"] = nullptr;
    jb["pck3d"] = bin.pck3d;
    jb["n_ground_truths"] = bin.n_gts;
    j["pck3d_per_distance_bin"].push_back(jb);
  }
  j["counts"] = {{"detections", report.counts.detections},
                 {"ground_truths", report.counts.ground_truths},
                 {"matched", report.counts.matched},
                 {"misses", report.counts.misses}};
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: invalid JSON: ") + e.what());
  }
  try {
    EvalReport report;
    report.ap = j.at("ap").get<double>();
    report.ap_no_ground_truth = j.at("ap_no_ground_truth").get<bool>();
    if (!j.at("mpjpe_mm").is_null()) report.mpjpe_mm = j.at("mpjpe_mm").get<double>();
    report.pck3d = j.at("pck3d").get<double>();
    report.pck3d_per_joint = j.at("pck3d_per_joint").get<std::vector<double>>();
    for (const auto& jb : j.at("pck3d_per_distance_bin")) {
      DistanceBin bin;
      bin.min_depth_m = jb.at("min_depth_m").get<double>();
      bin.max_depth_m = jb.at("max_depth_m").is_null()
                            ? std::numeric_limits<double>::infinity()
                            : jb.at("max_depth_m").get<double>();
      bin.pck3d = jb.at("pck3d").get<double>();
      bin.n_gts = jb.at("n_ground_truths").get<int64_t>();
      report.pck3d_per_distance_bin.push_back(bin);
    }
    const auto& c = j.at("counts");
    report.counts.detections = c.at("detections").get<int64_t>();
    report.counts.ground_truths = c.at("ground_truths").get<int64_t>();
    report.counts.matched = c.at("matched").get<int64_t>();
    report.counts.misses = c.at("misses").get<int64_t>();
    return report;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("report: ") + e.what());
  }
}

void save_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << report_to_json(report) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

EvalReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return report_from_json(buf.str());
}

std::string report_to_text(const EvalReport& report, const Skeleton& skeleton) {
  std::ostringstream out;
  out << std::fixed;
  out << "Detection AP: " << std::setprecision(4) << report.ap;
  if (report.ap_no_ground_truth) out << " (no ground truth)";
  out << "\n";
  out << "People: " << report.counts.ground_truths << " ground truth, "
      << report.counts.detections << " detected, " << report.counts.matched << " matched, "
      << report.counts.misses << " missed\n";
  if (report.mpjpe_mm)
    out << "MPJPE (matched people): " << std::setprecision(2) << *report.mpjpe_mm << " mm\n";
  else
    out << "MPJPE (matched people): n/a\n";
  out << "3DPCK total: " << std::setprecision(2) << report.pck3d << "\n\n";

  out << "Distance-wise 3DPCK\n";
  out << "  band (m)   ";
  for (const auto& bin : report.pck3d_per_distance_bin) {
    std::ostringstream label;
    if (bin.min_depth_m <= 0.0)
      label << "<" << bin.max_depth_m;
    else if (!std::isfinite(bin.max_depth_m))
      label << ">" << bin.min_depth_m;
    else
      label << bin.min_depth_m << "-" << bin.max_depth_m;
    out << "| " << std::setw(8) << label.str() << " ";
  }
  out << "\n  3DPCK (%)  ";
  for (const auto& bin : report.pck3d_per_distance_bin)
    out << "| " << std::setw(8) << std::setprecision(2) << bin.pck3d << " ";
  out << "\n  people     ";
  for (const auto& bin : report.pck3d_per_distance_bin)
    out << "| " << std::setw(8) << bin.n_gts << " ";
  out << "\n\nJoint-wise 3DPCK\n";
  for (size_t k = 0; k < report.pck3d_per_joint.size(); ++k) {
    std::string name = k < skeleton.joint_names.size() ? skeleton.joint_names[k]
                                                       : "joint " + std::to_string(k);
    out << "  " << std::setw(12) << std::left << name << std::right << " | " << std::setw(8)
        << std::setprecision(2) << report.pck3d_per_joint[k] << "\n";
  }
  out << "  " << std::setw(12) << std::left << "all" << std::right << " | " << std::setw(8)
      << std::setprecision(2) << report.pck3d << "\n";
  return out.str();
}

}  // namespace anchorpose
