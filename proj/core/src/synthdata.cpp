#include "anchorpose/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

#include "anchorpose/errors.hpp"
#include "anchorpose/rng.hpp"

namespace anchorpose {

namespace {

// ---------------------------------------------------------------------------
// Small fixed-size linear algebra for forward kinematics.

struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
};

Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += a.m[i * 3 + k] * b.m[k * 3 + j];
      r.m[i * 3 + j] = acc;
    }
  return r;
}

Point3D mat_apply(const Mat3& a, const Point3D& p) {
  return {a.m[0] * p.x + a.m[1] * p.y + a.m[2] * p.z,
          a.m[3] * p.x + a.m[4] * p.y + a.m[5] * p.z,
          a.m[6] * p.x + a.m[7] * p.y + a.m[8] * p.z};
}

/// Rodrigues rotation about a unit axis.
Mat3 mat_axis_angle(const Point3D& axis, double theta) {
  const double c = std::cos(theta), s = std::sin(theta), t = 1.0 - c;
  const double x = axis.x, y = axis.y, z = axis.z;
  Mat3 r;
  r.m = {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
         t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
         t * x * z - s * y, t * y * z + s * x, t * z * z + c};
  return r;
}

Point3D random_unit_axis(Rng& rng) {
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(phi), r * std::sin(phi), z};
}

// ---------------------------------------------------------------------------
// Rest pose of the default 15-joint skeleton. Parent-relative offsets in
// meters, image convention: x right, y down, z away from the camera.

constexpr std::array<std::array<double, 3>, 15> kRestOffset = {{
    {0.00, 0.00, 0.00},    // pelvis (root)
    {0.00, -0.25, 0.00},   // spine
    {0.00, -0.30, 0.00},   // head
    {+0.20, -0.05, 0.00},  // l_shoulder
    {+0.06, +0.24, 0.00},  // l_elbow
    {+0.04, +0.25, 0.00},  // l_wrist
    {-0.20, -0.05, 0.00},  // r_shoulder
    {-0.06, +0.24, 0.00},  // r_elbow
    {-0.04, +0.25, 0.00},  // r_wrist
    {+0.10, +0.05, 0.00},  // l_hip
    {+0.01, +0.40, 0.00},  // l_knee
    {0.00, +0.42, 0.00},   // l_ankle
    {-0.10, +0.05, 0.00},  // r_hip
    {-0.01, +0.40, 0.00},  // r_knee
    {0.00, +0.42, 0.00},   // r_ankle
}};

/// Per-bone articulation limits (radians), indexed like the default
/// skeleton's edge list.
constexpr std::array<double, 14> kAngleLimit = {
    0.20,  // pelvis -> spine
    0.30,  // spine -> head
    0.25,  // spine -> l_shoulder
    0.60,  // l_shoulder -> l_elbow
    0.50,  // l_elbow -> l_wrist
    0.25,  // spine -> r_shoulder
    0.60,  // r_shoulder -> r_elbow
    0.50,  // r_elbow -> r_wrist
    0.20,  // pelvis -> l_hip
    0.50,  // l_hip -> l_knee
    0.40,  // l_knee -> l_ankle
    0.20,  // pelvis -> r_hip
    0.50,  // r_hip -> r_knee
    0.40,  // r_knee -> r_ankle
};

constexpr double kMinJointDepth = 0.2;   // meters
constexpr double kBoxMargin = 0.05;      // fraction of the tight extent, per side
constexpr double kFrameInset = 1.5;      // pixels kept clear at the border
constexpr int kMinVisibleJoints = 3;     // people below this are discarded
constexpr double kMinBoxExtent = 2.0;    // pixels, tight extent before margin

/// Tight bound of the visible joints plus the 5% margin per side.
Box2D box_from_visible(const std::vector<Point2D>& pose,
                       const std::vector<uint8_t>& visibility) {
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
  double xmax = -xmin, ymax = -xmin;
  for (size_t k = 0; k < pose.size(); ++k) {
    if (!visibility[k]) continue;
    xmin = std::min(xmin, pose[k].x);
    xmax = std::max(xmax, pose[k].x);
    ymin = std::min(ymin, pose[k].y);
    ymax = std::max(ymax, pose[k].y);
  }
  const double mx = kBoxMargin * (xmax - xmin);
  const double my = kBoxMargin * (ymax - ymin);
  return {xmin - mx, ymin - my, xmax + mx, ymax + my};
}

int count_visible(const std::vector<uint8_t>& v) {
  int n = 0;
  for (uint8_t b : v) n += b ? 1 : 0;
  return n;
}

struct Candidate {
  std::vector<Point3D> pose3d;
  std::vector<Point2D> pose2d;
  std::vector<uint8_t> visibility;
  double root_z = 0.0;
  Box2D cover_box;  // tight bound of ALL projected joints, used as occluder
};

void check_options(const GenerateOptions& opts) {
  if (opts.n_people_min < 1 || opts.n_people_max < opts.n_people_min)
    throw std::invalid_argument("generate_scene: bad people range");
  if (!(opts.depth_min_m > 0.0) || !(opts.depth_max_m >= opts.depth_min_m))
    throw std::invalid_argument("generate_scene: bad depth range");
  if (!(opts.occlusion_rate >= 0.0) || opts.occlusion_rate >= 1.0)
    throw std::invalid_argument("generate_scene: occlusion rate must be in [0, 1)");
  if (opts.camera.fx <= 0.0 || opts.camera.fy <= 0.0 || opts.camera.width <= 0 ||
      opts.camera.height <= 0)
    throw std::invalid_argument("generate_scene: bad camera");
}

/// Articulates one person and places it so that, when possible, every joint
/// projects inside the frame. All randomness comes from rng in fixed order.
Candidate sample_person(Rng& rng, const GenerateOptions& opts, const Skeleton& skeleton) {
  const Camera& cam = opts.camera;
  Candidate cand;
  const int nk = skeleton.n_joints;

  const double root_z =
      std::exp(rng.uniform(std::log(opts.depth_min_m), std::log(opts.depth_max_m)));

  // Whole-body orientation: free yaw, mild pitch and roll.
  const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double pitch = rng.uniform(-0.15, 0.15);
  const double roll = rng.uniform(-0.15, 0.15);
  Mat3 body = mat_mul(mat_axis_angle({0, 0, 1}, roll),
                      mat_mul(mat_axis_angle({1, 0, 0}, pitch),
                              mat_axis_angle({0, 1, 0}, yaw)));

  // Forward kinematics down the tree with a random rotation per bone.
  std::vector<Point3D> local(nk);
  std::vector<Mat3> cum(nk);
  local[skeleton.root_index] = {0.0, 0.0, 0.0};
  cum[skeleton.root_index] = body;
  for (size_t e = 0; e < skeleton.edges.size(); ++e) {
    const auto [parent, child] = skeleton.edges[e];
    const Point3D axis = random_unit_axis(rng);
    const double theta = rng.uniform(-kAngleLimit[e], kAngleLimit[e]);
    cum[child] = mat_mul(cum[parent], mat_axis_angle(axis, theta));
    const auto& o = kRestOffset[child];
    const Point3D off = mat_apply(cum[child], {o[0], o[1], o[2]});
    local[child] = {local[parent].x + off.x, local[parent].y + off.y, local[parent].z + off.z};
  }

  // Root at depth root_z; push back if an articulated joint comes too close.
  double min_z = std::numeric_limits<double>::infinity();
  for (const auto& p : local) min_z = std::min(min_z, p.z + root_z);
  const double z_shift = min_z < kMinJointDepth ? kMinJointDepth - min_z : 0.0;

  cand.pose3d.resize(nk);
  for (int k = 0; k < nk; ++k)
    cand.pose3d[k] = {local[k].x, local[k].y, local[k].z + root_z + z_shift};

  // Lateral placement: intersect every joint's in-frame interval so the
  // whole person fits when the frame allows it, otherwise center it.
  double lo_x = -std::numeric_limits<double>::infinity(), hi_x = -lo_x;
  double lo_y = lo_x, hi_y = hi_x;
  for (const auto& p : cand.pose3d) {
    lo_x = std::max(lo_x, (kFrameInset - cam.cx) * p.z / cam.fx - p.x);
    hi_x = std::min(hi_x, (cam.width - kFrameInset - cam.cx) * p.z / cam.fx - p.x);
    lo_y = std::max(lo_y, (kFrameInset - cam.cy) * p.z / cam.fy - p.y);
    hi_y = std::min(hi_y, (cam.height - kFrameInset - cam.cy) * p.z / cam.fy - p.y);
  }
  const double dx = lo_x <= hi_x ? rng.uniform(lo_x, hi_x) : 0.5 * (lo_x + hi_x);
  const double dy = lo_y <= hi_y ? rng.uniform(lo_y, hi_y) : 0.5 * (lo_y + hi_y);
  for (auto& p : cand.pose3d) {
    p.x += dx;
    p.y += dy;
  }

  cand.root_z = cand.pose3d[skeleton.root_index].z;
  cand.pose2d.resize(nk);
  cand.visibility.resize(nk);
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
  double xmax = -xmin, ymax = -xmin;
  for (int k = 0; k < nk; ++k) {
    cand.pose2d[k] = cam.project(cand.pose3d[k]);
    cand.visibility[k] = cam.in_frame(cand.pose2d[k]) ? 1 : 0;
    xmin = std::min(xmin, cand.pose2d[k].x);
    xmax = std::max(xmax, cand.pose2d[k].x);
    ymin = std::min(ymin, cand.pose2d[k].y);
    ymax = std::max(ymax, cand.pose2d[k].y);
  }
  const double mx = kBoxMargin * (xmax - xmin);
  const double my = kBoxMargin * (ymax - ymin);
  cand.cover_box = {xmin - mx, ymin - my, xmax + mx, ymax + my};
  return cand;
}

}  // namespace

Camera default_camera() { return {220.0, 220.0, 128.0, 80.0, 256, 160}; }

SceneSample generate_scene(uint64_t seed, const GenerateOptions& opts,
                           const Skeleton& skeleton) {
  if (!(skeleton == default_skeleton()))
    throw std::invalid_argument("generate_scene: only the default skeleton is supported");
  check_options(opts);

  Rng rng(splitmix64(seed));
  const int n = rng.uniform_int(opts.n_people_min, opts.n_people_max);

  std::vector<Candidate> people;
  people.reserve(n);
  for (int p = 0; p < n; ++p) people.push_back(sample_person(rng, opts, skeleton));

  // Occlusion by a nearer person's silhouette box, then random dropout.
  const double cover_prob = std::min(1.0, 3.0 * opts.occlusion_rate);
  for (int p = 0; p < n; ++p)
    for (int k = 0; k < skeleton.n_joints; ++k) {
      if (!people[p].visibility[k]) continue;
      for (int q = 0; q < n; ++q) {
        if (q == p || people[q].root_z >= people[p].root_z) continue;
        if (!people[q].cover_box.contains(people[p].pose2d[k])) continue;
        if (rng.bernoulli(cover_prob)) {
          people[p].visibility[k] = 0;
          break;
        }
      }
    }
  for (int p = 0; p < n; ++p)
    for (int k = 0; k < skeleton.n_joints; ++k) {
      if (!people[p].visibility[k]) continue;
      if (rng.bernoulli(opts.occlusion_rate)) people[p].visibility[k] = 0;
    }

  SceneSample sample;
  sample.camera = opts.camera;
  for (auto& person : people) {
    if (count_visible(person.visibility) < kMinVisibleJoints) continue;
    const Box2D box = box_from_visible(person.pose2d, person.visibility);
    const double tight_w = box.width() / (1.0 + 2.0 * kBoxMargin);
    const double tight_h = box.height() / (1.0 + 2.0 * kBoxMargin);
    if (tight_w < kMinBoxExtent && tight_h < kMinBoxExtent) continue;
    sample.scene.boxes.push_back(box);
    sample.scene.poses2d.push_back(std::move(person.pose2d));
    sample.scene.poses3d.push_back(std::move(person.pose3d));
    sample.scene.visibility.push_back(std::move(person.visibility));
    sample.root_depth_m.push_back(person.root_z);
  }
  return sample;
}

std::vector<SceneSample> generate_dataset(uint64_t seed, int n_images,
                                          const GenerateOptions& opts,
                                          const Skeleton& skeleton) {
  if (n_images < 0) throw std::invalid_argument("generate_dataset: negative image count");
  std::vector<SceneSample> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    const uint64_t scene_seed =
        splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(i + 1)));
    out.push_back(generate_scene(scene_seed, opts, skeleton));
    out.back().image_id = i;
  }
  return out;
}

SceneSample augment(const SceneSample& sample, uint64_t seed,
                    std::pair<double, double> scale_range, bool random_crop) {
  if (!(scale_range.first > 0.0) || scale_range.second < scale_range.first)
    throw std::invalid_argument("augment: bad scale range");

  Rng rng(splitmix64(seed));
  const double s = rng.uniform(scale_range.first, scale_range.second);
  double ox = 0.0, oy = 0.0;
  if (random_crop) {
    const double slack_x = s * sample.camera.width - sample.camera.width;
    const double slack_y = s * sample.camera.height - sample.camera.height;
    ox = slack_x >= 0.0 ? rng.uniform(0.0, slack_x) : rng.uniform(slack_x, 0.0);
    oy = slack_y >= 0.0 ? rng.uniform(0.0, slack_y) : rng.uniform(slack_y, 0.0);
  }

  SceneSample out;
  out.image_id = sample.image_id;
  out.camera = sample.camera;
  out.camera.fx = s * sample.camera.fx;
  out.camera.fy = s * sample.camera.fy;
  out.camera.cx = s * sample.camera.cx - ox;
  out.camera.cy = s * sample.camera.cy - oy;

  for (int p = 0; p < sample.n_people(); ++p) {
    std::vector<Point2D> pose2d(sample.scene.poses2d[p].size());
    std::vector<uint8_t> visibility(sample.scene.visibility[p].size());
    for (size_t k = 0; k < pose2d.size(); ++k) {
      pose2d[k] = {s * sample.scene.poses2d[p][k].x - ox,
                   s * sample.scene.poses2d[p][k].y - oy};
      visibility[k] =
          (sample.scene.visibility[p][k] && out.camera.in_frame(pose2d[k])) ? 1 : 0;
    }
    if (count_visible(visibility) == 0) continue;
    out.scene.boxes.push_back(box_from_visible(pose2d, visibility));
    out.scene.poses2d.push_back(std::move(pose2d));
    out.scene.poses3d.push_back(sample.scene.poses3d[p]);
    out.scene.visibility.push_back(std::move(visibility));
    out.root_depth_m.push_back(sample.root_depth_m[p]);
  }
  return out;
}

void SceneSample::validate(const Skeleton& skeleton) const {
  scene.validate();
  if (root_depth_m.size() != static_cast<size_t>(scene.n_people()))
    throw std::invalid_argument("scene sample: root depth list size disagrees");
  for (int p = 0; p < scene.n_people(); ++p) {
    if (static_cast<int>(scene.poses3d[p].size()) != skeleton.n_joints)
      throw std::invalid_argument("scene sample: joint count disagrees with skeleton");
    if (!(root_depth_m[p] > 0.0))
      throw std::invalid_argument("scene sample: non-positive root depth");
    if (root_depth_m[p] != scene.poses3d[p][skeleton.root_index].z)
      throw std::invalid_argument("scene sample: root depth disagrees with the 3D pose");
    for (int k = 0; k < skeleton.n_joints; ++k) {
      const Point2D proj = camera.project(scene.poses3d[p][k]);
      if (std::abs(proj.x - scene.poses2d[p][k].x) > 1e-6 ||
          std::abs(proj.y - scene.poses2d[p][k].y) > 1e-6)
        throw std::invalid_argument("scene sample: 2D pose is not the projection of 3D");
      if (scene.visibility[p][k] && !camera.in_frame(scene.poses2d[p][k]))
        throw std::invalid_argument("scene sample: visible joint outside the frame");
    }
    if (count_visible(scene.visibility[p]) > 0) {
      const Box2D expect = box_from_visible(scene.poses2d[p], scene.visibility[p]);
      const Box2D& got = scene.boxes[p];
      if (std::abs(expect.xmin - got.xmin) > 1e-9 || std::abs(expect.ymin - got.ymin) > 1e-9 ||
          std::abs(expect.xmax - got.xmax) > 1e-9 || std::abs(expect.ymax - got.ymax) > 1e-9)
        throw std::invalid_argument("scene sample: box disagrees with its visible joints");
    }
  }
}

void save_dataset(const std::vector<SceneSample>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& sample : samples) {
    nlohmann::json j;
    j["schema_version"] = kDatasetSchemaVersion;
    j["image_id"] = sample.image_id;
    j["camera"] = {{"fx", sample.camera.fx}, {"fy", sample.camera.fy},
                   {"cx", sample.camera.cx}, {"cy", sample.camera.cy},
                   {"width", sample.camera.width}, {"height", sample.camera.height}};
    j["people"] = nlohmann::json::array();
    for (int p = 0; p < sample.n_people(); ++p) {
      nlohmann::json jp;
      const Box2D& b = sample.scene.boxes[p];
      jp["box"] = {b.xmin, b.ymin, b.xmax, b.ymax};
      jp["pose2d"] = nlohmann::json::array();
      for (const auto& pt : sample.scene.poses2d[p]) jp["pose2d"].push_back({pt.x, pt.y});
      jp["pose3d"] = nlohmann::json::array();
      for (const auto& pt : sample.scene.poses3d[p]) jp["pose3d"].push_back({pt.x, pt.y, pt.z});
      jp["visibility"] = nlohmann::json::array();
      for (uint8_t v : sample.scene.visibility[p]) jp["visibility"].push_back(v ? 1 : 0);
      jp["root_depth_m"] = sample.root_depth_m[p];
      j["people"].push_back(jp);
    }
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<SceneSample> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<SceneSample> samples;
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
      const int version = j.at("schema_version").get<int>();
      if (version != kDatasetSchemaVersion)
        throw IoError(where + ": unsupported schema_version " + std::to_string(version));
      SceneSample sample;
      sample.image_id = j.at("image_id").get<int64_t>();
      const auto& jc = j.at("camera");
      sample.camera = {jc.at("fx").get<double>(),    jc.at("fy").get<double>(),
                       jc.at("cx").get<double>(),    jc.at("cy").get<double>(),
                       jc.at("width").get<int>(),    jc.at("height").get<int>()};
      for (const auto& jp : j.at("people")) {
        const auto& b = jp.at("box");
        if (!b.is_array() || b.size() != 4)
          throw IoError(where + ": box must have 4 numbers");
        sample.scene.boxes.push_back(
            {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
        std::vector<Point2D> p2;
        for (const auto& pt : jp.at("pose2d")) {
          if (!pt.is_array() || pt.size() != 2)
            throw IoError(where + ": pose2d entries must be [x, y]");
          p2.push_back({pt[0].get<double>(), pt[1].get<double>()});
        }
        std::vector<Point3D> p3;
        for (const auto& pt : jp.at("pose3d")) {
          if (!pt.is_array() || pt.size() != 3)
            throw IoError(where + ": pose3d entries must be [x, y, z]");
          p3.push_back({pt[0].get<double>(), pt[1].get<double>(), pt[2].get<double>()});
        }
        std::vector<uint8_t> vis;
        for (const auto& v : jp.at("visibility")) vis.push_back(v.get<int>() ? 1 : 0);
        sample.scene.poses2d.push_back(std::move(p2));
        sample.scene.poses3d.push_back(std::move(p3));
        sample.scene.visibility.push_back(std::move(vis));
        sample.root_depth_m.push_back(jp.at("root_depth_m").get<double>());
      }
      sample.scene.validate();
      samples.push_back(std::move(sample));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": " + e.what());
    }
  }
  return samples;
}

}  // namespace anchorpose
