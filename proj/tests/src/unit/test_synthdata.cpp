#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "anchorpose/errors.hpp"
#include "anchorpose/rng.hpp"
#include "anchorpose/synthdata.hpp"
#include "../support.hpp"

using namespace anchorpose;

namespace {

/// Independent re-derivation of the person box rule: tight bound of the
/// visible joints, widened by 5% of the tight extent on each side.
Box2D recompute_box(const std::vector<Point2D>& pose, const std::vector<uint8_t>& vis) {
  double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
  for (size_t k = 0; k < pose.size(); ++k) {
    if (!vis[k]) continue;
    xmin = std::min(xmin, pose[k].x);
    xmax = std::max(xmax, pose[k].x);
    ymin = std::min(ymin, pose[k].y);
    ymax = std::max(ymax, pose[k].y);
  }
  const double mx = 0.05 * (xmax - xmin);
  const double my = 0.05 * (ymax - ymin);
  return {xmin - mx, ymin - my, xmax + mx, ymax + my};
}

/// A hand-built valid sample: one or two people whose 2D joints are placed
/// directly (back-projected to 3D), so tests control exactly where every
/// joint sits in the frame.
SceneSample handmade_sample(const std::vector<std::vector<Point2D>>& people_pixels,
                            double depth) {
  SceneSample s;
  s.camera = default_camera();
  for (const auto& pixels : people_pixels) {
    std::vector<Point2D> p2;
    std::vector<Point3D> p3;
    std::vector<uint8_t> vis;
    for (const Point2D& uv : pixels) {
      const Point3D q{(uv.x - s.camera.cx) * depth / s.camera.fx,
                      (uv.y - s.camera.cy) * depth / s.camera.fy, depth};
      p3.push_back(q);
      p2.push_back(s.camera.project(q));  // exact projection doubles
      vis.push_back(1);
    }
    s.scene.boxes.push_back(recompute_box(p2, vis));
    s.scene.poses2d.push_back(std::move(p2));
    s.scene.poses3d.push_back(std::move(p3));
    s.scene.visibility.push_back(std::move(vis));
    s.root_depth_m.push_back(depth);
  }
  return s;
}

std::vector<Point2D> grid_pixels(double u0, double v0, double du, double dv) {
  std::vector<Point2D> px;
  for (int k = 0; k < 15; ++k)
    px.push_back({u0 + (k % 5) * du, v0 + (k / 5) * dv});
  return px;
}

}  // namespace

TEST_CASE("generation is deterministic: equal structures and equal bytes") {
  const GenerateOptions opts;
  const auto a = generate_dataset(321, 30, opts, default_skeleton());
  const auto b = generate_dataset(321, 30, opts, default_skeleton());
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  testsupport::TempDir tmp;
  save_dataset(a, tmp.file("a.jsonl"));
  save_dataset(b, tmp.file("b.jsonl"));
  CHECK(testsupport::read_file(tmp.file("a.jsonl")) ==
        testsupport::read_file(tmp.file("b.jsonl")));

  const auto c = generate_dataset(322, 30, opts, default_skeleton());
  bool all_equal = c.size() == a.size();
  if (all_equal)
    for (size_t i = 0; i < a.size(); ++i)
      if (!(a[i] == c[i])) all_equal = false;
  CHECK(!all_equal);  // a different seed produces different scenes
}

TEST_CASE("every generated sample passes its structural invariants") {
  GenerateOptions opts;
  opts.occlusion_rate = 0.15;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    CHECK_NOTHROW(s.validate(default_skeleton()));
    CHECK(s.n_people() <= opts.n_people_max);
  }
}

TEST_CASE("projections and boxes agree with an independent recomputation") {
  GenerateOptions opts;
  opts.occlusion_rate = 0.1;
  for (uint64_t seed = 100; seed < 140; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    for (int p = 0; p < s.n_people(); ++p) {
      for (int k = 0; k < 15; ++k) {
        const Point3D& q = s.scene.poses3d[p][k];
        CHECK(q.z > 0.0);
        const Point2D proj{s.camera.fx * q.x / q.z + s.camera.cx,
                           s.camera.fy * q.y / q.z + s.camera.cy};
        CHECK(s.scene.poses2d[p][k].x == doctest::Approx(proj.x).epsilon(1e-12));
        CHECK(s.scene.poses2d[p][k].y == doctest::Approx(proj.y).epsilon(1e-12));
        if (s.scene.visibility[p][k]) {
          CHECK(s.scene.poses2d[p][k].x >= 0.0);
          CHECK(s.scene.poses2d[p][k].x < s.camera.width);
          CHECK(s.scene.poses2d[p][k].y >= 0.0);
          CHECK(s.scene.poses2d[p][k].y < s.camera.height);
        }
      }
      const Box2D want = recompute_box(s.scene.poses2d[p], s.scene.visibility[p]);
      CHECK(s.scene.boxes[p].xmin == doctest::Approx(want.xmin).epsilon(1e-12));
      CHECK(s.scene.boxes[p].ymin == doctest::Approx(want.ymin).epsilon(1e-12));
      CHECK(s.scene.boxes[p].xmax == doctest::Approx(want.xmax).epsilon(1e-12));
      CHECK(s.scene.boxes[p].ymax == doctest::Approx(want.ymax).epsilon(1e-12));
      CHECK(s.root_depth_m[p] == s.scene.poses3d[p][0].z);
    }
  }
}

TEST_CASE("zero occlusion keeps every joint visible; positive occlusion hides some") {
  GenerateOptions opts;
  opts.occlusion_rate = 0.0;
  int64_t joints = 0;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    for (const auto& vis : s.scene.visibility)
      for (const uint8_t v : vis) {
        CHECK(v == 1);
        ++joints;
      }
  }
  CHECK(joints > 1000);

  opts.occlusion_rate = 0.3;
  int64_t hidden = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    for (const auto& vis : s.scene.visibility)
      for (const uint8_t v : vis) hidden += v ? 0 : 1;
  }
  CHECK(hidden > 0);
}

TEST_CASE("root depths are log-uniform: chi-squared within the 1% critical value") {
  GenerateOptions opts;
  opts.occlusion_rate = 0.0;  // nobody is dropped, so the sample is unbiased
  std::vector<double> depths;
  for (uint64_t seed = 0; seed < 600; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    for (const double z : s.root_depth_m) depths.push_back(z);
  }
  REQUIRE(depths.size() > 1000);

  const double lo = std::log(opts.depth_min_m), hi = std::log(opts.depth_max_m);
  std::array<int64_t, 8> counts{};
  for (const double z : depths) {
    CHECK(z > opts.depth_min_m * 0.999);
    CHECK(z < opts.depth_max_m * 1.001);
    int bin = static_cast<int>((std::log(z) - lo) / (hi - lo) * 8.0);
    bin = std::clamp(bin, 0, 7);
    ++counts[bin];
  }
  const double expected = static_cast<double>(depths.size()) / 8.0;
  double chi2 = 0.0;
  for (const int64_t c : counts) {
    const double d = static_cast<double>(c) - expected;
    chi2 += d * d / expected;
  }
  // 7 degrees of freedom, upper 1% point.
  CHECK(chi2 < 18.4753);
}

TEST_CASE("generation options are validated") {
  const Skeleton& sk = default_skeleton();
  GenerateOptions opts;
  opts.n_people_min = 0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.n_people_max = 0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.depth_min_m = 0.0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.depth_max_m = opts.depth_min_m / 2.0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.occlusion_rate = -0.1;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.occlusion_rate = 1.0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);
  opts = {};
  opts.camera.fx = 0.0;
  CHECK_THROWS_AS(generate_scene(1, opts, sk), std::invalid_argument);

  Skeleton other;
  other.n_joints = 2;
  other.edges = {{0, 1}};
  other.joint_names = {"a", "b"};
  CHECK_THROWS_AS(generate_scene(1, {}, other), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(1, -1, {}, sk), std::invalid_argument);
}

TEST_CASE("identity augmentation returns the sample unchanged") {
  const GenerateOptions opts;
  for (uint64_t seed = 10; seed < 40; ++seed) {
    const SceneSample s = generate_scene(seed, opts, default_skeleton());
    const SceneSample same = augment(s, seed * 7 + 1, {1.0, 1.0}, false);
    CHECK(same == s);
  }
}

TEST_CASE("pure upscaling doubles the annotations of an in-quadrant person") {
  // All joints in the top-left quadrant, so a 2x scale keeps them in frame.
  const SceneSample s = handmade_sample({grid_pixels(20.0, 15.0, 10.0, 12.0)}, 5.0);
  s.validate(default_skeleton());

  const SceneSample out = augment(s, 99, {2.0, 2.0}, false);
  out.validate(default_skeleton());
  REQUIRE(out.n_people() == 1);
  CHECK(out.camera.fx == 2.0 * s.camera.fx);
  CHECK(out.camera.cx == 2.0 * s.camera.cx);
  for (int k = 0; k < 15; ++k) {
    CHECK(out.scene.poses2d[0][k].x == doctest::Approx(2.0 * s.scene.poses2d[0][k].x).epsilon(1e-12));
    CHECK(out.scene.poses2d[0][k].y == doctest::Approx(2.0 * s.scene.poses2d[0][k].y).epsilon(1e-12));
    CHECK(out.scene.visibility[0][k] == 1);
    // 3D is untouched by design: the camera absorbs the scale.
    CHECK(out.scene.poses3d[0][k] == s.scene.poses3d[0][k]);
  }
  CHECK(out.scene.boxes[0].area() == doctest::Approx(4.0 * s.scene.boxes[0].area()).epsilon(1e-9));
  CHECK(out.root_depth_m[0] == s.root_depth_m[0]);
}

TEST_CASE("upscaling drops out-of-frame joints and whole people, and rebuilds boxes") {
  // Person A: one stray joint near the right edge leaves the frame at 3x.
  std::vector<Point2D> a = grid_pixels(20.0, 15.0, 5.0, 8.0);
  a[7] = {100.0, 20.0};  // 3x -> x = 300 >= 256: invisible
  // Person B: entirely in the right half, fully out of frame at 3x.
  const std::vector<Point2D> b = grid_pixels(160.0, 60.0, 5.0, 8.0);

  const SceneSample s = handmade_sample({a, b}, 6.0);
  const SceneSample out = augment(s, 5, {3.0, 3.0}, false);
  REQUIRE(out.n_people() == 1);  // person B lost every joint

  std::vector<uint8_t> expect_vis(15, 1);
  expect_vis[7] = 0;
  CHECK(out.scene.visibility[0] == expect_vis);

  std::vector<Point2D> scaled;
  for (const Point2D& p : s.scene.poses2d[0]) scaled.push_back({3.0 * p.x, 3.0 * p.y});
  const Box2D want = recompute_box(scaled, expect_vis);
  CHECK(out.scene.boxes[0].xmin == doctest::Approx(want.xmin).epsilon(1e-12));
  CHECK(out.scene.boxes[0].xmax == doctest::Approx(want.xmax).epsilon(1e-12));
  CHECK(out.scene.boxes[0].ymin == doctest::Approx(want.ymin).epsilon(1e-12));
  CHECK(out.scene.boxes[0].ymax == doctest::Approx(want.ymax).epsilon(1e-12));
}

TEST_CASE("random scale-and-crop agrees with a full independent replay") {
  const GenerateOptions opts;
  int64_t dropped_people = 0, hidden_joints = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const SceneSample s = generate_scene(seed + 500, opts, default_skeleton());
    const SceneSample out = augment(s, seed, {0.5, 1.6}, true);
    out.validate(default_skeleton());

    // Recover the transform from the camera adjustment.
    const double scale = out.camera.fx / s.camera.fx;
    const double ox = scale * s.camera.cx - out.camera.cx;
    const double oy = scale * s.camera.cy - out.camera.cy;
    CHECK(out.camera.fy == doctest::Approx(scale * s.camera.fy).epsilon(1e-12));

    int op = 0;  // output person cursor
    for (int p = 0; p < s.n_people(); ++p) {
      std::vector<Point2D> moved;
      std::vector<uint8_t> vis;
      int n_vis = 0;
      for (int k = 0; k < 15; ++k) {
        const Point2D q{scale * s.scene.poses2d[p][k].x - ox,
                        scale * s.scene.poses2d[p][k].y - oy};
        moved.push_back(q);
        const bool in = q.x >= 0.0 && q.x < out.camera.width && q.y >= 0.0 &&
                        q.y < out.camera.height;
        const uint8_t v = (s.scene.visibility[p][k] && in) ? 1 : 0;
        vis.push_back(v);
        n_vis += v;
        if (s.scene.visibility[p][k] && !v) ++hidden_joints;
      }
      if (n_vis == 0) {
        ++dropped_people;
        continue;  // the whole person must be absent from the output
      }
      REQUIRE(op < out.n_people());
      CHECK(out.scene.visibility[op] == vis);
      for (int k = 0; k < 15; ++k) {
        CHECK(out.scene.poses2d[op][k].x == doctest::Approx(moved[k].x).epsilon(1e-12));
        CHECK(out.scene.poses2d[op][k].y == doctest::Approx(moved[k].y).epsilon(1e-12));
        CHECK(out.scene.poses3d[op][k] == s.scene.poses3d[p][k]);
      }
      const Box2D want = recompute_box(moved, vis);
      CHECK(out.scene.boxes[op].xmin == doctest::Approx(want.xmin).epsilon(1e-12));
      CHECK(out.scene.boxes[op].xmax == doctest::Approx(want.xmax).epsilon(1e-12));
      CHECK(out.root_depth_m[op] == s.root_depth_m[p]);
      ++op;
    }
    CHECK(op == out.n_people());
  }
  // The sweep must actually exercise the crop/drop paths.
  CHECK(hidden_joints > 0);
  MESSAGE("augment replay: ", dropped_people, " people dropped, ", hidden_joints,
          " joints hidden");

  const SceneSample s = generate_scene(1, opts, default_skeleton());
  CHECK_THROWS_AS(augment(s, 1, {0.0, 1.0}, false), std::invalid_argument);
  CHECK_THROWS_AS(augment(s, 1, {1.5, 1.0}, false), std::invalid_argument);
}

TEST_CASE("datasets round-trip through JSONL exactly") {
  GenerateOptions opts;
  opts.occlusion_rate = 0.1;
  const auto samples = generate_dataset(777, 100, opts, default_skeleton());
  testsupport::TempDir tmp;
  const std::string path = tmp.file("data.jsonl");
  save_dataset(samples, path);
  const auto loaded = load_dataset(path);
  REQUIRE(loaded.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) CHECK(loaded[i] == samples[i]);
}

TEST_CASE("dataset loading reports bad lines, versions, and missing files") {
  testsupport::TempDir tmp;
  const std::string path = tmp.file("data.jsonl");
  const auto samples = generate_dataset(9, 1, {}, default_skeleton());
  save_dataset(samples, path);

  // Truncated second line.
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"schema_version\":1,\"image_id\":7\n";
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_dataset(path)), doctest::Contains(":2"),
                       IoError);

  // Unsupported schema version.
  {
    std::string text(testsupport::read_file(tmp.file("data.jsonl")));
    // keep only the first line, then bump its version
    text = text.substr(0, text.find('\n') + 1);
    const size_t at = text.find("\"schema_version\":1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 18, "\"schema_version\":9");
    std::ofstream out(tmp.file("v9.jsonl"));
    out << text;
  }
  CHECK_THROWS_WITH_AS(static_cast<void>(load_dataset(tmp.file("v9.jsonl"))),
                       doctest::Contains("schema_version"), IoError);

  CHECK_THROWS_AS(static_cast<void>(load_dataset(tmp.file("absent.jsonl"))), IoError);

  {
    std::ofstream out(tmp.file("empty.jsonl"));
  }
  CHECK(load_dataset(tmp.file("empty.jsonl")).empty());
}
