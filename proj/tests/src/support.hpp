#pragma once

// Shared helpers for the test binaries: scratch directories, file slurping,
// and random geometry generators driven by the library's own deterministic
// RNG so every test run is reproducible.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "anchorpose/anchors.hpp"
#include "anchorpose/geometry.hpp"
#include "anchorpose/rng.hpp"

namespace testsupport {

/// Unique scratch directory, removed (recursively) on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<uint64_t> counter{0};
    const uint64_t id = counter.fetch_add(1);
    path_ = std::filesystem::temp_directory_path() /
            ("anchorpose-test-" + std::to_string(::getpid()) + "-" + std::to_string(id));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline anchorpose::Box2D random_box(anchorpose::Rng& rng, double lo, double hi,
                                    double min_size = 1.0, double max_size = 40.0) {
  const double x = rng.uniform(lo, hi);
  const double y = rng.uniform(lo, hi);
  const double w = rng.uniform(min_size, max_size);
  const double h = rng.uniform(min_size, max_size);
  return {x, y, x + w, y + h};
}

/// A plausible ground-truth scene with random boxes and matching random
/// poses; poses need not be projection-consistent, only shape-consistent,
/// which is all the matcher and losses require.
inline anchorpose::GroundTruthScene random_scene(anchorpose::Rng& rng, int n_people, int n_joints,
                                                 double frame_w, double frame_h) {
  anchorpose::GroundTruthScene scene;
  for (int p = 0; p < n_people; ++p) {
    const anchorpose::Box2D box =
        random_box(rng, 0.0, 0.75 * std::min(frame_w, frame_h), 4.0,
                   0.5 * std::min(frame_w, frame_h));
    scene.boxes.push_back(box);
    std::vector<anchorpose::Point2D> pose2d;
    std::vector<anchorpose::Point3D> pose3d;
    std::vector<uint8_t> vis;
    for (int k = 0; k < n_joints; ++k) {
      pose2d.push_back({rng.uniform(box.xmin, box.xmax), rng.uniform(box.ymin, box.ymax)});
      pose3d.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(2.0, 10.0)});
      vis.push_back(rng.uniform() < 0.85 ? 1 : 0);
    }
    scene.poses2d.push_back(std::move(pose2d));
    scene.poses3d.push_back(std::move(pose3d));
    scene.visibility.push_back(std::move(vis));
  }
  return scene;
}

inline anchorpose::AnchorGrid small_grid(int h, int w, double stride,
                                         std::vector<std::pair<double, double>> priors) {
  anchorpose::AnchorGrid grid;
  grid.height = h;
  grid.width = w;
  grid.stride = stride;
  grid.priors.priors = std::move(priors);
  return grid;
}

}  // namespace testsupport
