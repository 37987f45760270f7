#include "anchorpose/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "anchorpose/errors.hpp"
#include "anchorpose/rng.hpp"

namespace anchorpose {

namespace {

/// IoU of two co-centered boxes given only their sizes.
double size_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  const double uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void sort_by_area(std::vector<std::pair<double, double>>& priors) {
  std::sort(priors.begin(), priors.end(), [](const auto& a, const auto& b) {
    const double aa = a.first * a.second;
    const double ab = b.first * b.second;
    if (aa != ab) return aa < ab;
    return a < b;
  });
}

}  // namespace

std::string anchor_set_to_json(const AnchorSet& set) {
  nlohmann::json j;
  j["priors"] = nlohmann::json::array();
  for (const auto& [w, h] : set.priors) j["priors"].push_back({w, h});
  return j.dump();
}

AnchorSet anchor_set_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("anchor set: invalid JSON: ") + e.what());
  }
  if (!j.contains("priors") || !j["priors"].is_array())
    throw IoError("anchor set: missing \"priors\" array");
  AnchorSet set;
  for (const auto& p : j["priors"]) {
    if (!p.is_array() || p.size() != 2)
      throw IoError("anchor set: each prior must be a [w, h] pair");
    const double w = p[0].get<double>();
    const double h = p[1].get<double>();
    if (!(w > 0.0) || !(h > 0.0)) throw IoError("anchor set: prior sizes must be positive");
    set.priors.emplace_back(w, h);
  }
  if (set.priors.empty()) throw IoError("anchor set: priors must be non-empty");
  sort_by_area(set.priors);
  return set;
}

void save_anchor_set(const AnchorSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << anchor_set_to_json(set) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

AnchorSet load_anchor_set(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return anchor_set_from_json(buf.str());
}

AnchorBox anchor_at(const AnchorGrid& grid, int i, int j, int a) {
  if (i < 0 || i >= grid.height || j < 0 || j >= grid.width || a < 0 || a >= grid.n_anchors())
    throw std::out_of_range("anchor_at: index out of range");
  const auto& [w, h] = grid.priors.priors[a];
  return {(j + 0.5) * grid.stride, (i + 0.5) * grid.stride, w, h};
}

void GroundTruthScene::validate() const {
  const size_t n = boxes.size();
  if (poses2d.size() != n || poses3d.size() != n || visibility.size() != n)
    throw std::invalid_argument("scene: per-person lists must have equal length");
  for (size_t p = 0; p < n; ++p) {
    if (poses2d[p].size() != poses3d[p].size() || poses2d[p].size() != visibility[p].size())
      throw std::invalid_argument("scene: per-joint arrays must have equal length");
    if (!boxes[p].valid()) throw std::invalid_argument("scene: invalid box");
  }
}

MatchResult match(const AnchorGrid& grid, const GroundTruthScene& scene) {
  scene.validate();
  MatchResult m;
  m.height = grid.height;
  m.width = grid.width;
  m.n_anchors = grid.n_anchors();
  const int64_t total = grid.cell_count();
  m.match_index.assign(total, -1);
  m.pono.assign(total, 0.0);
  m.positive_mask.assign(total, 0);
  m.boxes = scene.boxes;
  m.poses2d = scene.poses2d;
  m.poses3d = scene.poses3d;
  m.visibility = scene.visibility;

  const int n = scene.n_people();
  if (n == 0) return m;

  // Pass 1: per-anchor argmax over ground truths, lowest index on ties.
  std::vector<double> best_iou(total, 0.0);
  std::vector<double> gt_max(n, 0.0);  // best IoU among anchors matched to each gt
  for (int i = 0; i < grid.height; ++i) {
    for (int j = 0; j < grid.width; ++j) {
      for (int a = 0; a < m.n_anchors; ++a) {
        const Box2D abox = anchor_at(grid, i, j, a).to_box();
        const int64_t idx = m.flat(i, j, a);
        for (int g = 0; g < n; ++g) {
          const double v = iou(abox, scene.boxes[g]);
          if (v > best_iou[idx]) {
            best_iou[idx] = v;
            m.match_index[idx] = g;
          }
        }
        const int32_t g = m.match_index[idx];
        if (g >= 0 && best_iou[idx] > gt_max[g]) gt_max[g] = best_iou[idx];
      }
    }
  }

  // Pass 2: normalise by the per-ground-truth maximum.
  for (int64_t idx = 0; idx < total; ++idx) {
    const int32_t g = m.match_index[idx];
    if (g < 0) continue;
    m.pono[idx] = best_iou[idx] / gt_max[g];
    if (m.pono[idx] > 0.5) {
      m.positive_mask[idx] = 1;
      ++m.n_positive;
    }
  }
  for (int g = 0; g < n; ++g)
    if (gt_max[g] == 0.0) ++m.n_unmatched_gts;
  return m;
}

AnchorSet cluster_anchors(const std::vector<Box2D>& boxes, int n_anchors, int max_iters,
                          uint64_t seed) {
  if (boxes.empty()) throw std::invalid_argument("cluster_anchors: empty box list");
  if (n_anchors < 1) throw std::invalid_argument("cluster_anchors: n_anchors must be >= 1");

  std::vector<std::pair<double, double>> sizes;
  sizes.reserve(boxes.size());
  for (const auto& b : boxes) {
    if (!b.valid() || b.width() <= 0.0 || b.height() <= 0.0)
      throw std::invalid_argument("cluster_anchors: boxes must have positive size");
    sizes.emplace_back(b.width(), b.height());
  }
  {
    std::set<std::pair<double, double>> distinct(sizes.begin(), sizes.end());
    if (static_cast<size_t>(n_anchors) > distinct.size())
      throw std::invalid_argument("cluster_anchors: n_anchors exceeds distinct box sizes");
  }

  const int k = n_anchors;
  const auto dist = [](const std::pair<double, double>& s, const std::pair<double, double>& c) {
    return 1.0 - size_iou(s.first, s.second, c.first, c.second);
  };

  // k-means++ style seeding on the 1 - IoU distance.
  Rng rng(splitmix64(seed));
  std::vector<std::pair<double, double>> centroids;
  centroids.push_back(sizes[rng.next() % sizes.size()]);
  std::vector<double> d2(sizes.size());
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (size_t s = 0; s < sizes.size(); ++s) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, dist(sizes[s], c));
      d2[s] = best * best;
      total += d2[s];
    }
    size_t pick = 0;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      for (size_t s = 0; s < sizes.size(); ++s) {
        acc += d2[s];
        if (u < acc) {
          pick = s;
          break;
        }
        pick = s;
      }
    } else {
      // All points coincide with a centroid; pick the first unused distinct size.
      for (size_t s = 0; s < sizes.size(); ++s) {
        if (std::find(centroids.begin(), centroids.end(), sizes[s]) == centroids.end()) {
          pick = s;
          break;
        }
      }
    }
    centroids.push_back(sizes[pick]);
  }

  const auto objective = [&](const std::vector<std::pair<double, double>>& cs) {
    double total = 0.0;
    for (const auto& s : sizes) {
      double best = 0.0;
      for (const auto& c : cs) best = std::max(best, size_iou(s.first, s.second, c.first, c.second));
      total += best;
    }
    return total / static_cast<double>(sizes.size());
  };

  std::vector<int> assign(sizes.size(), -1);
  double prev_quality = objective(centroids);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (size_t s = 0; s < sizes.size(); ++s) {
      int best_c = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = dist(sizes[s], centroids[c]);
        if (d < best_d) {
          best_d = d;
          best_c = c;
        }
      }
      if (assign[s] != best_c) {
        assign[s] = best_c;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    auto next = centroids;
    std::vector<double> wsum(k, 0.0), hsum(k, 0.0);
    std::vector<int> count(k, 0);
    for (size_t s = 0; s < sizes.size(); ++s) {
      wsum[assign[s]] += sizes[s].first;
      hsum[assign[s]] += sizes[s].second;
      ++count[assign[s]];
    }
    for (int c = 0; c < k; ++c)
      if (count[c] > 0) next[c] = {wsum[c] / count[c], hsum[c] / count[c]};

    // The mean update is not guaranteed to improve the IoU objective, so the
    // update is only kept while the objective does not regress.
    const double quality = objective(next);
    if (quality < prev_quality) break;
    centroids = std::move(next);
    prev_quality = quality;
  }

  AnchorSet out;
  out.priors = std::move(centroids);
  sort_by_area(out.priors);
  return out;
}

double mean_best_iou(const std::vector<Box2D>& boxes, const AnchorSet& set) {
  if (boxes.empty()) throw std::invalid_argument("mean_best_iou: empty box list");
  double total = 0.0;
  for (const auto& b : boxes) {
    double best = 0.0;
    for (const auto& [w, h] : set.priors) best = std::max(best, size_iou(b.width(), b.height(), w, h));
    total += best;
  }
  return total / static_cast<double>(boxes.size());
}

}  // namespace anchorpose
