#pragma once

#include "anchorpose/geometry.hpp"

namespace anchorpose {

/// Pinhole camera. fx, fy, cx, cy in pixels; width/height give the frame.
struct Camera {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  Point2D project(const Point3D& p) const {
    return {fx * p.x / p.z + cx, fy * p.y / p.z + cy};
  }

  bool in_frame(const Point2D& p) const {
    return p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height;
  }

  friend bool operator==(const Camera&, const Camera&) = default;
};

}  // namespace anchorpose
