#pragma once

#include <array>
#include <span>

namespace anchorpose {

struct Point2D {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2D&, const Point2D&) = default;
};

struct Point3D {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Point3D&, const Point3D&) = default;
};

/// Axis-aligned box in corner form. Degenerate (zero-area) boxes are legal
/// and behave as empty sets under IoU.
struct Box2D {
  double xmin = 0.0;
  double ymin = 0.0;
  double xmax = 0.0;
  double ymax = 0.0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double area() const { return width() * height(); }
  Point2D center() const { return {0.5 * (xmin + xmax), 0.5 * (ymin + ymax)}; }
  bool valid() const { return xmax >= xmin && ymax >= ymin; }
  bool contains(const Point2D& p) const {
    return p.x >= xmin && p.x <= xmax && p.y >= ymin && p.y <= ymax;
  }

  friend bool operator==(const Box2D&, const Box2D&) = default;
};

/// Prior box in center-size form. Sizes must be positive.
struct AnchorBox {
  double center_x = 0.0;
  double center_y = 0.0;
  double width = 0.0;
  double height = 0.0;

  Box2D to_box() const {
    return {center_x - 0.5 * width, center_y - 0.5 * height,
            center_x + 0.5 * width, center_y + 0.5 * height};
  }

  friend bool operator==(const AnchorBox&, const AnchorBox&) = default;
};

/// Intersection over union of two corner-form boxes. Returns 0 when the
/// union is empty, so degenerate inputs are safe.
double iou(const Box2D& a, const Box2D& b);

/// IoU of two axis-aligned unit squares centered at p and q. Reaches 0 as
/// soon as the centers are one unit apart along either axis.
double unit_square_iou(const Point2D& p, const Point2D& q);

/// Pixel coordinates -> anchor coordinates: translate to the anchor center,
/// divide by the anchor width and height.
Point2D image_to_anchor(const Point2D& p, const AnchorBox& a);

/// Inverse of image_to_anchor.
Point2D anchor_to_image(const Point2D& p, const AnchorBox& a);

/// Maximum magnitude accepted for the log-size offsets before clamping.
inline constexpr double kOffsetLogClamp = 8.0;

/// Applies (tx, ty, tw, th) to an anchor: the center moves by (tx*w, ty*h),
/// the size scales by (exp(tw), exp(th)) with tw, th clamped to +-8.
Box2D decode_box(const AnchorBox& a, std::span<const double, 4> offsets);

/// IoU of `pred` against `target` together with its derivative in the four
/// corners of `pred`. At touching-edge configurations the one-sided
/// derivative from the box interior is used.
struct BoxIouGrad {
  double iou = 0.0;
  std::array<double, 4> d_corners{};  // d iou / d (xmin, ymin, xmax, ymax)
};
BoxIouGrad iou_grad(const Box2D& pred, const Box2D& target);

/// decode_box plus the nonzero corner partials with respect to the offsets.
/// Both x corners move by anchor.width per unit tx; the tw partials vanish
/// where the clamp is active.
struct DecodeJacobian {
  Box2D box;
  double d_x_dtx = 0.0;   // d xmin/dtx = d xmax/dtx
  double d_y_dty = 0.0;
  double d_x0_dtw = 0.0;
  double d_x1_dtw = 0.0;
  double d_y0_dth = 0.0;
  double d_y1_dth = 0.0;
};
DecodeJacobian decode_box_grad(const AnchorBox& a, std::span<const double, 4> offsets);

/// Unit-square IoU with its derivative in the first point.
struct UnitSquareIouGrad {
  double iou = 0.0;
  double dx = 0.0;
  double dy = 0.0;
};
UnitSquareIouGrad unit_square_iou_grad(const Point2D& pred, const Point2D& target);

}  // namespace anchorpose
