#include "anchorpose/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace anchorpose {

double iou(const Box2D& a, const Box2D& b) {
  const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

double unit_square_iou(const Point2D& p, const Point2D& q) {
  const double ox = std::max(0.0, 1.0 - std::abs(p.x - q.x));
  const double oy = std::max(0.0, 1.0 - std::abs(p.y - q.y));
  const double inter = ox * oy;
  return inter / (2.0 - inter);
}

Point2D image_to_anchor(const Point2D& p, const AnchorBox& a) {
  return {(p.x - a.center_x) / a.width, (p.y - a.center_y) / a.height};
}

Point2D anchor_to_image(const Point2D& p, const AnchorBox& a) {
  return {p.x * a.width + a.center_x, p.y * a.height + a.center_y};
}

Box2D decode_box(const AnchorBox& a, std::span<const double, 4> offsets) {
  return decode_box_grad(a, offsets).box;
}

DecodeJacobian decode_box_grad(const AnchorBox& a, std::span<const double, 4> offsets) {
  const double tw = std::clamp(offsets[2], -kOffsetLogClamp, kOffsetLogClamp);
  const double th = std::clamp(offsets[3], -kOffsetLogClamp, kOffsetLogClamp);
  const bool tw_clamped = offsets[2] != tw;
  const bool th_clamped = offsets[3] != th;

  const double cx = a.center_x + offsets[0] * a.width;
  const double cy = a.center_y + offsets[1] * a.height;
  const double w = a.width * std::exp(tw);
  const double h = a.height * std::exp(th);

  DecodeJacobian j;
  j.box = {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  j.d_x_dtx = a.width;
  j.d_y_dty = a.height;
  if (!tw_clamped) {
    j.d_x0_dtw = -0.5 * w;
    j.d_x1_dtw = 0.5 * w;
  }
  if (!th_clamped) {
    j.d_y0_dth = -0.5 * h;
    j.d_y1_dth = 0.5 * h;
  }
  return j;
}

BoxIouGrad iou_grad(const Box2D& pred, const Box2D& target) {
  BoxIouGrad g;
  const double ix = std::min(pred.xmax, target.xmax) - std::max(pred.xmin, target.xmin);
  const double iy = std::min(pred.ymax, target.ymax) - std::max(pred.ymin, target.ymin);
  const double inter = (ix > 0.0 && iy > 0.0) ? ix * iy : 0.0;
  const double uni = pred.area() + target.area() - inter;
  if (uni <= 0.0) return g;
  g.iou = inter / uni;

  // d inter / d corner, zero unless the corresponding edge is the binding one.
  std::array<double, 4> d_inter{};
  if (inter > 0.0) {
    if (pred.xmin > target.xmin) d_inter[0] = -iy;
    if (pred.ymin > target.ymin) d_inter[1] = -ix;
    if (pred.xmax < target.xmax) d_inter[2] = iy;
    if (pred.ymax < target.ymax) d_inter[3] = ix;
  }
  const std::array<double, 4> d_area = {-pred.height(), -pred.width(),
                                        pred.height(), pred.width()};
  const double inv_u2 = 1.0 / (uni * uni);
  for (int c = 0; c < 4; ++c) {
    // iou = inter/union, union = areaP + areaG - inter.
    g.d_corners[c] = (d_inter[c] * (uni + inter) - inter * d_area[c]) * inv_u2;
  }
  return g;
}

UnitSquareIouGrad unit_square_iou_grad(const Point2D& pred, const Point2D& target) {
  const double dx = pred.x - target.x;
  const double dy = pred.y - target.y;
  const double ox = std::max(0.0, 1.0 - std::abs(dx));
  const double oy = std::max(0.0, 1.0 - std::abs(dy));
  const double inter = ox * oy;
  const double denom = 2.0 - inter;

  UnitSquareIouGrad g;
  g.iou = inter / denom;
  // d iou / d inter with union = 2 - inter.
  const double d_iou_d_inter = 2.0 / (denom * denom);
  const double sx = (dx > 0.0) ? -1.0 : (dx < 0.0 ? 1.0 : 0.0);
  const double sy = (dy > 0.0) ? -1.0 : (dy < 0.0 ? 1.0 : 0.0);
  if (ox > 0.0 && ox < 1.0) g.dx = d_iou_d_inter * oy * sx;
  if (oy > 0.0 && oy < 1.0) g.dy = d_iou_d_inter * ox * sy;
  // ox == 1 (dx == 0) sits on the kink; the symmetric subderivative 0 is used.
  return g;
}

}  // namespace anchorpose
