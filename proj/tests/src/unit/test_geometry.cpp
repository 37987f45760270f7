#include <algorithm>
#include <array>
#include <cmath>

#include "doctest.h"

#include "anchorpose/geometry.hpp"
#include "anchorpose/rng.hpp"

using namespace anchorpose;

TEST_CASE("box iou identities") {
  const Box2D a{0.0, 0.0, 2.0, 2.0};
  CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  const Box2D far_away{10.0, 10.0, 12.0, 12.0};
  CHECK(iou(a, far_away) == 0.0);

  // Hand arithmetic: inter = 1x1 = 1, union = 4 + 4 - 1 = 7.
  const Box2D b{1.0, 1.0, 3.0, 3.0};
  CHECK(iou(a, b) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
}

TEST_CASE("box iou degenerate and symmetry/bounds properties") {
  const Box2D point{1.0, 1.0, 1.0, 1.0};
  CHECK(iou(point, point) == 0.0);  // empty union -> defined as 0

  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Box2D a{rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0), 0.0, 0.0};
    Box2D aa = a;
    aa.xmax = aa.xmin + rng.uniform(0.5, 30.0);
    aa.ymax = aa.ymin + rng.uniform(0.5, 30.0);
    Box2D bb{rng.uniform(0.0, 50.0), rng.uniform(0.0, 50.0), 0.0, 0.0};
    bb.xmax = bb.xmin + rng.uniform(0.5, 30.0);
    bb.ymax = bb.ymin + rng.uniform(0.5, 30.0);

    const double ab = iou(aa, bb);
    CHECK(ab == iou(bb, aa));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);

    // Scale invariance: scaling both boxes by s > 0 preserves IoU.
    const double s = rng.uniform(0.25, 4.0);
    const Box2D as{aa.xmin * s, aa.ymin * s, aa.xmax * s, aa.ymax * s};
    const Box2D bs{bb.xmin * s, bb.ymin * s, bb.xmax * s, bb.ymax * s};
    CHECK(iou(as, bs) == doctest::Approx(ab).epsilon(1e-9));
  }
}

TEST_CASE("unit square iou closed forms") {
  CHECK(unit_square_iou({2.0, 3.0}, {2.0, 3.0}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(unit_square_iou({0.0, 0.0}, {1.0, 0.0}) == 0.0);
  // dx = 0.5: inter = 0.5, union = 2 - 0.5 = 1.5 -> 1/3.
  CHECK(unit_square_iou({0.0, 0.0}, {0.5, 0.0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("unit square iou monotone in each axis displacement and symmetric") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Point2D p{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    const Point2D q{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    CHECK(unit_square_iou(p, q) == unit_square_iou(q, p));

    const double d1 = rng.uniform(0.0, 1.5);
    const double d2 = d1 + rng.uniform(0.0, 1.0);
    CHECK(unit_square_iou({0.0, 0.0}, {d1, 0.3}) >= unit_square_iou({0.0, 0.0}, {d2, 0.3}));
    CHECK(unit_square_iou({0.0, 0.0}, {0.3, d1}) >= unit_square_iou({0.0, 0.0}, {0.3, d2}));
  }
}

TEST_CASE("anchor space transforms") {
  const AnchorBox anchor{10.0, 10.0, 4.0, 2.0};
  const Point2D center_mapped = image_to_anchor({10.0, 10.0}, anchor);
  CHECK(center_mapped.x == 0.0);
  CHECK(center_mapped.y == 0.0);

  const Point2D mapped = image_to_anchor({12.0, 11.0}, anchor);
  CHECK(mapped.x == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(mapped.y == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const AnchorBox a{rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0),
                      rng.uniform(0.5, 30.0), rng.uniform(0.5, 30.0)};
    const Point2D p{rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0)};
    const Point2D round = anchor_to_image(image_to_anchor(p, a), a);
    CHECK(round.x == doctest::Approx(p.x).epsilon(1e-9));
    CHECK(round.y == doctest::Approx(p.y).epsilon(1e-9));
  }
}

TEST_CASE("decode_box identities and closed forms") {
  const AnchorBox anchor{16.0, 12.0, 8.0, 6.0};

  const std::array<double, 4> zero{0.0, 0.0, 0.0, 0.0};
  CHECK(decode_box(anchor, zero) == anchor.to_box());

  // tw = ln 2 doubles the width and keeps the center.
  const std::array<double, 4> wider{0.0, 0.0, std::log(2.0), 0.0};
  const Box2D w2 = decode_box(anchor, wider);
  CHECK(w2.width() == doctest::Approx(16.0).epsilon(1e-12));
  CHECK(w2.height() == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(w2.center().x == doctest::Approx(16.0).epsilon(1e-12));
  CHECK(w2.center().y == doctest::Approx(12.0).epsilon(1e-12));

  // Offsets built as the analytic inverse land on the target box.
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Box2D target{rng.uniform(0.0, 30.0), rng.uniform(0.0, 30.0), 0.0, 0.0};
    Box2D t = target;
    t.xmax = t.xmin + rng.uniform(0.5, 40.0);
    t.ymax = t.ymin + rng.uniform(0.5, 40.0);
    const std::array<double, 4> inverse{
        (t.center().x - anchor.center_x) / anchor.width,
        (t.center().y - anchor.center_y) / anchor.height,
        std::log(t.width() / anchor.width),
        std::log(t.height() / anchor.height),
    };
    const Box2D decoded = decode_box(anchor, inverse);
    CHECK(decoded.xmin == doctest::Approx(t.xmin).epsilon(1e-9));
    CHECK(decoded.ymin == doctest::Approx(t.ymin).epsilon(1e-9));
    CHECK(decoded.xmax == doctest::Approx(t.xmax).epsilon(1e-9));
    CHECK(decoded.ymax == doctest::Approx(t.ymax).epsilon(1e-9));
  }
}

TEST_CASE("decode_box clamps the log-size offsets") {
  const AnchorBox anchor{0.0, 0.0, 2.0, 2.0};
  const std::array<double, 4> huge{0.0, 0.0, 50.0, -50.0};
  const Box2D clamped = decode_box(anchor, huge);
  CHECK(clamped.width() == doctest::Approx(2.0 * std::exp(kOffsetLogClamp)).epsilon(1e-12));
  CHECK(clamped.height() == doctest::Approx(2.0 * std::exp(-kOffsetLogClamp)).epsilon(1e-12));

  // Continuity at the clamp edge: values just inside and at the boundary agree.
  const std::array<double, 4> edge{0.0, 0.0, kOffsetLogClamp, 0.0};
  const std::array<double, 4> past{0.0, 0.0, kOffsetLogClamp + 1.0, 0.0};
  CHECK(decode_box(anchor, edge).width() ==
        doctest::Approx(decode_box(anchor, past).width()).epsilon(1e-12));
}

// Finite-difference sweep over the composition iou(decode_box(anchor, t), target)
// at random non-boundary configurations.
TEST_CASE("analytic box-iou offset gradient matches central differences") {
  Rng rng(17);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 400 && checked < 100; ++trial) {
    const AnchorBox anchor{rng.uniform(5.0, 25.0), rng.uniform(5.0, 25.0),
                           rng.uniform(2.0, 12.0), rng.uniform(2.0, 12.0)};
    Box2D target = anchor.to_box();
    target.xmin += rng.uniform(-2.0, 2.0);
    target.ymin += rng.uniform(-2.0, 2.0);
    target.xmax += rng.uniform(-2.0, 2.0);
    target.ymax += rng.uniform(-2.0, 2.0);
    if (!target.valid() || target.area() <= 0.5) continue;

    std::array<double, 4> offsets{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                  rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    const Box2D decoded = decode_box(anchor, offsets);
    if (iou(decoded, target) < 0.05) continue;  // stay away from the zero-overlap plateau edge

    // Skip configurations near the IoU kinks (corner orderings about to flip).
    const double margin = 1e-3;
    if (std::abs(decoded.xmin - target.xmin) < margin ||
        std::abs(decoded.xmax - target.xmax) < margin ||
        std::abs(decoded.ymin - target.ymin) < margin ||
        std::abs(decoded.ymax - target.ymax) < margin)
      continue;

    const DecodeJacobian jac = decode_box_grad(anchor, offsets);
    const BoxIouGrad ig = iou_grad(jac.box, target);
    const std::array<double, 4> analytic{
        (ig.d_corners[0] + ig.d_corners[2]) * jac.d_x_dtx,
        (ig.d_corners[1] + ig.d_corners[3]) * jac.d_y_dty,
        ig.d_corners[0] * jac.d_x0_dtw + ig.d_corners[2] * jac.d_x1_dtw,
        ig.d_corners[1] * jac.d_y0_dth + ig.d_corners[3] * jac.d_y1_dth,
    };

    for (int c = 0; c < 4; ++c) {
      std::array<double, 4> plus = offsets, minus = offsets;
      plus[c] += h;
      minus[c] -= h;
      const double fd =
          (iou(decode_box(anchor, plus), target) - iou(decode_box(anchor, minus), target)) /
          (2.0 * h);
      const double scale = std::max({1.0, std::abs(fd), std::abs(analytic[c])});
      CHECK(std::abs(analytic[c] - fd) / scale < 1e-4);
    }
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("unit square iou gradient matches central differences") {
  Rng rng(19);
  const double h = 1e-6;
  int checked = 0;
  for (int trial = 0; trial < 300 && checked < 100; ++trial) {
    const Point2D target{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    const Point2D pred{target.x + rng.uniform(-0.9, 0.9), target.y + rng.uniform(-0.9, 0.9)};
    // Skip the |d| = 0 kink and the overlap boundary.
    if (std::abs(pred.x - target.x) < 1e-3 || std::abs(pred.y - target.y) < 1e-3) continue;
    if (std::abs(pred.x - target.x) > 0.97 || std::abs(pred.y - target.y) > 0.97) continue;

    const UnitSquareIouGrad g = unit_square_iou_grad(pred, target);
    CHECK(g.iou == doctest::Approx(unit_square_iou(pred, target)).epsilon(1e-12));

    const double fdx = (unit_square_iou({pred.x + h, pred.y}, target) -
                        unit_square_iou({pred.x - h, pred.y}, target)) /
                       (2.0 * h);
    const double fdy = (unit_square_iou({pred.x, pred.y + h}, target) -
                        unit_square_iou({pred.x, pred.y - h}, target)) /
                       (2.0 * h);
    CHECK(std::abs(g.dx - fdx) / std::max({1.0, std::abs(fdx)}) < 1e-4);
    CHECK(std::abs(g.dy - fdy) / std::max({1.0, std::abs(fdy)}) < 1e-4);
    ++checked;
  }
  CHECK(checked >= 100);
}
