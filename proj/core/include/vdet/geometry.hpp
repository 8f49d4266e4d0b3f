#pragma once

#include <array>

namespace vdet::geometry {

/// Axis-aligned box in normalized center format. Width and height are
/// non-negative; the center may leave [0,1] while a prediction is optimized.
struct BBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double left() const noexcept { return cx - 0.5 * w; }
  double right() const noexcept { return cx + 0.5 * w; }
  double top() const noexcept { return cy - 0.5 * h; }
  double bottom() const noexcept { return cy + 0.5 * h; }
  double area() const noexcept { return w * h; }

  static BBox from_corners(double x1, double y1, double x2, double y2) noexcept {
    return {0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Throws InvalidInput unless all fields are finite and w, h >= 0.
void validate(const BBox& box);

double iou(const BBox& a, const BBox& b);

/// Aspect-ratio consistency term in [0,1]. A zero height is read as an
/// infinite ratio (arctan = pi/2).
double aspect_consistency(const BBox& gt, const BBox& pred);

/// Trade-off weight upsilon / ((1 - iou) + upsilon); 0 when the denominator vanishes.
double ciou_alpha(double iou, double upsilon);

struct CIoUBreakdown {
  double iou = 0.0;
  double center_dist_sq = 0.0;
  double enclosing_diag_sq = 0.0;
  double upsilon = 0.0;
  double alpha = 0.0;
  double loss = 0.0;
};

/// 1 - IoU + rho^2 / c^2 + alpha * upsilon. The ground truth must have positive area.
CIoUBreakdown ciou_loss(const BBox& pred, const BBox& gt);

/// d loss / d (cx, cy, w, h) of the prediction, holding alpha constant.
/// The prediction must have positive width and height.
std::array<double, 4> ciou_grad(const BBox& pred, const BBox& gt);

}  // namespace vdet::geometry
