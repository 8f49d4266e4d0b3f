#include "vdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vdet/error.hpp"

namespace vdet::geometry {
namespace {

constexpr double kAspectScale = 4.0 / (std::numbers::pi * std::numbers::pi);

double aspect_angle(double w, double h) {
  if (h == 0.0) return 0.5 * std::numbers::pi;
  return std::atan(w / h);
}

void require_positive_area(const BBox& box, const char* what) {
  if (!(box.w > 0.0 && box.h > 0.0)) {
    throw InvalidInput(std::string(what) + " box must have positive width and height");
  }
}

}  // namespace

void validate(const BBox& box) {
  if (!std::isfinite(box.cx) || !std::isfinite(box.cy) || !std::isfinite(box.w) ||
      !std::isfinite(box.h)) {
    throw InvalidInput("box has a non-finite field");
  }
  if (box.w < 0.0 || box.h < 0.0) throw InvalidInput("box has negative width or height");
}

double iou(const BBox& a, const BBox& b) {
  validate(a);
  validate(b);
  const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
  const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
  const double inter = iw * ih;
  // Areas from the same edge differences as the intersection, so iou(a, a) is exactly 1.
  const double area_a = (a.right() - a.left()) * (a.bottom() - a.top());
  const double area_b = (b.right() - b.left()) * (b.bottom() - b.top());
  const double uni = area_a + area_b - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double aspect_consistency(const BBox& gt, const BBox& pred) {
  validate(gt);
  validate(pred);
  const double d = aspect_angle(gt.w, gt.h) - aspect_angle(pred.w, pred.h);
  return kAspectScale * d * d;
}

double ciou_alpha(double iou, double upsilon) {
  if (!std::isfinite(iou) || !std::isfinite(upsilon)) {
    throw InvalidInput("ciou_alpha: non-finite input");
  }
  const double denom = (1.0 - iou) + upsilon;
  if (denom <= 0.0) return 0.0;
  return upsilon / denom;
}

CIoUBreakdown ciou_loss(const BBox& pred, const BBox& gt) {
  validate(pred);
  validate(gt);
  require_positive_area(gt, "ground-truth");

  CIoUBreakdown out;
  out.iou = iou(pred, gt);
  const double dx = pred.cx - gt.cx;
  const double dy = pred.cy - gt.cy;
  out.center_dist_sq = dx * dx + dy * dy;
  const double cw = std::max(pred.right(), gt.right()) - std::min(pred.left(), gt.left());
  const double ch = std::max(pred.bottom(), gt.bottom()) - std::min(pred.top(), gt.top());
  out.enclosing_diag_sq = cw * cw + ch * ch;
  out.upsilon = aspect_consistency(gt, pred);
  out.alpha = ciou_alpha(out.iou, out.upsilon);
  out.loss = 1.0 - out.iou + out.center_dist_sq / out.enclosing_diag_sq + out.alpha * out.upsilon;
  return out;
}

std::array<double, 4> ciou_grad(const BBox& pred, const BBox& gt) {
  validate(pred);
  validate(gt);
  require_positive_area(gt, "ground-truth");
  require_positive_area(pred, "predicted");

  // Derivatives are taken w.r.t. the corners (x1, x2, y1, y2) and mapped back
  // to (cx, w) via x1 = cx - w/2, x2 = cx + w/2.
  const double px1 = pred.left(), px2 = pred.right(), py1 = pred.top(), py2 = pred.bottom();
  const double gx1 = gt.left(), gx2 = gt.right(), gy1 = gt.top(), gy2 = gt.bottom();

  const double iw_raw = std::min(px2, gx2) - std::max(px1, gx1);
  const double ih_raw = std::min(py2, gy2) - std::max(py1, gy1);
  const bool overlap = iw_raw > 0.0 && ih_raw > 0.0;
  const double iw = overlap ? iw_raw : 0.0;
  const double ih = overlap ? ih_raw : 0.0;
  const double inter = iw * ih;
  const double uni = pred.area() + gt.area() - inter;

  // d inter / d corner
  double di_x1 = 0.0, di_x2 = 0.0, di_y1 = 0.0, di_y2 = 0.0;
  if (overlap) {
    if (px1 > gx1) di_x1 = -ih;
    if (px2 < gx2) di_x2 = ih;
    if (py1 > gy1) di_y1 = -iw;
    if (py2 < gy2) di_y2 = iw;
  }
  // d pred-area / d corner
  const double da_x1 = -pred.h, da_x2 = pred.h, da_y1 = -pred.w, da_y2 = pred.w;
  auto d_iou = [&](double di, double da) { return (di * uni - inter * (da - di)) / (uni * uni); };
  const double diou_x1 = d_iou(di_x1, da_x1);
  const double diou_x2 = d_iou(di_x2, da_x2);
  const double diou_y1 = d_iou(di_y1, da_y1);
  const double diou_y2 = d_iou(di_y2, da_y2);

  // rho^2 / c^2
  const double dx = pred.cx - gt.cx;
  const double dy = pred.cy - gt.cy;
  const double rho2 = dx * dx + dy * dy;
  const double cw = std::max(px2, gx2) - std::min(px1, gx1);
  const double ch = std::max(py2, gy2) - std::min(py1, gy1);
  const double c2 = cw * cw + ch * ch;
  const double dc2_x1 = px1 < gx1 ? -2.0 * cw : 0.0;
  const double dc2_x2 = px2 > gx2 ? 2.0 * cw : 0.0;
  const double dc2_y1 = py1 < gy1 ? -2.0 * ch : 0.0;
  const double dc2_y2 = py2 > gy2 ? 2.0 * ch : 0.0;
  const double inv_c2 = 1.0 / c2;
  const double rho_term = rho2 * inv_c2 * inv_c2;

  // corner -> (cx, w): d/dcx = d/dx1 + d/dx2, d/dw = (d/dx2 - d/dx1) / 2
  const double dpen_cx = 2.0 * dx * inv_c2 - rho_term * (dc2_x1 + dc2_x2);
  const double dpen_cy = 2.0 * dy * inv_c2 - rho_term * (dc2_y1 + dc2_y2);
  const double dpen_w = -rho_term * 0.5 * (dc2_x2 - dc2_x1);
  const double dpen_h = -rho_term * 0.5 * (dc2_y2 - dc2_y1);

  const double diou_cx = diou_x1 + diou_x2;
  const double diou_cy = diou_y1 + diou_y2;
  const double diou_w = 0.5 * (diou_x2 - diou_x1);
  const double diou_h = 0.5 * (diou_y2 - diou_y1);

  // alpha * upsilon with alpha frozen
  const double iou_val = uni > 0.0 ? inter / uni : 0.0;
  const double delta = aspect_angle(gt.w, gt.h) - aspect_angle(pred.w, pred.h);
  const double upsilon = kAspectScale * delta * delta;
  const double alpha = ciou_alpha(iou_val, upsilon);
  const double norm = pred.w * pred.w + pred.h * pred.h;
  const double dv_w = -2.0 * kAspectScale * delta * (pred.h / norm);
  const double dv_h = 2.0 * kAspectScale * delta * (pred.w / norm);

  return {
      -diou_cx + dpen_cx,
      -diou_cy + dpen_cy,
      -diou_w + dpen_w + alpha * dv_w,
      -diou_h + dpen_h + alpha * dv_h,
  };
}

}  // namespace vdet::geometry
