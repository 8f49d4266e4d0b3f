// Independent reference implementations used by the unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "vdet/detloss.hpp"
#include "vdet/geometry.hpp"
#include "vdet/network.hpp"
#include "vdet/rng.hpp"

namespace vdet::oracle {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = fs::temp_directory_path() /
            ("vdet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline geometry::BBox random_box(SplitMix64& rng, double lo, double hi) {
  return {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

// ---------------------------------------------------------------------------
// CIoU with the trade-off weight pinned, the quantity the analytic gradient differentiates.

inline double ciou_fixed_alpha(const geometry::BBox& pred, const geometry::BBox& gt, double alpha) {
  const double ix = std::max(0.0, std::min(pred.right(), gt.right()) - std::max(pred.left(), gt.left()));
  const double iy = std::max(0.0, std::min(pred.bottom(), gt.bottom()) - std::max(pred.top(), gt.top()));
  const double inter = ix * iy;
  const double iou = inter / (pred.area() + gt.area() - inter);
  const double ex = std::max(pred.right(), gt.right()) - std::min(pred.left(), gt.left());
  const double ey = std::max(pred.bottom(), gt.bottom()) - std::min(pred.top(), gt.top());
  const double rho2 = (pred.cx - gt.cx) * (pred.cx - gt.cx) + (pred.cy - gt.cy) * (pred.cy - gt.cy);
  const double k = 4.0 / (std::numbers::pi * std::numbers::pi);
  const double d = std::atan(gt.w / gt.h) - std::atan(pred.w / pred.h);
  return 1.0 - iou + rho2 / (ex * ex + ey * ey) + alpha * k * d * d;
}

/// Central differences of ciou_fixed_alpha in (cx, cy, w, h), alpha taken at `pred`.
inline std::array<double, 4> ciou_fd_grad(const geometry::BBox& pred, const geometry::BBox& gt,
                                          double step) {
  const double alpha = geometry::ciou_loss(pred, gt).alpha;
  std::array<double, 4> g{};
  for (int k = 0; k < 4; ++k) {
    geometry::BBox p = pred, m = pred;
    double* pp = k == 0 ? &p.cx : k == 1 ? &p.cy : k == 2 ? &p.w : &p.h;
    double* mm = k == 0 ? &m.cx : k == 1 ? &m.cy : k == 2 ? &m.w : &m.h;
    *pp += step;
    *mm -= step;
    g[static_cast<std::size_t>(k)] = (ciou_fixed_alpha(p, gt, alpha) - ciou_fixed_alpha(m, gt, alpha)) / (2 * step);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Composite detection loss written directly from its definition.

inline double bce(double p, double y) {
  const double eps = detloss::kProbEpsilon;
  p = std::clamp(p, eps, 1.0 - eps);
  return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

/// Per obj slot CIoU trade-off weights at `pred` (slot order).
inline std::vector<double> slot_alphas(const diff::BasicTensor<double>& pred, const detloss::TargetGrid& t,
                                       int num_classes) {
  const detloss::GridLayout layout{t.grid_size, t.boxes_per_cell, num_classes};
  std::vector<double> alphas;
  for (int r = 0; r < t.grid_size; ++r)
    for (int c = 0; c < t.grid_size; ++c)
      for (int b = 0; b < t.boxes_per_cell; ++b) {
        const std::size_t s = t.slot(r, c, b);
        if (!t.obj_mask[s]) continue;
        const std::size_t o = layout.slot_offset(r, c, b);
        const auto box = detloss::decode_box(pred[o], pred[o + 1], pred[o + 2], pred[o + 3], r, c, t.grid_size);
        alphas.push_back(geometry::ciou_loss(box, t.gt_boxes[s]).alpha);
      }
  return alphas;
}

inline double oracle_total_loss(const diff::BasicTensor<double>& pred, const detloss::TargetGrid& t,
                                int num_classes, double lambda_noobj, const std::vector<double>& alphas) {
  const detloss::GridLayout layout{t.grid_size, t.boxes_per_cell, num_classes};
  double ciou = 0, obj = 0, noobj = 0, cls = 0;
  std::size_t next_alpha = 0;
  for (int r = 0; r < t.grid_size; ++r)
    for (int c = 0; c < t.grid_size; ++c)
      for (int b = 0; b < t.boxes_per_cell; ++b) {
        const std::size_t s = t.slot(r, c, b);
        const std::size_t o = layout.slot_offset(r, c, b);
        if (t.obj_mask[s]) {
          const auto box = detloss::decode_box(pred[o], pred[o + 1], pred[o + 2], pred[o + 3], r, c, t.grid_size);
          ciou += ciou_fixed_alpha(box, t.gt_boxes[s], alphas.at(next_alpha++));
          obj += bce(pred[o + 4], 1.0);
          for (int k = 0; k < num_classes; ++k) cls += bce(pred[o + 5 + k], k == t.gt_class[s] ? 1.0 : 0.0);
        } else {
          noobj += bce(pred[o + 4], 0.0);
        }
      }
  return ciou + obj + lambda_noobj * noobj + cls;
}

// ---------------------------------------------------------------------------
// mAP by enumerating every confidence cutoff.

namespace detail {

inline std::vector<bool> oracle_match(std::vector<detloss::Detection> dets,
                                      const std::vector<detloss::Annotation>& gts, double iou_thresh,
                                      std::vector<detloss::Detection>& ordered) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const auto& a, const auto& b) { return a.confidence > b.confidence; });
  std::vector<bool> used(gts.size(), false), tp;
  for (const auto& d : dets) {
    double best = -1.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].class_id != d.class_id) continue;
      const double v = geometry::iou(d.box, gts[j].box);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    const bool hit = best_j < gts.size() && best >= iou_thresh;
    if (hit) used[best_j] = true;
    tp.push_back(hit);
  }
  ordered = std::move(dets);
  return tp;
}

}  // namespace detail

inline double brute_force_ap(const std::vector<std::vector<detloss::Detection>>& dets,
                             const std::vector<std::vector<detloss::Annotation>>& gts, double iou_thresh,
                             int cls) {
  std::size_t gt_count = 0;
  std::set<double, std::greater<>> cutoffs;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& g : gts[i]) gt_count += g.class_id == cls;
    for (const auto& d : dets[i])
      if (d.class_id == cls) cutoffs.insert(d.confidence);
  }
  if (gt_count == 0) return 0.0;
  std::vector<double> recall, precision;
  for (double t : cutoffs) {
    std::size_t tp = 0, n = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      std::vector<detloss::Detection> kept, ordered;
      for (const auto& d : dets[i])
        if (d.class_id == cls && d.confidence >= t) kept.push_back(d);
      std::vector<detloss::Annotation> class_gts;
      for (const auto& g : gts[i])
        if (g.class_id == cls) class_gts.push_back(g);
      const auto flags = detail::oracle_match(kept, class_gts, iou_thresh, ordered);
      for (bool f : flags) tp += f;
      n += flags.size();
    }
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(n));
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    double best = 0.0;
    for (std::size_t j = k; j < recall.size(); ++j) best = std::max(best, precision[j]);
    ap += (recall[k] - prev) * best;
    prev = recall[k];
  }
  return ap;
}

inline double brute_force_map(const std::vector<std::vector<detloss::Detection>>& dets,
                              const std::vector<std::vector<detloss::Annotation>>& gts, double iou_thresh,
                              int num_classes) {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < num_classes; ++c) {
    bool any = false;
    for (const auto& img : gts)
      for (const auto& g : img) any = any || g.class_id == c;
    if (!any) continue;
    sum += brute_force_ap(dets, gts, iou_thresh, c);
    ++present;
  }
  return present ? sum / present : 0.0;
}

/// Random small evaluation instance: detections drawn near ground truth or at random.
struct ApInstance {
  std::vector<std::vector<detloss::Detection>> dets;
  std::vector<std::vector<detloss::Annotation>> gts;
};

inline ApInstance random_ap_instance(std::uint64_t seed, int num_classes, int max_dets, int max_gts) {
  SplitMix64 rng(seed);
  ApInstance inst;
  const int images = 1 + static_cast<int>(rng.below(2));
  for (int i = 0; i < images; ++i) {
    std::vector<detloss::Annotation> g;
    std::vector<detloss::Detection> d;
    const int ng = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_gts) + 1));
    for (int k = 0; k < ng; ++k)
      g.push_back({static_cast<int>(rng.below(num_classes)), random_box(rng, 0.1, 0.4)});
    const int nd = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dets) + 1));
    for (int k = 0; k < nd; ++k) {
      detloss::Detection det;
      if (!g.empty() && rng.uniform() < 0.7) {
        const auto& src = g[rng.below(g.size())];
        det.class_id = rng.uniform() < 0.8 ? src.class_id : static_cast<int>(rng.below(num_classes));
        det.box = {src.box.cx + rng.uniform(-0.05, 0.05), src.box.cy + rng.uniform(-0.05, 0.05),
                   src.box.w * rng.uniform(0.7, 1.3), src.box.h * rng.uniform(0.7, 1.3)};
      } else {
        det.class_id = static_cast<int>(rng.below(num_classes));
        det.box = random_box(rng, 0.1, 0.4);
      }
      // Coarse confidences so that ties occur.
      det.confidence = 0.05 + 0.1 * static_cast<double>(rng.below(10));
      d.push_back(det);
    }
    inst.gts.push_back(std::move(g));
    inst.dets.push_back(std::move(d));
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Network gradient check.

/// Architecture small enough for exhaustive finite differences (about 250 parameters).
inline diff::NetConfig toy_net_config() {
  diff::NetConfig c;
  c.input_size = 16;
  c.backbone_channels = {2, 3, 3};
  c.neck_channels = 3;
  c.boxes_per_cell = 1;
  c.num_classes = 2;
  return c;
}

struct GradCheckResult {
  std::size_t checked = 0;
  double worst = 0.0;
  std::string worst_name;
};

/// Compares float analytic parameter gradients of the composite loss with
/// double-precision central differences on a copy of the network.
GradCheckResult network_gradient_check(std::uint64_t seed, double step = 1e-4);

}  // namespace vdet::oracle
