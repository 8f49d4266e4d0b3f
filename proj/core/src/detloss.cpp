#include "vdet/detloss.hpp"

#include <algorithm>
#include <cmath>

#include "vdet/error.hpp"

namespace vdet::detloss {

std::size_t TargetGrid::object_count() const noexcept {
  return static_cast<std::size_t>(std::count(obj_mask.begin(), obj_mask.end(), std::uint8_t{1}));
}

TargetGrid assign_targets(const std::vector<Annotation>& gt, int grid_size, int boxes_per_cell) {
  if (grid_size <= 0 || boxes_per_cell <= 0) {
    throw ConfigError("assign_targets: grid size and boxes per cell must be positive");
  }
  TargetGrid t;
  t.grid_size = grid_size;
  t.boxes_per_cell = boxes_per_cell;
  const std::size_t n = static_cast<std::size_t>(grid_size) * grid_size * boxes_per_cell;
  t.obj_mask.assign(n, 0);
  t.noobj_mask.assign(n, 1);
  t.gt_boxes.assign(n, BBox{});
  t.gt_class.assign(n, -1);

  for (const auto& a : gt) {
    const BBox& b = a.box;
    const bool finite = std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) &&
                        std::isfinite(b.h);
    if (!finite || !(b.w > 0.0 && b.h > 0.0) || b.cx < 0.0 || b.cx >= 1.0 || b.cy < 0.0 ||
        b.cy >= 1.0 || a.class_id < 0) {
      ++t.skipped;
      continue;
    }
    const int col = std::min(grid_size - 1, static_cast<int>(std::floor(b.cx * grid_size)));
    const int row = std::min(grid_size - 1, static_cast<int>(std::floor(b.cy * grid_size)));
    bool placed = false;
    for (int s = 0; s < boxes_per_cell && !placed; ++s) {
      const std::size_t idx = t.slot(row, col, s);
      if (t.obj_mask[idx]) continue;
      t.obj_mask[idx] = 1;
      t.noobj_mask[idx] = 0;
      t.gt_boxes[idx] = b;
      t.gt_class[idx] = a.class_id;
      placed = true;
    }
    if (!placed) ++t.dropped;
  }
  return t;
}

BBox decode_box(double x_offset, double y_offset, double w, double h, int row, int col,
                int grid_size) noexcept {
  return {(col + x_offset) / grid_size, (row + y_offset) / grid_size, w, h};
}

namespace {

void check_layout(const diff::Shape& shape, const TargetGrid& target, int num_classes) {
  GridLayout layout{target.grid_size, target.boxes_per_cell, num_classes};
  if (num_classes <= 0 || shape != layout.tensor_shape()) {
    throw ConfigError("prediction shape " + diff::shape_to_string(shape) +
                      " does not match target grid " + diff::shape_to_string(layout.tensor_shape()));
  }
}

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }

}  // namespace

template <typename T>
LossReport evaluate_loss(const diff::BasicTensor<T>& pred, const TargetGrid& target,
                         int num_classes, double lambda_noobj, std::vector<double>* grad) {
  check_layout(pred.shape(), target, num_classes);
  if (!(lambda_noobj >= 0.0) || !std::isfinite(lambda_noobj)) {
    throw ConfigError("lambda_noobj must be a finite non-negative number");
  }
  const GridLayout layout{target.grid_size, target.boxes_per_cell, num_classes};
  if (grad) grad->assign(pred.size(), 0.0);

  LossReport r;
  r.lambda_noobj = lambda_noobj;
  const int S = target.grid_size;
  for (int row = 0; row < S; ++row) {
    for (int col = 0; col < S; ++col) {
      for (int b = 0; b < target.boxes_per_cell; ++b) {
        const std::size_t slot = target.slot(row, col, b);
        const std::size_t off = layout.slot_offset(row, col, b);
        // Gradients use the clamped probability and pass straight through the clamp.
        const double conf = clamp_prob(static_cast<double>(pred[off + 4]));
        if (!target.obj_mask[slot]) {
          r.noobj += -std::log(1.0 - conf);
          if (grad) (*grad)[off + 4] += lambda_noobj / (1.0 - conf);
          continue;
        }
        r.obj += -std::log(conf);
        if (grad) (*grad)[off + 4] += -1.0 / conf;

        for (int c = 0; c < num_classes; ++c) {
          const double p = clamp_prob(static_cast<double>(pred[off + 5 + c]));
          const bool positive = c == target.gt_class[slot];
          r.cls += positive ? -std::log(p) : -std::log(1.0 - p);
          if (grad) (*grad)[off + 5 + c] += positive ? -1.0 / p : 1.0 / (1.0 - p);
        }

        const BBox box = decode_box(pred[off + 0], pred[off + 1],
                                    std::max(static_cast<double>(pred[off + 2]), kProbEpsilon),
                                    std::max(static_cast<double>(pred[off + 3]), kProbEpsilon),
                                    row, col, S);
        r.ciou += geometry::ciou_loss(box, target.gt_boxes[slot]).loss;
        if (grad) {
          const auto g = geometry::ciou_grad(box, target.gt_boxes[slot]);
          (*grad)[off + 0] += g[0] / S;
          (*grad)[off + 1] += g[1] / S;
          (*grad)[off + 2] += g[2];
          (*grad)[off + 3] += g[3];
        }
      }
    }
  }
  r.total = r.ciou + r.obj + lambda_noobj * r.noobj + r.cls;
  if (!std::isfinite(r.total)) throw NumericError("non-finite detection loss");
  return r;
}

template <typename T>
LossResult<T> total_loss(const diff::Var<T>& pred, const TargetGrid& target, int num_classes,
                         double lambda_noobj) {
  std::vector<double> g;
  LossResult<T> out;
  out.report = evaluate_loss(pred.value(), target, num_classes, lambda_noobj,
                             pred.requires_grad() ? &g : nullptr);
  diff::BasicTensor<T> value({1}, std::vector<T>{static_cast<T>(out.report.total)});
  out.loss = diff::Var<T>::op(std::move(value), {pred}, [g = std::move(g)](diff::Node<T>& n) {
    const double up = static_cast<double>(n.tensor().grad()[0]);
    auto d = n.parents[0]->tensor().grad();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(up * g[i]);
  });
  return out;
}

template <typename T>
std::vector<Detection> decode_predictions(const diff::BasicTensor<T>& pred, const GridLayout& layout,
                                          double conf_thresh) {
  if (pred.shape() != layout.tensor_shape()) {
    throw ConfigError("prediction shape " + diff::shape_to_string(pred.shape()) +
                      " does not match layout " + diff::shape_to_string(layout.tensor_shape()));
  }
  std::vector<Detection> out;
  const int S = layout.grid_size;
  for (int row = 0; row < S; ++row) {
    for (int col = 0; col < S; ++col) {
      for (int b = 0; b < layout.boxes_per_cell; ++b) {
        const std::size_t off = layout.slot_offset(row, col, b);
        int best = 0;
        double best_score = pred[off + 5];
        for (int c = 1; c < layout.num_classes; ++c) {
          if (pred[off + 5 + c] > best_score) {
            best_score = pred[off + 5 + c];
            best = c;
          }
        }
        const double conf = static_cast<double>(pred[off + 4]) * best_score;
        if (!(conf > conf_thresh)) continue;
        out.push_back({best,
                       decode_box(pred[off + 0], pred[off + 1], pred[off + 2], pred[off + 3], row,
                                  col, S),
                       conf});
      }
    }
  }
  return out;
}

diff::Tensor encode_targets(const TargetGrid& target, int num_classes) {
  const GridLayout layout{target.grid_size, target.boxes_per_cell, num_classes};
  diff::Tensor out(layout.tensor_shape());
  const int S = target.grid_size;
  for (int row = 0; row < S; ++row) {
    for (int col = 0; col < S; ++col) {
      for (int b = 0; b < target.boxes_per_cell; ++b) {
        const std::size_t slot = target.slot(row, col, b);
        if (!target.obj_mask[slot]) continue;
        const std::size_t off = layout.slot_offset(row, col, b);
        const BBox& box = target.gt_boxes[slot];
        out[off + 0] = static_cast<float>(box.cx * S - col);
        out[off + 1] = static_cast<float>(box.cy * S - row);
        out[off + 2] = static_cast<float>(box.w);
        out[off + 3] = static_cast<float>(box.h);
        out[off + 4] = 1.0f;
        const int cls = target.gt_class[slot];
        if (cls >= 0 && cls < num_classes) out[off + 5 + cls] = 1.0f;
      }
    }
  }
  return out;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.confidence > b.confidence; });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && geometry::iou(k.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

#define VDET_INSTANTIATE(T)                                                                      \
  template LossReport evaluate_loss<T>(const diff::BasicTensor<T>&, const TargetGrid&, int,     \
                                       double, std::vector<double>*);                            \
  template LossResult<T> total_loss<T>(const diff::Var<T>&, const TargetGrid&, int, double);    \
  template std::vector<Detection> decode_predictions<T>(const diff::BasicTensor<T>&,           \
                                                        const GridLayout&, double);

VDET_INSTANTIATE(float)
VDET_INSTANTIATE(double)

#undef VDET_INSTANTIATE

}  // namespace vdet::detloss
