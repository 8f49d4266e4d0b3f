#pragma once

#include <cstdint>
#include <vector>

#include "vdet/geometry.hpp"
#include "vdet/tensor.hpp"

namespace vdet::detloss {

using geometry::BBox;

struct Annotation {
  int class_id = 0;
  BBox box;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct Detection {
  int class_id = 0;
  BBox box;
  double confidence = 0.0;
};

/// Layout of the head output: per cell, B slots of (x offset, y offset, w, h,
/// objectness, K class scores).
struct GridLayout {
  int grid_size = 8;
  int boxes_per_cell = 2;
  int num_classes = 7;

  int channels_per_box() const noexcept { return 5 + num_classes; }
  std::size_t slots() const noexcept {
    return static_cast<std::size_t>(grid_size) * grid_size * boxes_per_cell;
  }
  diff::Shape tensor_shape() const {
    return {static_cast<std::size_t>(grid_size), static_cast<std::size_t>(grid_size),
            static_cast<std::size_t>(boxes_per_cell * channels_per_box())};
  }
  /// Offset of channel 0 of slot (row, col, b) in the flat prediction tensor.
  std::size_t slot_offset(int row, int col, int b) const noexcept {
    return (static_cast<std::size_t>(row) * grid_size + col) * boxes_per_cell * channels_per_box() +
           static_cast<std::size_t>(b) * channels_per_box();
  }
};

/// Ground truth assigned to grid slots. Slot index is (row * S + col) * B + b.
struct TargetGrid {
  int grid_size = 0;
  int boxes_per_cell = 0;
  std::vector<std::uint8_t> obj_mask;
  std::vector<std::uint8_t> noobj_mask;
  std::vector<BBox> gt_boxes;
  std::vector<int> gt_class;
  std::size_t dropped = 0;  // boxes beyond B in an occupied cell
  std::size_t skipped = 0;  // boxes with a center outside [0,1)^2 or zero area

  std::size_t slot(int row, int col, int b) const noexcept {
    return (static_cast<std::size_t>(row) * grid_size + col) * boxes_per_cell + b;
  }
  std::size_t object_count() const noexcept;
};

/// Each box goes to the cell containing its center, in the lowest free slot.
TargetGrid assign_targets(const std::vector<Annotation>& gt, int grid_size, int boxes_per_cell);

inline constexpr double kProbEpsilon = 1e-7;
inline constexpr double kDefaultLambdaNoobj = 0.5;

struct LossReport {
  double ciou = 0.0;
  double obj = 0.0;
  double noobj = 0.0;
  double cls = 0.0;
  double total = 0.0;
  double lambda_noobj = kDefaultLambdaNoobj;
};

/// Evaluates the composite loss on an activated prediction tensor. When
/// `grad` is non-null it receives d total / d prediction (same layout).
template <typename T>
LossReport evaluate_loss(const diff::BasicTensor<T>& pred, const TargetGrid& target,
                         int num_classes, double lambda_noobj, std::vector<double>* grad = nullptr);

template <typename T>
struct LossResult {
  LossReport report;
  diff::Var<T> loss;  // differentiable scalar equal to report.total
};

/// Composite detection loss: CIoU over assigned slots, objectness BCE over
/// assigned and unassigned slots (the latter weighted by lambda_noobj) and
/// per-class BCE over assigned slots.
template <typename T>
LossResult<T> total_loss(const diff::Var<T>& pred, const TargetGrid& target, int num_classes,
                         double lambda_noobj = kDefaultLambdaNoobj);

/// Box in image coordinates encoded by a slot's first four channels.
BBox decode_box(double x_offset, double y_offset, double w, double h, int row, int col,
                int grid_size) noexcept;

/// Detections with objectness * best class score strictly above `conf_thresh`.
/// Class ties resolve to the lowest index.
template <typename T>
std::vector<Detection> decode_predictions(const diff::BasicTensor<T>& pred, const GridLayout& layout,
                                          double conf_thresh);

/// Ideal activated prediction for a target grid: exact boxes, objectness 1 on
/// assigned slots and 0 elsewhere, one-hot class scores.
diff::Tensor encode_targets(const TargetGrid& target, int num_classes);

inline constexpr double kDefaultNmsIou = 0.45;

/// Greedy per-class suppression in descending confidence order (ties keep input order).
std::vector<Detection> non_max_suppression(std::vector<Detection> dets,
                                           double iou_thresh = kDefaultNmsIou);

}  // namespace vdet::detloss
