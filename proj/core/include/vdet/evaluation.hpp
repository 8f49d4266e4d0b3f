#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "vdet/detloss.hpp"
#include "vdet/synthdata.hpp"

namespace vdet::eval {

using detloss::Annotation;
using detloss::Detection;

inline constexpr double kDefaultIouThreshold = 0.5;
/// Detections at or below this confidence never reach the evaluator.
inline constexpr double kEvaluationFloor = 0.005;

struct ScoredMatch {
  double confidence = 0.0;
  bool true_positive = false;
};

struct ClassMatches {
  std::vector<ScoredMatch> detections;
  std::size_t gt_count = 0;
};

/// Per-class outcome of greedy matching. Classes are indexed 0..K-1.
struct MatchResult {
  std::vector<ClassMatches> per_class;

  /// Appends another image's matches class by class.
  void merge(const MatchResult& other);
};

/// Detections are visited in descending confidence (ties keep input order).
/// A detection is a true positive when its best-IoU, still unmatched,
/// same-class ground truth reaches `iou_thresh`; that ground truth is consumed.
MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                             double iou_thresh, int num_classes);

/// All-point interpolated area under the precision/recall curve, with one
/// curve point per distinct confidence and the precision envelope taken from
/// the right. Zero when the class has no ground truth.
double average_precision(const ClassMatches& matches);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double confidence = 0.0;
};

/// Raw curve points (before the envelope) for external plotting.
std::vector<PrPoint> precision_recall_curve(const ClassMatches& matches);

struct APReport {
  std::vector<double> ap;            // per class; 0 for classes without ground truth
  std::vector<std::size_t> gt_count;  // per class
  double map = 0.0;                   // mean over classes with gt_count > 0
  double iou_threshold = kDefaultIouThreshold;
  double conf_threshold = kEvaluationFloor;
};

/// Pools per-image matches per class. Detections with confidence at or below
/// max(conf_thresh, evaluation floor) are discarded first.
APReport mean_average_precision(const std::vector<std::vector<Detection>>& per_image_dets,
                                const std::vector<std::vector<Annotation>>& per_image_gts,
                                double iou_thresh, int num_classes,
                                double conf_thresh = kEvaluationFloor);

/// "class,ap" rows (classes with ground truth only) followed by "mAP,<value>".
std::string format_ap_report(const APReport& report, const std::vector<std::string>& class_names);
void write_ap_report(const std::filesystem::path& path, const APReport& report,
                     const std::vector<std::string>& class_names);

/// Lines "class_id confidence cx cy w h".
std::string format_detections(const std::vector<Detection>& dets);
std::vector<Detection> parse_detections(const std::string& text, int num_classes = -1);
void write_detections(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> read_detections(const std::filesystem::path& path, int num_classes = -1);

/// Mean of per-image, per-channel normalized 256-bin histograms.
struct ColorHistogram {
  std::array<std::array<double, 256>, 3> bins{};

  /// Expected normalized intensity (bin / 255) averaged over channels.
  double mean_intensity() const noexcept;
  double channel_mean(int channel) const noexcept;
};

ColorHistogram image_histogram(const synth::Image& image);
ColorHistogram average_color_histogram(const synth::Manifest& manifest);

/// One-dimensional earth mover's distance between two channels, in bin units / 255.
double earth_movers_distance(const ColorHistogram& a, const ColorHistogram& b, int channel);

/// 256 rows "bin,r,g,b" after a header line.
void write_histogram_csv(const std::filesystem::path& path, const ColorHistogram& hist);

}  // namespace vdet::eval
