#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vdet/evaluation.hpp"
#include "vdet/kvconfig.hpp"
#include "vdet/network.hpp"
#include "vdet/synthdata.hpp"

namespace vdet::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Training primitives

diff::Tensor to_tensor(const synth::Image& image);

/// Loads every row of a manifest into memory.
std::vector<synth::Scene> load_dataset(const synth::Manifest& manifest, int num_classes);

struct TrainOptions {
  int epochs = 30;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_noobj = detloss::kDefaultLambdaNoobj;
  double grad_clip = 10.0;  // max L2 norm of the batch-mean gradient; 0 disables
  bool mosaic = false;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD over `data` (gradients averaged over the batch). With
/// `mosaic`, every sample is composited with three other random samples.
/// Returns the mean per-image loss of the final epoch.
double train_stage(diff::Detector& net, const std::vector<synth::Scene>& data,
                   const TrainOptions& options);

/// Mean per-image composite loss without updating weights.
double mean_loss(diff::Detector& net, const std::vector<synth::Scene>& data, double lambda_noobj);

struct DetectOptions {
  double conf_thresh = 0.25;
  double nms_iou = detloss::kDefaultNmsIou;
};

/// Forward, decode above max(conf_thresh, evaluation floor), then per-class NMS.
std::vector<detloss::Detection> detect(diff::Detector& net, const synth::Image& image,
                                       const DetectOptions& options);

eval::APReport evaluate_detector(diff::Detector& net, const std::vector<synth::Scene>& data,
                                 const DetectOptions& options, double iou_thresh);

// ---------------------------------------------------------------------------
// Schemes

enum class Scheme { YR, YVR, YCVR, YCSVR, YCMVR, YCMSVR };

std::string_view scheme_name(Scheme s) noexcept;
/// Throws ConfigError listing the valid names.
Scheme parse_scheme(std::string_view name);
std::vector<Scheme> all_schemes();

struct SchemeConfig {
  Scheme scheme = Scheme::YCSVR;

  int virtual_n = 2000;  // images in the virtual training stage
  int real_n = 220;      // real pool size when generated; split 50:50 into train/test
  int pretrain_n = 400;  // auxiliary images for the generic pretraining stage

  // Existing data; generated under data_dir when empty.
  fs::path virtual_manifest;
  fs::path real_train_manifest;
  fs::path real_test_manifest;
  fs::path data_dir;  // defaults to work_dir / "data"
  fs::path work_dir = "run";

  bool use_pretrain = true;  // stage C
  bool use_virtual = true;   // stage V
  bool mosaic = false;       // mosaic composites during stage V
  // Segments loaded from the stage-V weights for stage R; frozen segments
  // are loaded as well so that they keep their source values.
  diff::SegmentSet transfer_segments;
  diff::SegmentSet frozen_segments;

  int epochs_c = 20;
  int epochs_v = 30;
  int epochs_r = 30;
  int batch_size = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double lambda_noobj = detloss::kDefaultLambdaNoobj;
  double grad_clip = 10.0;
  double conf_thresh = 0.25;
  double iou_thresh = eval::kDefaultIouThreshold;
  double nms_iou = detloss::kDefaultNmsIou;
  std::uint64_t seed = 0;

  int max_objects = 3;
  double min_extent = synth::SceneOptions{}.min_extent;
  double max_extent = synth::SceneOptions{}.max_extent;
  int clutter = synth::SceneOptions{}.clutter;
  diff::NetConfig net;  // net.num_classes is the class count K
  synth::DomainProfile virtual_profile = synth::DomainProfile::virtual_domain();
  synth::DomainProfile real_profile = synth::DomainProfile::real_domain();

  /// Stage layout, transfer and freeze sets of a named scheme with default
  /// hyper-parameters.
  static SchemeConfig preset(Scheme scheme);

  /// Preset of the `scheme` key (when present) with every other key applied on top.
  static SchemeConfig from_config(const KeyValueConfig& kv, const SchemeConfig& base);
  /// Keys accepted by from_config.
  static const std::set<std::string>& keys();

  void validate() const;
  synth::SceneOptions scene_options() const;
};

struct RunReport {
  Scheme scheme = Scheme::YR;
  int virtual_n = 0;
  std::uint64_t seed = 0;
  std::optional<double> loss_c;        // final-epoch loss per stage
  std::optional<double> start_loss_v;  // stage-V loss before its first update
  std::optional<double> loss_v;
  double loss_r = 0.0;
  eval::APReport test;
  double seconds = 0.0;  // wall clock; not serialized so that reports stay reproducible

  static std::string csv_header();
  std::string csv_row() const;
};

/// Runs stages C, V and R as configured and evaluates on the real test split.
/// Writes stage_C.sdw / stage_V.sdw / stage_R.sdw and report.csv into work_dir.
RunReport run_scheme(const SchemeConfig& config);

struct PretrainOptions {
  int n = 400;
  int epochs = 20;
  int max_objects = 3;
  double brightness_jitter = 0.3;  // per-image offset drawn from [-j, j]
  TrainOptions train;
};

/// Trains the detector on an auxiliary task (generic pattern classes, neutral
/// photometric profile) and saves the weights.
void pretrain_generic(std::uint64_t seed, const fs::path& out_weights, const diff::NetConfig& net,
                      const PretrainOptions& options = {});

/// Generates (or reuses) the synthetic virtual pool and real train/test split.
struct DataPaths {
  fs::path virtual_manifest;
  fs::path real_train_manifest;
  fs::path real_test_manifest;
};
DataPaths prepare_data(const SchemeConfig& config);

// ---------------------------------------------------------------------------
// Single stage from files

struct StageConfig {
  fs::path train_manifest;
  fs::path init_weights;  // optional
  diff::SegmentSet transfer_segments{diff::kAllSegments.begin(), diff::kAllSegments.end()};
  diff::SegmentSet frozen_segments;
  fs::path out_weights = "stage.sdw";
  fs::path eval_manifest;  // optional
  fs::path report;         // optional AP report for eval_manifest
  TrainOptions train;
  diff::NetConfig net;
  double conf_thresh = 0.25;
  double iou_thresh = eval::kDefaultIouThreshold;

  static StageConfig from_config(const KeyValueConfig& kv);
  static const std::set<std::string>& keys();
};

struct StageReport {
  double start_loss = 0.0;
  double final_loss = 0.0;
  std::optional<eval::APReport> test;
};

StageReport run_stage(const StageConfig& config);

// ---------------------------------------------------------------------------
// Matrix

struct MatrixConfig {
  std::vector<Scheme> schemes;
  std::vector<int> virtual_ns;
  std::vector<std::uint64_t> seeds;
  fs::path out_csv = "matrix.csv";
  fs::path work_dir = "matrix";
  bool reference_rows = false;
  SchemeConfig base;  // hyper-parameters shared by every cell
  KeyValueConfig layout_overrides;  // stage/transfer/freeze keys forced onto every scheme


  static MatrixConfig from_config(const KeyValueConfig& kv);
  static const std::set<std::string>& keys();
};

struct MatrixCell {
  Scheme scheme = Scheme::YR;
  int virtual_n = 0;
  std::uint64_t seed = 0;
  std::optional<RunReport> report;
  std::string error;
};

/// Runs the cross product in (scheme, n, seed) order, appends per-(scheme, n)
/// mean and sample standard deviation of mAP, and writes out_csv.
std::vector<MatrixCell> run_matrix(const MatrixConfig& config);

std::string matrix_csv(const std::vector<MatrixCell>& cells, bool reference_rows);

/// Full-scale reference mAP (percent), for documentation rows only.
struct ReferenceValue {
  const char* scheme;
  int samples;
  double map_percent;
};
std::vector<ReferenceValue> reference_table();

}  // namespace vdet::harness
