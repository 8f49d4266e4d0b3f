#include "vdet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vdet/error.hpp"
#include "vdet/rng.hpp"

namespace vdet::harness {

// ---------------------------------------------------------------------------
// Training primitives

diff::Tensor to_tensor(const synth::Image& image) {
  return diff::Tensor({static_cast<std::size_t>(image.height), static_cast<std::size_t>(image.width), 3},
                      image.pixels);
}

std::vector<synth::Scene> load_dataset(const synth::Manifest& manifest, int num_classes) {
  std::vector<synth::Scene> out;
  out.reserve(manifest.size());
  for (const auto& row : manifest.rows) out.push_back(synth::load_scene(row, num_classes));
  return out;
}

double train_stage(diff::Detector& net, const std::vector<synth::Scene>& data,
                   const TrainOptions& options) {
  if (data.empty()) throw InvalidInput("train_stage: empty dataset");
  if (options.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (options.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (options.epochs == 0) return mean_loss(net, data, options.lambda_noobj);

  const auto& cfg = net.config();
  const int S = cfg.grid_size();
  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    SplitMix64 rng(derive_seed(options.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    epoch_loss = 0.0;
    int in_batch = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const synth::Scene* sample = &data[order[k]];
      synth::Scene composite;
      if (options.mosaic) {
        const std::array<synth::Scene, 4> parts{*sample, data[rng.below(n)], data[rng.below(n)],
                                                data[rng.below(n)]};
        composite = synth::mosaic(parts, rng.next(), cfg.input_size, cfg.input_size);
        sample = &composite;
      }
      auto out = net.forward(to_tensor(sample->image));
      const auto target = detloss::assign_targets(sample->annotations, S, cfg.boxes_per_cell);
      auto result = detloss::total_loss(out, target, cfg.num_classes, options.lambda_noobj);
      net.backward(result.loss);
      epoch_loss += result.report.total;
      if (++in_batch == options.batch_size || k + 1 == n) {
        net.scale_grad(1.0 / in_batch);
        if (options.grad_clip > 0.0) net.clip_grad_norm(options.grad_clip);
        net.sgd_step(options.lr, options.momentum);
        in_batch = 0;
      }
    }
  }
  return epoch_loss / static_cast<double>(n);
}

double mean_loss(diff::Detector& net, const std::vector<synth::Scene>& data, double lambda_noobj) {
  if (data.empty()) throw InvalidInput("mean_loss: empty dataset");
  const auto& cfg = net.config();
  double total = 0.0;
  for (const auto& s : data) {
    auto out = net.forward(to_tensor(s.image), false);
    const auto target = detloss::assign_targets(s.annotations, cfg.grid_size(), cfg.boxes_per_cell);
    total += detloss::evaluate_loss(out.value(), target, cfg.num_classes, lambda_noobj).total;
  }
  return total / static_cast<double>(data.size());
}

std::vector<detloss::Detection> detect(diff::Detector& net, const synth::Image& image,
                                       const DetectOptions& options) {
  const auto& cfg = net.config();
  auto out = net.forward(to_tensor(image), false);
  const detloss::GridLayout layout{cfg.grid_size(), cfg.boxes_per_cell, cfg.num_classes};
  auto dets = detloss::decode_predictions(out.value(), layout,
                                          std::max(options.conf_thresh, eval::kEvaluationFloor));
  return detloss::non_max_suppression(std::move(dets), options.nms_iou);
}

eval::APReport evaluate_detector(diff::Detector& net, const std::vector<synth::Scene>& data,
                                 const DetectOptions& options, double iou_thresh) {
  std::vector<std::vector<detloss::Detection>> dets;
  std::vector<std::vector<detloss::Annotation>> gts;
  for (const auto& s : data) {
    dets.push_back(detect(net, s.image, options));
    gts.push_back(s.annotations);
  }
  return eval::mean_average_precision(dets, gts, iou_thresh, net.config().num_classes,
                                      options.conf_thresh);
}

// ---------------------------------------------------------------------------
// Schemes

std::string_view scheme_name(Scheme s) noexcept {
  switch (s) {
    case Scheme::YR: return "YR";
    case Scheme::YVR: return "YVR";
    case Scheme::YCVR: return "YCVR";
    case Scheme::YCSVR: return "YCSVR";
    case Scheme::YCMVR: return "YCMVR";
    case Scheme::YCMSVR: return "YCMSVR";
  }
  return "?";
}

std::vector<Scheme> all_schemes() {
  return {Scheme::YR, Scheme::YVR, Scheme::YCVR, Scheme::YCSVR, Scheme::YCMVR, Scheme::YCMSVR};
}

Scheme parse_scheme(std::string_view name) {
  for (Scheme s : all_schemes()) {
    if (scheme_name(s) == name) return s;
  }
  throw ConfigError("unknown scheme '" + std::string(name) +
                    "' (valid: YR, YVR, YCVR, YCSVR, YCMVR, YCMSVR)");
}

namespace {

using diff::SegmentId;
const diff::SegmentSet kAll{SegmentId::backbone, SegmentId::neck, SegmentId::head};

void apply_layout(SchemeConfig& c, Scheme scheme) {
  c.scheme = scheme;
  c.mosaic = scheme == Scheme::YCMVR || scheme == Scheme::YCMSVR;
  c.use_pretrain = scheme != Scheme::YR && scheme != Scheme::YVR;
  c.use_virtual = scheme != Scheme::YR;
  c.frozen_segments.clear();
  switch (scheme) {
    case Scheme::YR:
      c.transfer_segments.clear();
      break;
    case Scheme::YVR:
    case Scheme::YCVR:
    case Scheme::YCMVR:
      c.transfer_segments = kAll;
      break;
    case Scheme::YCSVR:
      c.transfer_segments = {SegmentId::backbone, SegmentId::neck};
      c.frozen_segments = {SegmentId::head};
      break;
    case Scheme::YCMSVR:
      c.transfer_segments = {SegmentId::backbone};
      c.frozen_segments = {SegmentId::head};
      break;
  }
}

const std::set<std::string> kLayoutKeys{"use_pretrain", "use_virtual", "mosaic", "transfer_segments",
                                        "frozen_segments"};

const std::set<std::string> kNetKeys{"num_classes", "boxes_per_cell", "input_size", "backbone_channels",
                                     "neck_channels"};

diff::NetConfig net_from_config(const KeyValueConfig& kv, diff::NetConfig net) {
  net.num_classes = static_cast<int>(kv.get_int("num_classes", net.num_classes));
  net.boxes_per_cell = static_cast<int>(kv.get_int("boxes_per_cell", net.boxes_per_cell));
  net.input_size = static_cast<int>(kv.get_int("input_size", net.input_size));
  net.neck_channels = static_cast<int>(kv.get_int("neck_channels", net.neck_channels));
  if (kv.has("backbone_channels")) {
    const auto parts = kv.get_list("backbone_channels");
    if (parts.size() != 3) throw ConfigError("backbone_channels needs three comma-separated values");
    for (std::size_t i = 0; i < 3; ++i) {
      KeyValueConfig one;
      one.set("c", parts[i]);
      net.backbone_channels[i] = static_cast<int>(one.get_int("c", 0));
    }
  }
  net.validate();
  return net;
}

void apply_layout_keys(SchemeConfig& c, const KeyValueConfig& kv) {
  c.use_pretrain = kv.get_bool("use_pretrain", c.use_pretrain);
  c.use_virtual = kv.get_bool("use_virtual", c.use_virtual);
  c.mosaic = kv.get_bool("mosaic", c.mosaic);
  if (kv.has("transfer_segments")) c.transfer_segments = diff::parse_segment_set(kv.get("transfer_segments"));
  if (kv.has("frozen_segments")) c.frozen_segments = diff::parse_segment_set(kv.get("frozen_segments"));
}

void apply_keys(SchemeConfig& c, const KeyValueConfig& kv) {
  if (kv.has("scheme")) apply_layout(c, parse_scheme(kv.get("scheme")));
  apply_layout_keys(c, kv);
  c.virtual_n = static_cast<int>(kv.get_int("virtual_n", c.virtual_n));
  c.real_n = static_cast<int>(kv.get_int("real_n", c.real_n));
  c.pretrain_n = static_cast<int>(kv.get_int("pretrain_n", c.pretrain_n));
  c.virtual_manifest = kv.get_string("virtual_manifest", c.virtual_manifest.string());
  c.real_train_manifest = kv.get_string("real_train_manifest", c.real_train_manifest.string());
  c.real_test_manifest = kv.get_string("real_test_manifest", c.real_test_manifest.string());
  c.data_dir = kv.get_string("data_dir", c.data_dir.string());
  c.work_dir = kv.get_string("work_dir", c.work_dir.string());
  c.epochs_c = static_cast<int>(kv.get_int("epochs_c", c.epochs_c));
  c.epochs_v = static_cast<int>(kv.get_int("epochs_v", c.epochs_v));
  c.epochs_r = static_cast<int>(kv.get_int("epochs_r", c.epochs_r));
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.lr = kv.get_double("lr", c.lr);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.lambda_noobj = kv.get_double("lambda_noobj", c.lambda_noobj);
  c.grad_clip = kv.get_double("grad_clip", c.grad_clip);
  c.conf_thresh = kv.get_double("conf_thresh", c.conf_thresh);
  c.iou_thresh = kv.get_double("iou_thresh", c.iou_thresh);
  c.nms_iou = kv.get_double("nms_iou", c.nms_iou);
  c.seed = kv.get_u64("seed", c.seed);
  c.max_objects = static_cast<int>(kv.get_int("max_objects", c.max_objects));
  c.min_extent = kv.get_double("min_extent", c.min_extent);
  c.max_extent = kv.get_double("max_extent", c.max_extent);
  c.clutter = static_cast<int>(kv.get_int("clutter", c.clutter));
  c.net = net_from_config(kv, c.net);
  c.virtual_profile.brightness = kv.get_double("virtual_brightness", c.virtual_profile.brightness);
  c.virtual_profile.noise_sigma = kv.get_double("virtual_noise", c.virtual_profile.noise_sigma);
  c.virtual_profile.palette_shift = kv.get_double("virtual_palette_shift", c.virtual_profile.palette_shift);
  c.real_profile.brightness = kv.get_double("real_brightness", c.real_profile.brightness);
  c.real_profile.noise_sigma = kv.get_double("real_noise", c.real_profile.noise_sigma);
  c.real_profile.palette_shift = kv.get_double("real_palette_shift", c.real_profile.palette_shift);
}

std::set<std::string> with(std::set<std::string> a, const std::set<std::string>& b) {
  a.insert(b.begin(), b.end());
  return a;
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt6(*v) : std::string(); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string describe(const synth::DomainProfile& p, const synth::SceneOptions& o, std::uint64_t seed,
                     int n) {
  std::ostringstream os;
  os << "seed=" << seed << "\nn=" << n << "\nprofile=" << p.name << ' ' << fmt6(p.brightness) << ' '
     << fmt6(p.noise_sigma) << ' ' << fmt6(p.palette_shift) << "\nclasses=" << o.num_classes
     << "\nmax_objects=" << o.max_objects << "\nsize=" << o.image_size << "\nextent=" << fmt6(o.min_extent)
     << ' ' << fmt6(o.max_extent) << "\nclutter=" << o.clutter
     << "\ntemplates=" << static_cast<int>(o.templates) << '\n';
  return os.str();
}

/// Generates a dataset unless `dir` already holds one produced with the same parameters.
synth::Manifest cached_dataset(std::uint64_t seed, int n, const synth::DomainProfile& profile,
                               const fs::path& dir, const synth::SceneOptions& options) {
  const std::string key = describe(profile, options, seed, n);
  const fs::path key_file = dir / "dataset.key";
  const fs::path manifest = dir / "manifest.csv";
  if (fs::exists(manifest) && read_text(key_file) == key) return synth::read_manifest(manifest);
  auto m = synth::generate_dataset(seed, n, profile, dir, options);
  write_text(key_file, key);
  return m;
}

}  // namespace

SchemeConfig SchemeConfig::preset(Scheme scheme) {
  SchemeConfig c;
  apply_layout(c, scheme);
  return c;
}

SchemeConfig SchemeConfig::from_config(const KeyValueConfig& kv, const SchemeConfig& base) {
  SchemeConfig c = base;
  apply_keys(c, kv);
  return c;
}

const std::set<std::string>& SchemeConfig::keys() {
  static const std::set<std::string> k = with(
      with({"scheme", "virtual_n", "real_n", "pretrain_n", "virtual_manifest", "real_train_manifest",
            "real_test_manifest", "data_dir", "work_dir", "epochs_c", "epochs_v", "epochs_r", "batch_size",
            "lr", "momentum", "lambda_noobj", "grad_clip", "conf_thresh", "iou_thresh", "nms_iou", "seed",
            "max_objects", "min_extent", "max_extent", "clutter", "virtual_brightness", "virtual_noise",
            "virtual_palette_shift", "real_brightness", "real_noise", "real_palette_shift"},
           kLayoutKeys),
      kNetKeys);
  return k;
}

void SchemeConfig::validate() const {
  net.validate();
  virtual_profile.validate();
  real_profile.validate();
  if (use_virtual && virtual_n < 1) throw ConfigError("virtual_n must be >= 1");
  if (use_pretrain && pretrain_n < 1) throw ConfigError("pretrain_n must be >= 1");
  if ((real_train_manifest.empty() || real_test_manifest.empty()) && real_n < 2) {
    throw ConfigError("real_n must be >= 2");
  }
  if (epochs_c < 0 || epochs_v < 0 || epochs_r < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  if (!(lambda_noobj >= 0.0)) throw ConfigError("lambda_noobj must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0 (0 disables clipping)");
  if (!(conf_thresh >= 0.0 && conf_thresh <= 1.0)) throw ConfigError("conf_thresh must be in [0,1]");
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) throw ConfigError("iou_thresh must be in (0,1]");
  if (max_objects < 1) throw ConfigError("max_objects must be >= 1");
  if (!(min_extent > 0.0 && min_extent <= max_extent && max_extent < 1.0)) {
    throw ConfigError("scene extents must satisfy 0 < min_extent <= max_extent < 1");
  }
  if (clutter < 0) throw ConfigError("clutter must be >= 0");
  if (!use_virtual && !use_pretrain) {
    if (!transfer_segments.empty() || !frozen_segments.empty()) {
      throw ConfigError("transfer/frozen segments need a source stage (use_virtual or use_pretrain)");
    }
  }
}

synth::SceneOptions SchemeConfig::scene_options() const {
  synth::SceneOptions o;
  o.num_classes = net.num_classes;
  o.max_objects = max_objects;
  o.image_size = net.input_size;
  o.min_extent = min_extent;
  o.max_extent = max_extent;
  o.clutter = clutter;
  return o;
}

DataPaths prepare_data(const SchemeConfig& config) {
  const fs::path data_dir = config.data_dir.empty() ? config.work_dir / "data" : config.data_dir;
  const auto options = config.scene_options();
  DataPaths paths;

  if (config.use_virtual) {
    if (config.virtual_manifest.empty()) {
      cached_dataset(derive_seed(config.seed, 100), config.virtual_n, config.virtual_profile,
                     data_dir / ("virtual_" + std::to_string(config.virtual_n)), options);
      paths.virtual_manifest = data_dir / ("virtual_" + std::to_string(config.virtual_n)) / "manifest.csv";
    } else {
      const auto pool = synth::read_manifest(config.virtual_manifest);
      const auto n = static_cast<std::size_t>(config.virtual_n);
      if (pool.size() < n) {
        throw ConfigError("virtual manifest " + config.virtual_manifest.string() + " has " +
                          std::to_string(pool.size()) + " rows, virtual_n is " + std::to_string(n));
      }
      if (pool.size() == n) {
        paths.virtual_manifest = config.virtual_manifest;
      } else {
        paths.virtual_manifest = config.work_dir / "virtual_subset.csv";
        synth::write_manifest(synth::sample_subset(pool, n, derive_seed(config.seed, 103)),
                              paths.virtual_manifest);
      }
    }
  }

  if (!config.real_train_manifest.empty() && !config.real_test_manifest.empty()) {
    paths.real_train_manifest = config.real_train_manifest;
    paths.real_test_manifest = config.real_test_manifest;
  } else {
    const fs::path real_dir = data_dir / ("real_" + std::to_string(config.real_n));
    const auto pool = cached_dataset(derive_seed(config.seed, 101), config.real_n, config.real_profile,
                                     real_dir, options);
    const auto [train, test] = synth::split_half(pool, derive_seed(config.seed, 102));
    paths.real_train_manifest = real_dir / "train.csv";
    paths.real_test_manifest = real_dir / "test.csv";
    synth::write_manifest(train, paths.real_train_manifest);
    synth::write_manifest(test, paths.real_test_manifest);
  }
  return paths;
}

double pretrain_generic_impl(std::uint64_t seed, const fs::path& out_weights, const diff::NetConfig& net,
                             const PretrainOptions& options) {
  if (options.n < 1) throw ConfigError("pretraining needs at least one image");
  if (!(options.brightness_jitter >= 0.0 && options.brightness_jitter <= 0.5)) {
    throw ConfigError("pretraining brightness jitter must be in [0, 0.5]");
  }
  synth::SceneOptions scene;
  scene.num_classes = net.num_classes;
  scene.max_objects = options.max_objects;
  scene.image_size = net.input_size;
  scene.templates = synth::TemplateSet::generic;
  std::vector<synth::Scene> data;
  data.reserve(static_cast<std::size_t>(options.n));
  // Per-image brightness jitter around the neutral profile. Without it the
  // features do not survive a global luminance shift.
  SplitMix64 jitter(derive_seed(seed, 4));
  for (int i = 0; i < options.n; ++i) {
    auto profile = synth::DomainProfile::neutral();
    profile.brightness = jitter.uniform(-options.brightness_jitter, options.brightness_jitter);
    data.push_back(synth::generate_scene(derive_seed(derive_seed(seed, 1), static_cast<std::uint64_t>(i)),
                                         profile, scene));
  }
  diff::Detector model(net, derive_seed(seed, 2));
  TrainOptions train = options.train;
  train.epochs = options.epochs;
  train.mosaic = false;
  train.seed = derive_seed(seed, 3);
  const double loss = train_stage(model, data, train);
  if (out_weights.has_parent_path()) fs::create_directories(out_weights.parent_path());
  diff::save_weights(model, out_weights);
  return loss;
}

void pretrain_generic(std::uint64_t seed, const fs::path& out_weights, const diff::NetConfig& net,
                      const PretrainOptions& options) {
  pretrain_generic_impl(seed, out_weights, net, options);
}

std::string RunReport::csv_header() {
  return "scheme,virtual_n,seed,loss_c,start_loss_v,loss_v,loss_r,map,ap_per_class";
}

std::string RunReport::csv_row() const {
  std::string aps;
  for (std::size_t c = 0; c < test.ap.size(); ++c) {
    if (c) aps += ';';
    aps += test.gt_count[c] > 0 ? fmt6(test.ap[c]) : std::string("na");
  }
  return std::string(scheme_name(scheme)) + "," + std::to_string(virtual_n) + "," + std::to_string(seed) +
         "," + fmt_opt(loss_c) + "," + fmt_opt(start_loss_v) + "," + fmt_opt(loss_v) + "," + fmt6(loss_r) +
         "," + fmt6(test.map) + "," + aps;
}

RunReport run_scheme(const SchemeConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(config.work_dir);
  const auto paths = prepare_data(config);
  const int K = config.net.num_classes;

  RunReport report;
  report.scheme = config.scheme;
  report.virtual_n = config.use_virtual ? config.virtual_n : 0;
  report.seed = config.seed;

  TrainOptions base;
  base.batch_size = config.batch_size;
  base.lr = config.lr;
  base.momentum = config.momentum;
  base.lambda_noobj = config.lambda_noobj;
  base.grad_clip = config.grad_clip;

  const fs::path stage_c = config.work_dir / "stage_C.sdw";
  const fs::path stage_v = config.work_dir / "stage_V.sdw";
  const fs::path stage_r = config.work_dir / "stage_R.sdw";

  if (config.use_pretrain) {
    PretrainOptions pre;
    pre.n = config.pretrain_n;
    pre.epochs = config.epochs_c;
    pre.max_objects = config.max_objects;
    pre.train = base;
    report.loss_c = pretrain_generic_impl(derive_seed(config.seed, 200), stage_c, config.net, pre);
  }

  fs::path source;
  if (config.use_virtual) {
    diff::Detector model(config.net, derive_seed(config.seed, 201));
    if (config.use_pretrain) diff::transfer_weights(model, stage_c, kAll);
    const auto data = load_dataset(synth::read_manifest(paths.virtual_manifest), K);
    report.start_loss_v = mean_loss(model, data, config.lambda_noobj);
    TrainOptions opts = base;
    opts.epochs = config.epochs_v;
    opts.mosaic = config.mosaic;
    opts.seed = derive_seed(config.seed, 301);
    report.loss_v = train_stage(model, data, opts);
    diff::save_weights(model, stage_v);
    source = stage_v;
  } else if (config.use_pretrain) {
    source = stage_c;
  }

  diff::Detector model(config.net, derive_seed(config.seed, 202));
  if (!source.empty()) {
    diff::SegmentSet load = config.transfer_segments;
    load.insert(config.frozen_segments.begin(), config.frozen_segments.end());
    diff::transfer_weights(model, source, load);
  }
  model.set_frozen(config.frozen_segments, true);
  {
    const auto data = load_dataset(synth::read_manifest(paths.real_train_manifest), K);
    TrainOptions opts = base;
    opts.epochs = config.epochs_r;
    opts.seed = derive_seed(config.seed, 302);
    report.loss_r = train_stage(model, data, opts);
  }
  diff::save_weights(model, stage_r);

  const auto test = load_dataset(synth::read_manifest(paths.real_test_manifest), K);
  report.test = evaluate_detector(model, test, {config.conf_thresh, config.nms_iou}, config.iou_thresh);
  write_text(config.work_dir / "report.csv", RunReport::csv_header() + "\n" + report.csv_row() + "\n");
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---------------------------------------------------------------------------
// Single stage

const std::set<std::string>& StageConfig::keys() {
  static const std::set<std::string> k = with(
      {"train_manifest", "init_weights", "transfer_segments", "frozen_segments", "out_weights",
       "eval_manifest", "report", "epochs", "batch_size", "lr", "momentum", "lambda_noobj", "grad_clip", "mosaic",
       "seed", "conf_thresh", "iou_thresh"},
      kNetKeys);
  return k;
}

StageConfig StageConfig::from_config(const KeyValueConfig& kv) {
  StageConfig c;
  c.train_manifest = kv.get("train_manifest");
  c.init_weights = kv.get_string("init_weights", "");
  if (kv.has("transfer_segments")) c.transfer_segments = diff::parse_segment_set(kv.get("transfer_segments"));
  if (kv.has("frozen_segments")) c.frozen_segments = diff::parse_segment_set(kv.get("frozen_segments"));
  c.out_weights = kv.get_string("out_weights", c.out_weights.string());
  c.eval_manifest = kv.get_string("eval_manifest", "");
  c.report = kv.get_string("report", "");
  c.train.epochs = static_cast<int>(kv.get_int("epochs", c.train.epochs));
  c.train.batch_size = static_cast<int>(kv.get_int("batch_size", c.train.batch_size));
  c.train.lr = kv.get_double("lr", c.train.lr);
  c.train.momentum = kv.get_double("momentum", c.train.momentum);
  c.train.lambda_noobj = kv.get_double("lambda_noobj", c.train.lambda_noobj);
  c.train.grad_clip = kv.get_double("grad_clip", c.train.grad_clip);
  c.train.mosaic = kv.get_bool("mosaic", c.train.mosaic);
  c.train.seed = kv.get_u64("seed", c.train.seed);
  c.conf_thresh = kv.get_double("conf_thresh", c.conf_thresh);
  c.iou_thresh = kv.get_double("iou_thresh", c.iou_thresh);
  c.net = net_from_config(kv, c.net);
  return c;
}

StageReport run_stage(const StageConfig& config) {
  config.net.validate();
  diff::Detector model(config.net, derive_seed(config.train.seed, 0));
  if (!config.init_weights.empty()) {
    diff::SegmentSet load = config.transfer_segments;
    load.insert(config.frozen_segments.begin(), config.frozen_segments.end());
    diff::transfer_weights(model, config.init_weights, load);
  }
  model.set_frozen(config.frozen_segments, true);
  const int K = config.net.num_classes;
  const auto data = load_dataset(synth::read_manifest(config.train_manifest), K);

  StageReport report;
  report.start_loss = mean_loss(model, data, config.train.lambda_noobj);
  TrainOptions opts = config.train;
  opts.seed = derive_seed(config.train.seed, 1);
  report.final_loss = train_stage(model, data, opts);
  if (config.out_weights.has_parent_path()) fs::create_directories(config.out_weights.parent_path());
  diff::save_weights(model, config.out_weights);

  if (!config.eval_manifest.empty()) {
    const auto test = load_dataset(synth::read_manifest(config.eval_manifest), K);
    report.test = evaluate_detector(model, test, {config.conf_thresh, detloss::kDefaultNmsIou},
                                    config.iou_thresh);
    if (!config.report.empty()) {
      eval::write_ap_report(config.report, *report.test, synth::class_names(K));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Matrix

std::vector<ReferenceValue> reference_table() {
  return {
      {"YR", 220, 0.0},       {"YVR", 5000, 27.251},    {"YVR", 10000, 51.369},
      {"YCVR", 5000, 65.513}, {"YCVR", 10000, 72.264},  {"YCVR", 20000, 59.691},
      {"YCSVR", 5000, 74.457}, {"YCSVR", 10000, 72.096}, {"YCSVR", 20000, 73.369},
      {"YCMVR", 5000, 55.010}, {"YCMVR", 10000, 54.368}, {"YCMSVR", 5000, 59.977},
      {"YCMSVR", 10000, 53.788},
  };
}

namespace {

const std::set<std::string> kMatrixKeys{"schemes", "virtual_ns", "seeds", "out", "matrix_dir",
                                        "reference_rows"};

}  // namespace

const std::set<std::string>& MatrixConfig::keys() {
  static const std::set<std::string> k = [] {
    std::set<std::string> s = with(SchemeConfig::keys(), kMatrixKeys);
    s.erase("scheme");
    s.erase("virtual_n");
    s.erase("seed");
    return s;
  }();
  return k;
}

MatrixConfig MatrixConfig::from_config(const KeyValueConfig& kv) {
  MatrixConfig m;
  for (const auto& s : kv.get_list("schemes")) m.schemes.push_back(parse_scheme(s));
  for (const auto& n : kv.get_list("virtual_ns")) {
    KeyValueConfig one;
    one.set("n", n);
    m.virtual_ns.push_back(static_cast<int>(one.get_int("n", 0)));
  }
  for (const auto& s : kv.get_list("seeds")) {
    KeyValueConfig one;
    one.set("s", s);
    m.seeds.push_back(one.get_u64("s", 0));
  }
  if (m.schemes.empty() || m.virtual_ns.empty() || m.seeds.empty()) {
    throw ConfigError("matrix config needs non-empty schemes, virtual_ns and seeds");
  }
  m.out_csv = kv.get_string("out", m.out_csv.string());
  m.work_dir = kv.get_string("matrix_dir", m.work_dir.string());
  m.reference_rows = kv.get_bool("reference_rows", m.reference_rows);
  KeyValueConfig scheme_kv;
  for (const auto& [k, v] : kv.values()) {
    if (!kMatrixKeys.count(k)) scheme_kv.set(k, v);
  }
  m.base = SchemeConfig::from_config(scheme_kv, SchemeConfig{});
  for (const auto& k : kLayoutKeys) {
    if (scheme_kv.has(k)) m.layout_overrides.set(k, scheme_kv.get(k));
  }
  return m;
}

std::string matrix_csv(const std::vector<MatrixCell>& cells, bool reference_rows) {
  std::string out = "kind,scheme,virtual_n,seed,map,map_std,loss_c,loss_v,loss_r,status,note\n";
  auto sanitize = [](std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
  };
  for (const auto& c : cells) {
    out += "cell," + std::string(scheme_name(c.scheme)) + "," + std::to_string(c.virtual_n) + "," +
           std::to_string(c.seed) + ",";
    if (c.report) {
      out += fmt6(c.report->test.map) + ",," + fmt_opt(c.report->loss_c) + "," + fmt_opt(c.report->loss_v) +
             "," + fmt6(c.report->loss_r) + ",ok,\n";
    } else {
      out += ",,,,,error," + sanitize(c.error) + "\n";
    }
  }
  // Aggregates per (scheme, n) in first-appearance order.
  std::vector<std::pair<Scheme, int>> keys;
  for (const auto& c : cells) {
    const std::pair<Scheme, int> k{c.scheme, c.virtual_n};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  for (const auto& [scheme, n] : keys) {
    std::vector<double> maps;
    for (const auto& c : cells) {
      if (c.scheme == scheme && c.virtual_n == n && c.report) maps.push_back(c.report->test.map);
    }
    out += "aggregate," + std::string(scheme_name(scheme)) + "," + std::to_string(n) + ",,";
    if (maps.empty()) {
      out += ",,,,,error,no completed cells\n";
      continue;
    }
    double mean = 0.0;
    for (double v : maps) mean += v;
    mean /= static_cast<double>(maps.size());
    double var = 0.0;
    for (double v : maps) var += (v - mean) * (v - mean);
    const double sd = maps.size() > 1 ? std::sqrt(var / static_cast<double>(maps.size() - 1)) : 0.0;
    out += fmt6(mean) + "," + fmt6(sd) + ",,,,ok,n=" + std::to_string(maps.size()) + "\n";
  }
  if (reference_rows) {
    for (const auto& r : reference_table()) {
      out += std::string("reference,") + r.scheme + "," + std::to_string(r.samples) + ",," +
             fmt6(r.map_percent / 100.0) + ",,,,,ref,full-scale reference value; not reproducible at desk scale\n";
    }
  }
  return out;
}

std::vector<MatrixCell> run_matrix(const MatrixConfig& config) {
  std::vector<MatrixCell> cells;
  for (Scheme s : config.schemes) {
    for (int n : config.virtual_ns) {
      for (std::uint64_t seed : config.seeds) cells.push_back({s, n, seed, std::nullopt, {}});
    }
  }
  const int max_n = *std::max_element(config.virtual_ns.begin(), config.virtual_ns.end());

  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto& cell = cells[i];
    try {
      SchemeConfig c = config.base;
      apply_layout(c, cell.scheme);
      apply_layout_keys(c, config.layout_overrides);
      c.seed = cell.seed;
      c.virtual_n = cell.virtual_n;
      c.data_dir = config.work_dir / "data" / ("seed_" + std::to_string(cell.seed));
      c.work_dir = config.work_dir / (std::string(scheme_name(cell.scheme)) + "_n" +
                                      std::to_string(cell.virtual_n) + "_s" + std::to_string(cell.seed));
      if (c.use_virtual && c.virtual_manifest.empty()) {
        // One virtual pool per seed; each cell draws its n images from it.
        const fs::path pool_dir = c.data_dir / ("virtual_pool_" + std::to_string(max_n));
        cached_dataset(derive_seed(c.seed, 100), max_n, c.virtual_profile, pool_dir, c.scene_options());
        c.virtual_manifest = pool_dir / "manifest.csv";
      }
      cell.report = run_scheme(c);
    } catch (const std::exception& e) {
      cell.error = e.what();
      if (cell.error.empty()) cell.error = "unknown failure";
    }
    // Completed rows survive a later crash.
    const std::vector<MatrixCell> done(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(i + 1));
    write_text(config.out_csv, matrix_csv(done, config.reference_rows));
  }
  write_text(config.out_csv, matrix_csv(cells, config.reference_rows));
  return cells;
}

}  // namespace vdet::harness
