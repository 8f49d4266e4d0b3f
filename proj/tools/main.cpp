// vdet: command-line front end for data generation, training and evaluation.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "vdet/error.hpp"
#include "vdet/evaluation.hpp"
#include "vdet/harness.hpp"
#include "vdet/kvconfig.hpp"
#include "vdet/network.hpp"
#include "vdet/rng.hpp"
#include "vdet/synthdata.hpp"

namespace fs = std::filesystem;
using namespace vdet;

namespace {

int cmd_generate(int n, const std::string& profile_name, std::uint64_t seed, const fs::path& out,
                 const synth::SceneOptions& options) {
  const auto profile = synth::DomainProfile::by_name(profile_name);
  const auto m = synth::generate_dataset(seed, n, profile, out, options);
  std::printf("wrote %zu scenes to %s\n", m.size(), (out / "manifest.csv").string().c_str());
  return 0;
}

int cmd_sample(const fs::path& manifest, std::size_t n, std::uint64_t seed, const fs::path& out) {
  const auto m = synth::read_manifest(manifest);
  const auto sub = synth::sample_subset(m, n, seed);
  synth::write_manifest(sub, out);
  std::printf("sampled %zu of %zu rows into %s\n", sub.size(), m.size(), out.string().c_str());
  return 0;
}

int cmd_split(const fs::path& manifest, std::uint64_t seed, const fs::path& train, const fs::path& test) {
  const auto [a, b] = synth::split_half(synth::read_manifest(manifest), seed);
  synth::write_manifest(a, train);
  synth::write_manifest(b, test);
  std::printf("train %zu rows, test %zu rows\n", a.size(), b.size());
  return 0;
}

int cmd_mosaic(const std::vector<fs::path>& manifests, std::uint64_t seed, int n, const fs::path& out) {
  synth::Manifest pool;
  for (const auto& p : manifests) {
    auto m = synth::read_manifest(p);
    if (!pool.rows.empty() && m.num_classes() != pool.num_classes()) {
      throw ConfigError("manifest " + p.string() + " has a different class count");
    }
    pool.rows.insert(pool.rows.end(), m.rows.begin(), m.rows.end());
  }
  if (pool.rows.empty()) throw InvalidInput("mosaic: no input rows");
  const int K = pool.num_classes();
  const int count = n > 0 ? n : static_cast<int>(pool.size());
  SplitMix64 rng(seed);
  synth::Manifest result;
  for (int i = 0; i < count; ++i) {
    std::array<synth::Scene, 4> parts;
    for (auto& s : parts) s = synth::load_scene(pool.rows[rng.below(pool.size())], K);
    const auto& first = parts[0].image;
    const auto scene = synth::mosaic(parts, rng.next(), first.height, first.width);
    char stem[32];
    std::snprintf(stem, sizeof stem, "mosaic_%06d", i);
    result.rows.push_back(synth::write_scene(scene, out, stem, K));
  }
  synth::write_manifest(result, out / "manifest.csv");
  std::printf("wrote %d mosaics to %s\n", count, (out / "manifest.csv").string().c_str());
  return 0;
}

int cmd_train(const fs::path& config) {
  const auto kv = KeyValueConfig::load(config, harness::StageConfig::keys());
  const auto cfg = harness::StageConfig::from_config(kv);
  const auto report = harness::run_stage(cfg);
  std::printf("start_loss %.6f\nfinal_loss %.6f\nweights %s\n", report.start_loss, report.final_loss,
              cfg.out_weights.string().c_str());
  if (report.test) std::printf("mAP %.6f\n", report.test->map);
  return 0;
}

int cmd_eval(const fs::path& weights, const fs::path& manifest, double iou, double conf, const fs::path& out,
             int boxes, int input_size) {
  const auto net_cfg = diff::config_from_weights(weights, boxes, input_size);
  diff::Detector net(net_cfg);
  diff::load_weights(net, weights);
  const auto data = harness::load_dataset(synth::read_manifest(manifest), net_cfg.num_classes);
  const auto report = harness::evaluate_detector(net, data, {conf, detloss::kDefaultNmsIou}, iou);
  const auto names = synth::class_names(net_cfg.num_classes);
  if (!out.empty()) eval::write_ap_report(out, report, names);
  std::cout << eval::format_ap_report(report, names);
  return 0;
}

int cmd_histogram(const fs::path& manifest, const fs::path& out) {
  const auto hist = eval::average_color_histogram(synth::read_manifest(manifest));
  eval::write_histogram_csv(out, hist);
  std::printf("mean intensity %.6f\n", hist.mean_intensity());
  return 0;
}

int cmd_scheme(const std::string& name, int virtual_n, std::uint64_t seed, const fs::path& out,
               const fs::path& config) {
  harness::SchemeConfig cfg = harness::SchemeConfig::preset(harness::parse_scheme(name));
  if (!config.empty()) {
    auto kv = KeyValueConfig::load(config, harness::SchemeConfig::keys());
    cfg = harness::SchemeConfig::from_config(kv, cfg);
  }
  if (virtual_n > 0) cfg.virtual_n = virtual_n;
  cfg.seed = seed;
  cfg.work_dir = out;
  const auto report = harness::run_scheme(cfg);
  std::printf("%s\n%s\n", harness::RunReport::csv_header().c_str(), report.csv_row().c_str());
  std::printf("elapsed %.1f s\n", report.seconds);
  return 0;
}

int cmd_matrix(const fs::path& config) {
  const auto kv = KeyValueConfig::load(config, harness::MatrixConfig::keys());
  const auto cfg = harness::MatrixConfig::from_config(kv);
  const auto cells = harness::run_matrix(cfg);
  int failed = 0;
  for (const auto& c : cells) {
    if (!c.report) {
      ++failed;
      std::fprintf(stderr, "cell %s/%d/%llu failed: %s\n", std::string(harness::scheme_name(c.scheme)).c_str(),
                   c.virtual_n, static_cast<unsigned long long>(c.seed), c.error.c_str());
    }
  }
  std::printf("wrote %s (%zu cells, %d failed)\n", cfg.out_csv.string().c_str(), cells.size(), failed);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual-to-real object detection toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  fs::path out, manifest, config;

  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  int gen_n = 0;
  std::string profile = "real";
  synth::SceneOptions scene;
  gen->add_option("--n", gen_n, "Number of scenes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--profile", profile, "Photometric profile: virtual, real or neutral");
  gen->add_option("--seed", seed, "Master seed");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--classes", scene.num_classes, "Number of classes")->check(CLI::Range(1, 7));
  gen->add_option("--max-objects", scene.max_objects, "Maximum objects per scene")->check(CLI::PositiveNumber);
  gen->add_option("--size", scene.image_size, "Image side in pixels")->check(CLI::PositiveNumber);

  auto* sample = app.add_subcommand("sample", "Class-balanced random subset of a manifest");
  std::size_t sample_n = 0;
  sample->add_option("--manifest", manifest)->required();
  sample->add_option("--n", sample_n)->required();
  sample->add_option("--seed", seed);
  sample->add_option("--out", out)->required();

  auto* split = app.add_subcommand("split", "Random 50:50 train/test split");
  fs::path out_train, out_test;
  split->add_option("--manifest", manifest)->required();
  split->add_option("--seed", seed);
  split->add_option("--out-train", out_train)->required();
  split->add_option("--out-test", out_test)->required();

  auto* mos = app.add_subcommand("mosaic", "Composite four random scenes per output image");
  std::vector<fs::path> manifests;
  int mosaic_n = 0;
  mos->add_option("--manifests", manifests, "Input manifests")->required();
  mos->add_option("--seed", seed);
  mos->add_option("--n", mosaic_n, "Number of mosaics (default: pool size)");
  mos->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one stage from a key = value config");
  train->add_option("--config", config)->required()->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Evaluate weights on a manifest");
  fs::path weights;
  double iou_thresh = 0.5, conf_thresh = 0.25;
  int boxes = diff::NetConfig{}.boxes_per_cell, input_size = diff::NetConfig{}.input_size;
  ev->add_option("--weights", weights)->required();
  ev->add_option("--manifest", manifest)->required();
  ev->add_option("--iou-thresh", iou_thresh)->capture_default_str();
  ev->add_option("--conf-thresh", conf_thresh)->capture_default_str();
  ev->add_option("--report", out, "AP report CSV");
  ev->add_option("--boxes", boxes, "Boxes per cell of the weights")->capture_default_str();
  ev->add_option("--input-size", input_size, "Input side of the weights")->capture_default_str();

  auto* hist = app.add_subcommand("histogram", "Average colour histogram of a manifest");
  hist->add_option("--manifest", manifest)->required();
  hist->add_option("--out", out)->required();

  auto* sch = app.add_subcommand("scheme", "Run one training scheme end to end");
  std::string scheme_name;
  int virtual_n = 0;
  sch->add_option("--name", scheme_name, "YR, YVR, YCVR, YCSVR, YCMVR or YCMSVR")->required();
  sch->add_option("--virtual-n", virtual_n, "Virtual training images");
  sch->add_option("--seed", seed);
  sch->add_option("--out", out, "Work directory")->default_val("run");
  sch->add_option("--config", config, "Optional key = value overrides");

  auto* mat = app.add_subcommand("matrix", "Run a scheme x size x seed matrix");
  mat->add_option("--config", config)->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(gen_n, profile, seed, out, scene);
    if (*sample) return cmd_sample(manifest, sample_n, seed, out);
    if (*split) return cmd_split(manifest, seed, out_train, out_test);
    if (*mos) return cmd_mosaic(manifests, seed, mosaic_n, out);
    if (*train) return cmd_train(config);
    if (*ev) return cmd_eval(weights, manifest, iou_thresh, conf_thresh, out, boxes, input_size);
    if (*hist) return cmd_histogram(manifest, out);
    if (*sch) return cmd_scheme(scheme_name, virtual_n, seed, out, config);
    if (*mat) return cmd_matrix(config);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
