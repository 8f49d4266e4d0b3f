#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "vdet/detloss.hpp"
#include "vdet/geometry.hpp"

namespace vdet::synth {

using detloss::Annotation;
using geometry::BBox;

/// Photometric signature of a data domain, applied as the final rendering pass.
struct DomainProfile {
  std::string name = "real";
  double brightness = 0.0;     // additive luminance offset, [-0.5, 0.5]
  double noise_sigma = 0.1;    // additive Gaussian noise, [0, 0.2]
  double palette_shift = 0.0;  // hue rotation in degrees

  void validate() const;

  static DomainProfile virtual_domain() { return {"virtual", -0.25, 0.05, 0.0}; }
  static DomainProfile real_domain() { return {"real", 0.0, 0.1, 0.0}; }
  static DomainProfile neutral() { return {"neutral", 0.0, 0.0, 0.0}; }
  /// "virtual", "real" or "neutral"; throws ConfigError otherwise.
  static DomainProfile by_name(const std::string& name);
};

/// H x W x 3 interleaved RGB in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  float& at(int y, int x, int c) noexcept {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  float at(int y, int x, int c) const noexcept {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  double mean() const noexcept;
};

struct Scene {
  Image image;
  std::vector<Annotation> annotations;
  std::uint64_t seed = 0;
};

enum class TemplateSet {
  ppe,      // seven protective-equipment stand-ins with a skewed class frequency
  generic,  // neutral-colored patterns for the auxiliary pretraining task
};

/// Display names of the first `num_classes` classes of a template set.
std::vector<std::string> class_names(int num_classes, TemplateSet set = TemplateSet::ppe);

struct SceneOptions {
  int num_classes = 7;
  int max_objects = 3;
  int image_size = 64;
  double min_extent = 0.15;
  double max_extent = 0.4;
  int clutter = 2;  // upper bound on unlabeled distractor strokes
  TemplateSet templates = TemplateSet::ppe;
};

/// Renders 1..max_objects labeled objects over a textured background, then
/// applies the profile. Deterministic in (seed, profile, options).
Scene generate_scene(std::uint64_t seed, const DomainProfile& profile, const SceneOptions& options);
Scene generate_scene(std::uint64_t seed, const DomainProfile& profile, int num_classes,
                     int max_objects);

struct ManifestRow {
  std::filesystem::path image;
  std::filesystem::path annotation;
  int num_objects = 0;
  std::vector<int> class_counts;

  friend bool operator==(const ManifestRow&, const ManifestRow&) = default;
};

struct Manifest {
  std::vector<ManifestRow> rows;

  std::size_t size() const noexcept { return rows.size(); }
  int num_classes() const noexcept;
  /// Object instances per class over all rows.
  std::vector<long> class_totals() const;
};

/// CSV with header "path,annotation_path,num_objects,counts_per_class"; paths
/// are stored relative to the manifest's directory.
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

/// Writes <stem>.ppm and <stem>.txt into `dir` and returns the manifest row.
ManifestRow write_scene(const Scene& scene, const std::filesystem::path& dir, const std::string& stem,
                        int num_classes);

/// Writes n scenes (PPM + annotation text) and out_dir/manifest.csv. Scene i
/// uses derive_seed(seed, i).

Manifest generate_dataset(std::uint64_t seed, int n, const DomainProfile& profile,
                          const std::filesystem::path& out_dir, const SceneOptions& options = {});

/// Random subset of n rows whose per-class instance shares stay within
/// `tolerance` of the parent's when a swap search can reach it. Rows keep the
/// parent order.
Manifest sample_subset(const Manifest& manifest, std::size_t n, std::uint64_t seed,
                       double tolerance = 0.02);

/// Disjoint random halves of sizes ceil(n/2) and floor(n/2).
std::pair<Manifest, Manifest> split_half(const Manifest& manifest, std::uint64_t seed);

/// Placement of one source scene inside a mosaic: uniform scale anchored at
/// the pivot, clipped to the quadrant [x0,x1] x [y0,y1].
struct QuadrantMap {
  double scale = 1.0;
  double offset_x = 0.0;
  double offset_y = 0.0;
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;

  BBox map(const BBox& b) const noexcept {
    return {offset_x + scale * b.cx, offset_y + scale * b.cy, scale * b.w, scale * b.h};
  }
  BBox unmap(const BBox& b) const noexcept {
    return {(b.cx - offset_x) / scale, (b.cy - offset_y) / scale, b.w / scale, b.h / scale};
  }
  /// Quadrant expressed in source coordinates.
  BBox source_window() const noexcept {
    return BBox::from_corners((x0 - offset_x) / scale, (y0 - offset_y) / scale,
                              (x1 - offset_x) / scale, (y1 - offset_y) / scale);
  }
};

/// Maps for the top-left, top-right, bottom-left and bottom-right quadrants.
std::array<QuadrantMap, 4> quadrant_maps(double pivot_x, double pivot_y);

inline constexpr double kMosaicMinKeptFraction = 0.2;

/// Four-image mosaic around a pivot drawn from [0.25, 0.75]^2.
Scene mosaic(const std::array<Scene, 4>& scenes, std::uint64_t seed, int out_height, int out_width);
Scene mosaic_at(const std::array<Scene, 4>& scenes, double pivot_x, double pivot_y, int out_height,
                int out_width);

/// Lines "class_id cx cy w h" with 6 decimals.
void write_annotations(const std::filesystem::path& path, const std::vector<Annotation>& annotations);
/// num_classes < 0 disables the class range check.
std::vector<Annotation> read_annotations(const std::filesystem::path& path, int num_classes = -1);
std::string format_annotations(const std::vector<Annotation>& annotations);
std::vector<Annotation> parse_annotations(const std::string& text, int num_classes = -1);

/// Binary P6, maxval 255.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Image plus annotations loaded from one manifest row.
Scene load_scene(const ManifestRow& row, int num_classes = -1);

}  // namespace vdet::synth
