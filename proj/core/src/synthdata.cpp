#include "vdet/synthdata.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>

#include "vdet/error.hpp"
#include "vdet/rng.hpp"

namespace vdet::synth {
namespace fs = std::filesystem;

void DomainProfile::validate() const {
  if (!(brightness >= -0.5 && brightness <= 0.5)) {
    throw ConfigError("profile '" + name + "': brightness must lie in [-0.5, 0.5]");
  }
  if (!(noise_sigma >= 0.0 && noise_sigma <= 0.2)) {
    throw ConfigError("profile '" + name + "': noise_sigma must lie in [0, 0.2]");
  }
  if (!std::isfinite(palette_shift)) {
    throw ConfigError("profile '" + name + "': palette_shift must be finite");
  }
}

DomainProfile DomainProfile::by_name(const std::string& name) {
  if (name == "virtual") return virtual_domain();
  if (name == "real") return real_domain();
  if (name == "neutral") return neutral();
  throw ConfigError("unknown profile '" + name + "' (valid: virtual, real, neutral)");
}

double Image::mean() const noexcept {
  if (pixels.empty()) return 0.0;
  double s = 0.0;
  for (float v : pixels) s += v;
  return s / static_cast<double>(pixels.size());
}

// ---------------------------------------------------------------------------
// Class templates

namespace {

enum class Pattern { ellipse, dome, ring, diamond, triangle, stripes, cross, frame, checker, bars };

struct Rgb {
  float r, g, b;
};

struct ClassTemplate {
  const char* name;
  Pattern pattern;
  Rgb primary;
  Rgb secondary;
  double frequency;
};

// helmet is the most frequent class and ear-protection the rarest.
constexpr ClassTemplate kPpe[] = {
    {"head", Pattern::ellipse, {0.87f, 0.68f, 0.52f}, {0.87f, 0.68f, 0.52f}, 0.15},
    {"helmet", Pattern::dome, {0.95f, 0.85f, 0.35f}, {0.95f, 0.85f, 0.35f}, 0.30},
    {"ear-protection", Pattern::ring, {0.90f, 0.35f, 0.35f}, {0.90f, 0.35f, 0.35f}, 0.04},
    {"welding-mask", Pattern::diamond, {0.40f, 0.45f, 0.85f}, {0.40f, 0.45f, 0.85f}, 0.08},
    {"bare-chest", Pattern::triangle, {0.85f, 0.55f, 0.65f}, {0.85f, 0.55f, 0.65f}, 0.10},
    {"vest", Pattern::stripes, {0.95f, 0.60f, 0.35f}, {0.80f, 0.95f, 0.40f}, 0.18},
    {"person", Pattern::cross, {0.40f, 0.80f, 0.45f}, {0.40f, 0.80f, 0.45f}, 0.15},
};

constexpr ClassTemplate kGeneric[] = {
    {"frame", Pattern::frame, {0.90f, 0.90f, 0.90f}, {0.90f, 0.90f, 0.90f}, 1.0},
    {"checker", Pattern::checker, {0.40f, 0.40f, 0.40f}, {0.92f, 0.92f, 0.92f}, 1.0},
    {"disk", Pattern::ellipse, {0.35f, 0.35f, 0.38f}, {0.35f, 0.35f, 0.38f}, 1.0},
    {"bars", Pattern::bars, {0.85f, 0.85f, 0.80f}, {0.40f, 0.40f, 0.45f}, 1.0},
    {"wedge", Pattern::triangle, {0.75f, 0.75f, 0.78f}, {0.75f, 0.75f, 0.78f}, 1.0},
    {"rhombus", Pattern::diamond, {0.92f, 0.92f, 0.88f}, {0.92f, 0.92f, 0.88f}, 1.0},
    {"plus", Pattern::cross, {0.38f, 0.38f, 0.35f}, {0.38f, 0.38f, 0.35f}, 1.0},
};

std::span<const ClassTemplate> template_table(TemplateSet set) {
  if (set == TemplateSet::generic) return kGeneric;
  return kPpe;
}

Rgb rotate_hue(Rgb c, double degrees) {
  if (degrees == 0.0) return c;
  const double a = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(a), sn = std::sin(a);
  const double k = (1.0 - cs) / 3.0, q = std::sqrt(1.0 / 3.0) * sn;
  const double r = c.r * (cs + k) + c.g * (k - q) + c.b * (k + q);
  const double g = c.r * (k + q) + c.g * (cs + k) + c.b * (k - q);
  const double b = c.r * (k - q) + c.g * (k + q) + c.b * (cs + k);
  auto clip = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };
  return {clip(r), clip(g), clip(b)};
}

/// Template for class i; indices beyond the table reuse a pattern with a rotated palette.
ClassTemplate class_template(int i, TemplateSet set) {
  const auto table = template_table(set);
  const auto n = static_cast<int>(table.size());
  ClassTemplate t = table[static_cast<std::size_t>(i % n)];
  const int cycle = i / n;
  if (cycle > 0) {
    t.primary = rotate_hue(t.primary, 47.0 * cycle);
    t.secondary = rotate_hue(t.secondary, 47.0 * cycle);
    t.frequency = 0.1;
  }
  return t;
}

/// Whether local coordinates (u, v) in [0,1]^2 are inside the pattern, and
/// which of its two colors applies.
bool covers(Pattern p, double u, double v, bool& secondary) {
  const double x = 2.0 * u - 1.0, y = 2.0 * v - 1.0;
  secondary = false;
  switch (p) {
    case Pattern::ellipse: return x * x + y * y <= 1.0;
    case Pattern::dome: return x * x + (1.0 - v) * (1.0 - v) <= 1.0;
    case Pattern::ring: {
      const double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case Pattern::diamond: return std::abs(x) + std::abs(y) <= 1.0;
    case Pattern::triangle: return std::abs(x) <= v;
    case Pattern::stripes: secondary = static_cast<int>(v * 4.0) % 2 == 1; return true;
    case Pattern::cross: return std::abs(x) <= 0.35 || std::abs(y) <= 0.35;
    case Pattern::frame: return std::abs(x) >= 0.55 || std::abs(y) >= 0.55;
    case Pattern::checker: secondary = (u < 0.5) != (v < 0.5); return true;
    case Pattern::bars: secondary = static_cast<int>(u * 4.0) % 2 == 1; return true;
  }
  return false;
}

double quantize6(double v) { return std::round(v * 1e6) / 1e6; }

void paint_object(Image& img, const BBox& box, const ClassTemplate& t, float jitter) {
  const int W = img.width, H = img.height;
  const int x_lo = std::max(0, static_cast<int>(std::floor(box.left() * W)));
  const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(box.right() * W)));
  const int y_lo = std::max(0, static_cast<int>(std::floor(box.top() * H)));
  const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(box.bottom() * H)));
  for (int y = y_lo; y <= y_hi; ++y) {
    const double v = ((y + 0.5) / H - box.top()) / box.h;
    if (v < 0.0 || v > 1.0) continue;
    for (int x = x_lo; x <= x_hi; ++x) {
      const double u = ((x + 0.5) / W - box.left()) / box.w;
      if (u < 0.0 || u > 1.0) continue;
      bool second = false;
      if (!covers(t.pattern, u, v, second)) continue;
      const Rgb c = second ? t.secondary : t.primary;
      img.at(y, x, 0) = std::clamp(c.r + jitter, 0.0f, 1.0f);
      img.at(y, x, 1) = std::clamp(c.g + jitter, 0.0f, 1.0f);
      img.at(y, x, 2) = std::clamp(c.b + jitter, 0.0f, 1.0f);
    }
  }
}

void paint_background(Image& img, SplitMix64& rng, int clutter) {
  float top[3], bottom[3];
  for (int c = 0; c < 3; ++c) {
    top[c] = static_cast<float>(rng.uniform(0.45, 0.7));
    bottom[c] = static_cast<float>(rng.uniform(0.45, 0.7));
  }
  for (int y = 0; y < img.height; ++y) {
    const float t = img.height > 1 ? static_cast<float>(y) / static_cast<float>(img.height - 1) : 0.0f;
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = top[c] + (bottom[c] - top[c]) * t;
    }
  }
  // Unlabeled distractor strokes.
  const int strokes = clutter > 0 ? static_cast<int>(rng.below(static_cast<std::uint64_t>(clutter) + 1)) : 0;
  for (int s = 0; s < strokes; ++s) {
    const bool horizontal = rng.uniform() < 0.5;
    const int len = static_cast<int>(rng.uniform(0.2, 0.6) * (horizontal ? img.width : img.height));
    const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.width)));
    const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(img.height)));
    const float col[3] = {static_cast<float>(rng.uniform(0.35, 0.95)),
                          static_cast<float>(rng.uniform(0.35, 0.95)),
                          static_cast<float>(rng.uniform(0.35, 0.95))};
    for (int i = 0; i < len; ++i) {
      const int x = horizontal ? x0 + i : x0;
      const int y = horizontal ? y0 : y0 + i;
      if (x >= img.width || y >= img.height) break;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = col[c];
    }
  }
}

void apply_profile(Image& img, const DomainProfile& profile, std::uint64_t seed) {
  SplitMix64 noise(seed);
  const bool rotate = profile.palette_shift != 0.0;
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    Rgb c{img.pixels[i], img.pixels[i + 1], img.pixels[i + 2]};
    if (rotate) c = rotate_hue(c, profile.palette_shift);
    const float vals[3] = {c.r, c.g, c.b};
    for (int k = 0; k < 3; ++k) {
      double v = vals[k] + profile.brightness;
      if (profile.noise_sigma > 0.0) v += profile.noise_sigma * noise.normal();
      img.pixels[i + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace

std::vector<std::string> class_names(int num_classes, TemplateSet set) {
  std::vector<std::string> out;
  const auto n = static_cast<int>(template_table(set).size());
  for (int i = 0; i < num_classes; ++i) {
    std::string name = class_template(i, set).name;
    if (i >= n) name += "-" + std::to_string(i / n);
    out.push_back(std::move(name));
  }
  return out;
}

Scene generate_scene(std::uint64_t seed, const DomainProfile& profile, const SceneOptions& options) {
  profile.validate();
  if (options.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (options.max_objects < 1) throw ConfigError("max_objects must be >= 1");
  if (options.image_size < 8) throw ConfigError("image_size must be >= 8");
  if (!(options.min_extent > 0.0 && options.min_extent <= options.max_extent &&
        options.max_extent < 0.9)) {
    throw ConfigError("object extents must satisfy 0 < min <= max < 0.9");
  }

  Scene scene;
  scene.seed = seed;
  scene.image = Image(options.image_size, options.image_size);
  SplitMix64 rng(derive_seed(seed, 0));
  paint_background(scene.image, rng, options.clutter);

  std::vector<double> weights;
  for (int k = 0; k < options.num_classes; ++k) {
    weights.push_back(class_template(k, options.templates).frequency);
  }

  const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(options.max_objects)));
  constexpr double kMargin = 0.01;
  constexpr double kMaxOverlap = 0.2;
  for (int i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.categorical(weights));
    const float jitter = static_cast<float>(rng.uniform(-0.05, 0.05));
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double w = quantize6(rng.uniform(options.min_extent, options.max_extent));
      const double h = quantize6(rng.uniform(options.min_extent, options.max_extent));
      const double cx = quantize6(rng.uniform(0.5 * w + kMargin, 1.0 - 0.5 * w - kMargin));
      const double cy = quantize6(rng.uniform(0.5 * h + kMargin, 1.0 - 0.5 * h - kMargin));
      const BBox box{cx, cy, w, h};
      const bool crowded =
          std::any_of(scene.annotations.begin(), scene.annotations.end(),
                      [&](const Annotation& a) { return geometry::iou(a.box, box) > kMaxOverlap; });
      if (crowded && !scene.annotations.empty()) continue;
      paint_object(scene.image, box, class_template(cls, options.templates), jitter);
      scene.annotations.push_back({cls, box});
      break;
    }
  }
  apply_profile(scene.image, profile, derive_seed(seed, 1));
  return scene;
}

Scene generate_scene(std::uint64_t seed, const DomainProfile& profile, int num_classes,
                     int max_objects) {
  SceneOptions opts;
  opts.num_classes = num_classes;
  opts.max_objects = max_objects;
  return generate_scene(seed, profile, opts);
}

// ---------------------------------------------------------------------------
// Manifest

int Manifest::num_classes() const noexcept {
  return rows.empty() ? 0 : static_cast<int>(rows.front().class_counts.size());
}

std::vector<long> Manifest::class_totals() const {
  std::vector<long> totals(static_cast<std::size_t>(num_classes()), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < totals.size() && c < r.class_counts.size(); ++c) {
      totals[c] += r.class_counts[c];
    }
  }
  return totals;
}

namespace {

constexpr const char* kManifestHeader = "path,annotation_path,num_objects,counts_per_class";

std::string relative_to(const fs::path& p, const fs::path& dir) {
  const fs::path rel = fs::absolute(p).lexically_normal().lexically_relative(dir);
  return (rel.empty() ? p : rel).generic_string();
}

void ensure_parent(const fs::path& path) {
  const auto parent = path.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

int parse_int(const std::string& s, std::size_t line, const char* what) {
  int v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ParseError(std::string("bad ") + what + " '" + s + "'", line);
  return v;
}

double parse_double(const std::string& s, std::size_t line, const char* what) {
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end || !std::isfinite(v)) {
    throw ParseError(std::string("bad ") + what + " '" + s + "'", line);
  }
  return v;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path dir = fs::absolute(path).lexically_normal().parent_path();
  std::ostringstream os;
  os << kManifestHeader << '\n';
  for (const auto& r : manifest.rows) {
    os << relative_to(r.image, dir) << ',' << relative_to(r.annotation, dir) << ',' << r.num_objects
       << ',';
    for (std::size_t c = 0; c < r.class_counts.size(); ++c) os << (c ? ";" : "") << r.class_counts[c];
    os << '\n';
  }
  spit(path, os.str());
}

Manifest read_manifest(const fs::path& path) {
  const std::string text = slurp(path);
  const fs::path dir = fs::absolute(path).lexically_normal().parent_path();
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  Manifest m;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kManifestHeader) throw ParseError("unexpected manifest header '" + line + "'", 1);
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != 4) throw ParseError("expected 4 fields, got " + std::to_string(fields.size()), lineno);
    ManifestRow row;
    row.image = (dir / fields[0]).lexically_normal();
    row.annotation = (dir / fields[1]).lexically_normal();
    row.num_objects = parse_int(fields[2], lineno, "num_objects");
    if (!fields[3].empty()) {
      for (const auto& c : split(fields[3], ';')) row.class_counts.push_back(parse_int(c, lineno, "class count"));
    }
    if (!m.rows.empty() && row.class_counts.size() != m.rows.front().class_counts.size()) {
      throw ParseError("inconsistent number of class counts", lineno);
    }
    m.rows.push_back(std::move(row));
  }
  if (lineno == 0) throw ParseError("empty manifest", 1);
  return m;
}

ManifestRow write_scene(const Scene& scene, const fs::path& dir, const std::string& stem, int num_classes) {
  ManifestRow row;
  row.image = fs::absolute(dir / (stem + ".ppm")).lexically_normal();
  row.annotation = fs::absolute(dir / (stem + ".txt")).lexically_normal();
  write_ppm(row.image, scene.image);
  write_annotations(row.annotation, scene.annotations);
  row.num_objects = static_cast<int>(scene.annotations.size());
  row.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (const auto& a : scene.annotations) {
    if (a.class_id < 0 || a.class_id >= num_classes) {
      throw RangeError("class id " + std::to_string(a.class_id) + " outside [0, " +
                       std::to_string(num_classes) + ")");
    }
    ++row.class_counts[static_cast<std::size_t>(a.class_id)];
  }
  return row;
}

Manifest generate_dataset(std::uint64_t seed, int n, const DomainProfile& profile,
                          const fs::path& out_dir, const SceneOptions& options) {
  if (n < 1) throw InvalidInput("generate_dataset: n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());

  Manifest m;
  for (int i = 0; i < n; ++i) {
    const Scene scene = generate_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), profile, options);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%06d", i);
    m.rows.push_back(write_scene(scene, out_dir, stem, options.num_classes));
  }
  write_manifest(m, out_dir / "manifest.csv");
  return m;
}

// ---------------------------------------------------------------------------
// Subsets and splits

namespace {

double max_share_deviation(const std::vector<long>& counts, long total,
                           const std::vector<double>& target) {
  double worst = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double share = total > 0 ? static_cast<double>(counts[c]) / static_cast<double>(total) : 0.0;
    worst = std::max(worst, std::abs(share - target[c]));
  }
  return worst;
}

Manifest select_rows(const Manifest& m, std::vector<std::size_t> idx) {
  std::sort(idx.begin(), idx.end());
  Manifest out;
  for (std::size_t i : idx) out.rows.push_back(m.rows[i]);
  return out;
}

}  // namespace

Manifest sample_subset(const Manifest& manifest, std::size_t n, std::uint64_t seed, double tolerance) {
  const std::size_t N = manifest.size();
  if (n > N) {
    throw InvalidInput("sample_subset: requested " + std::to_string(n) + " rows from " +
                       std::to_string(N));
  }
  std::vector<std::size_t> perm(N);
  for (std::size_t i = 0; i < N; ++i) perm[i] = i;
  SplitMix64 rng(seed);
  rng.shuffle(perm);
  if (n == N || n == 0) return select_rows(manifest, {perm.begin(), perm.begin() + static_cast<long>(n)});

  const std::size_t K = static_cast<std::size_t>(manifest.num_classes());
  const auto parent = manifest.class_totals();
  long parent_total = 0;
  for (long c : parent) parent_total += c;
  std::vector<double> target(K, 0.0);
  for (std::size_t c = 0; c < K; ++c) {
    target[c] = parent_total > 0 ? static_cast<double>(parent[c]) / static_cast<double>(parent_total) : 0.0;
  }

  std::vector<std::size_t> chosen(perm.begin(), perm.begin() + static_cast<long>(n));
  std::vector<std::size_t> rest(perm.begin() + static_cast<long>(n), perm.end());
  std::vector<long> counts(K, 0);
  long total = 0;
  for (std::size_t i : chosen) {
    for (std::size_t c = 0; c < K; ++c) counts[c] += manifest.rows[i].class_counts[c];
    total += manifest.rows[i].num_objects;
  }

  // First-improvement swap search over the shuffled order.
  double dev = max_share_deviation(counts, total, target);
  std::vector<long> trial(K);
  const std::size_t max_swaps = 10 * n;
  for (std::size_t swaps = 0; dev > tolerance && swaps < max_swaps;) {
    bool improved = false;
    for (std::size_t a = 0; a < chosen.size() && !improved; ++a) {
      const auto& out_row = manifest.rows[chosen[a]];
      for (std::size_t b = 0; b < rest.size(); ++b) {
        const auto& in_row = manifest.rows[rest[b]];
        for (std::size_t c = 0; c < K; ++c) trial[c] = counts[c] - out_row.class_counts[c] + in_row.class_counts[c];
        const long trial_total = total - out_row.num_objects + in_row.num_objects;
        const double d = max_share_deviation(trial, trial_total, target);
        if (d < dev - 1e-12) {
          counts = trial;
          total = trial_total;
          dev = d;
          std::swap(chosen[a], rest[b]);
          improved = true;
          ++swaps;
          break;
        }
      }
    }
    if (!improved) break;
  }
  return select_rows(manifest, std::move(chosen));
}

std::pair<Manifest, Manifest> split_half(const Manifest& manifest, std::uint64_t seed) {
  const std::size_t N = manifest.size();
  if (N < 2) throw InvalidInput("split_half: need at least 2 rows, got " + std::to_string(N));
  std::vector<std::size_t> perm(N);
  for (std::size_t i = 0; i < N; ++i) perm[i] = i;
  SplitMix64 rng(seed);
  rng.shuffle(perm);
  const std::size_t n_train = (N + 1) / 2;
  return {select_rows(manifest, {perm.begin(), perm.begin() + static_cast<long>(n_train)}),
          select_rows(manifest, {perm.begin() + static_cast<long>(n_train), perm.end()})};
}

// ---------------------------------------------------------------------------
// Mosaic

std::array<QuadrantMap, 4> quadrant_maps(double px, double py) {
  std::array<QuadrantMap, 4> maps;
  const double xs[3] = {0.0, px, 1.0};
  const double ys[3] = {0.0, py, 1.0};
  for (int q = 0; q < 4; ++q) {
    const int qx = q % 2, qy = q / 2;
    QuadrantMap& m = maps[static_cast<std::size_t>(q)];
    m.x0 = xs[qx];
    m.x1 = xs[qx + 1];
    m.y0 = ys[qy];
    m.y1 = ys[qy + 1];
    m.scale = std::max(m.x1 - m.x0, m.y1 - m.y0);
    // The source corner nearest the pivot is pinned to the pivot; overflow
    // falls past the outer image border.
    m.offset_x = qx == 0 ? px - m.scale : px;
    m.offset_y = qy == 0 ? py - m.scale : py;
  }
  return maps;
}

Scene mosaic_at(const std::array<Scene, 4>& scenes, double px, double py, int out_height, int out_width) {
  if (out_height < 2 || out_width < 2) throw ConfigError("mosaic output must be at least 2x2");
  if (!(px > 0.0 && px < 1.0 && py > 0.0 && py < 1.0)) throw ConfigError("mosaic pivot must lie inside (0,1)^2");
  const auto maps = quadrant_maps(px, py);
  Scene out;
  out.image = Image(out_height, out_width);
  for (int y = 0; y < out_height; ++y) {
    const double v = (y + 0.5) / out_height;
    for (int x = 0; x < out_width; ++x) {
      const double u = (x + 0.5) / out_width;
      const std::size_t q = (v >= py ? 2u : 0u) + (u >= px ? 1u : 0u);
      const QuadrantMap& m = maps[q];
      const Image& src = scenes[q].image;
      const double su = (u - m.offset_x) / m.scale;
      const double sv = (v - m.offset_y) / m.scale;
      const int sx = std::clamp(static_cast<int>(std::floor(su * src.width)), 0, src.width - 1);
      const int sy = std::clamp(static_cast<int>(std::floor(sv * src.height)), 0, src.height - 1);
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = src.at(sy, sx, c);
    }
  }
  for (std::size_t q = 0; q < 4; ++q) {
    const QuadrantMap& m = maps[q];
    for (const auto& a : scenes[q].annotations) {
      const BBox mapped = m.map(a.box);
      const double x1 = std::max(mapped.left(), m.x0), x2 = std::min(mapped.right(), m.x1);
      const double y1 = std::max(mapped.top(), m.y0), y2 = std::min(mapped.bottom(), m.y1);
      if (!(x2 > x1 && y2 > y1)) continue;
      const BBox clipped = BBox::from_corners(x1, y1, x2, y2);
      if (clipped.area() < kMosaicMinKeptFraction * mapped.area()) continue;
      out.annotations.push_back({a.class_id, clipped});
    }
  }
  return out;
}

Scene mosaic(const std::array<Scene, 4>& scenes, std::uint64_t seed, int out_height, int out_width) {
  SplitMix64 rng(seed);
  const double px = rng.uniform(0.25, 0.75);
  const double py = rng.uniform(0.25, 0.75);
  Scene out = mosaic_at(scenes, px, py, out_height, out_width);
  out.seed = seed;
  return out;
}

// ---------------------------------------------------------------------------
// Annotation and image files

std::string format_annotations(const std::vector<Annotation>& annotations) {
  std::string out;
  char buf[128];
  for (const auto& a : annotations) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", a.class_id, a.box.cx, a.box.cy,
                  a.box.w, a.box.h);
    out += buf;
  }
  return out;
}

std::vector<Annotation> parse_annotations(const std::string& text, int num_classes) {
  std::vector<Annotation> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 5) {
      throw ParseError("expected 'class_id cx cy w h', got " + std::to_string(tok.size()) + " fields", lineno);
    }
    Annotation a;
    a.class_id = parse_int(tok[0], lineno, "class id");
    a.box = {parse_double(tok[1], lineno, "cx"), parse_double(tok[2], lineno, "cy"),
             parse_double(tok[3], lineno, "w"), parse_double(tok[4], lineno, "h")};
    if (a.class_id < 0 || (num_classes >= 0 && a.class_id >= num_classes)) {
      throw RangeError("line " + std::to_string(lineno) + ": class id " + std::to_string(a.class_id) +
                       " outside [0, " + std::to_string(num_classes) + ")");
    }
    if (a.box.w < 0.0 || a.box.h < 0.0) {
      throw RangeError("line " + std::to_string(lineno) + ": negative box size");
    }
    out.push_back(a);
  }
  return out;
}

void write_annotations(const fs::path& path, const std::vector<Annotation>& annotations) {
  spit(path, format_annotations(annotations));
}

std::vector<Annotation> read_annotations(const fs::path& path, int num_classes) {
  try {
    return parse_annotations(slurp(path), num_classes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  } catch (const RangeError& e) {
    throw RangeError(path.string() + ": " + e.what());
  }
}

void write_ppm(const fs::path& path, const Image& image) {
  std::string data = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t header = data.size();
  data.resize(header + image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    data[header + i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  spit(path, data);
}

Image read_ppm(const fs::path& path) {
  const std::string data = slurp(path);
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < data.size()) {
      if (data[pos] == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(data[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
    return data.substr(start, pos - start);
  };
  const auto fail = [&](const std::string& why) { return FormatError(path.string() + ": " + why); };
  if (next_token() != "P6") throw fail("not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw fail("malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw fail("unsupported PPM dimensions or maxval");
  ++pos;  // single whitespace after maxval
  const std::size_t n = static_cast<std::size_t>(w) * h * 3;
  if (data.size() < pos + n) throw fail("truncated PPM pixel data");
  Image img(h, w);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(data[pos + i])) / 255.0f;
  }
  return img;
}

Scene load_scene(const ManifestRow& row, int num_classes) {
  Scene s;
  s.image = read_ppm(row.image);
  s.annotations = read_annotations(row.annotation, num_classes);
  return s;
}

}  // namespace vdet::synth
