#include "vdet/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "vdet/error.hpp"

namespace vdet::eval {
namespace fs = std::filesystem;

void MatchResult::merge(const MatchResult& other) {
  if (per_class.size() < other.per_class.size()) per_class.resize(other.per_class.size());
  for (std::size_t c = 0; c < other.per_class.size(); ++c) {
    auto& dst = per_class[c];
    const auto& src = other.per_class[c];
    dst.detections.insert(dst.detections.end(), src.detections.begin(), src.detections.end());
    dst.gt_count += src.gt_count;
  }
}

MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Annotation>& gts,
                             double iou_thresh, int num_classes) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) {
    throw InvalidInput("IoU threshold must lie in (0, 1]");
  }
  if (num_classes <= 0) throw InvalidInput("num_classes must be positive");
  MatchResult out;
  out.per_class.resize(static_cast<std::size_t>(num_classes));
  for (const auto& g : gts) {
    if (g.class_id < 0 || g.class_id >= num_classes) {
      throw RangeError("ground-truth class " + std::to_string(g.class_id) + " out of range");
    }
    ++out.per_class[static_cast<std::size_t>(g.class_id)].gt_count;
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });

  std::vector<bool> used(gts.size(), false);
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    if (d.class_id < 0 || d.class_id >= num_classes) {
      throw RangeError("detection class " + std::to_string(d.class_id) + " out of range");
    }
    double best = -1.0;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].class_id != d.class_id) continue;
      const double o = geometry::iou(d.box, gts[j].box);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    const bool tp = best_j < gts.size() && best >= iou_thresh;
    if (tp) used[best_j] = true;
    out.per_class[static_cast<std::size_t>(d.class_id)].detections.push_back({d.confidence, tp});
  }
  return out;
}

std::vector<PrPoint> precision_recall_curve(const ClassMatches& matches) {
  std::vector<PrPoint> curve;
  if (matches.gt_count == 0) return curve;
  std::vector<ScoredMatch> sorted = matches.detections;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.confidence > b.confidence; });
  std::size_t tp = 0, fp = 0;
  const double gt = static_cast<double>(matches.gt_count);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    (sorted[i].true_positive ? tp : fp) += 1;
    // One point per distinct confidence: a threshold cannot split tied detections.
    if (i + 1 < sorted.size() && sorted[i + 1].confidence == sorted[i].confidence) continue;
    curve.push_back({static_cast<double>(tp) / gt,
                     static_cast<double>(tp) / static_cast<double>(tp + fp), sorted[i].confidence});
  }
  return curve;
}

double average_precision(const ClassMatches& matches) {
  const auto curve = precision_recall_curve(matches);
  if (curve.empty()) return 0.0;
  std::vector<double> envelope(curve.size());
  double running = 0.0;
  for (std::size_t i = curve.size(); i-- > 0;) {
    running = std::max(running, curve[i].precision);
    envelope[i] = running;
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ap += (curve[i].recall - prev_recall) * envelope[i];
    prev_recall = curve[i].recall;
  }
  return ap;
}

APReport mean_average_precision(const std::vector<std::vector<Detection>>& per_image_dets,
                                const std::vector<std::vector<Annotation>>& per_image_gts,
                                double iou_thresh, int num_classes, double conf_thresh) {
  if (per_image_dets.size() != per_image_gts.size()) {
    throw InvalidInput("detections and ground truth cover a different number of images");
  }
  APReport report;
  report.iou_threshold = iou_thresh;
  report.conf_threshold = std::max(conf_thresh, kEvaluationFloor);

  MatchResult pooled;
  pooled.per_class.resize(static_cast<std::size_t>(std::max(num_classes, 0)));
  for (std::size_t i = 0; i < per_image_dets.size(); ++i) {
    std::vector<Detection> kept;
    for (const auto& d : per_image_dets[i]) {
      if (d.confidence > report.conf_threshold) kept.push_back(d);
    }
    pooled.merge(match_detections(kept, per_image_gts[i], iou_thresh, num_classes));
  }

  double sum = 0.0;
  std::size_t present = 0;
  for (const auto& cls : pooled.per_class) {
    const double ap = average_precision(cls);
    report.ap.push_back(ap);
    report.gt_count.push_back(cls.gt_count);
    if (cls.gt_count > 0) {
      sum += ap;
      ++present;
    }
  }
  report.map = present > 0 ? sum / static_cast<double>(present) : 0.0;
  return report;
}

namespace {

void spit(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename V>
V parse_number(const std::string& s, std::size_t line, const char* what) {
  V v{};
  const char* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ParseError(std::string("bad ") + what + " '" + s + "'", line);
  return v;
}

}  // namespace

std::string format_ap_report(const APReport& report, const std::vector<std::string>& class_names) {
  std::string out = "class,ap\n";
  char buf[64];
  for (std::size_t c = 0; c < report.ap.size(); ++c) {
    if (report.gt_count[c] == 0) continue;
    const std::string name = c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
    std::snprintf(buf, sizeof buf, "%.6f", report.ap[c]);
    out += name + "," + buf + "\n";
  }
  std::snprintf(buf, sizeof buf, "%.6f", report.map);
  out += std::string("mAP,") + buf + "\n";
  return out;
}

void write_ap_report(const fs::path& path, const APReport& report,
                     const std::vector<std::string>& class_names) {
  spit(path, format_ap_report(report, class_names));
}

std::string format_detections(const std::vector<Detection>& dets) {
  std::string out;
  char buf[160];
  for (const auto& d : dets) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6f\n", d.class_id, d.confidence, d.box.cx,
                  d.box.cy, d.box.w, d.box.h);
    out += buf;
  }
  return out;
}

std::vector<Detection> parse_detections(const std::string& text, int num_classes) {
  std::vector<Detection> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 6) {
      throw ParseError("expected 'class_id confidence cx cy w h', got " + std::to_string(tok.size()) +
                           " fields",
                       lineno);
    }
    Detection d;
    d.class_id = parse_number<int>(tok[0], lineno, "class id");
    d.confidence = parse_number<double>(tok[1], lineno, "confidence");
    d.box = {parse_number<double>(tok[2], lineno, "cx"), parse_number<double>(tok[3], lineno, "cy"),
             parse_number<double>(tok[4], lineno, "w"), parse_number<double>(tok[5], lineno, "h")};
    if (d.class_id < 0 || (num_classes >= 0 && d.class_id >= num_classes)) {
      throw RangeError("line " + std::to_string(lineno) + ": class id " + std::to_string(d.class_id) +
                       " out of range");
    }
    out.push_back(d);
  }
  return out;
}

void write_detections(const fs::path& path, const std::vector<Detection>& dets) {
  spit(path, format_detections(dets));
}

std::vector<Detection> read_detections(const fs::path& path, int num_classes) {
  return parse_detections(slurp(path), num_classes);
}

double ColorHistogram::channel_mean(int channel) const noexcept {
  double m = 0.0;
  for (std::size_t b = 0; b < 256; ++b) m += static_cast<double>(b) / 255.0 * bins[channel][b];
  return m;
}

double ColorHistogram::mean_intensity() const noexcept {
  return (channel_mean(0) + channel_mean(1) + channel_mean(2)) / 3.0;
}

ColorHistogram image_histogram(const synth::Image& image) {
  ColorHistogram h;
  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  if (n == 0) return h;
  std::array<std::array<std::size_t, 256>, 3> counts{};
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(image.pixels[i * 3 + c], 0.0f, 1.0f);
      ++counts[c][static_cast<std::size_t>(std::lround(v * 255.0f))];
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (std::size_t b = 0; b < 256; ++b) {
      h.bins[c][b] = static_cast<double>(counts[c][b]) / static_cast<double>(n);
    }
  }
  return h;
}

ColorHistogram average_color_histogram(const synth::Manifest& manifest) {
  if (manifest.rows.empty()) throw InvalidInput("average_color_histogram: empty manifest");
  ColorHistogram acc;
  for (const auto& row : manifest.rows) {
    synth::Image img;
    try {
      img = synth::read_ppm(row.image);
    } catch (const Error& e) {
      throw IoError("unreadable image " + row.image.string() + ": " + e.what());
    }
    const ColorHistogram h = image_histogram(img);
    for (int c = 0; c < 3; ++c) {
      for (std::size_t b = 0; b < 256; ++b) acc.bins[c][b] += h.bins[c][b];
    }
  }
  const double n = static_cast<double>(manifest.rows.size());
  for (auto& ch : acc.bins) {
    for (double& v : ch) v /= n;
  }
  return acc;
}

double earth_movers_distance(const ColorHistogram& a, const ColorHistogram& b, int channel) {
  double cdf_a = 0.0, cdf_b = 0.0, dist = 0.0;
  for (std::size_t k = 0; k < 256; ++k) {
    cdf_a += a.bins[channel][k];
    cdf_b += b.bins[channel][k];
    dist += std::abs(cdf_a - cdf_b);
  }
  return dist / 255.0;
}

void write_histogram_csv(const fs::path& path, const ColorHistogram& hist) {
  std::string out = "bin,r,g,b\n";
  char buf[128];
  for (std::size_t k = 0; k < 256; ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.9f,%.9f,%.9f\n", k, hist.bins[0][k], hist.bins[1][k],
                  hist.bins[2][k]);
    out += buf;
  }
  spit(path, out);
}

}  // namespace vdet::eval
