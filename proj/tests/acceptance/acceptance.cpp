// Acceptance suite: one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "vdet/detloss.hpp"
#include "vdet/evaluation.hpp"
#include "vdet/geometry.hpp"
#include "vdet/harness.hpp"
#include "vdet/network.hpp"
#include "vdet/synthdata.hpp"

namespace fs = std::filesystem;
using namespace vdet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path tool;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 0x100000001b3ULL;
  return h;
}

std::uint64_t segment_hash(const fs::path& weights, diff::SegmentId id) {
  const auto cfg = diff::config_from_weights(weights, diff::NetConfig{}.boxes_per_cell, diff::NetConfig{}.input_size);
  diff::Detector net(cfg);
  diff::load_weights(net, weights);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : net.segment(id).params) h = fnv1a(p.value.data().data(), p.value.size() * sizeof(float), h);
  return h;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

// 1 --------------------------------------------------------------------------
Outcome ciou_gradient(const Context&) {
  const double t0 = cpu_seconds();
  SplitMix64 rng(20240601);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto p = oracle::random_box(rng, 0.05, 0.9), g = oracle::random_box(rng, 0.05, 0.9);
    const auto a = geometry::ciou_grad(p, g);
    const auto n = oracle::ciou_fd_grad(p, g, 1e-5);
    for (int k = 0; k < 4; ++k) worst = std::max(worst, oracle::rel_error(a[k], n[k], 1e-8));
  }
  const double dt = cpu_seconds() - t0;
  return {worst < 1e-4 && dt < 5.0, fmt("100 pairs, worst rel err %.2e (< 1e-4), %.2f s", worst, dt)};
}

// 2 --------------------------------------------------------------------------
Outcome closed_form_loss(const Context&) {
  const detloss::GridLayout layout{2, 1, 3};
  const auto empty = detloss::assign_targets({}, 2, 1);
  const double half = detloss::evaluate_loss(diff::Tensor(layout.tensor_shape(), 0.5f), empty, 3, 0.5).total;
  const double expected = 0.5 * 2 * 2 * 1 * std::log(2.0);

  double worst_perfect = 0.0;
  SplitMix64 rng(5);
  for (int i = 0; i < 20; ++i) {
    std::vector<detloss::Annotation> gt;
    for (int k = 0; k < 3; ++k) gt.push_back({static_cast<int>(rng.below(7)), oracle::random_box(rng, 0.05, 0.6)});
    const auto t = detloss::assign_targets(gt, 8, 2);
    worst_perfect = std::max(worst_perfect, detloss::evaluate_loss(detloss::encode_targets(t, 7), t, 7, 0.5).total);
  }
  const bool ok = std::abs(half - expected) < 1e-5 && std::abs(half - 1.386294) < 1e-5 && worst_perfect < 1e-4;
  return {ok, fmt("no-object grid %.6f (expected %.6f), perfect prediction max %.2e", half, expected, worst_perfect)};
}

// 3 --------------------------------------------------------------------------
Outcome network_gradient(const Context&) {
  const double t0 = cpu_seconds();
  double worst = 0.0;
  std::size_t params = 0;
  std::string where;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = oracle::network_gradient_check(seed);
    params = r.checked;
    if (r.worst > worst) {
      worst = r.worst;
      where = r.worst_name;
    }
  }
  const double dt = cpu_seconds() - t0;
  return {worst < 1e-3 && params <= 2000 && dt < 60.0,
          fmt("%zu parameters x 3 seeds, worst rel err %.2e at %s (< 1e-3), %.1f s", params, worst, where.c_str(), dt)};
}

// 4 --------------------------------------------------------------------------
Outcome ap_oracle(const Context&) {
  const double t0 = cpu_seconds();
  int mismatches = 0;
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto inst = oracle::random_ap_instance(derive_seed(99, s), 3, 6, 4);
    const double fast = eval::mean_average_precision(inst.dets, inst.gts, 0.5, 3).map;
    const double slow = oracle::brute_force_map(inst.dets, inst.gts, 0.5, 3);
    if (std::memcmp(&fast, &slow, sizeof fast) != 0) ++mismatches;
  }
  const double dt = cpu_seconds() - t0;
  return {mismatches == 0 && dt < 10.0, fmt("500 instances, %d bit mismatches, %.2f s", mismatches, dt)};
}

// 7 (also provides the run checked by 5) --------------------------------------
struct SchemeRuns {
  bool ran = false;
  bool ok = false;
  std::string error;
  fs::path a, b;
};

SchemeRuns& ycsvr_runs(const Context& ctx) {
  static SchemeRuns runs;
  if (runs.ran) return runs;
  runs.ran = true;
  runs.a = ctx.work / "ycsvr_seed7_a";
  runs.b = ctx.work / "ycsvr_seed7_b";
  for (const auto& dir : {runs.a, runs.b}) {
    fs::remove_all(dir);
    const std::string cmd = "\"" + ctx.tool.string() + "\" scheme --name YCSVR --seed 7 --out \"" + dir.string() +
                            "\" > \"" + dir.string() + ".log\" 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      runs.error = "command failed: " + cmd;
      return runs;
    }
  }
  runs.ok = true;
  return runs;
}

Outcome determinism(const Context& ctx) {
  const auto& runs = ycsvr_runs(ctx);
  if (!runs.ok) return {false, runs.error};
  int differing = 0;
  for (const char* f : {"stage_C.sdw", "stage_V.sdw", "stage_R.sdw", "report.csv"}) {
    const auto x = slurp(runs.a / f), y = slurp(runs.b / f);
    if (x.empty() || x != y) ++differing;
  }
  return {differing == 0, fmt("scheme --name YCSVR --seed 7 twice: %d of 4 artifacts differ", differing)};
}

Outcome freeze_invariance(const Context& ctx) {
  const auto& runs = ycsvr_runs(ctx);
  if (!runs.ok) return {false, runs.error};
  const auto v = segment_hash(runs.a / "stage_V.sdw", diff::SegmentId::head);
  const auto r = segment_hash(runs.a / "stage_R.sdw", diff::SegmentId::head);
  const auto bv = segment_hash(runs.a / "stage_V.sdw", diff::SegmentId::backbone);
  const auto br = segment_hash(runs.a / "stage_R.sdw", diff::SegmentId::backbone);
  return {v == r && bv != br,
          fmt("YCSVR head hash post-V %016llx, post-R %016llx (backbone changed: %s)", static_cast<unsigned long long>(v),
              static_cast<unsigned long long>(r), bv != br ? "yes" : "no")};
}

// 6 --------------------------------------------------------------------------
Outcome mosaic_consistency(const Context&) {
  SplitMix64 rng(4242);
  std::size_t survivors = 0;
  int bad_map = 0, bad_box = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::array<synth::Scene, 4> scenes;
    for (auto& s : scenes) s = synth::generate_scene(rng.next(), synth::DomainProfile::real_domain(), 7, 3);
    SplitMix64 pivot_rng(rng.next());
    const double px = pivot_rng.uniform(0.25, 0.75), py = pivot_rng.uniform(0.25, 0.75);
    const auto out = synth::mosaic_at(scenes, px, py, 64, 64);
    const auto maps = synth::quadrant_maps(px, py);
    for (const auto& a : out.annotations) {
      ++survivors;
      if (!(a.box.w > 0 && a.box.h > 0 && a.box.left() >= -1e-12 && a.box.top() >= -1e-12 &&
            a.box.right() <= 1 + 1e-12 && a.box.bottom() <= 1 + 1e-12)) {
        ++bad_box;
      }
      bool matched = false;
      for (std::size_t q = 0; q < 4 && !matched; ++q) {
        const auto win = maps[q].source_window();
        const auto back = maps[q].unmap(a.box);
        for (const auto& src : scenes[q].annotations) {
          const auto clipped = geometry::BBox::from_corners(
              std::max(src.box.left(), win.left()), std::max(src.box.top(), win.top()),
              std::min(src.box.right(), win.right()), std::min(src.box.bottom(), win.bottom()));
          if (src.class_id == a.class_id && std::abs(back.cx - clipped.cx) <= 1e-6 &&
              std::abs(back.cy - clipped.cy) <= 1e-6 && std::abs(back.w - clipped.w) <= 1e-6 &&
              std::abs(back.h - clipped.h) <= 1e-6) {
            matched = true;
            break;
          }
        }
      }
      bad_map += !matched;
    }
  }
  return {bad_map == 0 && bad_box == 0 && survivors > 0,
          fmt("200 mosaics, %zu surviving boxes, %d inverse-map misses, %d invalid boxes", survivors, bad_map, bad_box)};
}

// 8 --------------------------------------------------------------------------
Outcome directional(const Context& ctx) {
  const double t0 = cpu_seconds();
  harness::MatrixConfig m;
  m.schemes = {harness::Scheme::YR, harness::Scheme::YVR};
  m.virtual_ns = {2000};
  m.seeds = {1, 2, 3};
  m.work_dir = ctx.work / "directional";
  m.out_csv = ctx.work / "directional.csv";
  m.base.net.num_classes = 3;
  m.base.real_n = 400;  // 200 train / 200 test
  const auto cells = harness::run_matrix(m);
  double yr = 0, yvr = 0;
  for (const auto& c : cells) {
    if (!c.report) return {false, "cell failed: " + c.error};
    (c.scheme == harness::Scheme::YR ? yr : yvr) += c.report->test.map / 3.0;
  }
  const double dt = cpu_seconds() - t0;
  return {yvr >= yr + 0.05 && dt < 20 * 60,
          fmt("mean mAP over 3 seeds: YR %.3f, YVR %.3f (need YVR >= YR + 0.05), %.0f CPU s", yr, yvr, dt)};
}

// 9 --------------------------------------------------------------------------
Outcome domain_gap(const Context& ctx) {
  const auto v_profile = synth::DomainProfile::virtual_domain();
  const auto r_profile = synth::DomainProfile::real_domain();
  const auto v = synth::generate_dataset(11, 200, v_profile, ctx.work / "hist_virtual");
  const auto r = synth::generate_dataset(12, 200, r_profile, ctx.work / "hist_real");
  const auto hv = eval::average_color_histogram(v), hr = eval::average_color_histogram(r);
  const double gap = hr.mean_intensity() - hv.mean_intensity();
  const double configured = r_profile.brightness - v_profile.brightness;
  return {gap >= 0.15 && std::abs(gap - configured) <= 0.05,
          fmt("mean intensity virtual %.3f, real %.3f, gap %.3f (configured %.2f +- 0.05)", hv.mean_intensity(),
              hr.mean_intensity(), gap, configured)};
}

// 10 -------------------------------------------------------------------------
Outcome round_trips(const Context& ctx) {
  SplitMix64 rng(1010);
  int ann_fail = 0, weight_fail = 0;
  const fs::path dir = ctx.work / "roundtrip";
  fs::create_directories(dir);
  for (int i = 0; i < 100; ++i) {
    std::vector<detloss::Annotation> anns;
    const int n = static_cast<int>(rng.below(6));
    for (int k = 0; k < n; ++k) {
      // Values on the 6-decimal grid of the file format.
      const auto q = [&](double lo, double hi) { return std::round(rng.uniform(lo, hi) * 1e6) / 1e6; };
      anns.push_back({static_cast<int>(rng.below(7)), {q(0.2, 0.8), q(0.2, 0.8), q(0.01, 0.3), q(0.01, 0.3)}});
    }
    synth::write_annotations(dir / "a.txt", anns);
    const auto back = synth::read_annotations(dir / "a.txt", 7);
    synth::write_annotations(dir / "b.txt", back);
    if (back != anns || slurp(dir / "a.txt") != slurp(dir / "b.txt")) ++ann_fail;
  }
  for (int i = 0; i < 100; ++i) {
    diff::NetConfig cfg;
    cfg.num_classes = 1 + static_cast<int>(rng.below(7));
    cfg.boxes_per_cell = 1 + static_cast<int>(rng.below(3));
    cfg.backbone_channels = {4 + static_cast<int>(rng.below(8)), 4 + static_cast<int>(rng.below(8)),
                             4 + static_cast<int>(rng.below(8))};
    cfg.neck_channels = 4 + static_cast<int>(rng.below(8));
    diff::Detector src(cfg, rng.next()), dst(cfg, rng.next());
    diff::save_weights(src, dir / "w.sdw");
    diff::load_weights(dst, dir / "w.sdw");
    bool same = true;
    for (std::size_t s = 0; s < 3; ++s) {
      const auto& a = src.segments()[s].params;
      const auto& b = dst.segments()[s].params;
      for (std::size_t p = 0; p < a.size(); ++p) {
        same = same && a[p].value.shape() == b[p].value.shape() &&
               std::memcmp(a[p].value.data().data(), b[p].value.data().data(), a[p].value.size() * sizeof(float)) == 0;
      }
    }
    diff::save_weights(dst, dir / "w2.sdw");
    if (!same || slurp(dir / "w.sdw") != slurp(dir / "w2.sdw")) ++weight_fail;
  }
  return {ann_fail == 0 && weight_fail == 0,
          fmt("100 annotation sets: %d mismatches; 100 weight files: %d mismatches", ann_fail, weight_fail)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  Context ctx;
  ctx.work = fs::temp_directory_path() / "vdet_acceptance";
  ctx.tool = VDET_TOOL_PATH;
  std::vector<int> only;
  app.add_option("--work-dir", ctx.work, "Scratch directory");
  app.add_option("--tool", ctx.tool, "Path of the vdet executable");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(ctx.work);

  const std::vector<std::pair<const char*, std::function<Outcome(const Context&)>>> criteria{
      {"CIoU gradient fidelity", ciou_gradient},
      {"Closed-form loss checks", closed_form_loss},
      {"Network gradient check", network_gradient},
      {"AP oracle equivalence", ap_oracle},
      {"Freezing invariance", freeze_invariance},
      {"Mosaic consistency", mosaic_consistency},
      {"Determinism", determinism},
      {"Directional desk-scale ordering", directional},
      {"Domain-gap diagnostic", domain_gap},
      {"Format round-trips", round_trips},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] AC%d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
