#include <benchmark/benchmark.h>

#include "vdet/detloss.hpp"
#include "vdet/evaluation.hpp"
#include "vdet/geometry.hpp"
#include "vdet/harness.hpp"
#include "vdet/network.hpp"
#include "vdet/rng.hpp"
#include "vdet/synthdata.hpp"

using namespace vdet;

namespace {

geometry::BBox random_box(SplitMix64& rng) {
  return {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
}

void BM_CiouLossAndGrad(benchmark::State& state) {
  SplitMix64 rng(1);
  std::vector<std::pair<geometry::BBox, geometry::BBox>> pairs;
  for (int i = 0; i < 256; ++i) pairs.emplace_back(random_box(rng), random_box(rng));
  std::size_t i = 0;
  for (auto _ : state) {
    const auto& [p, g] = pairs[i++ & 255];
    benchmark::DoNotOptimize(geometry::ciou_loss(p, g));
    benchmark::DoNotOptimize(geometry::ciou_grad(p, g));
  }
}
BENCHMARK(BM_CiouLossAndGrad);

void BM_Forward(benchmark::State& state) {
  diff::NetConfig cfg;
  diff::Detector net(cfg, 1);
  const auto scene = synth::generate_scene(1, synth::DomainProfile::real_domain(), 7, 3);
  const auto image = harness::to_tensor(scene.image);
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(image, false));
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  diff::NetConfig cfg;
  diff::Detector net(cfg, 1);
  const auto scene = synth::generate_scene(1, synth::DomainProfile::real_domain(), 7, 3);
  const auto image = harness::to_tensor(scene.image);
  const auto target = detloss::assign_targets(scene.annotations, cfg.grid_size(), cfg.boxes_per_cell);
  for (auto _ : state) {
    auto out = net.forward(image);
    auto loss = detloss::total_loss(out, target, cfg.num_classes);
    net.backward(loss.loss);
    net.sgd_step(1e-4, 0.9);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMicrosecond);

void BM_CompositeLoss(benchmark::State& state) {
  SplitMix64 rng(2);
  const detloss::GridLayout layout{8, 2, 7};
  diff::Tensor pred(layout.tensor_shape());
  for (float& v : pred.data()) v = static_cast<float>(rng.uniform());
  const auto target = detloss::assign_targets({{1, random_box(rng)}, {4, random_box(rng)}}, 8, 2);
  std::vector<double> grad;
  for (auto _ : state) benchmark::DoNotOptimize(detloss::evaluate_loss(pred, target, 7, 0.5, &grad));
}
BENCHMARK(BM_CompositeLoss);

void BM_GenerateScene(benchmark::State& state) {
  std::uint64_t seed = 0;
  const auto profile = synth::DomainProfile::virtual_domain();
  for (auto _ : state) benchmark::DoNotOptimize(synth::generate_scene(seed++, profile, 7, 3));
}
BENCHMARK(BM_GenerateScene)->Unit(benchmark::kMicrosecond);

void BM_Mosaic(benchmark::State& state) {
  std::array<synth::Scene, 4> scenes;
  for (std::uint64_t i = 0; i < 4; ++i) scenes[i] = synth::generate_scene(i, synth::DomainProfile::real_domain(), 7, 3);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(synth::mosaic(scenes, seed++, 64, 64));
}
BENCHMARK(BM_Mosaic)->Unit(benchmark::kMicrosecond);

void BM_MeanAveragePrecision(benchmark::State& state) {
  const auto images = static_cast<std::size_t>(state.range(0));
  SplitMix64 rng(3);
  std::vector<std::vector<detloss::Detection>> dets(images);
  std::vector<std::vector<detloss::Annotation>> gts(images);
  for (std::size_t i = 0; i < images; ++i) {
    for (int k = 0; k < 3; ++k) gts[i].push_back({static_cast<int>(rng.below(7)), random_box(rng)});
    for (int k = 0; k < 10; ++k) {
      dets[i].push_back({static_cast<int>(rng.below(7)), random_box(rng), rng.uniform()});
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(eval::mean_average_precision(dets, gts, 0.5, 7));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * images));
}
BENCHMARK(BM_MeanAveragePrecision)->Arg(100)->Arg(1000)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
