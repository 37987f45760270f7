// Microbenchmarks for the hot paths: matching, loss gradients, suppression,
// and scene synthesis.
#include <benchmark/benchmark.h>

#include "anchorpose/anchors.hpp"
#include "anchorpose/decode.hpp"
#include "anchorpose/losses.hpp"
#include "anchorpose/rng.hpp"
#include "anchorpose/skeleton.hpp"
#include "anchorpose/synthdata.hpp"

namespace {

using namespace anchorpose;

AnchorGrid bench_grid() {
  AnchorGrid grid;
  grid.height = 16;
  grid.width = 16;
  grid.stride = 8.0;
  grid.priors.priors = {{12.0, 30.0}, {20.0, 48.0}, {32.0, 72.0}};
  return grid;
}

SceneSample bench_sample() {
  GenerateOptions opts;
  opts.camera = {120.0, 120.0, 64.0, 64.0, 128, 128};
  opts.n_people_min = 4;
  opts.n_people_max = 4;
  opts.depth_min_m = 3.0;
  opts.depth_max_m = 12.0;
  opts.occlusion_rate = 0.0;
  return generate_dataset(17, 1, opts, default_skeleton())[0];
}

void BM_match(benchmark::State& state) {
  const AnchorGrid grid = bench_grid();
  const SceneSample sample = bench_sample();
  for (auto _ : state) benchmark::DoNotOptimize(match(grid, sample.scene));
}
BENCHMARK(BM_match);

void BM_loss_gradients(benchmark::State& state) {
  const AnchorGrid grid = bench_grid();
  const SceneSample sample = bench_sample();
  const Skeleton& skeleton = default_skeleton();
  const MatchResult m = match(grid, sample.scene);
  Rng rng(3);
  PredictionTensors pred = PredictionTensors::zeros(grid, skeleton.n_joints);
  for (auto& v : pred.cls_logits) v = rng.uniform(-2.0, 2.0);
  for (auto& v : pred.box_offsets) v = rng.uniform(-0.4, 0.4);
  for (auto& v : pred.pose2d) v = rng.uniform(-0.6, 0.6);
  for (auto& v : pred.pose3d) v = rng.uniform(-0.5, 0.5);
  const LossWeights weights(grid.n_anchors(), skeleton.n_joints);
  for (auto _ : state)
    benchmark::DoNotOptimize(gradients(pred, m, grid, skeleton, weights));
}
BENCHMARK(BM_loss_gradients);

void BM_nms(benchmark::State& state) {
  Rng rng(11);
  std::vector<Detection> dets;
  for (int i = 0; i < 200; ++i) {
    Detection d;
    d.score = rng.uniform(0.0, 1.0);
    const double x = rng.uniform(0.0, 100.0), y = rng.uniform(0.0, 100.0);
    d.box = {x, y, x + rng.uniform(5.0, 40.0), y + rng.uniform(5.0, 40.0)};
    d.anchor_index = {0, 0, i};
    dets.push_back(std::move(d));
  }
  for (auto _ : state) benchmark::DoNotOptimize(nms(dets, 0.45));
}
BENCHMARK(BM_nms);

void BM_generate_scene(benchmark::State& state) {
  uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(generate_dataset(++seed, 1, GenerateOptions{}, default_skeleton()));
}
BENCHMARK(BM_generate_scene);

}  // namespace

BENCHMARK_MAIN();
