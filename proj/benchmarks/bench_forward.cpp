#include <benchmark/benchmark.h>

#include "effowt/efficiency.hpp"
#include "effowt/model.hpp"
#include "effowt/rng.hpp"
#include "effowt/sim.hpp"

using namespace effowt;

namespace {

ExperimentConfig desk() {
  ExperimentConfig cfg;
  cfg.optimizer.batch = 1;
  return cfg;
}

Tensor random_images(int64_t b, int64_t size) {
  Rng rng(5);
  std::vector<double> d(static_cast<size_t>(b * 3 * size * size));
  for (auto& v : d) v = rng.uniform(0, 1);
  return Tensor::from_data({b, 3, size, size}, std::move(d));
}

void BM_ForwardFeatures(benchmark::State& state) {
  ExperimentConfig cfg = desk();
  Strategy s = state.range(0) == 0 ? Strategy::kSide : Strategy::kSideSim;
  TrackerModel model(cfg.backbone, cfg.side, cfg.head, s, 7);
  Tensor images = random_images(1, cfg.backbone.image_size);
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward_features(images).data().data());
  }
}
BENCHMARK(BM_ForwardFeatures)->Arg(0)->Arg(1);

void BM_TrainStep(benchmark::State& state) {
  ExperimentConfig cfg = desk();
  TrackerModel model(cfg.backbone, cfg.side, cfg.head, Strategy::kSide, 7);
  Tensor images = random_images(1, cfg.backbone.image_size);
  for (auto _ : state) {
    Tensor fused = model.forward_features(images);
    HeadOutputs out = model.forward_regions(fused, {{0, 4, 4, 24, 24}, {0, 32, 32, 24, 24}});
    backward(add(mean_all(out.class_logits), mean_all(out.embeddings)));
    model.registry().zero_grads();
  }
}
BENCHMARK(BM_TrainStep);

void BM_SparseMix(benchmark::State& state) {
  int64_t d = 64, w = 8;
  Rng rng(9);
  auto rt = [&](Shape shape) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(-1, 1);
    return Tensor::from_data(std::move(shape), std::move(v));
  };
  Tensor x = rt({1, d, w, w});
  Tensor row = rt({w, w}), col = rt({w, w}), dg = rt({w, w}), an = rt({w, w});
  Tensor logits = rt({5}), cw = rt({d, d}), cb = rt({d});
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sim_mix(x, row, col, dg, an, logits, cw, cb).data().data());
  }
}
BENCHMARK(BM_SparseMix);

}  // namespace
