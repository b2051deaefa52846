#include <benchmark/benchmark.h>

#include "effowt/ops.hpp"
#include "effowt/rng.hpp"

using namespace effowt;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(-1, 1);
  return Tensor::from_data(std::move(shape), std::move(d));
}

void BM_Matmul(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = random_tensor(rng, {n, n});
  Tensor b = random_tensor(rng, {n, n});
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b).data().data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv2d3x3(benchmark::State& state) {
  int64_t c = state.range(0);
  Rng rng(2);
  Tensor x = random_tensor(rng, {1, c, 16, 16});
  Tensor w = random_tensor(rng, {c, c, 3, 3});
  NoGradGuard ng;
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, w, 1, 1).data().data());
  }
}
BENCHMARK(BM_Conv2d3x3)->Arg(16)->Arg(32)->Arg(64);

void BM_SoftmaxBackward(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(3);
  for (auto _ : state) {
    state.PauseTiming();
    Tensor x = random_tensor(rng, {n, n});
    x.set_requires_grad(true);
    state.ResumeTiming();
    backward(sum_all(softmax(x, -1)));
    benchmark::DoNotOptimize(x.grad());
  }
}
BENCHMARK(BM_SoftmaxBackward)->Arg(64)->Arg(128);

}  // namespace
