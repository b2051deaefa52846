#include <benchmark/benchmark.h>

#include "effowt/owta.hpp"
#include "effowt/rng.hpp"

using namespace effowt;

namespace {

// synthetic tracking instance: `tracks` targets over `frames` frames with
// jittered predictions and occasional id switches
void build_instance(int64_t tracks, int64_t frames, TrackSet* gt, TrackSet* pred) {
  Rng rng(11);
  for (int64_t f = 0; f < frames; ++f) {
    for (int64_t t = 0; t < tracks; ++t) {
      double x = 10.0 + 30.0 * static_cast<double>(t) + rng.uniform(-2, 2);
      double y = 10.0 + 1.5 * static_cast<double>(f);
      TrackRecord g;
      g.video = "v";
      g.frame = f;
      g.track_id = t;
      g.bbox = {x, y, 12, 12};
      g.cls = "object";
      gt->insert(g);
      TrackRecord p = g;
      p.track_id = 100 + t + (f > frames / 2 && t == 0 ? 50 : 0);  // one switch
      p.bbox[0] += rng.uniform(0, 3);
      pred->insert(p);
    }
  }
}

void BM_ComputeOwta(benchmark::State& state) {
  TrackSet gt, pred;
  build_instance(state.range(0), 30, &gt, &pred);
  OwtaConfig cfg;
  for (auto _ : state) {
    benchmark::DoNotOptimize(compute_owta(gt, pred, cfg).owta);
  }
}
BENCHMARK(BM_ComputeOwta)->Arg(4)->Arg(16);

void BM_MatchFrame(benchmark::State& state) {
  int64_t n = state.range(0);
  Rng rng(13);
  std::vector<std::array<double, 4>> gt, pred;
  for (int64_t i = 0; i < n; ++i) {
    double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
    gt.push_back({x, y, 10, 10});
    pred.push_back({x + rng.uniform(0, 4), y + rng.uniform(0, 4), 10, 10});
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(match_frame(gt, pred, 0.5).size());
  }
}
BENCHMARK(BM_MatchFrame)->Arg(8)->Arg(32)->Arg(128);

}  // namespace
