#include <doctest.h>

#include <cmath>
#include <vector>

#include "effowt/ops.hpp"
#include "effowt/rng.hpp"
#include "effowt/sim.hpp"

#include "oracles.hpp"

using namespace effowt;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor::from_data(std::move(shape), std::move(d));
}

Tensor identity_matrix(int64_t n) {
  Tensor m = Tensor::zeros({n, n});
  for (int64_t i = 0; i < n; ++i) m.mutable_data()[static_cast<size_t>(i * n + i)] = 1.0;
  return m;
}

Tensor one_hot_logits(int path) {
  Tensor l = Tensor::full({5}, -1e9);
  l.mutable_data()[static_cast<size_t>(path)] = 0.0;
  return l;
}

}  // namespace

TEST_CASE("identity path with identity channel map returns the input") {
  Rng rng(2);
  int64_t w = 4, d = 8;
  Tensor x = random_tensor(rng, {2, d, w, w});
  Tensor y = sim_mix(x, random_tensor(rng, {w, w}), random_tensor(rng, {w, w}),
                     random_tensor(rng, {w, w}), random_tensor(rng, {w, w}), one_hot_logits(4),
                     identity_matrix(d), Tensor::zeros({d}));
  for (size_t i = 0; i < x.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("row path with identity row mix returns the input") {
  Rng rng(3);
  int64_t w = 4, d = 4;
  Tensor x = random_tensor(rng, {1, d, w, w});
  Tensor y = sim_mix(x, identity_matrix(w), random_tensor(rng, {w, w}),
                     random_tensor(rng, {w, w}), random_tensor(rng, {w, w}), one_hot_logits(0),
                     identity_matrix(d), Tensor::zeros({d}));
  for (size_t i = 0; i < x.data().size(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("row path spreads a one-hot uniformly over its row") {
  // 4x4 grid, row_mix all-ones/4, input one-hot at (1,2), only row path on
  int64_t w = 4;
  Tensor x = Tensor::zeros({1, 1, w, w});
  x.mutable_data()[static_cast<size_t>(1 * w + 2)] = 1.0;
  Tensor y = sim_mix(x, Tensor::full({w, w}, 0.25), identity_matrix(w), identity_matrix(w),
                     identity_matrix(w), one_hot_logits(0), identity_matrix(1),
                     Tensor::zeros({1}));
  for (int64_t i = 0; i < w; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double expect = (i == 1) ? 0.25 : 0.0;
      CHECK(y.data()[static_cast<size_t>(i * w + j)] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("non-square grid is rejected") {
  Tensor x = Tensor::zeros({1, 2, 2, 3});
  CHECK_THROWS_WITH_AS(sim_mix(x, identity_matrix(3), identity_matrix(3), identity_matrix(3),
                               identity_matrix(3), Tensor::zeros({5}), identity_matrix(2),
                               Tensor::zeros({2})),
                       doctest::Contains("square"), Error);
}

TEST_CASE("sim gradients match finite differences") {
  Rng rng(7);
  int64_t w = 4, d = 8;
  Tensor row = random_tensor(rng, {w, w}, 0.5);
  Tensor col = random_tensor(rng, {w, w}, 0.5);
  Tensor dg = random_tensor(rng, {w, w}, 0.5);
  Tensor an = random_tensor(rng, {w, w}, 0.5);
  Tensor logits = random_tensor(rng, {5}, 0.5);
  Tensor cw = random_tensor(rng, {d, d}, 0.3);
  Tensor cb = random_tensor(rng, {d}, 0.1);
  Tensor x = random_tensor(rng, {2, d, w, w});

  auto full = [&](const Tensor& xx, const Tensor& r, const Tensor& c, const Tensor& dgm,
                  const Tensor& am, const Tensor& lg, const Tensor& cwm, const Tensor& cbv) {
    return sum_all(sim_mix(xx, r, c, dgm, am, lg, cwm, cbv));
  };
  double tol = 1e-5;
  CHECK(grad_check([&](const Tensor& t) { return full(t, row, col, dg, an, logits, cw, cb); }, x,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, t, col, dg, an, logits, cw, cb); }, row,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, t, dg, an, logits, cw, cb); }, col,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, col, t, an, logits, cw, cb); }, dg,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, col, dg, t, logits, cw, cb); }, an,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, col, dg, an, t, cw, cb); }, logits,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, col, dg, an, logits, t, cb); }, cw,
                   1e-5) < tol);
  CHECK(grad_check([&](const Tensor& t) { return full(x, row, col, dg, an, logits, cw, t); }, cb,
                   1e-5) < tol);
}

TEST_CASE("sim retains only its input for backward") {
  Rng rng(9);
  int64_t w = 4, d = 8;
  ParamRegistry reg;
  Rng wrng(1);
  auto layer = SimLayer::create(reg, "sim", wrng, d, w);
  Tensor x = random_tensor(rng, {1, w * w, d});
  GraphRecorder rec;
  auto act = rec.activate();
  Tensor y = layer->forward(x, w, w);
  (void)y;
  auto stats = rec.stats();
  // tokens_to_grid copy of x is what sim_mix saves; one tensor, B*n*D doubles
  CHECK(stats.num_saved_tensors == 1);
  CHECK(stats.peak_retained_bytes == static_cast<int64_t>(w * w * d * 8));
}

TEST_CASE("translation equivariance of the row path along the shifted axis") {
  Rng rng(13);
  int64_t w = 4;
  Tensor row = random_tensor(rng, {w, w}, 1.0);
  Tensor x = random_tensor(rng, {1, 1, w, w});
  // cyclic shift one column right
  Tensor xs = Tensor::zeros({1, 1, w, w});
  for (int64_t i = 0; i < w; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      xs.mutable_data()[static_cast<size_t>(i * w + (j + 1) % w)] =
          x.data()[static_cast<size_t>(i * w + j)];
    }
  }
  // row mixing with a circulant matrix commutes with the shift
  Tensor circ = Tensor::zeros({w, w});
  Rng crng(5);
  std::vector<double> kernel(static_cast<size_t>(w));
  for (auto& v : kernel) v = crng.uniform(-1, 1);
  for (int64_t j = 0; j < w; ++j) {
    for (int64_t k = 0; k < w; ++k) {
      circ.mutable_data()[static_cast<size_t>(j * w + k)] = kernel[static_cast<size_t>((k - j + w) % w)];
    }
  }
  auto apply_row = [&](const Tensor& in) {
    return sim_mix(in, circ, identity_matrix(w), identity_matrix(w), identity_matrix(w),
                   one_hot_logits(0), identity_matrix(1), Tensor::zeros({1}));
  };
  Tensor y = apply_row(x);
  Tensor ys = apply_row(xs);
  for (int64_t i = 0; i < w; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      CHECK(ys.data()[static_cast<size_t>(i * w + (j + 1) % w)] ==
            doctest::Approx(y.data()[static_cast<size_t>(i * w + j)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("one-layer influence equals row+column+two cyclic diagonals") {
  for (int64_t w : {4, 5, 8}) {
    InfluenceMatrix rf = receptive_field(1, w, w);
    auto expect = test_oracles::enumerate_influence(w, 1);
    REQUIRE(rf.n == w * w);
    for (int64_t i = 0; i < rf.n; ++i) {
      for (int64_t j = 0; j < rf.n; ++j) {
        CHECK(rf.at(i, j) == (expect[static_cast<size_t>(i * rf.n + j)] != 0));
      }
    }
  }
}

TEST_CASE("per-token one-layer coverage: 4W-4 on even grids, 4W-3 on odd") {
  InfluenceMatrix even = receptive_field(1, 8, 8);
  for (int64_t i = 0; i < even.n; ++i) CHECK(even.count_influenced_by(i) == 4 * 8 - 4);
  InfluenceMatrix odd = receptive_field(1, 5, 5);
  for (int64_t i = 0; i < odd.n; ++i) CHECK(odd.count_influenced_by(i) == 4 * 5 - 3);
}

TEST_CASE("two stacked layers reach the full grid") {
  for (int64_t w : {4, 8}) {
    InfluenceMatrix rf = receptive_field(2, w, w);
    CHECK(rf.coverage() == doctest::Approx(1.0));
    // agrees with the reachability closure of the 1-layer pattern
    auto expect = test_oracles::enumerate_influence(w, 2);
    for (size_t i = 0; i < expect.size(); ++i) CHECK((rf.m[i] != 0) == (expect[i] != 0));
  }
}

TEST_CASE("dense baseline reaches the full grid in one layer") {
  InfluenceMatrix rf = receptive_field(1, 4, 4, /*dense_baseline=*/true);
  CHECK(rf.coverage() == doctest::Approx(1.0));
}

TEST_CASE("sim parameter count sits below the dense MLP across supported configs") {
  // supported: dim >= 2*grid; closed form 4W^2+D^2+D+5 < 8D^2+5D
  for (int64_t grid = 2; grid <= 16; ++grid) {
    for (int64_t dim = 2 * grid; dim <= 256; dim *= 2) {
      CHECK(sim_param_count(dim, grid) < dense_ffn_param_count(dim));
    }
  }
  CHECK_THROWS_AS(
      [] {
        ParamRegistry reg;
        Rng rng(1);
        (void)SimLayer::create(reg, "sim", rng, 8, 16);  // dim < 2*grid unsupported
      }(),
      Error);
}

TEST_CASE("sim layer counts match the closed form and the 14x14 case") {
  ParamRegistry reg;
  Rng rng(1);
  auto layer = SimLayer::create(reg, "sim", rng, 256, 14);
  CHECK(layer->param_count() == sim_param_count(256, 14));
  CHECK(sim_param_count(256, 14) == 4 * 14 * 14 + 256 * 256 + 256 + 5);
  CHECK(dense_ffn_param_count(256) == 8 * 256 * 256 + 5 * 256);
  double reduction = 1.0 - static_cast<double>(sim_param_count(256, 14)) /
                               static_cast<double>(dense_ffn_param_count(256));
  CHECK(reduction >= 0.85);
}
