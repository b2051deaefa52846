#include <doctest.h>

#include <cmath>
#include <vector>

#include "effowt/assignment.hpp"
#include "effowt/heads.hpp"
#include "effowt/ops.hpp"
#include "effowt/rng.hpp"

#include "oracles.hpp"

using namespace effowt;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor::from_data(std::move(shape), std::move(d));
}

Heads make_heads(ParamRegistry& reg, int64_t in_dim, int64_t classes = 2) {
  Rng rng(17);
  HeadConfig cfg;
  cfg.in_dim = in_dim;
  cfg.hidden = 16;
  cfg.embed_dim = 8;
  cfg.num_classes = classes;
  return Heads::create(reg, rng, cfg);
}

}  // namespace

TEST_CASE("hungarian equals brute force on random matrices") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    int64_t rows = 1 + rng.uniform_int(4);
    int64_t cols = 1 + rng.uniform_int(4);
    std::vector<double> w(static_cast<size_t>(rows * cols));
    for (auto& v : w) v = rng.uniform(-1, 1);
    auto match = max_weight_assignment(w, rows, cols);
    double got = 0.0;
    int64_t matched = 0;
    std::vector<char> col_used(static_cast<size_t>(cols), 0);
    for (int64_t r = 0; r < rows; ++r) {
      int64_t c = match[static_cast<size_t>(r)];
      if (c < 0) continue;
      CHECK(col_used[static_cast<size_t>(c)] == 0);
      col_used[static_cast<size_t>(c)] = 1;
      got += w[static_cast<size_t>(r * cols + c)];
      ++matched;
    }
    CHECK(matched == std::min(rows, cols));
    double best = test_oracles::brute_best_assignment(w, rows, cols);
    CHECK(got == doctest::Approx(best).epsilon(1e-9));
  }
}

TEST_CASE("head outputs") {
  ParamRegistry reg;
  Heads heads = make_heads(reg, 8);
  Rng rng(5);
  Tensor fused = random_tensor(rng, {2, 8, 4, 4});

  SUBCASE("embedding rows are unit length") {
    std::vector<RegionBox> boxes = {{0, 0, 0, 16, 16}, {1, 8, 8, 20, 20}, {0, 3, 5, 9, 12}};
    auto out = heads.forward(fused, boxes, 32);
    REQUIRE(out.embeddings.shape() == Shape{3, 8});
    for (int64_t r = 0; r < 3; ++r) {
      double norm = 0.0;
      for (int64_t c = 0; c < 8; ++c) {
        double v = out.embeddings.data()[static_cast<size_t>(r * 8 + c)];
        norm += v * v;
      }
      CHECK(std::fabs(std::sqrt(norm) - 1.0) < 1e-6);
    }
    CHECK(out.class_logits.shape() == Shape{3, 3});
  }
  SUBCASE("identical regions give identical outputs") {
    std::vector<RegionBox> boxes = {{0, 4, 4, 12, 12}, {0, 4, 4, 12, 12}};
    auto out = heads.forward(fused, boxes, 32);
    for (int64_t c = 0; c < 8; ++c) {
      CHECK(out.embeddings.data()[static_cast<size_t>(c)] ==
            out.embeddings.data()[static_cast<size_t>(8 + c)]);
    }
  }
  SUBCASE("empty region list gives empty outputs") {
    auto out = heads.forward(fused, {}, 32);
    CHECK(out.class_logits.dim(0) == 0);
    CHECK(out.embeddings.dim(0) == 0);
  }
  SUBCASE("out-of-bounds region is an error") {
    CHECK_THROWS_AS(heads.forward(fused, {{0, -1, 0, 8, 8}}, 32), Error);
    CHECK_THROWS_AS(heads.forward(fused, {{0, 30, 30, 8, 8}}, 32), Error);
  }
}

TEST_CASE("reid contrastive loss") {
  SUBCASE("separable embeddings give a near-zero loss") {
    // positives at cosine 1, negatives at cosine -1 (2 ids, 1-d embeddings)
    Tensor a = Tensor::from_data({2, 1}, {1.0, -1.0});
    Tensor b = Tensor::from_data({2, 1}, {1.0, -1.0});
    Tensor loss = reid_contrastive_loss(a, b, {0, 1}, 0.1);
    CHECK(loss.item() < 1e-6);
    CHECK(loss.item() >= 0.0);
  }
  SUBCASE("identical embeddings hit the uniform-similarity closed form") {
    for (int64_t n : {2, 3, 5}) {
      Tensor a = Tensor::full({n, 4}, 0.5);
      Tensor b = Tensor::full({n, 4}, 0.5);
      std::vector<int64_t> ids(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;
      Tensor loss = reid_contrastive_loss(a, b, ids, 0.07);
      CHECK(loss.item() == doctest::Approx(std::log(2.0 * n - 1.0)).epsilon(1e-9));
    }
  }
  SUBCASE("permutation invariance over the batch") {
    Rng rng(3);
    Tensor a = random_tensor(rng, {4, 8});
    Tensor b = random_tensor(rng, {4, 8});
    Tensor loss = reid_contrastive_loss(a, b, {0, 1, 2, 3}, 0.2);
    std::vector<int64_t> perm = {2, 0, 3, 1};
    auto permute_rows = [&](const Tensor& t) {
      std::vector<double> d;
      for (int64_t p : perm) {
        for (int64_t c = 0; c < 8; ++c) d.push_back(t.data()[static_cast<size_t>(p * 8 + c)]);
      }
      return Tensor::from_data({4, 8}, std::move(d));
    };
    Tensor loss_p = reid_contrastive_loss(permute_rows(a), permute_rows(b), {2, 0, 3, 1}, 0.2);
    CHECK(loss.item() == doctest::Approx(loss_p.item()).epsilon(1e-12));
  }
  SUBCASE("single identity is an error") {
    Tensor a = Tensor::full({1, 4}, 1.0);
    Tensor b = Tensor::full({1, 4}, 1.0);
    CHECK_THROWS_AS(reid_contrastive_loss(a, b, {0}, 0.1), Error);
  }
  SUBCASE("duplicate ids are an error") {
    Tensor a = Tensor::full({2, 4}, 1.0);
    Tensor b = Tensor::full({2, 4}, 1.0);
    CHECK_THROWS_AS(reid_contrastive_loss(a, b, {3, 3}, 0.1), Error);
  }
}

TEST_CASE("association") {
  SUBCASE("identical embeddings match identically") {
    Tensor prev = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor det = prev.detached_clone();
    auto out = associate(prev, {10, 11}, det, 0.5, 12);
    CHECK(out.det_track_ids == std::vector<int64_t>{10, 11});
    CHECK(out.next_track_id == 12);
  }
  SUBCASE("2x2 similarity matrix picks the diagonal") {
    // sims [[0.9, 0.1], [0.2, 0.8]]
    Tensor prev = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor det = Tensor::from_data({2, 2}, {0.9, 0.1, 0.2, 0.8});
    auto out = associate(prev, {5, 6}, det, 0.5, 7);
    CHECK(out.det_track_ids == std::vector<int64_t>{5, 6});
  }
  SUBCASE("below-threshold similarities start fresh increasing ids") {
    Tensor prev = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor det = Tensor::from_data({2, 2}, {0.1, 0.0, 0.0, 0.1});
    auto out = associate(prev, {1, 2}, det, 0.5, 3);
    CHECK(out.det_track_ids == std::vector<int64_t>{3, 4});
    CHECK(out.next_track_id == 5);
  }
  SUBCASE("assignment is invariant to a common rotation of all embeddings") {
    Rng rng(9);
    int64_t e = 4;
    Tensor prev = l2_normalize_rows(random_tensor(rng, {3, e}));
    Tensor det = l2_normalize_rows(random_tensor(rng, {3, e}));
    // random rotation via Gram-Schmidt on a random matrix
    std::vector<double> q(static_cast<size_t>(e * e));
    for (int64_t i = 0; i < e; ++i) {
      std::vector<double> v(static_cast<size_t>(e));
      for (auto& x : v) x = rng.uniform(-1, 1);
      for (int64_t j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < e; ++k) dot += v[static_cast<size_t>(k)] * q[static_cast<size_t>(j * e + k)];
        for (int64_t k = 0; k < e; ++k) v[static_cast<size_t>(k)] -= dot * q[static_cast<size_t>(j * e + k)];
      }
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      for (int64_t k = 0; k < e; ++k) q[static_cast<size_t>(i * e + k)] = v[static_cast<size_t>(k)] / norm;
    }
    Tensor rot = Tensor::from_data({e, e}, q);
    NoGradGuard ng;
    Tensor prev_r = matmul(prev, transpose_last(rot));
    Tensor det_r = matmul(det, transpose_last(rot));
    auto base = associate(prev, {1, 2, 3}, det, 0.1, 4);
    auto rotated = associate(prev_r, {1, 2, 3}, det_r, 0.1, 4);
    CHECK(base.det_track_ids == rotated.det_track_ids);
  }
  SUBCASE("threshold outside (-1,1) is rejected") {
    Tensor prev = Tensor::from_data({1, 2}, {1, 0});
    CHECK_THROWS_AS(associate(prev, {1}, prev, 1.0, 2), Error);
  }
}
