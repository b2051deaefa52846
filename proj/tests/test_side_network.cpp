#include <doctest.h>

#include <cmath>
#include <vector>

#include "effowt/model.hpp"
#include "effowt/ops.hpp"
#include "effowt/pruning.hpp"
#include "effowt/rng.hpp"
#include "effowt/side_network.hpp"

using namespace effowt;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : d) v = rng.uniform(-scale, scale);
  return Tensor::from_data(std::move(shape), std::move(d));
}

BackboneConfig tiny_backbone() {
  BackboneConfig bb;
  bb.image_size = 32;
  bb.patch = 4;  // 8x8 grid
  bb.dim = 32;
  bb.depth = 4;
  bb.heads = 4;
  return bb;
}

SideConfig tiny_side() {
  SideConfig side;
  side.r = 4;
  side.layers_per_block = 1;
  side.scales = {{4, 1}, {8, 1}};
  return side;
}

}  // namespace

TEST_CASE("structural pruning on the diagonal example") {
  Tensor w = Tensor::zeros({4, 4});
  for (int i = 0; i < 4; ++i) w.mutable_data()[static_cast<size_t>(i * 4 + i)] = 4.0 - i;
  Tensor pruned = prune_matrix_l1(w, 2);
  REQUIRE(pruned.shape() == Shape{2, 2});
  CHECK(pruned.data()[0] == 4.0);
  CHECK(pruned.data()[1] == 0.0);
  CHECK(pruned.data()[2] == 0.0);
  CHECK(pruned.data()[3] == 3.0);
}

TEST_CASE("pruning ties keep the leading principal block") {
  Tensor w = Tensor::full({4, 4}, 0.5);
  Tensor pruned = prune_matrix_l1(w, 2);
  // lowest-index tie break: rows/cols {0,1}
  REQUIRE(pruned.shape() == Shape{2, 2});
  for (double v : pruned.data()) CHECK(v == 0.5);
  auto rows = select_top_channels({1.0, 1.0, 1.0, 1.0}, 2);
  CHECK(rows == std::vector<int64_t>{0, 1});
}

TEST_CASE("pruning with r=1 is the identity projection") {
  Rng rng(3);
  Tensor w = random_tensor(rng, {6, 8});
  Tensor pruned = prune_matrix_l1(w, 1);
  CHECK(pruned.shape() == w.shape());
  CHECK(pruned.data() == w.data());
  CHECK_THROWS_AS(prune_matrix_l1(w, 4), Error);  // 6 % 4 != 0
}

TEST_CASE("selected channels carry at least the L1 mass of a random pick") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor w = random_tensor(rng, {8, 8});
    auto scores = matrix_in_l1(w);
    auto top = select_top_channels(scores, 4);
    double top_mass = 0.0;
    for (int64_t i : top) top_mass += scores[static_cast<size_t>(i)];
    // random 4-subset
    double rand_mass = 0.0;
    std::vector<int64_t> pool{0, 1, 2, 3, 4, 5, 6, 7};
    for (int k = 0; k < 4; ++k) {
      int64_t pick = rng.uniform_int(static_cast<int64_t>(pool.size()));
      rand_mass += scores[static_cast<size_t>(pool[static_cast<size_t>(pick)])];
      pool.erase(pool.begin() + pick);
    }
    CHECK(top_mass >= rand_mass - 1e-12);
  }
}

TEST_CASE("full-network pruning init with divisor 1 clones the backbone exactly") {
  BackboneConfig bb = tiny_backbone();
  SideConfig side;
  side.r = 1;
  side.layers_per_block = 1;
  side.scales = {{1, 1}};
  ParamRegistry reg;
  Rng rng(9);
  VitBackbone backbone(bb, reg, rng);
  SideNetwork net(bb, side, reg, rng);
  net.init_from_backbone(backbone);
  const auto& src = backbone.layers()[0];
  auto& dst = net.blocks()[0].layers[0];
  CHECK(dst.attn.qkv.w.data() == src.attn.qkv.w.data());
  CHECK(dst.attn.proj.w.data() == src.attn.proj.w.data());
  CHECK(dst.ln1.gamma.data() == src.ln1.gamma.data());
  auto* df = dynamic_cast<DenseFfn*>(dst.ffn.get());
  auto* sf = dynamic_cast<DenseFfn*>(src.ffn.get());
  REQUIRE(df != nullptr);
  REQUIRE(sf != nullptr);
  CHECK(df->fc1.w.data() == sf->fc1.w.data());
  CHECK(df->fc2.w.data() == sf->fc2.w.data());
}

TEST_CASE("gated fusion") {
  Rng rng(11);
  int64_t db = 16, ds = 8, g = 4;
  ParamRegistry reg;
  Rng wrng(5);
  SideConnection conn;
  conn.proj = Linear::create(reg, "side.conns.0.proj", wrng, db, ds);
  conn.gate = reg.add("side.conns.0.gate", Tensor::zeros({1}));
  conn.pool = 1;

  Tensor tap = random_tensor(rng, {2, g * g, db});
  Tensor side_grid = random_tensor(rng, {2, ds, g, g});

  SUBCASE("gate saturation high returns the projected tap") {
    conn.gate.mutable_data()[0] = 40.0;
    Tensor out = conn.fuse(tap, g, g, side_grid);
    Tensor projected = tokens_to_grid(conn.proj.forward(tap), g, g);
    for (size_t i = 0; i < out.data().size(); ++i) {
      CHECK(out.data()[i] == doctest::Approx(projected.data()[i]).epsilon(1e-12));
    }
  }
  SUBCASE("gate saturation low returns the side feature") {
    conn.gate.mutable_data()[0] = -40.0;
    Tensor out = conn.fuse(tap, g, g, side_grid);
    for (size_t i = 0; i < out.data().size(); ++i) {
      CHECK(out.data()[i] == doctest::Approx(side_grid.data()[i]).epsilon(1e-12));
    }
  }
  SUBCASE("gate zero blends both halves equally") {
    conn.gate.mutable_data()[0] = 0.0;
    Tensor out = conn.fuse(tap, g, g, side_grid);
    Tensor projected = tokens_to_grid(conn.proj.forward(tap), g, g);
    for (size_t i = 0; i < out.data().size(); ++i) {
      double expect = 0.5 * projected.data()[i] + 0.5 * side_grid.data()[i];
      CHECK(out.data()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("output stays on the segment between the two inputs") {
    conn.gate.mutable_data()[0] = rng.uniform(-3, 3);
    Tensor out = conn.fuse(tap, g, g, side_grid);
    Tensor projected = tokens_to_grid(conn.proj.forward(tap), g, g);
    for (size_t i = 0; i < out.data().size(); ++i) {
      double lo = std::min(projected.data()[i], side_grid.data()[i]) - 1e-12;
      double hi = std::max(projected.data()[i], side_grid.data()[i]) + 1e-12;
      CHECK(out.data()[i] >= lo);
      CHECK(out.data()[i] <= hi);
    }
  }
  SUBCASE("shape mismatch after projection is an error") {
    Tensor bad = random_tensor(rng, {2, ds, g * 2, g * 2});
    CHECK_THROWS_WITH_AS(conn.fuse(tap, g, g, bad), doctest::Contains("shape"), Error);
  }
  SUBCASE("gradients reach the projection, gate, and side feature") {
    conn.gate.mutable_data()[0] = 0.3;
    Tensor side_in = side_grid.detached_clone();
    side_in.set_requires_grad(true);
    backward(sum_all(conn.fuse(tap, g, g, side_in)));
    CHECK(conn.proj.w.grad() != nullptr);
    CHECK(conn.gate.grad() != nullptr);
    CHECK(side_in.grad() != nullptr);
  }
}

TEST_CASE("hybrid block wiring") {
  BackboneConfig bb = tiny_backbone();
  SideConfig side = tiny_side();
  ParamRegistry reg;
  Rng rng(21);
  VitBackbone backbone(bb, reg, rng);
  SideNetwork net(bb, side, reg, rng);

  SUBCASE("zeroed post conv gives a zero map") {
    auto& block = net.blocks()[0];
    for (auto& v : block.post_cnn.w.mutable_data()) v = 0.0;
    for (auto& v : block.post_cnn.b.mutable_data()) v = 0.0;
    Rng drng(1);
    Tensor fused = random_tensor(drng, {2, block.dim, block.grid, block.grid});
    Tensor out = block.forward(fused);
    for (double v : out.data()) CHECK(std::fabs(v) < 1e-12);
  }
  SUBCASE("output shape matches the grid and dim") {
    auto& block = net.blocks()[1];
    Rng drng(2);
    Tensor fused = random_tensor(drng, {2, block.dim, block.grid, block.grid});
    Tensor out = block.forward(fused);
    CHECK(out.shape() == Shape{2, block.dim, block.grid, block.grid});
  }
  SUBCASE("block gradients match finite differences") {
    auto& block = net.blocks()[1];  // smallest dims
    Rng drng(3);
    Tensor fused = random_tensor(drng, {1, block.dim, block.grid, block.grid});
    double err =
        grad_check([&](const Tensor& t) { return sum_all(block.forward(t)); }, fused, 1e-5);
    CHECK(err < 1e-5);
  }
  SUBCASE("batch permutation equivariance") {
    auto& block = net.blocks()[0];
    Rng drng(4);
    Tensor a = random_tensor(drng, {1, block.dim, block.grid, block.grid});
    Tensor b = random_tensor(drng, {1, block.dim, block.grid, block.grid});
    NoGradGuard ng;
    Tensor ab = block.forward(concat({a, b}, 0));
    Tensor ba = block.forward(concat({b, a}, 0));
    int64_t half = ab.numel() / 2;
    for (int64_t i = 0; i < half; ++i) {
      CHECK(ab.data()[static_cast<size_t>(i)] ==
            doctest::Approx(ba.data()[static_cast<size_t>(half + i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("multi-scale schedule on a 16x16 starting grid") {
  BackboneConfig bb;
  bb.image_size = 64;
  bb.patch = 4;  // 16x16
  bb.dim = 32;
  bb.depth = 6;
  bb.heads = 4;
  SideConfig side;  // default scales {4:1, 8:2, 16:3}
  side.layers_per_block = 1;
  ParamRegistry reg;
  Rng rng(31);
  VitBackbone backbone(bb, reg, rng);
  SideNetwork net(bb, side, reg, rng);

  CHECK(side.total_blocks() == 6);
  CHECK(net.block_grid(0) == 16);
  CHECK(net.block_grid(1) == 8);
  CHECK(net.block_grid(2) == 8);
  CHECK(net.block_grid(3) == 4);
  CHECK(net.block_grid(5) == 4);
  CHECK(net.block_dim(0) == 8);
  CHECK(net.block_dim(1) == 4);
  CHECK(net.block_dim(3) == 2);

  Rng drng(5);
  Tensor images = random_tensor(drng, {1, 3, 64, 64});
  NoGradGuard ng;
  auto taps = backbone.forward(images);
  auto outs = net.forward_blocks(taps);
  CHECK(outs.size() == 6);
  CHECK(outs[0].shape() == Shape{1, 8, 16, 16});
  CHECK(outs[5].shape() == Shape{1, 2, 4, 4});
}

TEST_CASE("tap assignment defaults to the last layer of each contiguous span") {
  SideConfig side;  // 6 blocks
  auto taps24 = side.default_taps(24);
  CHECK(taps24 == std::vector<int64_t>{3, 7, 11, 15, 19, 23});
  auto taps8 = side.default_taps(8);
  CHECK(taps8 == std::vector<int64_t>{0, 1, 3, 4, 5, 7});
}

TEST_CASE("scale parameter proportions") {
  SideConfig side;  // defaults {4:1, 8:2, 16:3}, N=4

  SUBCASE("reference width reproduces the published fractions") {
    auto fr = count_scale_proportions(side, 1024);
    REQUIRE(fr.size() == 3);
    CHECK(std::fabs(fr[0] - 0.591) < 0.015);
    CHECK(std::fabs(fr[1] - 0.297) < 0.015);
    CHECK(std::fabs(fr[2] - 0.112) < 0.015);
    CHECK(fr[0] + fr[1] + fr[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("equal dims and counts give equal fractions") {
    SideConfig eq;
    eq.scales = {{4, 2}, {4, 2}};  // counting only; no network construction
    auto fr = count_scale_proportions(eq, 256);
    CHECK(fr[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(fr[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("doubling the smallest scale raises its share, total stays 1") {
    auto before = count_scale_proportions(side, 1024);
    SideConfig doubled = side;
    doubled.scales[2].num_blocks *= 2;
    auto after = count_scale_proportions(doubled, 1024);
    CHECK(after[2] > before[2]);
    CHECK(after[0] < before[0]);
    CHECK(after[1] < before[1]);
    CHECK(after[0] + after[1] + after[2] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("dropping the two small scales removes about 40.9% of side params") {
    auto fr = count_scale_proportions(side, 1024);
    double removed = fr[1] + fr[2];
    CHECK(std::fabs(removed - 0.409) < 0.015);
  }
}

TEST_CASE("fusion head") {
  Rng rng(41);
  ParamRegistry reg;
  Rng wrng(6);

  SUBCASE("single block output equals its projection") {
    FusionHead fh;
    fh.fused_dim = 8;
    fh.target_grid = 4;
    fh.projections.push_back(Linear::create(reg, "side.fuse.proj.0", wrng, 8, 8));
    fh.scale_weights = reg.add("side.fuse.weights", Tensor::zeros({1}));
    Tensor map = random_tensor(rng, {2, 8, 4, 4});
    Tensor fused = fh.fuse({map});
    Tensor expect = tokens_to_grid(fh.projections[0].forward(grid_to_tokens(map)), 4, 4);
    for (size_t i = 0; i < fused.data().size(); ++i) {
      CHECK(fused.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
    }
  }
  SUBCASE("equal weights over two identical maps gives either one") {
    FusionHead fh;
    fh.fused_dim = 8;
    fh.target_grid = 4;
    fh.projections.push_back(Linear::create(reg, "f.p0", wrng, 8, 8));
    fh.projections.push_back(fh.projections[0]);  // same projection both slots
    fh.scale_weights = reg.add("f.w", Tensor::zeros({2}));
    Tensor map = random_tensor(rng, {1, 8, 4, 4});
    Tensor fused = fh.fuse({map, map});
    Tensor expect = tokens_to_grid(fh.projections[0].forward(grid_to_tokens(map)), 4, 4);
    for (size_t i = 0; i < fused.data().size(); ++i) {
      CHECK(fused.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-10));
    }
  }
  SUBCASE("raising one weight moves the output toward that scale's map") {
    FusionHead fh;
    fh.fused_dim = 4;
    fh.target_grid = 4;
    fh.projections.push_back(Linear::create(reg, "g.p0", wrng, 4, 4));
    fh.projections.push_back(Linear::create(reg, "g.p1", wrng, 4, 4));
    fh.scale_weights = reg.add("g.w", Tensor::zeros({2}));
    Tensor a = random_tensor(rng, {1, 4, 4, 4});
    Tensor b = random_tensor(rng, {1, 4, 2, 2});
    NoGradGuard ng;
    Tensor base = fh.fuse({a, b});
    Tensor pa = tokens_to_grid(fh.projections[0].forward(grid_to_tokens(a)), 4, 4);
    double eps = 1e-5;
    fh.scale_weights.mutable_data()[0] += eps;
    Tensor bumped = fh.fuse({a, b});
    fh.scale_weights.mutable_data()[0] -= eps;
    // d(fused)/d(w0) direction is (pa - pb); check the sign against it
    Tensor pb_up = tokens_to_grid(
        fh.projections[1].forward(grid_to_tokens(upsample_nearest(b, 2))), 4, 4);
    double dot = 0.0;
    for (size_t i = 0; i < base.data().size(); ++i) {
      double fd = (bumped.data()[i] - base.data()[i]) / eps;
      dot += fd * (pa.data()[i] - pb_up.data()[i]);
    }
    CHECK(dot > 0.0);
  }
}

TEST_CASE("sim savings report") {
  BackboneConfig bb = reference_backbone_config();
  SideConfig side;

  SUBCASE("no sim scales means ratio one") {
    auto sv = sim_param_savings(side, bb);
    CHECK(sv.ratio == 1.0);
    CHECK(sv.mlp_before == 0);
  }
  SUBCASE("deploying at the largest scale cuts the affected MLPs hard") {
    SideConfig s = side;
    s.sim_scales = {4};
    auto sv = sim_param_savings(s, bb);
    CHECK(sv.mlp_before == 4 * dense_ffn_param_count(256));
    CHECK(sv.mlp_after == 4 * sim_param_count(256, 16));
    CHECK(sv.ratio < 0.15);
    CHECK(sv.dense_mix_before > 0);
  }
}

TEST_CASE("config validation errors") {
  BackboneConfig bb = tiny_backbone();
  SideConfig side = tiny_side();

  SideConfig bad = side;
  bad.scales = {{8, 1}, {4, 1}};  // not increasing
  CHECK_THROWS_AS(bad.validate(bb), Error);

  bad = side;
  bad.scales = {{3, 1}};  // 32 % 3 != 0
  CHECK_THROWS_AS(bad.validate(bb), Error);

  bad = side;
  bad.tap_assignment = {0, 9};  // out of range for depth 4
  CHECK_THROWS_AS(bad.validate(bb), Error);

  bad = side;
  bad.sim_scales = {16};  // divisor not present
  CHECK_THROWS_AS(bad.validate(bb), Error);
}
