#include <doctest.h>

#include <fstream>
#include <sstream>

#include "effowt/efficiency.hpp"

using namespace effowt;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.backbone.image_size = 32;
  cfg.backbone.patch = 8;
  cfg.backbone.dim = 32;
  cfg.backbone.depth = 4;
  cfg.backbone.heads = 4;
  cfg.side.layers_per_block = 1;
  cfg.side.scales = {{4, 1}, {8, 1}};
  cfg.data.image_size = 32;
  cfg.optimizer.batch = 1;
  cfg.head.hidden = 16;
  cfg.head.embed_dim = 8;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("strategy orderings hold on the tiny config") {
  ExperimentConfig cfg = tiny_config();
  EfficiencyReport rep = build_efficiency_report(cfg, /*measure=*/true);
  REQUIRE(rep.rows.size() == 4);
  const auto& full = rep.rows[0];
  const auto& zero = rep.rows[1];
  const auto& side = rep.rows[2];
  const auto& sim = rep.rows[3];
  CHECK(full.strategy == "full");
  CHECK(zero.strategy == "zero_shot");

  // parameter counts: zero_shot < side_sim < side < full
  CHECK(zero.trainable_params < sim.trainable_params);
  CHECK(sim.trainable_params < side.trainable_params);
  CHECK(side.trainable_params < full.trainable_params);
  CHECK(full.param_ratio_vs_full == 1.0);
  CHECK(sim.param_ratio_vs_full < side.param_ratio_vs_full);

  // memory: zero_shot < side_sim <= side < full
  CHECK(zero.peak_bytes < sim.peak_bytes);
  CHECK(sim.peak_bytes <= side.peak_bytes);
  CHECK(side.peak_bytes < full.peak_bytes);
  CHECK(full.memory_ratio_vs_full == 1.0);

  // total params equal across strategies with identical architecture
  CHECK(zero.total_params == full.total_params);
  CHECK(side.total_params == full.total_params);
}

TEST_CASE("zero-shot trains exactly the head") {
  ExperimentConfig cfg = tiny_config();
  TrackerModel model(cfg.backbone, cfg.side, cfg.head, Strategy::kZeroShot, cfg.data.seed);
  int64_t head_params = 0;
  for (const auto& [name, p] : model.registry().params()) {
    if (name.rfind("head.", 0) == 0) head_params += p.tensor.numel();
  }
  CHECK(count_params(model).trainable == head_params);
}

TEST_CASE("doubling the batch roughly doubles activation bytes") {
  ExperimentConfig cfg = tiny_config();
  cfg.optimizer.batch = 1;
  TrackerModel m1(cfg.backbone, cfg.side, cfg.head, Strategy::kSide, cfg.data.seed);
  int64_t b1 = measure_activation_bytes(m1, cfg, 1);
  cfg.optimizer.batch = 2;
  TrackerModel m2(cfg.backbone, cfg.side, cfg.head, Strategy::kSide, cfg.data.seed);
  int64_t b2 = measure_activation_bytes(m2, cfg, 1);
  double ratio = static_cast<double>(b2) / static_cast<double>(b1);
  CHECK(ratio > 1.9);
  CHECK(ratio < 2.1);
}

TEST_CASE("report files: header, json round trip, determinism") {
  ExperimentConfig cfg = tiny_config();
  EfficiencyReport rep = build_efficiency_report(cfg, true);
  write_efficiency_csv(rep, "/tmp/effowt_eff.csv");
  write_efficiency_json(rep, "/tmp/effowt_eff.json");

  std::string csv = slurp("/tmp/effowt_eff.csv");
  CHECK(csv.rfind("strategy,trainable_params,param_ratio,peak_bytes,memory_ratio\n", 0) == 0);
  CHECK(csv.find("zero_shot") != std::string::npos);

  Json parsed = Json::parse(slurp("/tmp/effowt_eff.json"));
  REQUIRE(parsed.at("rows").size() == 4);
  CHECK(parsed.at("rows")[0].at("strategy") == "full");
  CHECK(parsed.at("rows")[0].at("peak_bytes").get<int64_t>() == rep.rows[0].peak_bytes);

  // rerun writes identical bytes
  EfficiencyReport rep2 = build_efficiency_report(cfg, true);
  write_efficiency_csv(rep2, "/tmp/effowt_eff2.csv");
  write_efficiency_json(rep2, "/tmp/effowt_eff2.json");
  CHECK(slurp("/tmp/effowt_eff2.csv") == csv);
  CHECK(slurp("/tmp/effowt_eff2.json") == slurp("/tmp/effowt_eff.json"));
}

TEST_CASE("single-strategy filter") {
  ExperimentConfig cfg = tiny_config();
  EfficiencyReport rep = build_efficiency_report(cfg, false, "side");
  REQUIRE(rep.rows.size() == 1);
  CHECK(rep.rows[0].strategy == "side");
  CHECK(rep.rows[0].param_ratio_vs_full < 1.0);
  CHECK_THROWS_AS(build_efficiency_report(cfg, false, "nope"), Error);
}
