#pragma once

#include <string>

#include <json.hpp>

#include "effowt/heads.hpp"
#include "effowt/model.hpp"

namespace effowt {

using Json = nlohmann::ordered_json;

struct OptimizerConfig {
  std::string kind = "adam";
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int64_t steps = 200;
  int64_t batch = 2;
};

struct DataConfig {
  int64_t image_size = 64;
  int64_t n_videos = 3;
  int64_t frames_per_video = 4;
  std::vector<std::string> known_shapes = {"square", "circle"};
  std::vector<std::string> unknown_shapes = {"triangle", "cross"};
  uint64_t seed = 7;
};

struct LossConfig {
  double cls_weight = 1.0;
  double reid_weight = 1.0;
  double temperature = 0.07;
};

struct TrackerConfig {
  double sim_threshold = 0.5;
};

/// One JSON document drives every subcommand. Parsing is strict: unknown
/// keys anywhere are errors.
struct ExperimentConfig {
  BackboneConfig backbone;  // desk defaults
  SideConfig side;
  std::string strategy = "side";
  OptimizerConfig optimizer;
  DataConfig data;
  LossConfig loss;
  HeadConfig head;  // in_dim derived from the side config at build time
  TrackerConfig tracker;

  static ExperimentConfig from_json(const Json& j);
  static ExperimentConfig from_json_file(const std::string& path);
  Json to_json() const;
  void validate() const;

  Strategy strategy_enum() const { return strategy_from_string(strategy); }
};

}  // namespace effowt
