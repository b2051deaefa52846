#include "effowt/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace effowt {

namespace {

void check_keys(const Json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!j.is_object()) throw Error("config: '" + path + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw Error("config: unknown key '" + path + (path.empty() ? "" : ".") + it.key() + "'");
    }
  }
}

template <class T>
void get_if(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig cfg;
  check_keys(j, "", {"backbone", "side", "strategy", "optimizer", "data", "loss", "head",
                     "tracker"});
  if (j.contains("backbone")) {
    const Json& b = j.at("backbone");
    check_keys(b, "backbone", {"image_size", "patch", "dim", "depth", "heads", "mlp_ratio"});
    get_if(b, "image_size", cfg.backbone.image_size);
    get_if(b, "patch", cfg.backbone.patch);
    get_if(b, "dim", cfg.backbone.dim);
    get_if(b, "depth", cfg.backbone.depth);
    get_if(b, "heads", cfg.backbone.heads);
    get_if(b, "mlp_ratio", cfg.backbone.mlp_ratio);
  }
  if (j.contains("side")) {
    const Json& s = j.at("side");
    check_keys(s, "side",
               {"r", "layers_per_block", "scales", "tap_assignment", "sim_scales", "fused_dim"});
    get_if(s, "r", cfg.side.r);
    get_if(s, "layers_per_block", cfg.side.layers_per_block);
    if (s.contains("scales")) {
      cfg.side.scales.clear();
      for (const Json& sc : s.at("scales")) {
        check_keys(sc, "side.scales[]", {"dim_divisor", "num_blocks"});
        ScaleSpec spec;
        get_if(sc, "dim_divisor", spec.dim_divisor);
        get_if(sc, "num_blocks", spec.num_blocks);
        cfg.side.scales.push_back(spec);
      }
    }
    if (s.contains("tap_assignment")) {
      cfg.side.tap_assignment = s.at("tap_assignment").get<std::vector<int64_t>>();
    }
    if (s.contains("sim_scales")) {
      auto v = s.at("sim_scales").get<std::vector<int64_t>>();
      cfg.side.sim_scales = std::set<int64_t>(v.begin(), v.end());
    }
    get_if(s, "fused_dim", cfg.side.fused_dim);
  }
  get_if(j, "strategy", cfg.strategy);
  if (j.contains("optimizer")) {
    const Json& o = j.at("optimizer");
    check_keys(o, "optimizer", {"kind", "lr", "betas", "steps", "batch"});
    get_if(o, "kind", cfg.optimizer.kind);
    get_if(o, "lr", cfg.optimizer.lr);
    if (o.contains("betas")) {
      auto b = o.at("betas").get<std::vector<double>>();
      if (b.size() != 2) throw Error("config: optimizer.betas needs exactly 2 values");
      cfg.optimizer.beta1 = b[0];
      cfg.optimizer.beta2 = b[1];
    }
    get_if(o, "steps", cfg.optimizer.steps);
    get_if(o, "batch", cfg.optimizer.batch);
  }
  if (j.contains("data")) {
    const Json& d = j.at("data");
    check_keys(d, "data",
               {"image_size", "n_videos", "frames_per_video", "known_shapes", "unknown_shapes",
                "seed"});
    get_if(d, "image_size", cfg.data.image_size);
    get_if(d, "n_videos", cfg.data.n_videos);
    get_if(d, "frames_per_video", cfg.data.frames_per_video);
    get_if(d, "known_shapes", cfg.data.known_shapes);
    get_if(d, "unknown_shapes", cfg.data.unknown_shapes);
    get_if(d, "seed", cfg.data.seed);
  }
  if (j.contains("loss")) {
    const Json& l = j.at("loss");
    check_keys(l, "loss", {"cls_weight", "reid_weight", "temperature"});
    get_if(l, "cls_weight", cfg.loss.cls_weight);
    get_if(l, "reid_weight", cfg.loss.reid_weight);
    get_if(l, "temperature", cfg.loss.temperature);
  }
  if (j.contains("head")) {
    const Json& h = j.at("head");
    check_keys(h, "head", {"embed_dim", "hidden"});
    get_if(h, "embed_dim", cfg.head.embed_dim);
    get_if(h, "hidden", cfg.head.hidden);
  }
  if (j.contains("tracker")) {
    const Json& t = j.at("tracker");
    check_keys(t, "tracker", {"sim_threshold"});
    get_if(t, "sim_threshold", cfg.tracker.sim_threshold);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("config: cannot open " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const std::exception& e) {
    throw Error("config: JSON parse failure in " + path + ": " + e.what());
  }
  return from_json(j);
}

Json ExperimentConfig::to_json() const {
  Json j;
  j["backbone"] = {{"image_size", backbone.image_size}, {"patch", backbone.patch},
                   {"dim", backbone.dim},               {"depth", backbone.depth},
                   {"heads", backbone.heads},           {"mlp_ratio", backbone.mlp_ratio}};
  Json scales = Json::array();
  for (const auto& s : side.scales) {
    scales.push_back({{"dim_divisor", s.dim_divisor}, {"num_blocks", s.num_blocks}});
  }
  j["side"] = {{"r", side.r},
               {"layers_per_block", side.layers_per_block},
               {"scales", scales},
               {"tap_assignment", side.tap_assignment},
               {"sim_scales", std::vector<int64_t>(side.sim_scales.begin(), side.sim_scales.end())},
               {"fused_dim", side.fused_dim}};
  j["strategy"] = strategy;
  j["optimizer"] = {{"kind", optimizer.kind},
                    {"lr", optimizer.lr},
                    {"betas", std::vector<double>{optimizer.beta1, optimizer.beta2}},
                    {"steps", optimizer.steps},
                    {"batch", optimizer.batch}};
  j["data"] = {{"image_size", data.image_size},
               {"n_videos", data.n_videos},
               {"frames_per_video", data.frames_per_video},
               {"known_shapes", data.known_shapes},
               {"unknown_shapes", data.unknown_shapes},
               {"seed", data.seed}};
  j["loss"] = {{"cls_weight", loss.cls_weight},
               {"reid_weight", loss.reid_weight},
               {"temperature", loss.temperature}};
  j["head"] = {{"embed_dim", head.embed_dim}, {"hidden", head.hidden}};
  j["tracker"] = {{"sim_threshold", tracker.sim_threshold}};
  return j;
}

void ExperimentConfig::validate() const {
  backbone.validate();
  side.validate(backbone);
  (void)strategy_from_string(strategy);
  if (optimizer.kind != "adam") throw Error("config: optimizer.kind must be 'adam'");
  if (optimizer.lr < 0) throw Error("config: optimizer.lr must be >= 0");
  if (optimizer.steps < 0 || optimizer.batch < 1) {
    throw Error("config: optimizer.steps >= 0 and batch >= 1 required");
  }
  if (data.image_size != backbone.image_size) {
    throw Error("config: data.image_size must match backbone.image_size");
  }
  if (data.n_videos < 1 || data.frames_per_video < 1) {
    throw Error("config: data.n_videos and frames_per_video must be >= 1");
  }
  if (data.known_shapes.empty()) throw Error("config: need at least one known shape");
  for (const auto& u : data.unknown_shapes) {
    if (std::find(data.known_shapes.begin(), data.known_shapes.end(), u) !=
        data.known_shapes.end()) {
      throw Error("config: shape '" + u + "' appears in both known and unknown vocabularies");
    }
  }
  if (loss.temperature <= 0) throw Error("config: loss.temperature must be positive");
  if (!(tracker.sim_threshold > -1.0 && tracker.sim_threshold < 1.0)) {
    throw Error("config: tracker.sim_threshold must lie in (-1,1)");
  }
  if (head.embed_dim < 1 || head.hidden < 1) throw Error("config: head dims must be >= 1");
}

}  // namespace effowt
