#include "effowt/model.hpp"

namespace effowt {

Strategy strategy_from_string(const std::string& name) {
  if (name == "full") return Strategy::kFull;
  if (name == "zero_shot") return Strategy::kZeroShot;
  if (name == "side") return Strategy::kSide;
  if (name == "side_sim") return Strategy::kSideSim;
  throw Error("unknown strategy '" + name + "' (expected full|zero_shot|side|side_sim)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFull: return "full";
    case Strategy::kZeroShot: return "zero_shot";
    case Strategy::kSide: return "side";
    case Strategy::kSideSim: return "side_sim";
  }
  return "?";
}

bool strategy_trains_param(Strategy s, const std::string& name) {
  auto has_prefix = [&](const char* p) { return name.rfind(p, 0) == 0; };
  switch (s) {
    case Strategy::kFull: return true;
    case Strategy::kZeroShot: return has_prefix("head.");
    case Strategy::kSide:
    case Strategy::kSideSim: return has_prefix("head.") || has_prefix("side.");
  }
  return false;
}

SideConfig side_config_for_strategy(SideConfig base, Strategy s) {
  if (s == Strategy::kSideSim) {
    if (base.sim_scales.empty()) base.sim_scales.insert(base.scales.front().dim_divisor);
  } else if (s == Strategy::kSide) {
    base.sim_scales.clear();
  }
  return base;
}

TrackerModel::TrackerModel(const BackboneConfig& bb, const SideConfig& side, HeadConfig head,
                           Strategy strategy, uint64_t seed) {
  Rng rng(seed);
  SideConfig side_cfg = side_config_for_strategy(side, strategy);
  backbone_ = std::make_unique<VitBackbone>(bb, registry_, rng);
  side_ = std::make_unique<SideNetwork>(bb, side_cfg, registry_, rng);
  side_->init_from_backbone(*backbone_);
  head_cfg_ = head;
  head_cfg_.in_dim = side_cfg.fused_dim > 0 ? side_cfg.fused_dim
                                            : bb.dim / side_cfg.scales.front().dim_divisor;
  heads_ = Heads::create(registry_, rng, head_cfg_);
  apply_strategy(strategy);
}

void TrackerModel::apply_strategy(Strategy s) {
  strategy_ = s;
  registry_.set_trainable([s](const std::string& n) { return strategy_trains_param(s, n); });
  validate_freeze_contract();
}

void TrackerModel::validate_freeze_contract() const {
  if (strategy_ == Strategy::kFull) return;
  for (const auto& [name, p] : registry_.params()) {
    if (p.trainable && name.rfind("backbone.", 0) == 0) {
      throw Error("freeze contract: backbone parameter '" + name + "' trainable under " +
                  strategy_name(strategy_) + " strategy");
    }
  }
}

Tensor TrackerModel::forward_features(const Tensor& images) const {
  validate_freeze_contract();
  BackboneTaps taps = backbone_->forward(images);
  return side_->forward(taps);
}

HeadOutputs TrackerModel::forward_regions(const Tensor& fused,
                                          const std::vector<RegionBox>& regions) const {
  return heads_.forward(fused, regions, backbone_->config().image_size);
}

}  // namespace effowt
