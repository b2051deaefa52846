#pragma once

#include <memory>

#include "effowt/backbone.hpp"
#include "effowt/heads.hpp"
#include "effowt/side_network.hpp"

namespace effowt {

enum class Strategy { kFull, kZeroShot, kSide, kSideSim };

Strategy strategy_from_string(const std::string& name);
std::string strategy_name(Strategy s);
bool strategy_trains_param(Strategy s, const std::string& param_name);

/// Effective side configuration under a strategy: kSideSim forces sparse
/// mixing on (first scale by default), kSide forces it off.
SideConfig side_config_for_strategy(SideConfig base, Strategy s);

/// Frozen backbone + side network + heads over one parameter registry.
class TrackerModel {
 public:
  TrackerModel(const BackboneConfig& bb, const SideConfig& side, HeadConfig head,
               Strategy strategy, uint64_t seed);

  void apply_strategy(Strategy s);
  /// Under side / zero-shot strategies every backbone parameter must be
  /// frozen; violations are configuration errors.
  void validate_freeze_contract() const;

  Tensor forward_features(const Tensor& images) const;  // fused head-input map
  HeadOutputs forward_regions(const Tensor& fused, const std::vector<RegionBox>& regions) const;

  ParamRegistry& registry() { return registry_; }
  const ParamRegistry& registry() const { return registry_; }
  const VitBackbone& backbone() const { return *backbone_; }
  const SideNetwork& side() const { return *side_; }
  const Heads& heads() const { return heads_; }
  Strategy strategy() const { return strategy_; }
  const HeadConfig& head_config() const { return head_cfg_; }

 private:
  ParamRegistry registry_;
  std::unique_ptr<VitBackbone> backbone_;
  std::unique_ptr<SideNetwork> side_;
  Heads heads_;
  HeadConfig head_cfg_;
  Strategy strategy_ = Strategy::kSide;
};

}  // namespace effowt
