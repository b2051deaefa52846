#pragma once

#include <set>
#include <vector>

#include "effowt/backbone.hpp"
#include "effowt/sim.hpp"

namespace effowt {

struct ScaleSpec {
  int64_t dim_divisor = 4;  // block channels = backbone dim / divisor
  int64_t num_blocks = 1;
};

struct SideConfig {
  int64_t r = 4;                 // base channel reduction
  int64_t layers_per_block = 4;  // transformer layers per side block
  std::vector<ScaleSpec> scales = {{4, 1}, {8, 2}, {16, 3}};
  std::vector<int64_t> tap_assignment;  // backbone layer per block; empty = contiguous default
  std::set<int64_t> sim_scales;         // divisors whose blocks use sparse token mixing
  int64_t fused_dim = 0;                // head input channels; 0 = first scale's dim

  void validate(const BackboneConfig& backbone) const;
  int64_t total_blocks() const;
  int64_t total_side_layers() const;
  /// Block k taps the last backbone layer of its contiguous span.
  std::vector<int64_t> default_taps(int64_t backbone_depth) const;
  std::vector<int64_t> resolved_taps(int64_t backbone_depth) const;
};

/// Projection + gate joining a backbone tap with the running side feature.
struct SideConnection {
  Linear proj;       // backbone dim -> block dim
  Tensor gate;       // [1]; sigmoid-squashed mixing weight
  int64_t pool = 1;  // average-pool factor matching the tap to the block grid

  /// sigmoid(g)*proj(pool(tap)) + (1-sigmoid(g))*side. Returns a grid map.
  Tensor fuse(const Tensor& tap_tokens, int64_t tap_h, int64_t tap_w,
              const Tensor& side_grid) const;
};

/// CNN local enhancement around a stack of transformer side layers.
struct SideBlock {
  int64_t dim = 0;
  int64_t grid = 0;
  ConvUnit pre_cnn;
  std::vector<TransformerLayer> layers;
  ConvUnit post_cnn;

  Tensor forward(const Tensor& fused_grid) const;  // [B,D,G,G] -> [B,D,G,G]
};

/// Upsample every block output to the largest grid, project to a common
/// width, and combine with softmax-normalized weights.
struct FusionHead {
  std::vector<Linear> projections;
  Tensor scale_weights;  // [num block outputs]
  int64_t fused_dim = 0;
  int64_t target_grid = 0;

  Tensor fuse(const std::vector<Tensor>& block_grids) const;
};

class SideNetwork {
 public:
  SideNetwork(const BackboneConfig& bb, const SideConfig& cfg, ParamRegistry& reg, Rng& rng);

  std::vector<Tensor> forward_blocks(const BackboneTaps& taps) const;
  Tensor forward(const BackboneTaps& taps) const;  // fused head-input map

  /// Clone-and-prune initialization from backbone weights: per matrix, the
  /// top channels by L1 mass are kept; attention keeps whole heads by
  /// Frobenius norm (sub-head channels by L1 when heads do not divide).
  void init_from_backbone(const VitBackbone& backbone);

  const SideConfig& config() const { return cfg_; }
  int64_t block_dim(int64_t block) const { return blocks_[static_cast<size_t>(block)].dim; }
  int64_t block_grid(int64_t block) const { return blocks_[static_cast<size_t>(block)].grid; }
  const std::vector<int64_t>& taps() const { return taps_; }
  const std::vector<SideConnection>& connections() const { return conns_; }
  std::vector<SideBlock>& blocks() { return blocks_; }
  const FusionHead& fusion() const { return fusion_; }

 private:
  BackboneConfig bb_;
  SideConfig cfg_;
  Linear stem_;  // embedding tokens -> first block dim
  std::vector<SideConnection> conns_;
  std::vector<SideBlock> blocks_;
  std::vector<ConvUnit> transitions_;   // stride-2, between scales
  std::vector<int64_t> block_scale_;    // scale index per block
  std::vector<int64_t> taps_;
  std::vector<int64_t> side_heads_;     // attention heads per block
  FusionHead fusion_;
};

/// Exact per-layer transformer parameter count at a given width.
int64_t transformer_layer_param_count(int64_t dim, int64_t mlp_ratio = 4);

/// Fraction of side transformer parameters contributed by each scale.
std::vector<double> count_scale_proportions(const SideConfig& cfg, int64_t backbone_dim);

struct SimSavings {
  int64_t mlp_before = 0;      // dense FFN params of the affected blocks
  int64_t mlp_after = 0;       // sparse-mixing params of the affected blocks
  int64_t dense_mix_before = 0;  // dense token-mixing alternative, for comparison
  double ratio = 1.0;          // after / before (1.0 when nothing is affected)
};
SimSavings sim_param_savings(const SideConfig& cfg, const BackboneConfig& bb);

}  // namespace effowt
