#pragma once

#include <vector>

#include "effowt/nn.hpp"

namespace effowt {

struct BackboneConfig {
  int64_t image_size = 64;
  int64_t patch = 8;
  int64_t dim = 128;
  int64_t depth = 8;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;

  void validate() const;
  int64_t grid() const { return image_size / patch; }
  int64_t tokens() const { return grid() * grid(); }
};

/// Never-trained configuration used for parameter-count checks.
BackboneConfig reference_backbone_config();

struct BackboneTaps {
  Tensor embedding;            // tokens after patch + positional embedding
  std::vector<Tensor> layers;  // one per transformer layer
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

struct LayerParamSplit {
  double mha = 0.0;
  double mlp = 0.0;
  double ln = 0.0;
};

/// Exact per-layer parameter fractions of attention / MLP / layer norms.
LayerParamSplit layer_param_split(const BackboneConfig& cfg);

/// Leading-order per-layer count: 12 * dim^2 * depth.
int64_t backbone_layer_param_formula(const BackboneConfig& cfg);

class VitBackbone {
 public:
  VitBackbone(const BackboneConfig& cfg, ParamRegistry& reg, Rng& rng);

  /// images: [B,3,H,W]. Returns every layer output as a tap.
  BackboneTaps forward(const Tensor& images) const;

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<TransformerLayer>& layers() const { return layers_; }

 private:
  BackboneConfig cfg_;
  Tensor patch_w_;  // [dim,3,patch,patch]
  Tensor patch_b_;  // [dim]
  Tensor pos_;      // [1,tokens,dim]
  std::vector<TransformerLayer> layers_;
};

}  // namespace effowt
