#include "effowt/backbone.hpp"

namespace effowt {

namespace {

// Identity node under an "out" sub-scope so tap retention is attributable
// separately from layer internals.
Tensor expose_tap(const Tensor& t) {
  ModuleScope s("out");
  return reshape(t, t.shape());
}

}  // namespace

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch <= 0 || dim <= 0 || depth <= 0 || heads <= 0 || mlp_ratio < 1) {
    throw Error("backbone config: all dimensions must be positive, mlp_ratio >= 1");
  }
  if (image_size % patch != 0) {
    throw Error("backbone config: image_size " + std::to_string(image_size) +
                " not divisible by patch " + std::to_string(patch));
  }
  if (dim % heads != 0) {
    throw Error("backbone config: dim " + std::to_string(dim) + " not divisible by heads " +
                std::to_string(heads));
  }
}

BackboneConfig reference_backbone_config() {
  BackboneConfig cfg;
  cfg.image_size = 256;
  cfg.patch = 16;
  cfg.dim = 1024;
  cfg.depth = 24;
  cfg.heads = 16;
  cfg.mlp_ratio = 4;
  return cfg;
}

LayerParamSplit layer_param_split(const BackboneConfig& cfg) {
  double d = static_cast<double>(cfg.dim);
  double r = static_cast<double>(cfg.mlp_ratio);
  double mha = 3.0 * d * d + 3.0 * d + d * d + d;  // qkv + out proj
  double mlp = 2.0 * r * d * d + r * d + d;        // fc1 + fc2
  double ln = 4.0 * d;                             // two affine layer norms
  double total = mha + mlp + ln;
  return {mha / total, mlp / total, ln / total};
}

int64_t backbone_layer_param_formula(const BackboneConfig& cfg) {
  return 12 * cfg.dim * cfg.dim * cfg.depth;
}

VitBackbone::VitBackbone(const BackboneConfig& cfg, ParamRegistry& reg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  patch_w_ = reg.add("backbone.patch.w",
                     trunc_normal_tensor(rng, {cfg.dim, 3, cfg.patch, cfg.patch}, 0.02));
  patch_b_ = reg.add("backbone.patch.b", Tensor::zeros({cfg.dim}));
  pos_ = reg.add("backbone.pos", trunc_normal_tensor(rng, {1, cfg.tokens(), cfg.dim}, 0.02));
  int64_t hidden = cfg.dim * cfg.mlp_ratio;
  for (int64_t i = 0; i < cfg.depth; ++i) {
    layers_.push_back(TransformerLayer::create(reg, "backbone.blocks." + std::to_string(i), rng,
                                               cfg.dim, cfg.heads, hidden));
  }
}

BackboneTaps VitBackbone::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.image_size) {
    throw Error("backbone: expected images [B,3," + std::to_string(cfg_.image_size) + "," +
                std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
  }
  ModuleScope top("backbone");
  BackboneTaps taps;
  taps.grid_h = cfg_.grid();
  taps.grid_w = cfg_.grid();

  Tensor x;
  {
    ModuleScope s("embed");
    Tensor patches = conv2d(images, patch_w_, cfg_.patch, 0);  // [B,D,gh,gw]
    patches = add(patches, reshape(patch_b_, {cfg_.dim, 1, 1}));
    x = add(grid_to_tokens(patches), pos_);  // [B,n,D]
    x = expose_tap(x);
  }
  taps.embedding = x;

  for (size_t i = 0; i < layers_.size(); ++i) {
    ModuleScope s("blocks." + std::to_string(i));
    x = layers_[i].forward(x, taps.grid_h, taps.grid_w);
    x = expose_tap(x);
    taps.layers.push_back(x);
  }
  return taps;
}

}  // namespace effowt
