#include "effowt/side_network.hpp"

#include <cmath>

#include "effowt/pruning.hpp"

namespace effowt {

namespace {

int64_t side_heads_for(int64_t backbone_heads, int64_t divisor) {
  if (backbone_heads % divisor == 0) return std::max<int64_t>(1, backbone_heads / divisor);
  return 1;
}

// Factory that lets the FFN slot be swapped (dense vs sparse mixing) while
// keeping registration/rng order fixed.
TransformerLayer make_layer(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t dim,
                            int64_t heads, int64_t hidden, bool use_sim, int64_t grid) {
  TransformerLayer l;
  l.ln1 = LayerNorm::create(reg, prefix + ".ln1", dim);
  l.attn = Mhsa::create(reg, prefix + ".attn", rng, dim, heads);
  l.ln2 = LayerNorm::create(reg, prefix + ".ln2", dim);
  if (use_sim) {
    l.ffn = SimLayer::create(reg, prefix + ".ffn", rng, dim, grid);
  } else {
    l.ffn = DenseFfn::create(reg, prefix + ".ffn", rng, dim, hidden);
  }
  return l;
}

}  // namespace

int64_t SideConfig::total_blocks() const {
  int64_t n = 0;
  for (const auto& s : scales) n += s.num_blocks;
  return n;
}

int64_t SideConfig::total_side_layers() const {
  return total_blocks() * layers_per_block;
}

std::vector<int64_t> SideConfig::default_taps(int64_t backbone_depth) const {
  int64_t m = total_blocks();
  std::vector<int64_t> taps(static_cast<size_t>(m));
  for (int64_t k = 0; k < m; ++k) {
    taps[static_cast<size_t>(k)] = (k + 1) * backbone_depth / m - 1;
  }
  return taps;
}

std::vector<int64_t> SideConfig::resolved_taps(int64_t backbone_depth) const {
  return tap_assignment.empty() ? default_taps(backbone_depth) : tap_assignment;
}

void SideConfig::validate(const BackboneConfig& backbone) const {
  if (r < 1 || backbone.dim % r != 0) {
    throw Error("side config: reduction r=" + std::to_string(r) + " must divide backbone dim " +
                std::to_string(backbone.dim));
  }
  if (layers_per_block < 1) throw Error("side config: layers_per_block must be >= 1");
  if (scales.empty()) throw Error("side config: at least one scale required");
  int64_t prev = 0;
  for (const auto& s : scales) {
    if (s.dim_divisor <= prev) {
      throw Error("side config: dim_divisor values must be strictly increasing");
    }
    prev = s.dim_divisor;
    if (s.num_blocks < 1) throw Error("side config: num_blocks must be >= 1");
    if (backbone.dim % s.dim_divisor != 0) {
      throw Error("side config: dim_divisor " + std::to_string(s.dim_divisor) +
                  " does not divide backbone dim " + std::to_string(backbone.dim));
    }
  }
  int64_t halvings = static_cast<int64_t>(scales.size()) - 1;
  int64_t g = backbone.grid();
  for (int64_t i = 0; i < halvings; ++i) {
    if (g < 2) throw Error("side config: grid too small to halve across the scale schedule");
    if (g % 2 != 0) {
      throw Error("side config: grid " + std::to_string(g) + " not divisible by 2 at scale " +
                  std::to_string(i + 1));
    }
    g /= 2;
  }
  for (int64_t v : sim_scales) {
    bool found = false;
    for (const auto& s : scales) found |= (s.dim_divisor == v);
    if (!found) {
      throw Error("side config: sim scale divisor " + std::to_string(v) +
                  " not present in scales");
    }
  }
  if (!tap_assignment.empty()) {
    if (static_cast<int64_t>(tap_assignment.size()) != total_blocks()) {
      throw Error("side config: tap_assignment needs one entry per block");
    }
    int64_t last = -1;
    for (int64_t t : tap_assignment) {
      if (t < 0 || t >= backbone.depth) {
        throw Error("side config: tap index " + std::to_string(t) + " out of range");
      }
      if (t < last) throw Error("side config: tap indices must be non-decreasing");
      last = t;
    }
  }
}

Tensor SideConnection::fuse(const Tensor& tap_tokens, int64_t tap_h, int64_t tap_w,
                            const Tensor& side_grid) const {
  Tensor t = tap_tokens;
  int64_t h = tap_h, w = tap_w;
  if (pool > 1) {
    Tensor g = tokens_to_grid(t, tap_h, tap_w);
    g = avg_pool2d(g, pool);
    h = tap_h / pool;
    w = tap_w / pool;
    t = grid_to_tokens(g);
  }
  Tensor projected = tokens_to_grid(proj.forward(t), h, w);
  if (projected.shape() != side_grid.shape()) {
    throw Error("side connection: shape mismatch after projection, " +
                shape_str(projected.shape()) + " vs " + shape_str(side_grid.shape()));
  }
  Tensor g = sigmoid(gate);                              // [1]
  Tensor inv = add_scalar(mul_scalar(g, -1.0), 1.0);     // 1 - sigmoid(g)
  return add(mul(projected, g), mul(side_grid, inv));
}

Tensor SideBlock::forward(const Tensor& fused_grid) const {
  Tensor f_local = pre_cnn.forward(fused_grid);
  Tensor t = grid_to_tokens(f_local);
  for (const auto& layer : layers) t = layer.forward(t, grid, grid);
  Tensor f_global = tokens_to_grid(t, grid, grid);
  return post_cnn.forward(add(f_local, f_global));
}

Tensor FusionHead::fuse(const std::vector<Tensor>& block_grids) const {
  if (block_grids.empty()) throw Error("fusion: need at least one block output");
  Tensor weights = softmax(scale_weights, 0);
  Tensor acc;
  for (size_t k = 0; k < block_grids.size(); ++k) {
    Tensor g = block_grids[k];
    int64_t grid = g.dim(2);
    if (target_grid % grid != 0) {
      throw Error("fusion: grid " + std::to_string(grid) + " does not divide target " +
                  std::to_string(target_grid));
    }
    int64_t factor = target_grid / grid;
    if (factor > 1) g = upsample_nearest(g, factor);
    Tensor t = projections[k].forward(grid_to_tokens(g));
    g = tokens_to_grid(t, target_grid, target_grid);
    Tensor wk = gather(weights, 0, {static_cast<int64_t>(k)});  // [1]
    Tensor term = mul(g, wk);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

SideNetwork::SideNetwork(const BackboneConfig& bb, const SideConfig& cfg, ParamRegistry& reg,
                         Rng& rng)
    : bb_(bb), cfg_(cfg) {
  cfg_.validate(bb_);
  taps_ = cfg_.resolved_taps(bb_.depth);
  int64_t g0 = bb_.grid();
  int64_t dim0 = bb_.dim / cfg_.scales[0].dim_divisor;

  stem_ = Linear::create(reg, "side.stem", rng, bb_.dim, dim0);

  int64_t block_index = 0;
  int64_t grid = g0;
  int64_t prev_dim = dim0;
  for (size_t s = 0; s < cfg_.scales.size(); ++s) {
    const auto& scale = cfg_.scales[s];
    int64_t dim = bb_.dim / scale.dim_divisor;
    int64_t heads = side_heads_for(bb_.heads, scale.dim_divisor);
    if (s > 0) {
      grid /= 2;
      transitions_.push_back(ConvUnit::create(
          reg, "side.trans." + std::to_string(s - 1), rng, prev_dim, dim, /*stride=*/2));
    }
    bool use_sim = cfg_.sim_scales.count(scale.dim_divisor) > 0;
    for (int64_t b = 0; b < scale.num_blocks; ++b, ++block_index) {
      std::string bp = "side.blocks." + std::to_string(block_index);
      SideBlock block;
      block.dim = dim;
      block.grid = grid;
      block.pre_cnn = ConvUnit::create(reg, bp + ".pre", rng, dim, dim);
      for (int64_t l = 0; l < cfg_.layers_per_block; ++l) {
        block.layers.push_back(make_layer(reg, bp + ".layers." + std::to_string(l), rng, dim,
                                          heads, dim * bb_.mlp_ratio, use_sim, grid));
      }
      block.post_cnn = ConvUnit::create(reg, bp + ".post", rng, dim, dim);

      SideConnection conn;
      conn.proj = Linear::create(reg, "side.conns." + std::to_string(block_index) + ".proj", rng,
                                 bb_.dim, dim);
      conn.gate = reg.add("side.conns." + std::to_string(block_index) + ".gate",
                          Tensor::zeros({1}));
      conn.pool = g0 / grid;

      blocks_.push_back(std::move(block));
      conns_.push_back(std::move(conn));
      block_scale_.push_back(static_cast<int64_t>(s));
      side_heads_.push_back(heads);
    }
    prev_dim = dim;
  }

  fusion_.fused_dim = cfg_.fused_dim > 0 ? cfg_.fused_dim : dim0;
  fusion_.target_grid = g0;
  for (int64_t k = 0; k < static_cast<int64_t>(blocks_.size()); ++k) {
    fusion_.projections.push_back(Linear::create(
        reg, "side.fuse.proj." + std::to_string(k), rng, blocks_[static_cast<size_t>(k)].dim,
        fusion_.fused_dim));
  }
  fusion_.scale_weights =
      reg.add("side.fuse.weights", Tensor::zeros({static_cast<int64_t>(blocks_.size())}));
}

std::vector<Tensor> SideNetwork::forward_blocks(const BackboneTaps& taps) const {
  if (static_cast<int64_t>(taps.layers.size()) != bb_.depth) {
    throw Error("side: expected " + std::to_string(bb_.depth) + " backbone taps, got " +
                std::to_string(taps.layers.size()));
  }
  ModuleScope top("side");
  int64_t g0 = bb_.grid();
  Tensor x;
  {
    ModuleScope s("stem");
    x = tokens_to_grid(stem_.forward(taps.embedding), g0, g0);
  }
  std::vector<Tensor> outputs;
  int64_t current_scale = 0;
  for (size_t k = 0; k < blocks_.size(); ++k) {
    if (block_scale_[k] != current_scale) {
      ModuleScope s("trans." + std::to_string(block_scale_[k] - 1));
      if (x.dim(2) < 2) throw Error("side: grid too small to halve");
      x = transitions_[static_cast<size_t>(block_scale_[k] - 1)].forward(x);
      current_scale = block_scale_[k];
    }
    Tensor fused;
    {
      ModuleScope s("conns." + std::to_string(k));
      fused = conns_[k].fuse(taps.layers[static_cast<size_t>(taps_[k])], g0, g0, x);
    }
    {
      ModuleScope s("blocks." + std::to_string(k));
      x = blocks_[k].forward(fused);
    }
    outputs.push_back(x);
  }
  return outputs;
}

Tensor SideNetwork::forward(const BackboneTaps& taps) const {
  auto outputs = forward_blocks(taps);
  ModuleScope top("side");
  ModuleScope s("fuse");
  return fusion_.fuse(outputs);
}

void SideNetwork::init_from_backbone(const VitBackbone& backbone) {
  const auto& bb_layers = backbone.layers();
  int64_t depth = static_cast<int64_t>(bb_layers.size());
  int64_t total = cfg_.total_side_layers();
  int64_t j = 0;
  for (size_t bi = 0; bi < blocks_.size(); ++bi) {
    SideBlock& block = blocks_[bi];
    int64_t ds = block.dim;
    int64_t hidden = ds * bb_.mlp_ratio;
    for (auto& layer : block.layers) {
      const TransformerLayer& src = bb_layers[static_cast<size_t>(j * depth / total)];
      ++j;

      // residual-stream input channels, per matrix by L1 mass
      auto qkv_rows = select_top_channels(matrix_in_l1(src.attn.qkv.w), ds);

      // attention output channels: whole heads by Frobenius norm; sub-head
      // channels by L1 when heads do not divide evenly
      int64_t bb_heads = src.attn.heads;
      int64_t d = bb_.dim;
      int64_t dh = d / bb_heads;
      int64_t keep_heads = std::max<int64_t>(1, (bb_heads * ds) / d);
      if (ds % keep_heads != 0) keep_heads = 1;
      int64_t per_head = ds / keep_heads;
      auto head_scores = qkv_head_scores(src.attn.qkv.w, bb_heads);
      auto kept_heads = select_top_channels(head_scores, keep_heads);
      std::vector<int64_t> ctx_sel;  // indices into [0, d)
      const auto& qkv_w = src.attn.qkv.w.data();
      for (int64_t hsel : kept_heads) {
        if (per_head == dh) {
          for (int64_t c = 0; c < dh; ++c) ctx_sel.push_back(hsel * dh + c);
        } else {
          std::vector<double> cs(static_cast<size_t>(dh), 0.0);
          for (int64_t i = 0; i < d; ++i) {
            for (int64_t t = 0; t < 3; ++t) {
              for (int64_t c = 0; c < dh; ++c) {
                cs[static_cast<size_t>(c)] +=
                    std::fabs(qkv_w[i * 3 * d + t * d + hsel * dh + c]);
              }
            }
          }
          for (int64_t c : select_top_channels(cs, per_head)) ctx_sel.push_back(hsel * dh + c);
        }
      }

      // qkv: [d,3d] -> [ds,3ds]
      {
        std::vector<int64_t> cols;
        for (int64_t t = 0; t < 3; ++t) {
          for (int64_t c : ctx_sel) cols.push_back(t * d + c);
        }
        layer.attn.qkv.w.mutable_data() = prune_rows_cols(src.attn.qkv.w, qkv_rows, cols).data();
        layer.attn.qkv.b.mutable_data() = prune_vector(src.attn.qkv.b, cols).data();
      }
      // attention out projection: rows follow kept context dims, cols by L1
      {
        auto proj_cols = select_top_channels(matrix_out_l1(src.attn.proj.w), ds);
        layer.attn.proj.w.mutable_data() =
            prune_rows_cols(src.attn.proj.w, ctx_sel, proj_cols).data();
        layer.attn.proj.b.mutable_data() = prune_vector(src.attn.proj.b, proj_cols).data();
      }
      // layer norms: channel score |gamma| + |beta|
      auto ln_select = [&](const LayerNorm& from, LayerNorm& to) {
        std::vector<double> score(static_cast<size_t>(d));
        for (int64_t i = 0; i < d; ++i) {
          score[static_cast<size_t>(i)] = std::fabs(from.gamma.data()[static_cast<size_t>(i)]) +
                                          std::fabs(from.beta.data()[static_cast<size_t>(i)]);
        }
        auto keep = select_top_channels(score, ds);
        to.gamma.mutable_data() = prune_vector(from.gamma, keep).data();
        to.beta.mutable_data() = prune_vector(from.beta, keep).data();
      };
      ln_select(src.ln1, layer.ln1);
      ln_select(src.ln2, layer.ln2);

      // FFN slot: only the dense variant has a backbone counterpart
      auto* dst_ffn = dynamic_cast<DenseFfn*>(layer.ffn.get());
      const auto* src_ffn = dynamic_cast<const DenseFfn*>(src.ffn.get());
      if (dst_ffn && src_ffn) {
        auto fc1_rows = select_top_channels(matrix_in_l1(src_ffn->fc1.w), ds);
        auto fc1_cols = select_top_channels(matrix_out_l1(src_ffn->fc1.w), hidden);
        dst_ffn->fc1.w.mutable_data() =
            prune_rows_cols(src_ffn->fc1.w, fc1_rows, fc1_cols).data();
        dst_ffn->fc1.b.mutable_data() = prune_vector(src_ffn->fc1.b, fc1_cols).data();
        auto fc2_rows = select_top_channels(matrix_in_l1(src_ffn->fc2.w), hidden);
        auto fc2_cols = select_top_channels(matrix_out_l1(src_ffn->fc2.w), ds);
        dst_ffn->fc2.w.mutable_data() =
            prune_rows_cols(src_ffn->fc2.w, fc2_rows, fc2_cols).data();
        dst_ffn->fc2.b.mutable_data() = prune_vector(src_ffn->fc2.b, fc2_cols).data();
      }
    }
  }
}

int64_t transformer_layer_param_count(int64_t dim, int64_t mlp_ratio) {
  return (4 + 2 * mlp_ratio) * dim * dim + (9 + mlp_ratio) * dim;
}

std::vector<double> count_scale_proportions(const SideConfig& cfg, int64_t backbone_dim) {
  std::vector<double> counts;
  double total = 0.0;
  for (const auto& s : cfg.scales) {
    int64_t dim = backbone_dim / s.dim_divisor;
    double c = static_cast<double>(s.num_blocks * cfg.layers_per_block *
                                   transformer_layer_param_count(dim));
    counts.push_back(c);
    total += c;
  }
  for (double& c : counts) c /= total;
  return counts;
}

SimSavings sim_param_savings(const SideConfig& cfg, const BackboneConfig& bb) {
  SimSavings sv;
  int64_t grid = bb.grid();
  for (size_t s = 0; s < cfg.scales.size(); ++s) {
    const auto& scale = cfg.scales[s];
    int64_t g = grid >> s;
    if (cfg.sim_scales.count(scale.dim_divisor) == 0) continue;
    int64_t dim = bb.dim / scale.dim_divisor;
    int64_t layers = scale.num_blocks * cfg.layers_per_block;
    sv.mlp_before += layers * dense_ffn_param_count(dim, bb.mlp_ratio);
    sv.mlp_after += layers * sim_param_count(dim, g);
    sv.dense_mix_before += layers * dense_mix_param_count(dim, g * g);
  }
  sv.ratio = sv.mlp_before > 0
                 ? static_cast<double>(sv.mlp_after) / static_cast<double>(sv.mlp_before)
                 : 1.0;
  return sv;
}

}  // namespace effowt
