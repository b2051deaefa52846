#pragma once

#include <memory>

#include "effowt/nn.hpp"

namespace effowt {

/// Fused sparse token-mixing op on a square grid. Each channel mixes along
/// its row, column, and the two cyclic diagonals; the five paths (four
/// directions + identity) are softmax-weighted, then a pointwise channel map
/// is applied. Backward recomputes the paths from the saved input, so only
/// `x` is retained.
///
///   x [B,D,H,W], row/col/diag/anti mix [W,W] (H == W), logits [5],
///   chan_w [D,D] ([in,out]), chan_b [D]  ->  [B,D,H,W]
Tensor sim_mix(const Tensor& x, const Tensor& row_mix, const Tensor& col_mix,
               const Tensor& diag_mix, const Tensor& anti_mix, const Tensor& fusion_logits,
               const Tensor& chan_w, const Tensor& chan_b);

/// FFN-slot replacement backed by sim_mix.
struct SimLayer : FfnBase {
  int64_t dim = 0;
  int64_t grid = 0;  // H == W
  Tensor row_mix, col_mix, diag_mix, anti_mix;  // [grid,grid]
  Tensor fusion_logits;                         // [5]: row,col,diag,anti,identity
  Tensor chan_w;                                // [dim,dim]
  Tensor chan_b;                                // [dim]

  static std::unique_ptr<SimLayer> create(ParamRegistry& reg, const std::string& prefix, Rng& rng,
                                          int64_t dim, int64_t grid);
  Tensor forward(const Tensor& tokens, int64_t grid_h, int64_t grid_w) const override;
  int64_t param_count() const override;
};

/// Dense token-mixing baseline: every token pair has a direct weight.
struct DenseMixLayer : FfnBase {
  int64_t dim = 0;
  int64_t tokens = 0;
  Tensor mix;     // [n,n]
  Tensor chan_w;  // [dim,dim]
  Tensor chan_b;  // [dim]

  static std::unique_ptr<DenseMixLayer> create(ParamRegistry& reg, const std::string& prefix,
                                               Rng& rng, int64_t dim, int64_t tokens);
  Tensor forward(const Tensor& tokens_t, int64_t grid_h, int64_t grid_w) const override;
  int64_t param_count() const override;
};

/// Closed-form counts.
int64_t sim_param_count(int64_t dim, int64_t grid);
int64_t dense_ffn_param_count(int64_t dim, int64_t mlp_ratio = 4);
int64_t dense_mix_param_count(int64_t dim, int64_t tokens);

/// Token-to-token influence after `layers` stacked mixers, measured by
/// thresholding |dy_j/dx_i| under randomized generic weights.
struct InfluenceMatrix {
  int64_t n = 0;
  std::vector<uint8_t> m;  // row-major [n*n]; m[i*n+j]: input i reaches output j

  bool at(int64_t i, int64_t j) const { return m[static_cast<size_t>(i * n + j)] != 0; }
  int64_t count_influenced_by(int64_t i) const;
  double coverage() const;  // fraction of true entries
};

InfluenceMatrix receptive_field(int64_t layers, int64_t h, int64_t w,
                                bool dense_baseline = false, uint64_t seed = 1234);

}  // namespace effowt
