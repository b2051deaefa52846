#pragma once

#include <vector>

#include "effowt/tensor.hpp"

namespace effowt {

/// Indices of the `keep` highest-scoring channels, ties broken by lowest
/// index, returned in ascending order.
std::vector<int64_t> select_top_channels(const std::vector<double>& scores, int64_t keep);

/// Per-input-channel (row) and per-output-channel (column) L1 mass of a
/// weight matrix stored [in, out].
std::vector<double> matrix_in_l1(const Tensor& w);
std::vector<double> matrix_out_l1(const Tensor& w);

/// Per-head Frobenius norm over the q/k/v blocks of a fused [d, 3d] matrix.
std::vector<double> qkv_head_scores(const Tensor& wqkv, int64_t heads);

Tensor prune_rows_cols(const Tensor& w, const std::vector<int64_t>& rows,
                       const std::vector<int64_t>& cols);
Tensor prune_vector(const Tensor& v, const std::vector<int64_t>& keep);

/// Keeps the top 1/r input and output channels of a [in, out] matrix by L1
/// mass. r must divide both dims. r == 1 returns the matrix unchanged.
Tensor prune_matrix_l1(const Tensor& w, int64_t r);

}  // namespace effowt
