#include "effowt/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace effowt {

std::vector<int64_t> select_top_channels(const std::vector<double>& scores, int64_t keep) {
  if (keep < 0 || keep > static_cast<int64_t>(scores.size())) {
    throw Error("pruning: keep count out of range");
  }
  std::vector<int64_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  idx.resize(static_cast<size_t>(keep));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<double> matrix_in_l1(const Tensor& w) {
  if (w.rank() != 2) throw Error("pruning: expected rank-2 matrix");
  int64_t in = w.dim(0), out = w.dim(1);
  std::vector<double> s(static_cast<size_t>(in), 0.0);
  const auto& d = w.data();
  for (int64_t i = 0; i < in; ++i) {
    for (int64_t j = 0; j < out; ++j) s[static_cast<size_t>(i)] += std::fabs(d[i * out + j]);
  }
  return s;
}

std::vector<double> matrix_out_l1(const Tensor& w) {
  if (w.rank() != 2) throw Error("pruning: expected rank-2 matrix");
  int64_t in = w.dim(0), out = w.dim(1);
  std::vector<double> s(static_cast<size_t>(out), 0.0);
  const auto& d = w.data();
  for (int64_t i = 0; i < in; ++i) {
    for (int64_t j = 0; j < out; ++j) s[static_cast<size_t>(j)] += std::fabs(d[i * out + j]);
  }
  return s;
}

std::vector<double> qkv_head_scores(const Tensor& wqkv, int64_t heads) {
  if (wqkv.rank() != 2 || wqkv.dim(1) != 3 * wqkv.dim(0)) {
    throw Error("pruning: expected fused qkv matrix [d,3d]");
  }
  int64_t d = wqkv.dim(0);
  if (d % heads != 0) throw Error("pruning: dim not divisible by heads");
  int64_t dh = d / heads;
  std::vector<double> s(static_cast<size_t>(heads), 0.0);
  const auto& w = wqkv.data();
  for (int64_t i = 0; i < d; ++i) {
    for (int64_t t = 0; t < 3; ++t) {
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t c = 0; c < dh; ++c) {
          double v = w[i * 3 * d + t * d + h * dh + c];
          s[static_cast<size_t>(h)] += v * v;
        }
      }
    }
  }
  for (double& v : s) v = std::sqrt(v);
  return s;
}

Tensor prune_rows_cols(const Tensor& w, const std::vector<int64_t>& rows,
                       const std::vector<int64_t>& cols) {
  if (w.rank() != 2) throw Error("pruning: expected rank-2 matrix");
  int64_t out = w.dim(1);
  std::vector<double> data;
  data.reserve(rows.size() * cols.size());
  const auto& d = w.data();
  for (int64_t r : rows) {
    for (int64_t c : cols) data.push_back(d[r * out + c]);
  }
  return Tensor::from_data({static_cast<int64_t>(rows.size()), static_cast<int64_t>(cols.size())},
                           std::move(data));
}

Tensor prune_vector(const Tensor& v, const std::vector<int64_t>& keep) {
  if (v.rank() != 1) throw Error("pruning: expected rank-1 vector");
  std::vector<double> data;
  data.reserve(keep.size());
  for (int64_t i : keep) data.push_back(v.data()[static_cast<size_t>(i)]);
  return Tensor::from_data({static_cast<int64_t>(keep.size())}, std::move(data));
}

Tensor prune_matrix_l1(const Tensor& w, int64_t r) {
  if (w.rank() != 2) throw Error("pruning: expected rank-2 matrix");
  if (r < 1 || w.dim(0) % r != 0 || w.dim(1) % r != 0) {
    throw Error("pruning: reduction ratio " + std::to_string(r) + " does not divide dims of " +
                shape_str(w.shape()));
  }
  auto rows = select_top_channels(matrix_in_l1(w), w.dim(0) / r);
  auto cols = select_top_channels(matrix_out_l1(w), w.dim(1) / r);
  return prune_rows_cols(w, rows, cols);
}

}  // namespace effowt
