#pragma once

#include "effowt/tensor.hpp"

namespace effowt {

// Elementwise ops broadcast numpy-style (trailing alignment, size-1 dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// [*,M,K]x[*,K,N] with equal leading dims, or a 2-D rhs shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int64_t>& perm);
Tensor transpose_last(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int64_t axis);
std::vector<Tensor> split(const Tensor& a, int64_t axis, const std::vector<int64_t>& sizes);
Tensor slice(const Tensor& a, const std::vector<int64_t>& starts, const std::vector<int64_t>& sizes);

Tensor sum(const Tensor& a, std::vector<int64_t> axes, bool keepdim = false);
Tensor mean(const Tensor& a, std::vector<int64_t> axes, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor softmax(const Tensor& a, int64_t axis = -1);
Tensor log_softmax(const Tensor& a, int64_t axis = -1);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);

/// Normalizes over the last axis, pre-affine: (x - mean) / sqrt(var + eps).
Tensor layer_norm(const Tensor& a, double eps = 1e-5);

// NCHW spatial ops.
Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding, int64_t groups = 1);
Tensor avg_pool2d(const Tensor& x, int64_t k);
Tensor upsample_nearest(const Tensor& x, int64_t factor);

Tensor gather(const Tensor& a, int64_t axis, const std::vector<int64_t>& indices);
/// a: [R,C], idx: R per-row column picks -> [R].
Tensor take_per_row(const Tensor& a, const std::vector<int64_t>& row_indices);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace detail {

/// Assembles an op output node: propagates requires_grad, wires parents,
/// runs strict finite checks, and reports `saved` to the active recorder.
Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs, BackwardFn fn,
                 const std::vector<Tensor>& saved);

void accumulate(GradMap& sink, TensorImpl* impl, const std::vector<double>& g);
void accumulate_scaled(GradMap& sink, TensorImpl* impl, const std::vector<double>& g, double s);
std::vector<double>& grad_slot(GradMap& sink, TensorImpl* impl);

}  // namespace detail

}  // namespace effowt
