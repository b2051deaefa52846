#include "effowt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace effowt {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::vector<int64_t> row_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int64_t i = static_cast<int64_t>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * s[i + 1];
  }
  return st;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error(std::string(op) + ": shapes not broadcastable " + shape_str(a) + " vs " +
                  shape_str(b));
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` viewed in the `out` index space; 0 on broadcast dims.
std::vector<int64_t> bcast_strides(const Shape& in, const Shape& out) {
  auto st = row_strides(in);
  std::vector<int64_t> res(out.size(), 0);
  for (size_t i = 0; i < in.size(); ++i) {
    size_t oi = out.size() - in.size() + i;
    res[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : st[i];
  }
  return res;
}

template <class F>
void for_each2(const Shape& out_shape, const std::vector<int64_t>& sa,
               const std::vector<int64_t>& sb, F&& f) {
  int64_t n = shape_numel(out_shape);
  int64_t r = static_cast<int64_t>(out_shape.size());
  if (r == 0) {
    if (n > 0) f(int64_t{0}, int64_t{0}, int64_t{0});
    return;
  }
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    f(lin, oa, ob);
    for (int64_t d = r - 1; d >= 0; --d) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
    }
  }
}

template <class F>
void for_each1(const Shape& out_shape, const std::vector<int64_t>& sa, F&& f) {
  for_each2(out_shape, sa, sa, [&](int64_t lin, int64_t oa, int64_t) { f(lin, oa); });
}

// Sums an out-space gradient back onto a (possibly broadcast) input shape.
std::vector<double> reduce_grad(const std::vector<double>& gout, const Shape& out_shape,
                                const Shape& in_shape) {
  std::vector<double> gin(static_cast<size_t>(shape_numel(in_shape)), 0.0);
  auto sa = bcast_strides(in_shape, out_shape);
  for_each1(out_shape, sa, [&](int64_t lin, int64_t oa) { gin[oa] += gout[lin]; });
  return gin;
}

void check_finite(const char* op, const char* kind, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(std::string(op) + ": non-finite " + kind + " value");
    }
  }
}

// C += A[M,K] * B[K,N]
void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A[M,N] * B[K,N]^T -> [M,K]
void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C += A[M,K]^T * G[M,N] -> [K,N]
void mm_tn(const double* a, const double* g, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

std::vector<double> permute_vals(const std::vector<double>& src, const Shape& in_shape,
                                 const std::vector<int64_t>& perm, Shape* out_shape) {
  Shape os(perm.size());
  auto in_st = row_strides(in_shape);
  std::vector<int64_t> src_st(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) {
    os[i] = in_shape[static_cast<size_t>(perm[i])];
    src_st[i] = in_st[static_cast<size_t>(perm[i])];
  }
  std::vector<double> out(src.size());
  for_each1(os, src_st, [&](int64_t lin, int64_t off) { out[lin] = src[off]; });
  *out_shape = os;
  return out;
}

// Ops whose backward consumes their own output report it as retained.
void note_output_saved(Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return;
  t.impl()->retained_bytes = t.numel() * static_cast<int64_t>(sizeof(double));
  if (GraphRecorder* rec = GraphRecorder::current()) rec->note_saved(t.impl());
}

int64_t normalize_axis(const char* op, int64_t axis, int64_t rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw Error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                std::to_string(rank));
  }
  return axis;
}

struct AxisView {
  int64_t outer, len, inner;
};

AxisView axis_view(const Shape& s, int64_t axis) {
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

namespace detail {

std::vector<double>& grad_slot(GradMap& sink, TensorImpl* impl) {
  auto& buf = sink[impl];
  if (buf.empty()) buf.assign(static_cast<size_t>(impl->numel()), 0.0);
  return buf;
}

void accumulate(GradMap& sink, TensorImpl* impl, const std::vector<double>& g) {
  auto& buf = grad_slot(sink, impl);
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void accumulate_scaled(GradMap& sink, TensorImpl* impl, const std::vector<double>& g, double s) {
  auto& buf = grad_slot(sink, impl);
  for (size_t i = 0; i < g.size(); ++i) buf[i] += s * g[i];
}

Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                 const std::vector<Tensor>& inputs, BackwardFn fn,
                 const std::vector<Tensor>& saved) {
  if (strict_finite_checks()) {
    for (const Tensor& t : inputs) check_finite(op, "input", t.data());
    check_finite(op, "output", data);
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->op = op;
  GraphRecorder* rec = GraphRecorder::current();
  if (rec) impl->scope = rec->current_scope();

  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad |= t.requires_grad();
  if (grad_enabled() && any_grad) {
    impl->requires_grad = true;
    for (const Tensor& t : inputs) {
      if (t.requires_grad()) impl->parents.push_back(t.impl_ptr());
    }
    impl->backward = std::move(fn);
    for (const Tensor& t : saved) {
      if (t.is_parameter()) continue;
      TensorImpl* ti = t.impl();
      ti->retained_bytes = ti->numel() * static_cast<int64_t>(sizeof(double));
      if (rec) rec->note_saved(ti);
    }
  }
  return Tensor(impl);
}

}  // namespace detail

using detail::accumulate;
using detail::grad_slot;
using detail::make_node;

// ---- elementwise ----

static Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, int mode) {
  Shape os = broadcast_shape(op, a.shape(), b.shape());
  auto sa = bcast_strides(a.shape(), os);
  auto sb = bcast_strides(b.shape(), os);
  std::vector<double> out(static_cast<size_t>(shape_numel(os)));
  const auto& av = a.data();
  const auto& bv = b.data();
  switch (mode) {
    case 0:
      for_each2(os, sa, sb, [&](int64_t l, int64_t x, int64_t y) { out[l] = av[x] + bv[y]; });
      break;
    case 1:
      for_each2(os, sa, sb, [&](int64_t l, int64_t x, int64_t y) { out[l] = av[x] - bv[y]; });
      break;
    default:
      for_each2(os, sa, sb, [&](int64_t l, int64_t x, int64_t y) { out[l] = av[x] * bv[y]; });
      break;
  }

  std::vector<Tensor> saved;
  if (mode == 2) {
    if (a.requires_grad()) saved.push_back(b);
    if (b.requires_grad()) saved.push_back(a);
  }
  Shape out_shape = os;
  BackwardFn fn = [=](const std::vector<double>& g, GradMap& sink) {
    if (a.requires_grad()) {
      if (mode == 2) {
        std::vector<double> tmp(g.size());
        const auto& bb = b.data();
        for_each2(out_shape, bcast_strides(b.shape(), out_shape),
                  bcast_strides(b.shape(), out_shape),
                  [&](int64_t l, int64_t y, int64_t) { tmp[l] = g[l] * bb[y]; });
        accumulate(sink, a.impl(), reduce_grad(tmp, out_shape, a.shape()));
      } else {
        accumulate(sink, a.impl(), reduce_grad(g, out_shape, a.shape()));
      }
    }
    if (b.requires_grad()) {
      if (mode == 2) {
        std::vector<double> tmp(g.size());
        const auto& aa = a.data();
        for_each2(out_shape, bcast_strides(a.shape(), out_shape),
                  bcast_strides(a.shape(), out_shape),
                  [&](int64_t l, int64_t x, int64_t) { tmp[l] = g[l] * aa[x]; });
        accumulate(sink, b.impl(), reduce_grad(tmp, out_shape, b.shape()));
      } else if (mode == 1) {
        auto gb = reduce_grad(g, out_shape, b.shape());
        for (double& v : gb) v = -v;
        accumulate(sink, b.impl(), gb);
      } else {
        accumulate(sink, b.impl(), reduce_grad(g, out_shape, b.shape()));
      }
    }
  };
  return make_node(op, std::move(os), std::move(out), {a, b}, std::move(fn), saved);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise("add", a, b, 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise("sub", a, b, 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise("mul", a, b, 2); }

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v += c;
  BackwardFn fn = [a](const std::vector<double>& g, GradMap& sink) {
    accumulate(sink, a.impl(), g);
  };
  return make_node("add_scalar", a.shape(), std::move(out), {a}, std::move(fn), {});
}

Tensor mul_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= c;
  BackwardFn fn = [a, c](const std::vector<double>& g, GradMap& sink) {
    detail::accumulate_scaled(sink, a.impl(), g, c);
  };
  return make_node("mul_scalar", a.shape(), std::move(out), {a}, std::move(fn), {});
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error("matmul: both operands need rank >= 2, got " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
  }
  int64_t k = a.dim(-1);
  if (b.rank() == 2) {
    if (b.dim(0) != k) {
      throw Error("matmul: inner dims disagree " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
    }
    int64_t n = b.dim(1);
    int64_t rows = a.numel() / k;
    Shape os(a.shape());
    os.back() = n;
    std::vector<double> out(static_cast<size_t>(rows * n), 0.0);
    mm_nn(a.data().data(), b.data().data(), out.data(), rows, k, n);

    std::vector<Tensor> saved;
    if (a.requires_grad()) saved.push_back(b);
    if (b.requires_grad()) saved.push_back(a);
    BackwardFn fn = [a, b, rows, k, n](const std::vector<double>& g, GradMap& sink) {
      if (a.requires_grad()) {
        auto& ga = grad_slot(sink, a.impl());
        mm_nt(g.data(), b.data().data(), ga.data(), rows, n, k);
      }
      if (b.requires_grad()) {
        auto& gb = grad_slot(sink, b.impl());
        mm_tn(a.data().data(), g.data(), gb.data(), rows, k, n);
      }
    };
    return make_node("matmul", std::move(os), std::move(out), {a, b}, std::move(fn), saved);
  }

  if (a.rank() != b.rank()) {
    throw Error("matmul: rank mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  for (int64_t i = 0; i < a.rank() - 2; ++i) {
    if (a.dim(i) != b.dim(i)) {
      throw Error("matmul: batch dims disagree " + shape_str(a.shape()) + " x " +
                  shape_str(b.shape()));
    }
  }
  if (b.dim(-2) != k) {
    throw Error("matmul: inner dims disagree " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
  }
  int64_t m = a.dim(-2);
  int64_t n = b.dim(-1);
  int64_t batch = a.numel() / (m * k);
  Shape os(a.shape());
  os[os.size() - 1] = n;
  os[os.size() - 2] = m;
  std::vector<double> out(static_cast<size_t>(batch * m * n), 0.0);
  for (int64_t bi = 0; bi < batch; ++bi) {
    mm_nn(a.data().data() + bi * m * k, b.data().data() + bi * k * n, out.data() + bi * m * n, m,
          k, n);
  }
  std::vector<Tensor> saved;
  if (a.requires_grad()) saved.push_back(b);
  if (b.requires_grad()) saved.push_back(a);
  BackwardFn fn = [a, b, batch, m, k, n](const std::vector<double>& g, GradMap& sink) {
    if (a.requires_grad()) {
      auto& ga = grad_slot(sink, a.impl());
      for (int64_t bi = 0; bi < batch; ++bi) {
        mm_nt(g.data() + bi * m * n, b.data().data() + bi * k * n, ga.data() + bi * m * k, m, n,
              k);
      }
    }
    if (b.requires_grad()) {
      auto& gb = grad_slot(sink, b.impl());
      for (int64_t bi = 0; bi < batch; ++bi) {
        mm_tn(a.data().data() + bi * m * k, g.data() + bi * m * n, gb.data() + bi * k * n, m, k,
              n);
      }
    }
  };
  return make_node("matmul", std::move(os), std::move(out), {a, b}, std::move(fn), saved);
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
  // one -1 wildcard allowed
  int64_t known = 1, wild = -1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (wild >= 0) throw Error("reshape: multiple -1 dims");
      wild = static_cast<int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (wild >= 0) {
    if (known == 0 || a.numel() % known != 0) {
      throw Error("reshape: cannot infer dim for " + shape_str(a.shape()) + " -> " +
                  shape_str(shape));
    }
    shape[static_cast<size_t>(wild)] = a.numel() / known;
  }
  if (shape_numel(shape) != a.numel()) {
    throw Error("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  Shape in_shape = a.shape();
  BackwardFn fn = [a](const std::vector<double>& g, GradMap& sink) {
    accumulate(sink, a.impl(), g);
  };
  return make_node("reshape", std::move(shape), a.data(), {a}, std::move(fn), {});
}

Tensor permute(const Tensor& a, const std::vector<int64_t>& perm) {
  if (static_cast<int64_t>(perm.size()) != a.rank()) {
    throw Error("permute: perm size must equal rank");
  }
  std::vector<bool> used(perm.size(), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= a.rank() || used[static_cast<size_t>(p)]) {
      throw Error("permute: invalid permutation");
    }
    used[static_cast<size_t>(p)] = true;
  }
  Shape os;
  auto out = permute_vals(a.data(), a.shape(), perm, &os);
  std::vector<int64_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
  Shape out_shape = os;
  BackwardFn fn = [a, inv, out_shape](const std::vector<double>& g, GradMap& sink) {
    Shape back;
    accumulate(sink, a.impl(), permute_vals(g, out_shape, inv, &back));
  };
  return make_node("permute", std::move(os), std::move(out), {a}, std::move(fn), {});
}

Tensor transpose_last(const Tensor& a) {
  std::vector<int64_t> perm(static_cast<size_t>(a.rank()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
  if (a.rank() < 2) throw Error("transpose_last: rank must be >= 2");
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

Tensor concat(const std::vector<Tensor>& parts, int64_t axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  int64_t rank = parts[0].rank();
  axis = normalize_axis("concat", axis, rank);
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != rank) throw Error("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && t.dim(d) != os[static_cast<size_t>(d)]) {
        throw Error("concat: shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(os));
      }
    }
    total += t.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  AxisView v = axis_view(os, axis);
  std::vector<double> out(static_cast<size_t>(shape_numel(os)));
  std::vector<int64_t> offsets;
  int64_t pos = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(pos);
    int64_t len = t.dim(axis);
    const auto& src = t.data();
    for (int64_t o = 0; o < v.outer; ++o) {
      std::memcpy(out.data() + (o * v.len + pos) * v.inner, src.data() + o * len * v.inner,
                  static_cast<size_t>(len * v.inner) * sizeof(double));
    }
    pos += len;
  }
  std::vector<Tensor> inputs = parts;
  BackwardFn fn = [inputs, offsets, v](const std::vector<double>& g, GradMap& sink) {
    for (size_t pi = 0; pi < inputs.size(); ++pi) {
      const Tensor& t = inputs[pi];
      if (!t.requires_grad()) continue;
      int64_t alen = t.numel() / (v.outer * v.inner);
      auto& gb = grad_slot(sink, t.impl());
      for (int64_t o = 0; o < v.outer; ++o) {
        const double* src = g.data() + (o * v.len + offsets[pi]) * v.inner;
        double* dst = gb.data() + o * alen * v.inner;
        for (int64_t i = 0; i < alen * v.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return make_node("concat", std::move(os), std::move(out), inputs, std::move(fn), {});
}

std::vector<Tensor> split(const Tensor& a, int64_t axis, const std::vector<int64_t>& sizes) {
  axis = normalize_axis("split", axis, a.rank());
  int64_t total = 0;
  for (int64_t s : sizes) {
    if (s <= 0) throw Error("split: sizes must be positive");
    total += s;
  }
  if (total != a.dim(axis)) {
    throw Error("split: sizes sum " + std::to_string(total) + " != dim " +
                std::to_string(a.dim(axis)));
  }
  std::vector<Tensor> outs;
  int64_t start = 0;
  for (int64_t s : sizes) {
    std::vector<int64_t> starts(static_cast<size_t>(a.rank()), 0);
    std::vector<int64_t> lens(a.shape().begin(), a.shape().end());
    starts[static_cast<size_t>(axis)] = start;
    lens[static_cast<size_t>(axis)] = s;
    outs.push_back(slice(a, starts, lens));
    start += s;
  }
  return outs;
}

Tensor slice(const Tensor& a, const std::vector<int64_t>& starts,
             const std::vector<int64_t>& sizes) {
  if (static_cast<int64_t>(starts.size()) != a.rank() ||
      static_cast<int64_t>(sizes.size()) != a.rank()) {
    throw Error("slice: starts/sizes must match rank");
  }
  Shape os(sizes.begin(), sizes.end());
  for (int64_t d = 0; d < a.rank(); ++d) {
    if (starts[static_cast<size_t>(d)] < 0 || sizes[static_cast<size_t>(d)] <= 0 ||
        starts[static_cast<size_t>(d)] + sizes[static_cast<size_t>(d)] > a.dim(d)) {
      throw Error("slice: out of bounds on dim " + std::to_string(d) + " of " +
                  shape_str(a.shape()));
    }
  }
  auto in_st = row_strides(a.shape());
  int64_t base = 0;
  for (int64_t d = 0; d < a.rank(); ++d) base += starts[static_cast<size_t>(d)] * in_st[static_cast<size_t>(d)];
  std::vector<double> out(static_cast<size_t>(shape_numel(os)));
  const auto& src = a.data();
  for_each1(os, in_st, [&](int64_t lin, int64_t off) { out[lin] = src[base + off]; });
  Shape out_shape = os;
  BackwardFn fn = [a, in_st, base, out_shape](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for_each1(out_shape, in_st, [&](int64_t lin, int64_t off) { gb[base + off] += g[lin]; });
  };
  return make_node("slice", std::move(os), std::move(out), {a}, std::move(fn), {});
}

// ---- reductions ----

static Tensor reduce_impl(const char* op, const Tensor& a, std::vector<int64_t> axes, bool keepdim,
                          bool take_mean) {
  if (axes.empty()) {
    for (int64_t d = 0; d < a.rank(); ++d) axes.push_back(d);
  }
  for (int64_t& ax : axes) ax = normalize_axis(op, ax, a.rank());
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) {
    throw Error(std::string(op) + ": duplicate axes");
  }
  std::vector<bool> reduced(static_cast<size_t>(a.rank()), false);
  int64_t count = 1;
  for (int64_t ax : axes) {
    reduced[static_cast<size_t>(ax)] = true;
    count *= a.dim(ax);
  }
  Shape os;
  for (int64_t d = 0; d < a.rank(); ++d) {
    if (reduced[static_cast<size_t>(d)]) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.dim(d));
    }
  }
  // strides of the output viewed from input index space (0 on reduced dims)
  Shape kept_shape(a.shape());
  for (int64_t ax : axes) kept_shape[static_cast<size_t>(ax)] = 1;
  auto out_st_full = row_strides(kept_shape);
  std::vector<int64_t> map_st(static_cast<size_t>(a.rank()));
  for (int64_t d = 0; d < a.rank(); ++d) {
    map_st[static_cast<size_t>(d)] = reduced[static_cast<size_t>(d)] ? 0 : out_st_full[static_cast<size_t>(d)];
  }
  double scale = take_mean ? 1.0 / static_cast<double>(count) : 1.0;
  std::vector<double> out(static_cast<size_t>(shape_numel(os)), 0.0);
  const auto& src = a.data();
  for_each1(a.shape(), map_st, [&](int64_t lin, int64_t off) { out[off] += src[lin] * scale; });

  Shape in_shape = a.shape();
  BackwardFn fn = [a, map_st, in_shape, scale](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for_each1(in_shape, map_st, [&](int64_t lin, int64_t off) { gb[lin] += g[off] * scale; });
  };
  return make_node(op, std::move(os), std::move(out), {a}, std::move(fn), {});
}

Tensor sum(const Tensor& a, std::vector<int64_t> axes, bool keepdim) {
  return reduce_impl("sum", a, std::move(axes), keepdim, false);
}

Tensor mean(const Tensor& a, std::vector<int64_t> axes, bool keepdim) {
  return reduce_impl("mean", a, std::move(axes), keepdim, true);
}

Tensor sum_all(const Tensor& a) { return sum(a, {}, false); }
Tensor mean_all(const Tensor& a) { return mean(a, {}, false); }

// ---- nonlinearities ----

Tensor softmax(const Tensor& a, int64_t axis) {
  axis = normalize_axis("softmax", axis, a.rank());
  AxisView v = axis_view(a.shape(), axis);
  std::vector<double> out(a.data().size());
  const auto& src = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      int64_t base = o * v.len * v.inner + in;
      double mx = src[base];
      for (int64_t i = 1; i < v.len; ++i) mx = std::max(mx, src[base + i * v.inner]);
      double denom = 0.0;
      for (int64_t i = 0; i < v.len; ++i) {
        double e = std::exp(src[base + i * v.inner] - mx);
        out[base + i * v.inner] = e;
        denom += e;
      }
      for (int64_t i = 0; i < v.len; ++i) out[base + i * v.inner] /= denom;
    }
  }
  Tensor result;
  std::vector<double> y = out;  // captured copy for backward
  BackwardFn fn = [a, v, y](const std::vector<double>& g, GradMap& sink) {
    if (!a.requires_grad()) return;
    auto& gb = grad_slot(sink, a.impl());
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t in = 0; in < v.inner; ++in) {
        int64_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (int64_t i = 0; i < v.len; ++i) {
          int64_t k = base + i * v.inner;
          dot += g[k] * y[k];
        }
        for (int64_t i = 0; i < v.len; ++i) {
          int64_t k = base + i * v.inner;
          gb[k] += y[k] * (g[k] - dot);
        }
      }
    }
  };
  result = make_node("softmax", a.shape(), std::move(out), {a}, std::move(fn), {});
  note_output_saved(result);
  return result;
}

Tensor log_softmax(const Tensor& a, int64_t axis) {
  axis = normalize_axis("log_softmax", axis, a.rank());
  AxisView v = axis_view(a.shape(), axis);
  std::vector<double> out(a.data().size());
  const auto& src = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t in = 0; in < v.inner; ++in) {
      int64_t base = o * v.len * v.inner + in;
      double mx = src[base];
      for (int64_t i = 1; i < v.len; ++i) mx = std::max(mx, src[base + i * v.inner]);
      double denom = 0.0;
      for (int64_t i = 0; i < v.len; ++i) denom += std::exp(src[base + i * v.inner] - mx);
      double lse = mx + std::log(denom);
      for (int64_t i = 0; i < v.len; ++i) out[base + i * v.inner] = src[base + i * v.inner] - lse;
    }
  }
  std::vector<double> y = out;
  BackwardFn fn = [a, v, y](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t in = 0; in < v.inner; ++in) {
        int64_t base = o * v.len * v.inner + in;
        double gsum = 0.0;
        for (int64_t i = 0; i < v.len; ++i) gsum += g[base + i * v.inner];
        for (int64_t i = 0; i < v.len; ++i) {
          int64_t k = base + i * v.inner;
          gb[k] += g[k] - std::exp(y[k]) * gsum;
        }
      }
    }
  };
  Tensor result = make_node("log_softmax", a.shape(), std::move(out), {a}, std::move(fn), {});
  note_output_saved(result);
  return result;
}

static Tensor unary_saving_input(const char* op, const Tensor& a, std::vector<double> out,
                                 std::function<double(double, double)> dinput_times_g) {
  BackwardFn fn = [a, dinput_times_g](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    const auto& x = a.data();
    for (size_t i = 0; i < g.size(); ++i) gb[i] += dinput_times_g(x[i], g[i]);
  };
  return make_node(op, a.shape(), std::move(out), {a}, std::move(fn), {a});
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    double v = x[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  std::vector<double> y = out;
  BackwardFn fn = [a, y](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * y[i] * (1.0 - y[i]);
  };
  Tensor result = make_node("sigmoid", a.shape(), std::move(out), {a}, std::move(fn), {});
  note_output_saved(result);
  return result;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return unary_saving_input("relu", a, std::move(out),
                            [](double x, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
  }
  return unary_saving_input("gelu", a, std::move(out), [](double x, double g) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return g * (cdf + x * pdf);
  });
}

Tensor exp_op(const Tensor& a) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  std::vector<double> y = out;
  BackwardFn fn = [a, y](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * y[i];
  };
  Tensor result = make_node("exp", a.shape(), std::move(out), {a}, std::move(fn), {});
  note_output_saved(result);
  return result;
}

Tensor log_op(const Tensor& a) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  return unary_saving_input("log", a, std::move(out),
                            [](double x, double g) { return g / x; });
}

Tensor pow_scalar(const Tensor& a, double p) {
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::pow(x[i], p);
  return unary_saving_input("pow", a, std::move(out), [p](double x, double g) {
    return g * p * std::pow(x, p - 1.0);
  });
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& a, double eps) {
  if (a.rank() < 1) throw Error("layer_norm: rank must be >= 1");
  int64_t d = a.dim(-1);
  int64_t rows = a.numel() / d;
  std::vector<double> out(a.data().size());
  const auto& x = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      double c = xr[i] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double rstd = 1.0 / std::sqrt(var + eps);
    double* yr = out.data() + r * d;
    for (int64_t i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rstd;
  }
  BackwardFn fn = [a, d, rows, eps](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    const auto& x = a.data();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * d;
      const double* gr = g.data() + r * d;
      double mu = 0.0;
      for (int64_t i = 0; i < d; ++i) mu += xr[i];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        double c = xr[i] - mu;
        var += c * c;
      }
      var /= static_cast<double>(d);
      double rstd = 1.0 / std::sqrt(var + eps);
      double m1 = 0.0, m2 = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        double xh = (xr[i] - mu) * rstd;
        m1 += gr[i];
        m2 += gr[i] * xh;
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      double* gbr = gb.data() + r * d;
      for (int64_t i = 0; i < d; ++i) {
        double xh = (xr[i] - mu) * rstd;
        gbr[i] += rstd * (gr[i] - m1 - xh * m2);
      }
    }
  };
  return make_node("layer_norm", a.shape(), std::move(out), {a}, std::move(fn), {a});
}

// ---- spatial ops ----

Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride, int64_t padding, int64_t groups) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw Error("conv2d: x must be [B,C,H,W] and w [F,C/g,kh,kw], got " + shape_str(x.shape()) +
                " and " + shape_str(w.shape()));
  }
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  int64_t f = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (stride < 1 || padding < 0 || groups < 1) throw Error("conv2d: bad stride/padding/groups");
  if (c % groups != 0 || f % groups != 0 || cg != c / groups) {
    throw Error("conv2d: channel/group mismatch " + shape_str(x.shape()) + " vs " +
                shape_str(w.shape()) + " groups=" + std::to_string(groups));
  }
  int64_t ho = (h + 2 * padding - kh) / stride + 1;
  int64_t wo = (wd + 2 * padding - kw) / stride + 1;
  if (ho < 1 || wo < 1) {
    throw Error("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                " too large for input " + shape_str(x.shape()));
  }
  int64_t fg = f / groups;
  std::vector<double> out(static_cast<size_t>(b * f * ho * wo), 0.0);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t oc = 0; oc < f; ++oc) {
      int64_t g = oc / fg;
      for (int64_t oh = 0; oh < ho; ++oh) {
        for (int64_t ow = 0; ow < wo; ++ow) {
          double acc = 0.0;
          for (int64_t ic = 0; ic < cg; ++ic) {
            int64_t xc = g * cg + ic;
            for (int64_t ki = 0; ki < kh; ++ki) {
              int64_t ih = oh * stride - padding + ki;
              if (ih < 0 || ih >= h) continue;
              const double* xrow = xv.data() + ((bi * c + xc) * h + ih) * wd;
              const double* wrow = wv.data() + ((oc * cg + ic) * kh + ki) * kw;
              for (int64_t kj = 0; kj < kw; ++kj) {
                int64_t iw = ow * stride - padding + kj;
                if (iw < 0 || iw >= wd) continue;
                acc += xrow[iw] * wrow[kj];
              }
            }
          }
          out[((bi * f + oc) * ho + oh) * wo + ow] = acc;
        }
      }
    }
  }
  std::vector<Tensor> saved;
  if (x.requires_grad()) saved.push_back(w);
  if (w.requires_grad()) saved.push_back(x);
  BackwardFn fn = [=](const std::vector<double>& g, GradMap& sink) {
    const auto& xv = x.data();
    const auto& wv = w.data();
    double* gx = x.requires_grad() ? grad_slot(sink, x.impl()).data() : nullptr;
    double* gw = w.requires_grad() ? grad_slot(sink, w.impl()).data() : nullptr;
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t oc = 0; oc < f; ++oc) {
        int64_t grp = oc / fg;
        for (int64_t oh = 0; oh < ho; ++oh) {
          for (int64_t ow = 0; ow < wo; ++ow) {
            double gv = g[((bi * f + oc) * ho + oh) * wo + ow];
            if (gv == 0.0) continue;
            for (int64_t ic = 0; ic < cg; ++ic) {
              int64_t xc = grp * cg + ic;
              for (int64_t ki = 0; ki < kh; ++ki) {
                int64_t ih = oh * stride - padding + ki;
                if (ih < 0 || ih >= h) continue;
                for (int64_t kj = 0; kj < kw; ++kj) {
                  int64_t iw = ow * stride - padding + kj;
                  if (iw < 0 || iw >= wd) continue;
                  int64_t xi = ((bi * c + xc) * h + ih) * wd + iw;
                  int64_t wi = ((oc * cg + ic) * kh + ki) * kw + kj;
                  if (gx) gx[xi] += gv * wv[wi];
                  if (gw) gw[wi] += gv * xv[xi];
                }
              }
            }
          }
        }
      }
    }
  };
  return make_node("conv2d", {b, f, ho, wo}, std::move(out), {x, w}, std::move(fn), saved);
}

Tensor avg_pool2d(const Tensor& x, int64_t k) {
  if (x.rank() != 4) throw Error("avg_pool2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (k < 1) throw Error("avg_pool2d: bad kernel");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % k != 0 || w % k != 0) {
    throw Error("avg_pool2d: spatial dims " + shape_str(x.shape()) + " not divisible by " +
                std::to_string(k));
  }
  int64_t ho = h / k, wo = w / k;
  double inv = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(static_cast<size_t>(b * c * ho * wo), 0.0);
  const auto& xv = x.data();
  for (int64_t bc = 0; bc < b * c; ++bc) {
    for (int64_t oh = 0; oh < ho; ++oh) {
      for (int64_t ow = 0; ow < wo; ++ow) {
        double acc = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          const double* row = xv.data() + (bc * h + oh * k + i) * w + ow * k;
          for (int64_t j = 0; j < k; ++j) acc += row[j];
        }
        out[(bc * ho + oh) * wo + ow] = acc * inv;
      }
    }
  }
  BackwardFn fn = [x, b, c, h, w, ho, wo, k, inv](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, x.impl());
    for (int64_t bc = 0; bc < b * c; ++bc) {
      for (int64_t oh = 0; oh < ho; ++oh) {
        for (int64_t ow = 0; ow < wo; ++ow) {
          double gv = g[(bc * ho + oh) * wo + ow] * inv;
          for (int64_t i = 0; i < k; ++i) {
            double* row = gb.data() + (bc * h + oh * k + i) * w + ow * k;
            for (int64_t j = 0; j < k; ++j) row[j] += gv;
          }
        }
      }
    }
  };
  return make_node("avg_pool2d", {b, c, ho, wo}, std::move(out), {x}, std::move(fn), {});
}

Tensor upsample_nearest(const Tensor& x, int64_t factor) {
  if (x.rank() != 4) throw Error("upsample_nearest: expected [B,C,H,W]");
  if (factor < 1) throw Error("upsample_nearest: bad factor");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t ho = h * factor, wo = w * factor;
  std::vector<double> out(static_cast<size_t>(b * c * ho * wo));
  const auto& xv = x.data();
  for (int64_t bc = 0; bc < b * c; ++bc) {
    for (int64_t oh = 0; oh < ho; ++oh) {
      const double* src = xv.data() + (bc * h + oh / factor) * w;
      double* dst = out.data() + (bc * ho + oh) * wo;
      for (int64_t ow = 0; ow < wo; ++ow) dst[ow] = src[ow / factor];
    }
  }
  BackwardFn fn = [x, b, c, h, w, ho, wo, factor](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, x.impl());
    for (int64_t bc = 0; bc < b * c; ++bc) {
      for (int64_t oh = 0; oh < ho; ++oh) {
        const double* src = g.data() + (bc * ho + oh) * wo;
        double* dst = gb.data() + (bc * h + oh / factor) * w;
        for (int64_t ow = 0; ow < wo; ++ow) dst[ow / factor] += src[ow];
      }
    }
  };
  return make_node("upsample_nearest", {b, c, ho, wo}, std::move(out), {x}, std::move(fn), {});
}

// ---- index ops ----

Tensor gather(const Tensor& a, int64_t axis, const std::vector<int64_t>& indices) {
  axis = normalize_axis("gather", axis, a.rank());
  int64_t len = a.dim(axis);
  for (int64_t i : indices) {
    if (i < 0 || i >= len) {
      throw Error("gather: index " + std::to_string(i) + " out of range [0," +
                  std::to_string(len) + ")");
    }
  }
  AxisView v = axis_view(a.shape(), axis);
  int64_t olen = static_cast<int64_t>(indices.size());
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = olen;
  std::vector<double> out(static_cast<size_t>(v.outer * olen * v.inner));
  const auto& src = a.data();
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < olen; ++i) {
      std::memcpy(out.data() + (o * olen + i) * v.inner,
                  src.data() + (o * v.len + indices[static_cast<size_t>(i)]) * v.inner,
                  static_cast<size_t>(v.inner) * sizeof(double));
    }
  }
  BackwardFn fn = [a, v, olen, indices](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t i = 0; i < olen; ++i) {
        const double* src = g.data() + (o * olen + i) * v.inner;
        double* dst = gb.data() + (o * v.len + indices[static_cast<size_t>(i)]) * v.inner;
        for (int64_t j = 0; j < v.inner; ++j) dst[j] += src[j];
      }
    }
  };
  return make_node("gather", std::move(os), std::move(out), {a}, std::move(fn), {});
}

Tensor take_per_row(const Tensor& a, const std::vector<int64_t>& row_indices) {
  if (a.rank() != 2) throw Error("take_per_row: expected rank-2 input");
  int64_t rows = a.dim(0), cols = a.dim(1);
  if (static_cast<int64_t>(row_indices.size()) != rows) {
    throw Error("take_per_row: need one index per row");
  }
  std::vector<double> out(static_cast<size_t>(rows));
  const auto& src = a.data();
  for (int64_t r = 0; r < rows; ++r) {
    int64_t ci = row_indices[static_cast<size_t>(r)];
    if (ci < 0 || ci >= cols) throw Error("take_per_row: index out of range");
    out[static_cast<size_t>(r)] = src[r * cols + ci];
  }
  BackwardFn fn = [a, rows, cols, row_indices](const std::vector<double>& g, GradMap& sink) {
    auto& gb = grad_slot(sink, a.impl());
    for (int64_t r = 0; r < rows; ++r) {
      gb[r * cols + row_indices[static_cast<size_t>(r)]] += g[static_cast<size_t>(r)];
    }
  };
  return make_node("take_per_row", {rows}, std::move(out), {a}, std::move(fn), {});
}

}  // namespace effowt
