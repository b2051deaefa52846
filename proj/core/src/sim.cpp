#include "effowt/sim.hpp"

#include <array>
#include <cmath>

namespace effowt {

namespace {

struct GridDims {
  int64_t b, d, h, w;
};

GridDims grid_dims(const Tensor& x) {
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// Five softmax-normalized path weights: row, col, diag, anti, identity.
std::array<double, 5> fusion_weights(const Tensor& logits) {
  const auto& l = logits.data();
  double mx = l[0];
  for (double v : l) mx = std::max(mx, v);
  std::array<double, 5> w{};
  double denom = 0.0;
  for (int p = 0; p < 5; ++p) {
    w[static_cast<size_t>(p)] = std::exp(l[static_cast<size_t>(p)] - mx);
    denom += w[static_cast<size_t>(p)];
  }
  for (double& v : w) v /= denom;
  return w;
}

// Applies y[i,j] = sum_k M[j,k] x[i,k] on each [H,W] slice (mix along rows).
void row_mix_apply(const double* x, const double* m, double* y, int64_t slices, int64_t h,
                   int64_t w, bool transpose_m) {
  for (int64_t s = 0; s < slices; ++s) {
    for (int64_t i = 0; i < h; ++i) {
      const double* xr = x + (s * h + i) * w;
      double* yr = y + (s * h + i) * w;
      for (int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < w; ++k) {
          acc += (transpose_m ? m[k * w + j] : m[j * w + k]) * xr[k];
        }
        yr[j] = acc;
      }
    }
  }
}

// Applies y[i,j] = sum_k M[i,k] x[k,j] on each [H,W] slice (mix along columns).
void col_mix_apply(const double* x, const double* m, double* y, int64_t slices, int64_t h,
                   int64_t w, bool transpose_m) {
  for (int64_t s = 0; s < slices; ++s) {
    const double* xs = x + s * h * w;
    double* ys = y + s * h * w;
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < h; ++k) {
          acc += (transpose_m ? m[k * h + i] : m[i * h + k]) * xs[k * w + j];
        }
        ys[i * w + j] = acc;
      }
    }
  }
}

// shift row i left by i (cyclic): y[i,j] = x[i,(j+i) mod W]
void shift_main(const double* x, double* y, int64_t slices, int64_t h, int64_t w) {
  for (int64_t s = 0; s < slices; ++s) {
    for (int64_t i = 0; i < h; ++i) {
      const double* xr = x + (s * h + i) * w;
      double* yr = y + (s * h + i) * w;
      for (int64_t j = 0; j < w; ++j) yr[j] = xr[(j + i) % w];
    }
  }
}

// inverse of shift_main: y[i,j] = x[i,(j-i) mod W]
void unshift_main(const double* x, double* y, int64_t slices, int64_t h, int64_t w) {
  for (int64_t s = 0; s < slices; ++s) {
    for (int64_t i = 0; i < h; ++i) {
      const double* xr = x + (s * h + i) * w;
      double* yr = y + (s * h + i) * w;
      for (int64_t j = 0; j < w; ++j) yr[j] = xr[((j - i) % w + w) % w];
    }
  }
}

// shift row i right by i (cyclic): y[i,j] = x[i,(j-i) mod W]
void shift_anti(const double* x, double* y, int64_t slices, int64_t h, int64_t w) {
  unshift_main(x, y, slices, h, w);
}

// inverse of shift_anti
void unshift_anti(const double* x, double* y, int64_t slices, int64_t h, int64_t w) {
  shift_main(x, y, slices, h, w);
}

}  // namespace

Tensor sim_mix(const Tensor& x, const Tensor& row_mix, const Tensor& col_mix,
               const Tensor& diag_mix, const Tensor& anti_mix, const Tensor& fusion_logits,
               const Tensor& chan_w, const Tensor& chan_b) {
  if (x.rank() != 4) throw Error("sim_mix: expected [B,D,H,W], got " + shape_str(x.shape()));
  auto [b, d, h, w] = grid_dims(x);
  if (h != w) {
    throw Error("sim_mix: grid must be square, got " + std::to_string(h) + "x" +
                std::to_string(w));
  }
  auto check_mat = [&](const Tensor& m, const char* name) {
    if (m.rank() != 2 || m.dim(0) != w || m.dim(1) != w) {
      throw Error(std::string("sim_mix: ") + name + " must be [" + std::to_string(w) + "," +
                  std::to_string(w) + "], got " + shape_str(m.shape()));
    }
  };
  check_mat(row_mix, "row_mix");
  check_mat(col_mix, "col_mix");
  check_mat(diag_mix, "diag_mix");
  check_mat(anti_mix, "anti_mix");
  if (fusion_logits.numel() != 5) throw Error("sim_mix: fusion_logits must have 5 entries");
  if (chan_w.rank() != 2 || chan_w.dim(0) != d || chan_w.dim(1) != d) {
    throw Error("sim_mix: chan_w must be [D,D]");
  }
  if (chan_b.numel() != d) throw Error("sim_mix: chan_b must be [D]");

  int64_t slices = b * d;
  int64_t plane = h * w;
  size_t total = static_cast<size_t>(slices * plane);
  auto wts = fusion_weights(fusion_logits);

  auto compute_paths = [=](const std::vector<double>& src, std::vector<double>& s_out) {
    std::vector<double> tmp(total), tmp2(total);
    s_out.assign(total, 0.0);
    // row
    row_mix_apply(src.data(), row_mix.data().data(), tmp.data(), slices, h, w, false);
    for (size_t i = 0; i < total; ++i) s_out[i] += wts[0] * tmp[i];
    // col
    col_mix_apply(src.data(), col_mix.data().data(), tmp.data(), slices, h, w, false);
    for (size_t i = 0; i < total; ++i) s_out[i] += wts[1] * tmp[i];
    // diag: shift, col-mix, unshift
    shift_main(src.data(), tmp.data(), slices, h, w);
    col_mix_apply(tmp.data(), diag_mix.data().data(), tmp2.data(), slices, h, w, false);
    unshift_main(tmp2.data(), tmp.data(), slices, h, w);
    for (size_t i = 0; i < total; ++i) s_out[i] += wts[2] * tmp[i];
    // anti
    shift_anti(src.data(), tmp.data(), slices, h, w);
    col_mix_apply(tmp.data(), anti_mix.data().data(), tmp2.data(), slices, h, w, false);
    unshift_anti(tmp2.data(), tmp.data(), slices, h, w);
    for (size_t i = 0; i < total; ++i) s_out[i] += wts[3] * tmp[i];
    // identity
    for (size_t i = 0; i < total; ++i) s_out[i] += wts[4] * src[i];
  };

  std::vector<double> s;
  compute_paths(x.data(), s);

  // channel projection: out[b,o,p] = sum_in cw[in,o] * s[b,in,p] + cb[o]
  std::vector<double> out(total);
  {
    const double* cw = chan_w.data().data();
    const double* cb = chan_b.data().data();
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t o = 0; o < d; ++o) {
        double* orow = out.data() + (bi * d + o) * plane;
        for (int64_t p = 0; p < plane; ++p) orow[p] = cb[o];
        for (int64_t in = 0; in < d; ++in) {
          double wv = cw[in * d + o];
          if (wv == 0.0) continue;
          const double* srow = s.data() + (bi * d + in) * plane;
          for (int64_t p = 0; p < plane; ++p) orow[p] += wv * srow[p];
        }
      }
    }
  }

  std::vector<Tensor> inputs = {x, row_mix, col_mix, diag_mix, anti_mix,
                                fusion_logits, chan_w, chan_b};
  BackwardFn fn = [=](const std::vector<double>& g, GradMap& sink) {
    using detail::grad_slot;
    // recompute everything from x and the weights
    auto wts2 = fusion_weights(fusion_logits);
    std::vector<double> paths[5];
    {
      std::vector<double> tmp(total), tmp2(total);
      paths[0].resize(total);
      row_mix_apply(x.data().data(), row_mix.data().data(), paths[0].data(), slices, h, w, false);
      paths[1].resize(total);
      col_mix_apply(x.data().data(), col_mix.data().data(), paths[1].data(), slices, h, w, false);
      paths[2].resize(total);
      shift_main(x.data().data(), tmp.data(), slices, h, w);
      col_mix_apply(tmp.data(), diag_mix.data().data(), tmp2.data(), slices, h, w, false);
      unshift_main(tmp2.data(), paths[2].data(), slices, h, w);
      paths[3].resize(total);
      shift_anti(x.data().data(), tmp.data(), slices, h, w);
      col_mix_apply(tmp.data(), anti_mix.data().data(), tmp2.data(), slices, h, w, false);
      unshift_anti(tmp2.data(), paths[3].data(), slices, h, w);
      paths[4] = x.data();
    }
    std::vector<double> s2(total, 0.0);
    for (int p = 0; p < 5; ++p) {
      for (size_t i = 0; i < total; ++i) s2[i] += wts2[static_cast<size_t>(p)] * paths[p][i];
    }

    const double* cw = chan_w.data().data();
    // grad wrt channel projection inputs
    std::vector<double> gs(total, 0.0);
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t in = 0; in < d; ++in) {
        double* gsrow = gs.data() + (bi * d + in) * plane;
        for (int64_t o = 0; o < d; ++o) {
          double wv = cw[in * d + o];
          if (wv == 0.0) continue;
          const double* grow = g.data() + (bi * d + o) * plane;
          for (int64_t p = 0; p < plane; ++p) gsrow[p] += wv * grow[p];
        }
      }
    }
    if (chan_w.requires_grad()) {
      auto& gw = grad_slot(sink, chan_w.impl());
      for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t in = 0; in < d; ++in) {
          const double* srow = s2.data() + (bi * d + in) * plane;
          for (int64_t o = 0; o < d; ++o) {
            const double* grow = g.data() + (bi * d + o) * plane;
            double acc = 0.0;
            for (int64_t p = 0; p < plane; ++p) acc += srow[p] * grow[p];
            gw[in * d + o] += acc;
          }
        }
      }
    }
    if (chan_b.requires_grad()) {
      auto& gb = grad_slot(sink, chan_b.impl());
      for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t o = 0; o < d; ++o) {
          const double* grow = g.data() + (bi * d + o) * plane;
          for (int64_t p = 0; p < plane; ++p) gb[o] += grow[p];
        }
      }
    }
    if (fusion_logits.requires_grad()) {
      double gw_path[5];
      for (int p = 0; p < 5; ++p) {
        double acc = 0.0;
        for (size_t i = 0; i < total; ++i) acc += gs[i] * paths[p][i];
        gw_path[p] = acc;
      }
      double dot = 0.0;
      for (int p = 0; p < 5; ++p) dot += wts2[static_cast<size_t>(p)] * gw_path[p];
      auto& gl = grad_slot(sink, fusion_logits.impl());
      for (int p = 0; p < 5; ++p) {
        gl[static_cast<size_t>(p)] += wts2[static_cast<size_t>(p)] * (gw_path[p] - dot);
      }
    }
    if (x.requires_grad()) {
      auto& gx = grad_slot(sink, x.impl());
      std::vector<double> tmp(total), tmp2(total);
      // row adjoint: R^T along rows
      row_mix_apply(gs.data(), row_mix.data().data(), tmp.data(), slices, h, w, true);
      for (size_t i = 0; i < total; ++i) gx[i] += wts2[0] * tmp[i];
      // col adjoint
      col_mix_apply(gs.data(), col_mix.data().data(), tmp.data(), slices, h, w, true);
      for (size_t i = 0; i < total; ++i) gx[i] += wts2[1] * tmp[i];
      // diag adjoint: shift, Dg^T col-mix, unshift swap roles
      shift_main(gs.data(), tmp.data(), slices, h, w);
      col_mix_apply(tmp.data(), diag_mix.data().data(), tmp2.data(), slices, h, w, true);
      unshift_main(tmp2.data(), tmp.data(), slices, h, w);
      for (size_t i = 0; i < total; ++i) gx[i] += wts2[2] * tmp[i];
      // anti adjoint
      shift_anti(gs.data(), tmp.data(), slices, h, w);
      col_mix_apply(tmp.data(), anti_mix.data().data(), tmp2.data(), slices, h, w, true);
      unshift_anti(tmp2.data(), tmp.data(), slices, h, w);
      for (size_t i = 0; i < total; ++i) gx[i] += wts2[3] * tmp[i];
      // identity
      for (size_t i = 0; i < total; ++i) gx[i] += wts2[4] * gs[i];
    }
    // line-mix weight grads; V = M U with U the (possibly shifted) input
    auto accumulate_row_mix = [&](const Tensor& m, double weight) {
      if (!m.requires_grad()) return;
      auto& gm = grad_slot(sink, m.impl());
      const double* xd = x.data().data();
      for (int64_t sl = 0; sl < slices; ++sl) {
        for (int64_t i = 0; i < h; ++i) {
          const double* gr = gs.data() + (sl * h + i) * w;
          const double* xr = xd + (sl * h + i) * w;
          for (int64_t j = 0; j < w; ++j) {
            double gv = weight * gr[j];
            if (gv == 0.0) continue;
            for (int64_t k = 0; k < w; ++k) gm[j * w + k] += gv * xr[k];
          }
        }
      }
    };
    accumulate_row_mix(row_mix, wts2[0]);

    auto accumulate_col_mix = [&](const Tensor& m, double weight, int shift_kind) {
      if (!m.requires_grad()) return;
      auto& gm = grad_slot(sink, m.impl());
      std::vector<double> u(total), gv(total);
      // u = shifted input, gv = grad at the mix output (shift of gs)
      if (shift_kind == 0) {
        u = x.data();
        gv = gs;
      } else if (shift_kind == 1) {
        shift_main(x.data().data(), u.data(), slices, h, w);
        shift_main(gs.data(), gv.data(), slices, h, w);
      } else {
        shift_anti(x.data().data(), u.data(), slices, h, w);
        shift_anti(gs.data(), gv.data(), slices, h, w);
      }
      for (int64_t sl = 0; sl < slices; ++sl) {
        const double* us = u.data() + sl * plane;
        const double* gvs = gv.data() + sl * plane;
        for (int64_t i = 0; i < h; ++i) {
          for (int64_t k = 0; k < h; ++k) {
            double acc = 0.0;
            for (int64_t j = 0; j < w; ++j) acc += gvs[i * w + j] * us[k * w + j];
            gm[i * h + k] += weight * acc;
          }
        }
      }
    };
    accumulate_col_mix(col_mix, wts2[1], 0);
    accumulate_col_mix(diag_mix, wts2[2], 1);
    accumulate_col_mix(anti_mix, wts2[3], 2);
  };

  return detail::make_node("sim_mix", {b, d, h, w}, std::move(out), inputs, std::move(fn), {x});
}

std::unique_ptr<SimLayer> SimLayer::create(ParamRegistry& reg, const std::string& prefix,
                                           Rng& rng, int64_t dim, int64_t grid) {
  if (dim < 2 * grid) {
    throw Error("sim: dim " + std::to_string(dim) + " below 2*grid (" + std::to_string(grid) +
                "); sparse mixing would not reduce parameters");
  }
  auto l = std::make_unique<SimLayer>();
  l->dim = dim;
  l->grid = grid;
  auto identity = [&] {
    Tensor m = Tensor::zeros({grid, grid});
    for (int64_t i = 0; i < grid; ++i) m.mutable_data()[static_cast<size_t>(i * grid + i)] = 1.0;
    return m;
  };
  l->row_mix = reg.add(prefix + ".row", identity());
  l->col_mix = reg.add(prefix + ".col", identity());
  l->diag_mix = reg.add(prefix + ".diag", identity());
  l->anti_mix = reg.add(prefix + ".anti", identity());
  l->fusion_logits = reg.add(prefix + ".fusion", Tensor::zeros({5}));
  l->chan_w = reg.add(prefix + ".chan.w", trunc_normal_tensor(rng, {dim, dim}, 0.02));
  l->chan_b = reg.add(prefix + ".chan.b", Tensor::zeros({dim}));
  return l;
}

Tensor SimLayer::forward(const Tensor& tokens, int64_t grid_h, int64_t grid_w) const {
  if (grid_h != grid || grid_w != grid) {
    throw Error("sim: layer built for grid " + std::to_string(grid) + ", got " +
                std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  Tensor g = tokens_to_grid(tokens, grid_h, grid_w);
  Tensor y = sim_mix(g, row_mix, col_mix, diag_mix, anti_mix, fusion_logits, chan_w, chan_b);
  return grid_to_tokens(y);
}

int64_t SimLayer::param_count() const {
  return row_mix.numel() + col_mix.numel() + diag_mix.numel() + anti_mix.numel() +
         fusion_logits.numel() + chan_w.numel() + chan_b.numel();
}

std::unique_ptr<DenseMixLayer> DenseMixLayer::create(ParamRegistry& reg, const std::string& prefix,
                                                     Rng& rng, int64_t dim, int64_t tokens) {
  auto l = std::make_unique<DenseMixLayer>();
  l->dim = dim;
  l->tokens = tokens;
  Tensor m = Tensor::zeros({tokens, tokens});
  for (int64_t i = 0; i < tokens; ++i) m.mutable_data()[static_cast<size_t>(i * tokens + i)] = 1.0;
  l->mix = reg.add(prefix + ".mix", m);
  l->chan_w = reg.add(prefix + ".chan.w", trunc_normal_tensor(rng, {dim, dim}, 0.02));
  l->chan_b = reg.add(prefix + ".chan.b", Tensor::zeros({dim}));
  return l;
}

Tensor DenseMixLayer::forward(const Tensor& tokens_t, int64_t, int64_t) const {
  if (tokens_t.dim(1) != tokens) {
    throw Error("dense_mix: layer built for " + std::to_string(tokens) + " tokens, got " +
                std::to_string(tokens_t.dim(1)));
  }
  // y[b,n',d] = sum_n mix[n',n] x[b,n,d], then pointwise channel map
  Tensor xt = permute(tokens_t, {0, 2, 1});                       // [B,D,n]
  Tensor mixed = permute(matmul(xt, transpose_last(mix)), {0, 2, 1});  // [B,n,D]
  return add(matmul(mixed, chan_w), chan_b);
}

int64_t DenseMixLayer::param_count() const {
  return mix.numel() + chan_w.numel() + chan_b.numel();
}

int64_t sim_param_count(int64_t dim, int64_t grid) {
  return 4 * grid * grid + dim * dim + dim + 5;
}

int64_t dense_ffn_param_count(int64_t dim, int64_t mlp_ratio) {
  return 2 * mlp_ratio * dim * dim + (mlp_ratio + 1) * dim;
}

int64_t dense_mix_param_count(int64_t dim, int64_t tokens) {
  return tokens * tokens + dim * dim + dim;
}

int64_t InfluenceMatrix::count_influenced_by(int64_t i) const {
  int64_t c = 0;
  for (int64_t j = 0; j < n; ++j) c += at(i, j) ? 1 : 0;
  return c;
}

double InfluenceMatrix::coverage() const {
  int64_t c = 0;
  for (uint8_t v : m) c += v ? 1 : 0;
  return static_cast<double>(c) / static_cast<double>(n * n);
}

InfluenceMatrix receptive_field(int64_t layers, int64_t h, int64_t w, bool dense_baseline,
                                uint64_t seed) {
  if (layers < 1) throw Error("receptive_field: layers must be >= 1");
  if (h != w) throw Error("receptive_field: grid must be square");
  int64_t n = h * w;
  Rng rng(seed);
  auto positive = [&](Shape shape) {
    std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : d) v = rng.uniform(0.5, 1.5);
    return Tensor::from_data(std::move(shape), std::move(d));
  };
  // generic positive weights: no cancellation, so thresholding is safe
  Tensor row = positive({w, w}), col = positive({w, w});
  Tensor diag = positive({w, w}), anti = positive({w, w});
  Tensor logits = Tensor::zeros({5});
  Tensor cw = positive({1, 1});
  Tensor cb = Tensor::zeros({1});
  Tensor mix = positive({n, n});

  InfluenceMatrix result;
  result.n = n;
  result.m.assign(static_cast<size_t>(n * n), 0);

  for (int64_t j = 0; j < n; ++j) {
    Tensor x = Tensor::zeros({1, 1, h, w});
    x.set_requires_grad(true);
    Tensor y;
    if (dense_baseline) {
      Tensor t = reshape(x, {1, n, 1});
      for (int64_t l = 0; l < layers; ++l) {
        Tensor xt = permute(t, {0, 2, 1});
        t = permute(matmul(xt, transpose_last(mix)), {0, 2, 1});
        t = matmul(t, cw);
      }
      y = reshape(t, {n});
    } else {
      Tensor t = x;
      for (int64_t l = 0; l < layers; ++l) {
        t = sim_mix(t, row, col, diag, anti, logits, cw, cb);
      }
      y = reshape(t, {n});
    }
    backward(sum_all(gather(y, 0, {j})));
    const auto& g = *x.grad();
    for (int64_t i = 0; i < n; ++i) {
      if (std::fabs(g[static_cast<size_t>(i)]) > 1e-9) {
        result.m[static_cast<size_t>(i * n + j)] = 1;
      }
    }
  }
  return result;
}

}  // namespace effowt
