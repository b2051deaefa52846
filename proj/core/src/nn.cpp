#include "effowt/nn.hpp"

#include <cmath>

namespace effowt {

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
  if (params_.count(name)) throw Error("registry: duplicate parameter " + name);
  t.mark_parameter();
  t.set_requires_grad(true);
  params_[name] = Parameter{t, name, true};
  return t;
}

Parameter* ParamRegistry::find(const std::string& name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

const Parameter* ParamRegistry::find(const std::string& name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

void ParamRegistry::set_trainable(const std::function<bool(const std::string&)>& pred) {
  for (auto& [name, p] : params_) {
    p.trainable = pred(name);
    p.tensor.set_requires_grad(p.trainable);
    if (!p.trainable) p.tensor.drop_grad();
  }
}

int64_t ParamRegistry::total_count() const {
  int64_t n = 0;
  for (const auto& [name, p] : params_) n += p.tensor.numel();
  return n;
}

int64_t ParamRegistry::trainable_count() const {
  int64_t n = 0;
  for (const auto& [name, p] : params_) {
    if (p.trainable) n += p.tensor.numel();
  }
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& [name, p] : params_) p.tensor.zero_grad();
}

Tensor trunc_normal_tensor(Rng& rng, Shape shape, double std_dev) {
  int64_t n = shape_numel(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.trunc_normal(std_dev);
  return Tensor::from_data(std::move(shape), std::move(data));
}

Linear Linear::create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t in,
                      int64_t out, bool bias) {
  Linear l;
  l.w = reg.add(prefix + ".w", trunc_normal_tensor(rng, {in, out}, 0.02));
  if (bias) l.b = reg.add(prefix + ".b", Tensor::zeros({out}));
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, w);
  if (b.defined()) y = add(y, b);
  return y;
}

LayerNorm LayerNorm::create(ParamRegistry& reg, const std::string& prefix, int64_t d) {
  LayerNorm ln;
  ln.gamma = reg.add(prefix + ".g", Tensor::full({d}, 1.0));
  ln.beta = reg.add(prefix + ".b", Tensor::zeros({d}));
  return ln;
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return add(mul(layer_norm(x, eps), gamma), beta);
}

int64_t pick_groups(int64_t channels) {
  for (int64_t g = std::min<int64_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

GroupNorm GroupNorm::create(ParamRegistry& reg, const std::string& prefix, int64_t channels) {
  GroupNorm gn;
  gn.gamma = reg.add(prefix + ".g", Tensor::full({channels}, 1.0));
  gn.beta = reg.add(prefix + ".b", Tensor::zeros({channels}));
  gn.groups = pick_groups(channels);
  return gn;
}

Tensor GroupNorm::forward(const Tensor& x) const {
  if (x.rank() != 4) throw Error("group_norm: expected [B,C,H,W], got " + shape_str(x.shape()));
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (c % groups != 0) throw Error("group_norm: channels not divisible by groups");
  Tensor y = reshape(x, {b, groups, (c / groups) * h * w});
  y = layer_norm(y, eps);
  y = reshape(y, {b, c, h, w});
  y = add(mul(y, reshape(gamma, {c, 1, 1})), reshape(beta, {c, 1, 1}));
  return y;
}

Mhsa Mhsa::create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t dim,
                  int64_t heads) {
  if (dim % heads != 0) {
    throw Error("mhsa: dim " + std::to_string(dim) + " not divisible by heads " +
                std::to_string(heads));
  }
  Mhsa m;
  m.dim = dim;
  m.heads = heads;
  m.qkv = Linear::create(reg, prefix + ".qkv", rng, dim, 3 * dim);
  m.proj = Linear::create(reg, prefix + ".proj", rng, dim, dim);
  return m;
}

Tensor Mhsa::forward(const Tensor& x) const {
  int64_t b = x.dim(0), n = x.dim(1);
  int64_t dh = dim / heads;
  Tensor qkv_out = qkv.forward(x);  // [B,n,3d]
  auto parts = split(qkv_out, -1, {dim, dim, dim});
  auto to_heads = [&](const Tensor& t) {
    return permute(reshape(t, {b, n, heads, dh}), {0, 2, 1, 3});  // [B,h,n,dh]
  };
  Tensor q = to_heads(parts[0]);
  Tensor k = to_heads(parts[1]);
  Tensor v = to_heads(parts[2]);
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor scores;
  if (kv_chunk > 0 && kv_chunk < n) {
    // score matrix assembled chunk by chunk over keys; identical values,
    // bounded transient working set
    std::vector<int64_t> sizes;
    for (int64_t s = 0; s < n; s += kv_chunk) sizes.push_back(std::min(kv_chunk, n - s));
    auto k_chunks = split(k, 2, sizes);
    std::vector<Tensor> score_parts;
    for (auto& kc : k_chunks) {
      score_parts.push_back(matmul(q, transpose_last(kc)));
    }
    scores = mul_scalar(concat(score_parts, -1), scale);
  } else {
    scores = mul_scalar(matmul(q, transpose_last(k)), scale);
  }
  Tensor probs = softmax(scores, -1);       // [B,h,n,n]
  Tensor ctx = matmul(probs, v);            // [B,h,n,dh]
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {b, n, dim});
  return proj.forward(ctx);
}

std::unique_ptr<DenseFfn> DenseFfn::create(ParamRegistry& reg, const std::string& prefix,
                                           Rng& rng, int64_t dim, int64_t hidden) {
  auto f = std::make_unique<DenseFfn>();
  f->fc1 = Linear::create(reg, prefix + ".fc1", rng, dim, hidden);
  f->fc2 = Linear::create(reg, prefix + ".fc2", rng, hidden, dim);
  return f;
}

Tensor DenseFfn::forward(const Tensor& tokens, int64_t, int64_t) const {
  return fc2.forward(gelu(fc1.forward(tokens)));
}

int64_t DenseFfn::param_count() const {
  int64_t n = fc1.w.numel() + fc2.w.numel();
  if (fc1.b.defined()) n += fc1.b.numel();
  if (fc2.b.defined()) n += fc2.b.numel();
  return n;
}

TransformerLayer TransformerLayer::create(ParamRegistry& reg, const std::string& prefix, Rng& rng,
                                          int64_t dim, int64_t heads, int64_t mlp_hidden) {
  TransformerLayer l;
  l.ln1 = LayerNorm::create(reg, prefix + ".ln1", dim);
  l.attn = Mhsa::create(reg, prefix + ".attn", rng, dim, heads);
  l.ln2 = LayerNorm::create(reg, prefix + ".ln2", dim);
  l.ffn = DenseFfn::create(reg, prefix + ".ffn", rng, dim, mlp_hidden);
  return l;
}

Tensor TransformerLayer::forward(const Tensor& x, int64_t grid_h, int64_t grid_w) const {
  Tensor h = add(x, attn.forward(ln1.forward(x)));
  return add(h, ffn->forward(ln2.forward(h), grid_h, grid_w));
}

ConvUnit ConvUnit::create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t in,
                          int64_t out, int64_t stride) {
  ConvUnit u;
  u.w = reg.add(prefix + ".conv.w", trunc_normal_tensor(rng, {out, in, 3, 3}, 0.02));
  u.b = reg.add(prefix + ".conv.b", Tensor::zeros({out}));
  u.gn = GroupNorm::create(reg, prefix + ".gn", out);
  u.stride = stride;
  return u;
}

Tensor ConvUnit::forward(const Tensor& x) const {
  Tensor y = conv2d(x, w, stride, 1);
  y = add(y, reshape(b, {b.dim(0), 1, 1}));
  return gelu(gn.forward(y));
}

Tensor tokens_to_grid(const Tensor& tokens, int64_t h, int64_t w) {
  if (tokens.rank() != 3) throw Error("tokens_to_grid: expected [B,n,D]");
  int64_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  if (n != h * w) {
    throw Error("tokens_to_grid: token count " + std::to_string(n) + " does not tile " +
                std::to_string(h) + "x" + std::to_string(w));
  }
  return permute(reshape(tokens, {b, h, w, d}), {0, 3, 1, 2});
}

Tensor grid_to_tokens(const Tensor& grid) {
  if (grid.rank() != 4) throw Error("grid_to_tokens: expected [B,D,H,W]");
  int64_t b = grid.dim(0), d = grid.dim(1), h = grid.dim(2), w = grid.dim(3);
  return reshape(permute(grid, {0, 2, 3, 1}), {b, h * w, d});
}

}  // namespace effowt
