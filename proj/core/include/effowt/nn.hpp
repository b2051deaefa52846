#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "effowt/ops.hpp"
#include "effowt/rng.hpp"
#include "effowt/tensor.hpp"

namespace effowt {

struct Parameter {
  Tensor tensor;
  std::string name;
  bool trainable = true;
};

/// Name-ordered parameter registry; the freeze mask lives here.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }

  /// Applies a freeze mask: trainable(p) := pred(p.name). Frozen parameters
  /// stop requiring grad and any existing grad buffer is dropped.
  void set_trainable(const std::function<bool(const std::string&)>& pred);

  int64_t total_count() const;
  int64_t trainable_count() const;
  void zero_grads();

 private:
  std::map<std::string, Parameter> params_;
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], undefined when bias-free

  static Linear create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t in,
                       int64_t out, bool bias = true);
  Tensor forward(const Tensor& x) const;
  int64_t in_dim() const { return w.dim(0); }
  int64_t out_dim() const { return w.dim(1); }
};

struct LayerNorm {
  Tensor gamma;  // [d]
  Tensor beta;   // [d]
  double eps = 1e-5;

  static LayerNorm create(ParamRegistry& reg, const std::string& prefix, int64_t d);
  Tensor forward(const Tensor& x) const;
};

struct GroupNorm {
  Tensor gamma;  // [c]
  Tensor beta;   // [c]
  int64_t groups = 1;
  double eps = 1e-5;

  static GroupNorm create(ParamRegistry& reg, const std::string& prefix, int64_t channels);
  Tensor forward(const Tensor& x) const;  // x: [B,C,H,W]
};

/// Largest divisor of `channels` that is <= 8.
int64_t pick_groups(int64_t channels);

struct Mhsa {
  int64_t dim = 0;
  int64_t heads = 1;
  Linear qkv;   // d -> 3d
  Linear proj;  // d -> d
  int64_t kv_chunk = 0;  // >0: compute scores in key/value chunks of this size

  static Mhsa create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t dim,
                     int64_t heads);
  Tensor forward(const Tensor& x) const;  // x: [B,n,d]
};

/// FFN-slot interface; token-mixing variants need the grid geometry.
struct FfnBase {
  virtual ~FfnBase() = default;
  virtual Tensor forward(const Tensor& tokens, int64_t grid_h, int64_t grid_w) const = 0;
  virtual int64_t param_count() const = 0;
};

struct DenseFfn : FfnBase {
  Linear fc1, fc2;

  static std::unique_ptr<DenseFfn> create(ParamRegistry& reg, const std::string& prefix, Rng& rng,
                                          int64_t dim, int64_t hidden);
  Tensor forward(const Tensor& tokens, int64_t grid_h, int64_t grid_w) const override;
  int64_t param_count() const override;
};

/// Pre-norm transformer layer: x + MHA(LN(x)); x + FFN(LN(x)).
struct TransformerLayer {
  LayerNorm ln1, ln2;
  Mhsa attn;
  std::unique_ptr<FfnBase> ffn;

  static TransformerLayer create(ParamRegistry& reg, const std::string& prefix, Rng& rng,
                                 int64_t dim, int64_t heads, int64_t mlp_hidden);
  Tensor forward(const Tensor& x, int64_t grid_h, int64_t grid_w) const;
};

/// 3x3 conv (same padding unless strided) + group norm + GELU.
struct ConvUnit {
  Tensor w;  // [out,in,3,3]
  Tensor b;  // [out]
  GroupNorm gn;
  int64_t stride = 1;

  static ConvUnit create(ParamRegistry& reg, const std::string& prefix, Rng& rng, int64_t in,
                         int64_t out, int64_t stride = 1);
  Tensor forward(const Tensor& x) const;
};

Tensor trunc_normal_tensor(Rng& rng, Shape shape, double std_dev);

/// [B,n,D] tokens <-> [B,D,H,W] grid; token count must equal h*w.
Tensor tokens_to_grid(const Tensor& tokens, int64_t h, int64_t w);
Tensor grid_to_tokens(const Tensor& grid);

}  // namespace effowt
