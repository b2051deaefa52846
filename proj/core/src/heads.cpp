#include "effowt/heads.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "effowt/assignment.hpp"

namespace effowt {

Tensor l2_normalize_rows(const Tensor& x) {
  Tensor sq = sum(mul(x, x), {-1}, /*keepdim=*/true);
  Tensor inv = pow_scalar(add_scalar(sq, 1e-12), -0.5);
  return mul(x, inv);
}

Heads Heads::create(ParamRegistry& reg, Rng& rng, const HeadConfig& cfg) {
  Heads h;
  h.cfg = cfg;
  h.cls1 = Linear::create(reg, "head.cls.fc1", rng, cfg.in_dim, cfg.hidden);
  h.cls2 = Linear::create(reg, "head.cls.fc2", rng, cfg.hidden, cfg.num_classes + 1);
  h.reid1 = Linear::create(reg, "head.reid.fc1", rng, cfg.in_dim, cfg.hidden);
  h.reid2 = Linear::create(reg, "head.reid.fc2", rng, cfg.hidden, cfg.embed_dim);
  return h;
}

HeadOutputs Heads::forward(const Tensor& fused, const std::vector<RegionBox>& regions,
                           int64_t image_size) const {
  if (fused.rank() != 4) throw Error("heads: expected fused map [B,C,G,G]");
  int64_t batch = fused.dim(0), channels = fused.dim(1), grid = fused.dim(2);
  HeadOutputs out;
  if (regions.empty()) {
    out.class_logits = Tensor::zeros({0, cfg.num_classes + 1});
    out.embeddings = Tensor::zeros({0, cfg.embed_dim});
    return out;
  }
  double cell = static_cast<double>(image_size) / static_cast<double>(grid);
  std::vector<Tensor> pooled;
  for (const RegionBox& r : regions) {
    if (r.batch < 0 || r.batch >= batch) throw Error("heads: region batch index out of range");
    if (r.w <= 0 || r.h <= 0 || r.x < 0 || r.y < 0 || r.x + r.w > image_size ||
        r.y + r.h > image_size) {
      throw Error("heads: region outside image bounds");
    }
    auto cell_range = [&](double lo, double extent) {
      int64_t c0 = static_cast<int64_t>(std::floor(lo / cell));
      int64_t c1 = static_cast<int64_t>(std::ceil((lo + extent) / cell));
      c0 = std::clamp<int64_t>(c0, 0, grid - 1);
      c1 = std::clamp<int64_t>(c1, c0 + 1, grid);
      return std::pair<int64_t, int64_t>(c0, c1);
    };
    auto [y0, y1] = cell_range(r.y, r.h);
    auto [x0, x1] = cell_range(r.x, r.w);
    Tensor patch = slice(fused, {r.batch, 0, y0, x0}, {1, channels, y1 - y0, x1 - x0});
    pooled.push_back(reshape(mean(patch, {0, 2, 3}, false), {1, channels}));
  }
  Tensor feats = pooled.size() == 1 ? pooled[0] : concat(pooled, 0);  // [R,C]
  {
    ModuleScope s("head");
    out.class_logits = cls2.forward(gelu(cls1.forward(feats)));
    out.embeddings = l2_normalize_rows(reid2.forward(gelu(reid1.forward(feats))));
  }
  return out;
}

Tensor reid_contrastive_loss(const Tensor& view_a, const Tensor& view_b,
                             const std::vector<int64_t>& ids, double temperature) {
  if (view_a.rank() != 2 || view_b.rank() != 2 || view_a.shape() != view_b.shape()) {
    throw Error("reid loss: views must be [n,E] with matching shapes");
  }
  int64_t n = view_a.dim(0);
  if (static_cast<int64_t>(ids.size()) != n) throw Error("reid loss: one id per pair required");
  std::set<int64_t> distinct(ids.begin(), ids.end());
  if (static_cast<int64_t>(distinct.size()) != n) {
    throw Error("reid loss: ids must be distinct within the batch");
  }
  if (n < 2) throw Error("reid loss: need at least 2 identities for negatives");
  if (temperature <= 0) throw Error("reid loss: temperature must be positive");

  Tensor z = l2_normalize_rows(concat({view_a, view_b}, 0));  // [2n,E]
  Tensor sims = mul_scalar(matmul(z, transpose_last(z)), 1.0 / temperature);
  Tensor mask = Tensor::zeros({2 * n, 2 * n});
  for (int64_t i = 0; i < 2 * n; ++i) {
    mask.mutable_data()[static_cast<size_t>(i * 2 * n + i)] = -1e9;  // exclude self
  }
  Tensor logp = log_softmax(add(sims, mask), -1);
  std::vector<int64_t> targets(static_cast<size_t>(2 * n));
  for (int64_t i = 0; i < n; ++i) {
    targets[static_cast<size_t>(i)] = i + n;
    targets[static_cast<size_t>(i + n)] = i;
  }
  return neg(mean_all(take_per_row(logp, targets)));
}

Association associate(const Tensor& prev_embeddings, const std::vector<int64_t>& prev_ids,
                      const Tensor& det_embeddings, double sim_threshold, int64_t next_id) {
  if (!(sim_threshold > -1.0 && sim_threshold < 1.0)) {
    throw Error("associate: threshold must lie in (-1,1)");
  }
  int64_t tracks = prev_embeddings.defined() ? prev_embeddings.dim(0) : 0;
  int64_t dets = det_embeddings.defined() ? det_embeddings.dim(0) : 0;
  if (tracks != static_cast<int64_t>(prev_ids.size())) {
    throw Error("associate: one id per previous track required");
  }
  Association out;
  out.det_track_ids.assign(static_cast<size_t>(dets), -1);
  out.matched_prev.assign(static_cast<size_t>(dets), -1);
  out.next_track_id = next_id;
  if (dets == 0) return out;

  std::vector<int64_t> match(static_cast<size_t>(dets), -1);
  if (tracks > 0) {
    int64_t e = det_embeddings.dim(1);
    std::vector<double> sims(static_cast<size_t>(dets * tracks), 0.0);
    const auto& dv = det_embeddings.data();
    const auto& pv = prev_embeddings.data();
    for (int64_t i = 0; i < dets; ++i) {
      for (int64_t j = 0; j < tracks; ++j) {
        double dot = 0.0;
        for (int64_t k = 0; k < e; ++k) dot += dv[i * e + k] * pv[j * e + k];
        sims[static_cast<size_t>(i * tracks + j)] = dot;
      }
    }
    match = max_weight_assignment(sims, dets, tracks);
    for (int64_t i = 0; i < dets; ++i) {
      int64_t j = match[static_cast<size_t>(i)];
      if (j >= 0 && sims[static_cast<size_t>(i * tracks + j)] < sim_threshold) {
        match[static_cast<size_t>(i)] = -1;  // below threshold: discard
      }
    }
  }
  for (int64_t i = 0; i < dets; ++i) {
    int64_t j = match[static_cast<size_t>(i)];
    if (j >= 0) {
      out.det_track_ids[static_cast<size_t>(i)] = prev_ids[static_cast<size_t>(j)];
      out.matched_prev[static_cast<size_t>(i)] = j;
    } else {
      out.det_track_ids[static_cast<size_t>(i)] = out.next_track_id++;
    }
  }
  return out;
}

}  // namespace effowt
