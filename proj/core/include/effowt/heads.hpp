#pragma once

#include <vector>

#include "effowt/nn.hpp"

namespace effowt {

struct HeadConfig {
  int64_t in_dim = 0;        // fused-map channels
  int64_t hidden = 64;
  int64_t embed_dim = 64;
  int64_t num_classes = 2;   // known classes; logits get one extra background column
};

struct RegionBox {
  int64_t batch = 0;
  double x = 0, y = 0, w = 0, h = 0;
};

struct HeadOutputs {
  Tensor class_logits;  // [R, K+1]
  Tensor embeddings;    // [R, E], unit rows
};

Tensor l2_normalize_rows(const Tensor& x);

/// Classification + appearance-embedding branches over region-pooled features.
struct Heads {
  HeadConfig cfg;
  Linear cls1, cls2;
  Linear reid1, reid2;

  static Heads create(ParamRegistry& reg, Rng& rng, const HeadConfig& cfg);

  /// fused: [B,C,G,G]; boxes in image pixel coordinates. Pooling averages the
  /// grid cells the box covers. Empty region list gives empty outputs.
  HeadOutputs forward(const Tensor& fused, const std::vector<RegionBox>& regions,
                      int64_t image_size) const;
};

/// Symmetric NT-Xent over augmentation pairs: 2n views, positives across
/// views, every other view a negative. ids must be distinct and n >= 2.
/// With all embeddings identical the loss is ln(2n-1).
Tensor reid_contrastive_loss(const Tensor& view_a, const Tensor& view_b,
                             const std::vector<int64_t>& ids, double temperature);

struct Association {
  std::vector<int64_t> det_track_ids;  // assigned id per detection
  std::vector<int64_t> matched_prev;   // matched prev-track index per detection, -1 if new
  int64_t next_track_id = 1;
};

/// Appearance-only matching: optimal assignment maximizing total cosine
/// similarity, matched pairs below the threshold discarded, unmatched
/// detections given fresh increasing ids.
Association associate(const Tensor& prev_embeddings, const std::vector<int64_t>& prev_ids,
                      const Tensor& det_embeddings, double sim_threshold, int64_t next_id);

}  // namespace effowt
