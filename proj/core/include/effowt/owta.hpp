#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "effowt/tensor.hpp"

namespace effowt {

struct TrackRecord {
  std::string video;
  int64_t frame = 0;
  int64_t track_id = 0;
  std::array<double, 4> bbox{};  // x, y, w, h
  std::string cls;
  double score = 1.0;
};

/// Records grouped by video then frame. (video, frame, track_id) is unique.
struct TrackSet {
  std::map<std::string, std::map<int64_t, std::vector<TrackRecord>>> videos;

  void insert(TrackRecord rec);
  int64_t record_count() const;
  bool empty() const { return videos.empty(); }
};

/// Newline-delimited JSON, one record per line. Malformed lines are reported
/// with their line numbers.
TrackSet parse_track_file(const std::string& path);
void write_track_file(const TrackSet& ts, const std::string& path);
std::string track_record_to_json(const TrackRecord& rec);

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

std::vector<double> default_alpha_grid();  // 0.05 .. 0.95, 19 thresholds

enum class EvalSplit { kKnown, kUnknown, kAll };
EvalSplit split_from_string(const std::string& s);
std::string split_name(EvalSplit s);

struct OwtaConfig {
  std::vector<double> alphas = default_alpha_grid();
  std::set<std::string> known_classes;
  EvalSplit split = EvalSplit::kAll;
  /// true: an unmatched appearance of a matched prediction track counts
  /// against association (standard reading); false: only frames where the
  /// prediction is matched to a different ground-truth track count.
  bool assoc_fp_penalize_unmatched = true;
};

struct AlphaMetrics {
  double alpha = 0, det_re = 0, ass_acc = 0, owta = 0;
  int64_t tp = 0, fn = 0;
};

struct OwtaResult {
  double owta = 0, det_re = 0, ass_acc = 0;  // means over the alpha grid
  std::vector<AlphaMetrics> per_alpha;
};

/// One-to-one matching maximizing match count (ties by total IoU) among
/// pairs with IoU >= alpha. Returns (gt index, pred index) pairs.
std::vector<std::pair<int64_t, int64_t>> match_frame(
    const std::vector<std::array<double, 4>>& gt_boxes,
    const std::vector<std::array<double, 4>>& pred_boxes, double alpha);

/// Detection recall, association accuracy, and their geometric mean per
/// alpha. Recall never penalizes unmatched predictions; association follows
/// the per-true-positive trajectory-consistency construction.
OwtaResult compute_owta(const TrackSet& gt, const TrackSet& pred, const OwtaConfig& cfg);

}  // namespace effowt
