#include "effowt/owta.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "effowt/assignment.hpp"

namespace effowt {

namespace {

using Json = nlohmann::ordered_json;

constexpr double kCountWeight = 1e6;  // match count dominates IoU tie-break

void validate_record(const TrackRecord& r) {
  if (r.video.empty()) throw Error("track record: empty video name");
  if (r.frame < 0) throw Error("track record: negative frame");
  if (r.bbox[2] <= 0 || r.bbox[3] <= 0) {
    throw Error("track record: box dims must be positive, got w=" + std::to_string(r.bbox[2]) +
                " h=" + std::to_string(r.bbox[3]));
  }
  if (!(r.score >= 0.0 && r.score <= 1.0)) {
    throw Error("track record: score must lie in [0,1]");
  }
}

TrackRecord record_from_json(const Json& j) {
  TrackRecord r;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "video" && k != "frame" && k != "track_id" && k != "bbox" && k != "class" &&
        k != "score") {
      throw Error("track record: unknown field '" + k + "'");
    }
  }
  r.video = j.at("video").get<std::string>();
  r.frame = j.at("frame").get<int64_t>();
  r.track_id = j.at("track_id").get<int64_t>();
  auto bb = j.at("bbox");
  if (!bb.is_array() || bb.size() != 4) throw Error("track record: bbox must have 4 entries");
  for (int i = 0; i < 4; ++i) r.bbox[static_cast<size_t>(i)] = bb[static_cast<size_t>(i)].get<double>();
  r.cls = j.at("class").get<std::string>();
  r.score = j.value("score", 1.0);
  validate_record(r);
  return r;
}

}  // namespace

void TrackSet::insert(TrackRecord rec) {
  validate_record(rec);
  auto& frame = videos[rec.video][rec.frame];
  for (const auto& existing : frame) {
    if (existing.track_id == rec.track_id) {
      throw Error("track set: duplicate (video,frame,track_id) = (" + rec.video + "," +
                  std::to_string(rec.frame) + "," + std::to_string(rec.track_id) + ")");
    }
  }
  frame.push_back(std::move(rec));
}

int64_t TrackSet::record_count() const {
  int64_t n = 0;
  for (const auto& [v, frames] : videos) {
    for (const auto& [f, recs] : frames) n += static_cast<int64_t>(recs.size());
  }
  return n;
}

TrackSet parse_track_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("track file: cannot open " + path);
  TrackSet ts;
  std::string line;
  int64_t line_no = 0;
  std::vector<std::string> bad;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ts.insert(record_from_json(Json::parse(line)));
    } catch (const std::exception& e) {
      bad.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!bad.empty()) {
    std::string msg = "track file " + path + ": " + std::to_string(bad.size()) + " bad line(s)";
    for (size_t i = 0; i < bad.size() && i < 10; ++i) msg += "\n  " + bad[i];
    throw Error(msg);
  }
  return ts;
}

std::string track_record_to_json(const TrackRecord& rec) {
  Json j;
  j["video"] = rec.video;
  j["frame"] = rec.frame;
  j["track_id"] = rec.track_id;
  j["bbox"] = rec.bbox;
  j["class"] = rec.cls;
  j["score"] = rec.score;
  return j.dump();
}

void write_track_file(const TrackSet& ts, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("track file: cannot write " + tmp);
    for (const auto& [v, frames] : ts.videos) {
      for (const auto& [f, recs] : frames) {
        for (const auto& r : recs) out << track_record_to_json(r) << "\n";
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double x1 = std::max(a[0], b[0]);
  double y1 = std::max(a[1], b[1]);
  double x2 = std::min(a[0] + a[2], b[0] + b[2]);
  double y2 = std::min(a[1] + a[3], b[1] + b[3]);
  double iw = std::max(0.0, x2 - x1);
  double ih = std::max(0.0, y2 - y1);
  double inter = iw * ih;
  double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<double> default_alpha_grid() {
  std::vector<double> alphas;
  for (int i = 1; i <= 19; ++i) alphas.push_back(0.05 * i);
  return alphas;
}

EvalSplit split_from_string(const std::string& s) {
  if (s == "known") return EvalSplit::kKnown;
  if (s == "unknown") return EvalSplit::kUnknown;
  if (s == "all") return EvalSplit::kAll;
  throw Error("unknown split '" + s + "' (expected known|unknown|all)");
}

std::string split_name(EvalSplit s) {
  switch (s) {
    case EvalSplit::kKnown: return "known";
    case EvalSplit::kUnknown: return "unknown";
    case EvalSplit::kAll: return "all";
  }
  return "?";
}

std::vector<std::pair<int64_t, int64_t>> match_frame(
    const std::vector<std::array<double, 4>>& gt_boxes,
    const std::vector<std::array<double, 4>>& pred_boxes, double alpha) {
  int64_t n = static_cast<int64_t>(gt_boxes.size());
  int64_t m = static_cast<int64_t>(pred_boxes.size());
  std::vector<std::pair<int64_t, int64_t>> result;
  if (n == 0 || m == 0) return result;
  std::vector<double> weights(static_cast<size_t>(n * m), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      double iou = box_iou(gt_boxes[static_cast<size_t>(i)], pred_boxes[static_cast<size_t>(j)]);
      if (iou >= alpha) weights[static_cast<size_t>(i * m + j)] = kCountWeight + iou;
    }
  }
  auto match = max_weight_assignment(weights, n, m);
  for (int64_t i = 0; i < n; ++i) {
    int64_t j = match[static_cast<size_t>(i)];
    if (j >= 0 && weights[static_cast<size_t>(i * m + j)] > 0.0) result.emplace_back(i, j);
  }
  return result;
}

OwtaResult compute_owta(const TrackSet& gt, const TrackSet& pred, const OwtaConfig& cfg) {
  if (cfg.alphas.empty()) throw Error("owta: empty alpha grid");
  double prev = 0.0;
  for (double a : cfg.alphas) {
    if (!(a > 0.0 && a < 1.0) || a <= prev) {
      throw Error("owta: alphas must be strictly increasing within (0,1)");
    }
    prev = a;
  }
  auto in_split = [&](const std::string& cls) {
    switch (cfg.split) {
      case EvalSplit::kAll: return true;
      case EvalSplit::kKnown: return cfg.known_classes.count(cls) > 0;
      case EvalSplit::kUnknown: return cfg.known_classes.count(cls) == 0;
    }
    return true;
  };

  int64_t total_gt = 0;
  for (const auto& [v, frames] : gt.videos) {
    for (const auto& [f, recs] : frames) {
      for (const auto& r : recs) total_gt += in_split(r.cls) ? 1 : 0;
    }
  }
  if (total_gt == 0) {
    throw Error("owta: no ground truth after '" + split_name(cfg.split) +
                "' split filter; recall undefined");
  }

  OwtaResult result;
  for (double alpha : cfg.alphas) {
    int64_t tp_total = 0;
    double ass_sum = 0.0;

    for (const auto& [video, frames] : gt.videos) {
      const auto* pred_frames_map = [&]() -> const std::map<int64_t, std::vector<TrackRecord>>* {
        auto it = pred.videos.find(video);
        return it == pred.videos.end() ? nullptr : &it->second;
      }();

      std::map<int64_t, int64_t> gt_appearances;    // gt id -> annotated frames present
      std::map<int64_t, int64_t> pred_appearances;  // pred id -> annotated frames present
      std::map<int64_t, int64_t> pred_matched;      // pred id -> frames matched to any gt
      std::map<std::pair<int64_t, int64_t>, int64_t> pair_tp;

      // only annotated frames participate; sparse annotation skips the rest
      for (const auto& [frame, recs] : frames) {
        std::vector<const TrackRecord*> gt_recs;
        for (const auto& r : recs) {
          if (in_split(r.cls)) gt_recs.push_back(&r);
        }
        const std::vector<TrackRecord>* pred_recs = nullptr;
        if (pred_frames_map) {
          auto it = pred_frames_map->find(frame);
          if (it != pred_frames_map->end()) pred_recs = &it->second;
        }
        for (const auto* r : gt_recs) gt_appearances[r->track_id] += 1;
        if (pred_recs) {
          for (const auto& p : *pred_recs) pred_appearances[p.track_id] += 1;
        }
        if (gt_recs.empty() || pred_recs == nullptr) continue;

        std::vector<std::array<double, 4>> gb, pb;
        for (const auto* r : gt_recs) gb.push_back(r->bbox);
        for (const auto& p : *pred_recs) pb.push_back(p.bbox);
        for (auto [gi, pi] : match_frame(gb, pb, alpha)) {
          int64_t gid = gt_recs[static_cast<size_t>(gi)]->track_id;
          int64_t pid = (*pred_recs)[static_cast<size_t>(pi)].track_id;
          pair_tp[{gid, pid}] += 1;
          pred_matched[pid] += 1;
        }
      }

      for (const auto& [pair, tpa] : pair_tp) {
        auto [gid, pid] = pair;
        int64_t fna = gt_appearances[gid] - tpa;
        int64_t fpa = cfg.assoc_fp_penalize_unmatched ? pred_appearances[pid] - tpa
                                                      : pred_matched[pid] - tpa;
        double score = static_cast<double>(tpa) / static_cast<double>(tpa + fna + fpa);
        ass_sum += static_cast<double>(tpa) * score;  // one term per TP instance
        tp_total += tpa;
      }
    }

    AlphaMetrics am;
    am.alpha = alpha;
    am.tp = tp_total;
    am.fn = total_gt - tp_total;
    am.det_re = static_cast<double>(tp_total) / static_cast<double>(total_gt);
    am.ass_acc = tp_total > 0 ? ass_sum / static_cast<double>(tp_total) : 0.0;
    am.owta = std::sqrt(am.det_re * am.ass_acc);
    result.per_alpha.push_back(am);
  }

  for (const auto& am : result.per_alpha) {
    result.det_re += am.det_re;
    result.ass_acc += am.ass_acc;
    result.owta += am.owta;
  }
  double k = static_cast<double>(result.per_alpha.size());
  result.det_re /= k;
  result.ass_acc /= k;
  result.owta /= k;
  return result;
}

}  // namespace effowt
