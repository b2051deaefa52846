#include "effowt/efficiency.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace effowt {

ParamCounts count_params(const TrackerModel& model) {
  ParamCounts c;
  c.trainable = model.registry().trainable_count();
  c.total = model.registry().total_count();
  return c;
}

int64_t measure_activation_bytes(TrackerModel& model, const ExperimentConfig& cfg,
                                 int64_t iterations) {
  if (iterations < 1) throw Error("measure: iterations must be >= 1");
  int64_t img = cfg.backbone.image_size;
  Rng rng(cfg.data.seed);
  std::vector<double> pixels(static_cast<size_t>(cfg.optimizer.batch * 3 * img * img));
  for (auto& v : pixels) v = rng.uniform(0.0, 1.0);
  Tensor images = Tensor::from_data({cfg.optimizer.batch, 3, img, img}, pixels);
  std::vector<RegionBox> regions;
  for (int64_t b = 0; b < cfg.optimizer.batch; ++b) {
    regions.push_back({b, 4.0, 4.0, img / 2.0, img / 2.0});
    regions.push_back({b, img / 4.0, img / 4.0, img / 3.0, img / 3.0});
  }

  int64_t total = 0;
  for (int64_t it = 0; it < iterations; ++it) {
    GraphRecorder rec;
    auto act = rec.activate();
    Tensor fused = model.forward_features(images);
    HeadOutputs out = model.forward_regions(fused, regions);
    Tensor loss = add(mean_all(out.class_logits), mean_all(out.embeddings));
    backward(loss);
    total += rec.stats().peak_retained_bytes;
    model.registry().zero_grads();
  }
  return total / iterations;
}

EfficiencyReport build_efficiency_report(const ExperimentConfig& cfg, bool measure,
                                         const std::string& only_strategy) {
  const std::vector<Strategy> order = {Strategy::kFull, Strategy::kZeroShot, Strategy::kSide,
                                       Strategy::kSideSim};
  EfficiencyReport report;
  int64_t full_trainable = 0;
  int64_t full_peak = 0;
  for (Strategy s : order) {
    TrackerModel model(cfg.backbone, cfg.side, cfg.head, s, cfg.data.seed);
    EfficiencyRow row;
    row.strategy = strategy_name(s);
    ParamCounts counts = count_params(model);
    row.trainable_params = counts.trainable;
    row.total_params = counts.total;
    if (measure) {
      row.activation_bytes = measure_activation_bytes(model, cfg);
      row.grad_bytes = counts.trainable * 8;
      row.optimizer_bytes = counts.trainable * 16;  // two moment buffers
      row.peak_bytes = row.activation_bytes + row.grad_bytes + row.optimizer_bytes;
    }
    if (s == Strategy::kFull) {
      full_trainable = row.trainable_params;
      full_peak = row.peak_bytes;
    }
    row.param_ratio_vs_full =
        static_cast<double>(row.trainable_params) / static_cast<double>(full_trainable);
    row.memory_ratio_vs_full =
        full_peak > 0 ? static_cast<double>(row.peak_bytes) / static_cast<double>(full_peak) : 0.0;
    report.rows.push_back(row);
  }
  if (!only_strategy.empty()) {
    EfficiencyReport filtered;
    for (const auto& row : report.rows) {
      if (row.strategy == only_strategy) filtered.rows.push_back(row);
    }
    if (filtered.rows.empty()) throw Error("report: unknown strategy '" + only_strategy + "'");
    return filtered;
  }
  return report;
}

void write_efficiency_json(const EfficiencyReport& report, const std::string& path) {
  Json rows = Json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"strategy", r.strategy},
                    {"trainable_params", r.trainable_params},
                    {"total_params", r.total_params},
                    {"param_ratio_vs_full", r.param_ratio_vs_full},
                    {"activation_bytes", r.activation_bytes},
                    {"grad_bytes", r.grad_bytes},
                    {"optimizer_bytes", r.optimizer_bytes},
                    {"peak_bytes", r.peak_bytes},
                    {"memory_ratio_vs_full", r.memory_ratio_vs_full}});
  }
  Json j;
  j["rows"] = rows;
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("report: cannot write " + tmp);
    out << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

void write_efficiency_csv(const EfficiencyReport& report, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("report: cannot write " + tmp);
    out << "strategy,trainable_params,param_ratio,peak_bytes,memory_ratio\n";
    char buf[64];
    for (const auto& r : report.rows) {
      out << r.strategy << "," << r.trainable_params << ",";
      std::snprintf(buf, sizeof(buf), "%.6f", r.param_ratio_vs_full);
      out << buf << "," << r.peak_bytes << ",";
      std::snprintf(buf, sizeof(buf), "%.6f", r.memory_ratio_vs_full);
      out << buf << "\n";
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace effowt
