#pragma once

#include <string>
#include <vector>

#include "effowt/config.hpp"
#include "effowt/model.hpp"

namespace effowt {

struct ParamCounts {
  int64_t trainable = 0;
  int64_t total = 0;
};

ParamCounts count_params(const TrackerModel& model);

struct EfficiencyRow {
  std::string strategy;
  int64_t trainable_params = 0;
  int64_t total_params = 0;
  double param_ratio_vs_full = 0.0;
  // memory decomposition; peak = activation + grad + optimizer
  int64_t activation_bytes = 0;
  int64_t grad_bytes = 0;
  int64_t optimizer_bytes = 0;
  int64_t peak_bytes = 0;
  double memory_ratio_vs_full = 0.0;
};

struct EfficiencyReport {
  std::vector<EfficiencyRow> rows;
};

/// Retained-activation bytes of one instrumented train step, averaged over
/// `iterations` runs (identical under a fixed seed by construction).
int64_t measure_activation_bytes(TrackerModel& model, const ExperimentConfig& cfg,
                                 int64_t iterations = 3);

/// Builds the four-strategy comparison. When measure is false only the
/// parameter columns are filled (memory columns stay zero).
EfficiencyReport build_efficiency_report(const ExperimentConfig& cfg, bool measure,
                                         const std::string& only_strategy = "");

void write_efficiency_json(const EfficiencyReport& report, const std::string& path);
/// CSV columns: strategy,trainable_params,param_ratio,peak_bytes,memory_ratio
void write_efficiency_csv(const EfficiencyReport& report, const std::string& path);

}  // namespace effowt
