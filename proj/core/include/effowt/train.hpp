#pragma once

#include <map>
#include <string>
#include <vector>

#include "effowt/config.hpp"
#include "effowt/model.hpp"

namespace effowt {

struct AdamParams {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer over the registry's trainable parameters.
/// step() consumes gradients and zeroes them.
class Adam {
 public:
  explicit Adam(AdamParams p) : p_(p) {}
  void step(ParamRegistry& reg);
  int64_t state_bytes() const;

 private:
  AdamParams p_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

struct TrainOutput {
  std::vector<double> losses;             // one entry per step
  std::vector<int64_t> activation_bytes;  // retained bytes per step
  int64_t peak_activation_bytes = 0;
  double final_loss = 0.0;      // last step
  double tail_mean_loss = 0.0;  // mean over the last 10% of steps
  std::string checkpoint_base;
};

/// Classification + augmentation-pair embedding training on a generated
/// dataset. Writes checkpoint.{bin,json}, loss_curve.csv, train_summary.json
/// under out_dir.
TrainOutput train_model(const ExperimentConfig& cfg, const std::string& data_dir,
                        const std::string& out_dir, bool quiet = false);

}  // namespace effowt
