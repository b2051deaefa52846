#pragma once

#include <string>

#include "effowt/config.hpp"

namespace effowt {

/// Appearance-only tracking over a dataset split: ground-truth boxes serve
/// as class-agnostic proposals, embeddings drive the frame-to-frame
/// association. Writes a track file in the evaluator's format.
void run_inference(const ExperimentConfig& cfg, const std::string& checkpoint_base,
                   const std::string& data_dir, const std::string& split,
                   const std::string& out_file, bool quiet = false);

}  // namespace effowt
