#pragma once

#include <string>
#include <vector>

#include "effowt/config.hpp"
#include "effowt/image_io.hpp"
#include "effowt/owta.hpp"

namespace effowt {

struct AugPairBox {
  int64_t id = 0;
  std::string cls;
  std::array<double, 4> box{};       // original view
  std::array<double, 4> pair_box{};  // augmented view
};

/// One training image and its augmented partner with shared identities.
struct AugPair {
  std::string video;
  int64_t frame = 0;
  std::string image_path;  // relative to the dataset root
  std::string pair_path;
  std::string augment;  // flip | crop | flip+crop
  std::vector<AugPairBox> boxes;
};

struct DatasetPaths {
  std::string root;
  std::string train_gt;
  std::string eval_gt;
  std::string pairs_manifest;
  std::string meta;

  static DatasetPaths at(const std::string& root);
};

/// Renders moving colored shapes on noise. The train split holds only the
/// known vocabulary; the eval split holds known and unknown shapes. Byte
/// identical for a fixed seed.
void generate_dataset(const DataConfig& cfg, const std::string& out_dir);

std::vector<AugPair> read_pair_manifest(const std::string& path);

std::string frame_image_path(const std::string& root, const std::string& split,
                             const std::string& video, int64_t frame);

}  // namespace effowt
