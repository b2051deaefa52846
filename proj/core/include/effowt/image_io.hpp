#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "effowt/tensor.hpp"

namespace effowt {

/// 8-bit image, interleaved row-major; 1 channel (PGM) or 3 (PPM).
struct Image {
  int64_t width = 0;
  int64_t height = 0;
  int64_t channels = 1;
  std::vector<uint8_t> pixels;

  static Image create(int64_t w, int64_t h, int64_t c, uint8_t fill = 0);
  uint8_t& at(int64_t y, int64_t x, int64_t c);
  uint8_t at(int64_t y, int64_t x, int64_t c) const;
};

/// Binary P5/P6 depending on channel count; write-temp-then-rename.
void write_pnm(const Image& img, const std::string& path);
Image read_pnm(const std::string& path);

/// [3,H,W] doubles in [0,1]; grayscale images replicate the channel.
Tensor image_to_tensor(const Image& img);

}  // namespace effowt
