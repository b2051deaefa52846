#include "effowt/image_io.hpp"

#include <filesystem>
#include <fstream>

namespace effowt {

Image Image::create(int64_t w, int64_t h, int64_t c, uint8_t fill) {
  if (w <= 0 || h <= 0 || (c != 1 && c != 3)) throw Error("image: bad dimensions");
  Image img;
  img.width = w;
  img.height = h;
  img.channels = c;
  img.pixels.assign(static_cast<size_t>(w * h * c), fill);
  return img;
}

uint8_t& Image::at(int64_t y, int64_t x, int64_t c) {
  return pixels[static_cast<size_t>((y * width + x) * channels + c)];
}

uint8_t Image::at(int64_t y, int64_t x, int64_t c) const {
  return pixels[static_cast<size_t>((y * width + x) * channels + c)];
}

void write_pnm(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3) throw Error("pnm: 1 or 3 channels only");
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("pnm: cannot write " + tmp);
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw Error("pnm: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("pnm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P6") throw Error("pnm: unsupported format in " + path);
  int64_t w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (w <= 0 || h <= 0 || maxval != 255) throw Error("pnm: bad header in " + path);
  in.get();  // single whitespace after header
  Image img = Image::create(w, h, magic == "P5" ? 1 : 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw Error("pnm: truncated pixel data in " + path);
  return img;
}

Tensor image_to_tensor(const Image& img) {
  int64_t h = img.height, w = img.width;
  std::vector<double> data(static_cast<size_t>(3 * h * w));
  for (int64_t c = 0; c < 3; ++c) {
    int64_t src_c = img.channels == 3 ? c : 0;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        data[static_cast<size_t>((c * h + y) * w + x)] =
            static_cast<double>(img.at(y, x, src_c)) / 255.0;
      }
    }
  }
  return Tensor::from_data({3, h, w}, std::move(data));
}

}  // namespace effowt
