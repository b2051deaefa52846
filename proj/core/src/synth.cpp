#include "effowt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "effowt/rng.hpp"

namespace effowt {

namespace {

namespace fs = std::filesystem;

struct Instance {
  int64_t id = 0;
  std::string shape;
  uint8_t color[3] = {0, 0, 0};
  double cx0 = 0, cy0 = 0;
  double vx = 0, vy = 0;
  int64_t size = 6;  // half extent
};

// triangle-wave reflection keeps centers inside [lo, hi]
double reflect(double p, double lo, double hi) {
  double range = hi - lo;
  double m = std::fmod(p - lo, 2.0 * range);
  if (m < 0) m += 2.0 * range;
  return lo + (m <= range ? m : 2.0 * range - m);
}

void render_shape(Image& img, const std::string& shape, int64_t cx, int64_t cy, int64_t s,
                  const uint8_t color[3]) {
  auto put = [&](int64_t x, int64_t y) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int64_t c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
  };
  if (shape == "square") {
    for (int64_t dy = -s; dy <= s; ++dy) {
      for (int64_t dx = -s; dx <= s; ++dx) put(cx + dx, cy + dy);
    }
  } else if (shape == "circle") {
    for (int64_t dy = -s; dy <= s; ++dy) {
      for (int64_t dx = -s; dx <= s; ++dx) {
        if (dx * dx + dy * dy <= s * s) put(cx + dx, cy + dy);
      }
    }
  } else if (shape == "triangle") {
    for (int64_t dy = -s; dy <= s; ++dy) {
      int64_t hw = ((dy + s) * s) / (2 * s);  // apex at the top row
      for (int64_t dx = -hw; dx <= hw; ++dx) put(cx + dx, cy + dy);
    }
    // ensure the bottom row spans the full width so the box stays tight
    for (int64_t dx = -s; dx <= s; ++dx) put(cx + dx, cy + s);
  } else if (shape == "cross") {
    for (int64_t d = -s; d <= s; ++d) {
      for (int64_t t = -1; t <= 1; ++t) {
        put(cx + d, cy + t);
        put(cx + t, cy + d);
      }
    }
  } else {
    throw Error("synth: unknown shape '" + shape + "'");
  }
}

std::array<double, 4> shape_box(int64_t cx, int64_t cy, int64_t s) {
  return {static_cast<double>(cx - s), static_cast<double>(cy - s),
          static_cast<double>(2 * s + 1), static_cast<double>(2 * s + 1)};
}

std::vector<Instance> make_instances(Rng& rng, const std::vector<std::string>& pool, int64_t count,
                                     int64_t image_size) {
  std::vector<Instance> out;
  for (int64_t i = 0; i < count; ++i) {
    Instance inst;
    inst.id = i + 1;
    inst.shape = pool[static_cast<size_t>(i % static_cast<int64_t>(pool.size()))];
    // bright, saturated, well separated colors
    inst.color[0] = static_cast<uint8_t>(96 + rng.uniform_int(160));
    inst.color[1] = static_cast<uint8_t>(96 + rng.uniform_int(160));
    inst.color[2] = static_cast<uint8_t>(96 + rng.uniform_int(160));
    inst.color[static_cast<size_t>(rng.uniform_int(3))] = 255;
    inst.size = 5 + rng.uniform_int(3);
    double lo = static_cast<double>(inst.size + 1);
    double hi = static_cast<double>(image_size - inst.size - 2);
    for (int attempt = 0; attempt < 100; ++attempt) {
      inst.cx0 = rng.uniform(lo, hi);
      inst.cy0 = rng.uniform(lo, hi);
      bool ok = true;
      for (const auto& other : out) {
        double dx = inst.cx0 - other.cx0, dy = inst.cy0 - other.cy0;
        double min_dist = static_cast<double>(inst.size + other.size + 4);
        if (dx * dx + dy * dy < min_dist * min_dist) ok = false;
      }
      if (ok) break;
    }
    inst.vx = rng.uniform(1.0, 4.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    inst.vy = rng.uniform(1.0, 4.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    out.push_back(inst);
  }
  return out;
}

Image render_frame(Rng& noise_rng, const std::vector<Instance>& instances, int64_t t,
                   int64_t image_size, TrackSet* gt, const std::string& video, int64_t frame,
                   std::vector<std::pair<int64_t, std::array<double, 4>>>* boxes_out) {
  Image img = Image::create(image_size, image_size, 3);
  for (auto& px : img.pixels) px = static_cast<uint8_t>(noise_rng.uniform_int(40));
  for (const auto& inst : instances) {
    double lo = static_cast<double>(inst.size + 1);
    double hi = static_cast<double>(image_size - inst.size - 2);
    int64_t cx = static_cast<int64_t>(std::lround(reflect(inst.cx0 + inst.vx * t, lo, hi)));
    int64_t cy = static_cast<int64_t>(std::lround(reflect(inst.cy0 + inst.vy * t, lo, hi)));
    render_shape(img, inst.shape, cx, cy, inst.size, inst.color);
    auto box = shape_box(cx, cy, inst.size);
    if (gt) {
      TrackRecord rec;
      rec.video = video;
      rec.frame = frame;
      rec.track_id = inst.id;
      rec.bbox = box;
      rec.cls = inst.shape;
      rec.score = 1.0;
      gt->insert(rec);
    }
    if (boxes_out) boxes_out->push_back({inst.id, box});
  }
  return img;
}

Image flip_image(const Image& img) {
  Image out = Image::create(img.width, img.height, img.channels);
  for (int64_t y = 0; y < img.height; ++y) {
    for (int64_t x = 0; x < img.width; ++x) {
      for (int64_t c = 0; c < img.channels; ++c) {
        out.at(y, x, c) = img.at(y, img.width - 1 - x, c);
      }
    }
  }
  return out;
}

Image crop_resize_image(const Image& img, int64_t cx0, int64_t cy0, int64_t cw, int64_t ch) {
  Image out = Image::create(img.width, img.height, img.channels);
  for (int64_t y = 0; y < img.height; ++y) {
    int64_t sy = cy0 + (y * ch) / img.height;
    for (int64_t x = 0; x < img.width; ++x) {
      int64_t sx = cx0 + (x * cw) / img.width;
      for (int64_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  return out;
}

std::string pair_json(const AugPair& p) {
  Json j;
  j["video"] = p.video;
  j["frame"] = p.frame;
  j["image"] = p.image_path;
  j["pair"] = p.pair_path;
  j["augment"] = p.augment;
  Json boxes = Json::array();
  for (const auto& b : p.boxes) {
    boxes.push_back(
        {{"id", b.id}, {"class", b.cls}, {"box", b.box}, {"pair_box", b.pair_box}});
  }
  j["boxes"] = boxes;
  return j.dump();
}

}  // namespace

DatasetPaths DatasetPaths::at(const std::string& root) {
  DatasetPaths p;
  p.root = root;
  p.train_gt = root + "/train/gt.ndjson";
  p.eval_gt = root + "/eval/gt.ndjson";
  p.pairs_manifest = root + "/train/pairs.ndjson";
  p.meta = root + "/meta.json";
  return p;
}

std::string frame_image_path(const std::string& root, const std::string& split,
                             const std::string& video, int64_t frame) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%04lld.ppm", static_cast<long long>(frame));
  return root + "/" + split + "/videos/" + video + "/" + buf;
}

void generate_dataset(const DataConfig& cfg, const std::string& out_dir) {
  for (const auto& u : cfg.unknown_shapes) {
    if (std::find(cfg.known_shapes.begin(), cfg.known_shapes.end(), u) !=
        cfg.known_shapes.end()) {
      throw Error("synth: shape '" + u + "' in both known and unknown vocabularies");
    }
  }
  int64_t s = cfg.image_size;
  Rng root_rng(cfg.seed);
  DatasetPaths paths = DatasetPaths::at(out_dir);
  fs::create_directories(out_dir + "/train/pairs");
  fs::create_directories(out_dir + "/eval");

  TrackSet train_gt, eval_gt;
  std::vector<AugPair> pairs;

  // train split: known shapes only, >= 3 instances per video so the
  // association batches carry real negatives
  int64_t train_instances = std::max<int64_t>(3, static_cast<int64_t>(cfg.known_shapes.size()));
  for (int64_t v = 0; v < cfg.n_videos; ++v) {
    char name[32];
    std::snprintf(name, sizeof(name), "train_%03lld", static_cast<long long>(v));
    std::string video = name;
    fs::create_directories(out_dir + "/train/videos/" + video);
    Rng vrng = root_rng.fork(1000 + static_cast<uint64_t>(v));
    auto instances = make_instances(vrng, cfg.known_shapes, train_instances, s);
    for (int64_t f = 0; f < cfg.frames_per_video; ++f) {
      std::vector<std::pair<int64_t, std::array<double, 4>>> boxes;
      Image img = render_frame(vrng, instances, f, s, &train_gt, video, f, &boxes);
      std::string img_path = frame_image_path(out_dir, "train", video, f);
      write_pnm(img, img_path);

      // augmented partner
      AugPair pair;
      pair.video = video;
      pair.frame = f;
      pair.image_path = img_path.substr(out_dir.size() + 1);
      char pbuf[64];
      std::snprintf(pbuf, sizeof(pbuf), "train/pairs/%s_f%04lld.ppm", video.c_str(),
                    static_cast<long long>(f));
      pair.pair_path = pbuf;

      double pick = vrng.uniform();
      bool do_flip = pick < 0.4 || pick >= 0.7;
      bool do_crop = pick >= 0.4;
      auto map_box = [&](std::array<double, 4> b, bool flip) {
        if (flip) b[0] = static_cast<double>(s) - b[0] - b[2];
        return b;
      };
      int64_t cw = 0, ch = 0, cx0 = 0, cy0 = 0;
      if (do_crop) {
        cw = static_cast<int64_t>(std::lround(static_cast<double>(s) * vrng.uniform(0.7, 0.9)));
        ch = static_cast<int64_t>(std::lround(static_cast<double>(s) * vrng.uniform(0.7, 0.9)));
        cx0 = vrng.uniform_int(s - cw + 1);
        cy0 = vrng.uniform_int(s - ch + 1);
      }
      auto crop_box = [&](std::array<double, 4> b) -> std::pair<bool, std::array<double, 4>> {
        double x0 = b[0] - static_cast<double>(cx0);
        double y0 = b[1] - static_cast<double>(cy0);
        if (x0 < 0 || y0 < 0 || x0 + b[2] > static_cast<double>(cw) ||
            y0 + b[3] > static_cast<double>(ch)) {
          return {false, b};  // partially outside the crop window
        }
        double sx = static_cast<double>(s) / static_cast<double>(cw);
        double sy = static_cast<double>(s) / static_cast<double>(ch);
        return {true, {x0 * sx, y0 * sy, b[2] * sx, b[3] * sy}};
      };

      auto build_boxes = [&](bool flip, bool crop) {
        std::vector<AugPairBox> out;
        for (const auto& [id, box] : boxes) {
          AugPairBox pb;
          pb.id = id;
          pb.cls = instances[static_cast<size_t>(id - 1)].shape;
          pb.box = box;
          std::array<double, 4> m = map_box(box, flip);
          if (crop) {
            auto [ok, cropped] = crop_box(m);
            if (!ok) continue;
            m = cropped;
          }
          pb.pair_box = m;
          out.push_back(pb);
        }
        return out;
      };

      pair.boxes = build_boxes(do_flip, do_crop);
      if (do_crop && static_cast<int64_t>(pair.boxes.size()) < 2) {
        // crop dropped too many identities; fall back to a plain flip
        do_crop = false;
        do_flip = true;
        pair.boxes = build_boxes(true, false);
      }
      pair.augment = do_flip && do_crop ? "flip+crop" : (do_crop ? "crop" : "flip");

      Image aug = do_flip ? flip_image(img) : img;
      if (do_crop) aug = crop_resize_image(aug, cx0, cy0, cw, ch);
      write_pnm(aug, out_dir + "/" + pair.pair_path);
      pairs.push_back(std::move(pair));
    }
  }

  // eval split: known and unknown shapes
  std::vector<std::string> eval_pool;
  for (size_t i = 0; i < std::max(cfg.known_shapes.size(), cfg.unknown_shapes.size()); ++i) {
    if (i < cfg.known_shapes.size()) eval_pool.push_back(cfg.known_shapes[i]);
    if (i < cfg.unknown_shapes.size()) eval_pool.push_back(cfg.unknown_shapes[i]);
  }
  int64_t eval_instances =
      std::max<int64_t>(2, std::min<int64_t>(4, static_cast<int64_t>(eval_pool.size())));
  for (int64_t v = 0; v < cfg.n_videos; ++v) {
    char name[32];
    std::snprintf(name, sizeof(name), "eval_%03lld", static_cast<long long>(v));
    std::string video = name;
    fs::create_directories(out_dir + "/eval/videos/" + video);
    Rng vrng = root_rng.fork(2000 + static_cast<uint64_t>(v));
    auto instances = make_instances(vrng, eval_pool, eval_instances, s);
    for (int64_t f = 0; f < cfg.frames_per_video; ++f) {
      Image img = render_frame(vrng, instances, f, s, &eval_gt, video, f, nullptr);
      write_pnm(img, frame_image_path(out_dir, "eval", video, f));
    }
  }

  // the train split must never contain unknown classes
  for (const auto& [video, frames] : train_gt.videos) {
    for (const auto& [frame, recs] : frames) {
      for (const auto& r : recs) {
        if (std::find(cfg.known_shapes.begin(), cfg.known_shapes.end(), r.cls) ==
            cfg.known_shapes.end()) {
          throw Error("synth: unknown class '" + r.cls + "' leaked into the train split");
        }
      }
    }
  }

  write_track_file(train_gt, paths.train_gt);
  write_track_file(eval_gt, paths.eval_gt);
  {
    std::string tmp = paths.pairs_manifest + ".tmp";
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("synth: cannot write " + tmp);
    for (const auto& p : pairs) out << pair_json(p) << "\n";
    out.close();
    fs::rename(tmp, paths.pairs_manifest);
  }
  {
    Json meta;
    meta["image_size"] = cfg.image_size;
    meta["n_videos"] = cfg.n_videos;
    meta["frames_per_video"] = cfg.frames_per_video;
    meta["known_shapes"] = cfg.known_shapes;
    meta["unknown_shapes"] = cfg.unknown_shapes;
    meta["seed"] = cfg.seed;
    std::string tmp = paths.meta + ".tmp";
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("synth: cannot write " + tmp);
    out << meta.dump(2) << "\n";
    out.close();
    fs::rename(tmp, paths.meta);
  }
}

std::vector<AugPair> read_pair_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("synth: cannot open pair manifest " + path);
  std::vector<AugPair> pairs;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const std::exception& e) {
      throw Error("pair manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    AugPair p;
    p.video = j.at("video").get<std::string>();
    p.frame = j.at("frame").get<int64_t>();
    p.image_path = j.at("image").get<std::string>();
    p.pair_path = j.at("pair").get<std::string>();
    p.augment = j.at("augment").get<std::string>();
    for (const Json& b : j.at("boxes")) {
      AugPairBox pb;
      pb.id = b.at("id").get<int64_t>();
      pb.cls = b.at("class").get<std::string>();
      auto arr = b.at("box");
      for (int i = 0; i < 4; ++i) pb.box[static_cast<size_t>(i)] = arr[static_cast<size_t>(i)].get<double>();
      auto arr2 = b.at("pair_box");
      for (int i = 0; i < 4; ++i) pb.pair_box[static_cast<size_t>(i)] = arr2[static_cast<size_t>(i)].get<double>();
      p.boxes.push_back(pb);
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

}  // namespace effowt
