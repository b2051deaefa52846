#include "effowt/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "effowt/checkpoint.hpp"
#include "effowt/image_io.hpp"
#include "effowt/owta.hpp"
#include "effowt/synth.hpp"

namespace effowt {

void Adam::step(ParamRegistry& reg) {
  ++t_;
  double bc1 = 1.0 - std::pow(p_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(p_.beta2, static_cast<double>(t_));
  for (auto& [name, param] : reg.params()) {
    if (!param.trainable) continue;
    const std::vector<double>* g = param.tensor.grad();
    if (!g) continue;
    auto& [m, v] = state_[name];
    if (m.empty()) {
      m.assign(g->size(), 0.0);
      v.assign(g->size(), 0.0);
    }
    auto& w = param.tensor.mutable_data();
    for (size_t i = 0; i < g->size(); ++i) {
      double gi = (*g)[i];
      m[i] = p_.beta1 * m[i] + (1.0 - p_.beta1) * gi;
      v[i] = p_.beta2 * v[i] + (1.0 - p_.beta2) * gi * gi;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= p_.lr * mhat / (std::sqrt(vhat) + p_.eps);
    }
    param.tensor.zero_grad();
  }
}

int64_t Adam::state_bytes() const {
  int64_t n = 0;
  for (const auto& [name, mv] : state_) {
    n += static_cast<int64_t>((mv.first.size() + mv.second.size()) * sizeof(double));
  }
  return n;
}

namespace {

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  return neg(mean_all(take_per_row(log_softmax(logits, -1), targets)));
}

double iou_xywh(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  return box_iou(a, b);
}

}  // namespace

TrainOutput train_model(const ExperimentConfig& cfg, const std::string& data_dir,
                        const std::string& out_dir, bool quiet) {
  DatasetPaths paths = DatasetPaths::at(data_dir);
  {
    std::ifstream meta_in(paths.meta);
    if (!meta_in) throw Error("train: dataset meta not found at " + paths.meta);
    Json meta = Json::parse(meta_in);
    if (meta.at("image_size").get<int64_t>() != cfg.backbone.image_size) {
      throw Error("train: dataset image_size " + meta.at("image_size").dump() +
                  " does not match backbone image_size " +
                  std::to_string(cfg.backbone.image_size));
    }
  }
  auto pairs = read_pair_manifest(paths.pairs_manifest);
  if (pairs.empty()) throw Error("train: empty pair manifest");

  std::filesystem::create_directories(out_dir);
  TrackerModel model(cfg.backbone, cfg.side, cfg.head, cfg.strategy_enum(), cfg.data.seed);
  Adam adam({cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2, 1e-8});

  std::vector<std::string> classes = cfg.data.known_shapes;
  std::sort(classes.begin(), classes.end());
  std::unordered_map<std::string, int64_t> class_index;
  for (size_t i = 0; i < classes.size(); ++i) class_index[classes[i]] = static_cast<int64_t>(i);
  int64_t background = static_cast<int64_t>(classes.size());
  if (background != cfg.head.num_classes) {
    // head width follows the known vocabulary
  }

  int64_t img_size = cfg.backbone.image_size;
  std::unordered_map<std::string, Tensor> image_cache;
  auto load_image = [&](const std::string& rel) {
    auto it = image_cache.find(rel);
    if (it != image_cache.end()) return it->second;
    Tensor t = image_to_tensor(read_pnm(data_dir + "/" + rel));
    image_cache.emplace(rel, t);
    return t;
  };

  Rng bg_rng(cfg.data.seed ^ 0x9E3779B9ULL);
  TrainOutput out;
  out.checkpoint_base = out_dir + "/checkpoint";

  for (int64_t step = 0; step < cfg.optimizer.steps; ++step) {
    std::vector<const AugPair*> batch;
    for (int64_t b = 0; b < cfg.optimizer.batch; ++b) {
      batch.push_back(&pairs[static_cast<size_t>((step * cfg.optimizer.batch + b) %
                                                 static_cast<int64_t>(pairs.size()))]);
    }

    // stack original+augmented images: [2B,3,H,W]
    std::vector<double> image_data;
    image_data.reserve(static_cast<size_t>(2 * cfg.optimizer.batch * 3 * img_size * img_size));
    for (const AugPair* p : batch) {
      const auto& a = load_image(p->image_path).data();
      image_data.insert(image_data.end(), a.begin(), a.end());
      const auto& b = load_image(p->pair_path).data();
      image_data.insert(image_data.end(), b.begin(), b.end());
    }
    Tensor images = Tensor::from_data(
        {2 * cfg.optimizer.batch, 3, img_size, img_size}, std::move(image_data));

    std::vector<RegionBox> regions;
    std::vector<int64_t> labels;
    struct PairRows {
      std::vector<int64_t> view_a, view_b, ids;
    };
    std::vector<PairRows> pair_rows;
    for (size_t pi = 0; pi < batch.size(); ++pi) {
      const AugPair& p = *batch[pi];
      int64_t batch_a = static_cast<int64_t>(2 * pi);
      int64_t batch_b = batch_a + 1;
      PairRows rows;
      for (const auto& b : p.boxes) {
        rows.view_a.push_back(static_cast<int64_t>(regions.size()));
        regions.push_back({batch_a, b.box[0], b.box[1], b.box[2], b.box[3]});
        labels.push_back(class_index.at(b.cls));
        rows.view_b.push_back(static_cast<int64_t>(regions.size()));
        regions.push_back({batch_b, b.pair_box[0], b.pair_box[1], b.pair_box[2], b.pair_box[3]});
        labels.push_back(class_index.at(b.cls));
        rows.ids.push_back(b.id);
      }
      // a background sample from the original view when one fits
      for (int attempt = 0; attempt < 4; ++attempt) {
        double bw = bg_rng.uniform(8.0, 16.0);
        double bh = bg_rng.uniform(8.0, 16.0);
        double bx = bg_rng.uniform(0.0, static_cast<double>(img_size) - bw - 1.0);
        double by = bg_rng.uniform(0.0, static_cast<double>(img_size) - bh - 1.0);
        bool clear = true;
        for (const auto& b : p.boxes) {
          if (iou_xywh({bx, by, bw, bh}, b.box) > 0.1) clear = false;
        }
        if (clear) {
          regions.push_back({batch_a, bx, by, bw, bh});
          labels.push_back(background);
          break;
        }
      }
      pair_rows.push_back(std::move(rows));
    }

    GraphRecorder rec;
    auto act = rec.activate();
    StrictFiniteGuard strict;
    Tensor loss;
    try {
      Tensor fused = model.forward_features(images);
      HeadOutputs head_out = model.forward_regions(fused, regions);
      Tensor cls_loss = cross_entropy(head_out.class_logits, labels);
      Tensor reid_loss;
      for (const auto& rows : pair_rows) {
        Tensor va = gather(head_out.embeddings, 0, rows.view_a);
        Tensor vb = gather(head_out.embeddings, 0, rows.view_b);
        Tensor l = reid_contrastive_loss(va, vb, rows.ids, cfg.loss.temperature);
        reid_loss = reid_loss.defined() ? add(reid_loss, l) : l;
      }
      reid_loss = mul_scalar(reid_loss, 1.0 / static_cast<double>(pair_rows.size()));
      loss = add(mul_scalar(cls_loss, cfg.loss.cls_weight),
                 mul_scalar(reid_loss, cfg.loss.reid_weight));
      backward(loss);
    } catch (const Error& e) {
      throw Error("train step " + std::to_string(step) + ": " + e.what());
    }
    adam.step(model.registry());

    double loss_val = loss.item();
    int64_t bytes = rec.stats().peak_retained_bytes;
    out.losses.push_back(loss_val);
    out.activation_bytes.push_back(bytes);
    out.peak_activation_bytes = std::max(out.peak_activation_bytes, bytes);
    if (!quiet && (step % 25 == 0 || step + 1 == cfg.optimizer.steps)) {
      std::printf("step %5lld  loss %.6f  retained %lld bytes\n", static_cast<long long>(step),
                  loss_val, static_cast<long long>(bytes));
    }
  }

  if (!out.losses.empty()) {
    out.final_loss = out.losses.back();
    size_t tail = std::max<size_t>(1, out.losses.size() / 10);
    double acc = 0.0;
    for (size_t i = out.losses.size() - tail; i < out.losses.size(); ++i) acc += out.losses[i];
    out.tail_mean_loss = acc / static_cast<double>(tail);
  }

  save_checkpoint(model.registry(), out.checkpoint_base);
  {
    std::string tmp = out_dir + "/loss_curve.csv.tmp";
    std::ofstream csv(tmp, std::ios::trunc);
    csv << "step,loss,activation_bytes\n";
    char buf[64];
    for (size_t i = 0; i < out.losses.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.12g,%lld\n", i, out.losses[i],
                    static_cast<long long>(out.activation_bytes[i]));
      csv << buf;
    }
    csv.close();
    std::filesystem::rename(tmp, out_dir + "/loss_curve.csv");
  }
  {
    Json summary;
    summary["strategy"] = cfg.strategy;
    summary["steps"] = cfg.optimizer.steps;
    summary["final_loss"] = out.final_loss;
    summary["tail_mean_loss"] = out.tail_mean_loss;
    summary["peak_activation_bytes"] = out.peak_activation_bytes;
    summary["trainable_params"] = model.registry().trainable_count();
    summary["optimizer_state_bytes"] = adam.state_bytes();
    summary["checkpoint"] = out.checkpoint_base;
    std::string tmp = out_dir + "/train_summary.json.tmp";
    std::ofstream js(tmp, std::ios::trunc);
    js << summary.dump(2) << "\n";
    js.close();
    std::filesystem::rename(tmp, out_dir + "/train_summary.json");
  }
  return out;
}

}  // namespace effowt
