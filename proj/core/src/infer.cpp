#include "effowt/infer.hpp"

#include <cstdio>
#include <iostream>

#include "effowt/checkpoint.hpp"
#include "effowt/image_io.hpp"
#include "effowt/owta.hpp"
#include "effowt/synth.hpp"

namespace effowt {

void run_inference(const ExperimentConfig& cfg, const std::string& checkpoint_base,
                   const std::string& data_dir, const std::string& split,
                   const std::string& out_file, bool quiet) {
  TrackerModel model(cfg.backbone, cfg.side, cfg.head, cfg.strategy_enum(), cfg.data.seed);
  load_checkpoint(model.registry(), checkpoint_base);

  TrackSet gt = parse_track_file(data_dir + "/" + split + "/gt.ndjson");
  TrackSet predictions;
  NoGradGuard ng;

  for (const auto& [video, frames] : gt.videos) {
    std::vector<int64_t> track_ids;
    std::vector<double> track_embeddings;  // flattened [T,E]
    int64_t embed_dim = model.head_config().embed_dim;
    int64_t next_id = 1;

    for (const auto& [frame, recs] : frames) {
      Tensor image = image_to_tensor(read_pnm(frame_image_path(data_dir, split, video, frame)));
      Tensor images = reshape(image, {1, 3, cfg.backbone.image_size, cfg.backbone.image_size});
      std::vector<RegionBox> regions;
      for (const auto& r : recs) {
        regions.push_back({0, r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]});
      }
      Tensor fused = model.forward_features(images);
      HeadOutputs out = model.forward_regions(fused, regions);

      Tensor prev = track_ids.empty()
                        ? Tensor::zeros({0, embed_dim})
                        : Tensor::from_data({static_cast<int64_t>(track_ids.size()), embed_dim},
                                            track_embeddings);
      Association assoc =
          associate(prev, track_ids, out.embeddings, cfg.tracker.sim_threshold, next_id);
      next_id = assoc.next_track_id;

      for (size_t i = 0; i < recs.size(); ++i) {
        TrackRecord pred;
        pred.video = video;
        pred.frame = frame;
        pred.track_id = assoc.det_track_ids[i];
        pred.bbox = recs[i].bbox;
        pred.cls = "object";  // class-agnostic output
        pred.score = 1.0;
        predictions.insert(pred);

        // track memory keeps the latest embedding per id
        const auto& emb = out.embeddings.data();
        auto row_begin = emb.begin() + static_cast<int64_t>(i) * embed_dim;
        int64_t id = assoc.det_track_ids[i];
        auto found = std::find(track_ids.begin(), track_ids.end(), id);
        if (found == track_ids.end()) {
          track_ids.push_back(id);
          track_embeddings.insert(track_embeddings.end(), row_begin, row_begin + embed_dim);
        } else {
          int64_t idx = found - track_ids.begin();
          std::copy(row_begin, row_begin + embed_dim,
                    track_embeddings.begin() + idx * embed_dim);
        }
      }
    }
    if (!quiet) {
      std::printf("video %s: %lld tracks\n", video.c_str(),
                  static_cast<long long>(track_ids.size()));
    }
  }
  write_track_file(predictions, out_file);
}

}  // namespace effowt
