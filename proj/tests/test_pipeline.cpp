#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "effowt/checkpoint.hpp"
#include "effowt/cli.hpp"
#include "effowt/image_io.hpp"
#include "effowt/infer.hpp"
#include "effowt/owta.hpp"
#include "effowt/synth.hpp"
#include "effowt/train.hpp"

using namespace effowt;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.backbone.image_size = 32;
  cfg.backbone.patch = 8;
  cfg.backbone.dim = 32;
  cfg.backbone.depth = 4;
  cfg.backbone.heads = 4;
  cfg.side.layers_per_block = 1;
  cfg.side.scales = {{4, 1}, {8, 1}};
  cfg.data.image_size = 32;
  cfg.data.n_videos = 2;
  cfg.data.frames_per_video = 3;
  cfg.data.seed = 11;
  cfg.optimizer.steps = 4;
  cfg.optimizer.batch = 1;
  cfg.head.hidden = 16;
  cfg.head.embed_dim = 8;
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void wipe(const std::string& dir) {
  std::error_code ec;
  fs::remove_all(dir, ec);
}

int cli(std::initializer_list<const char*> args) {
  std::vector<const char*> argv = {"effowt"};
  argv.insert(argv.end(), args.begin(), args.end());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("dataset generation") {
  ExperimentConfig cfg = tiny_config();
  std::string dir = "/tmp/effowt_ptest_ds";
  wipe(dir);
  generate_dataset(cfg.data, dir);

  SUBCASE("record and frame counts line up") {
    TrackSet train_gt = parse_track_file(dir + "/train/gt.ndjson");
    // 2 videos x 3 frames x 3 instances
    CHECK(train_gt.record_count() == 2 * 3 * 3);
    int64_t frame_files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir + "/train/videos")) {
      if (e.is_regular_file()) ++frame_files;
    }
    CHECK(frame_files == 2 * 3);
    TrackSet eval_gt = parse_track_file(dir + "/eval/gt.ndjson");
    CHECK(eval_gt.record_count() > 0);
  }
  SUBCASE("train split carries only known classes, eval both vocabularies") {
    TrackSet train_gt = parse_track_file(dir + "/train/gt.ndjson");
    std::set<std::string> train_classes, eval_classes;
    for (const auto& [v, frames] : train_gt.videos) {
      for (const auto& [f, recs] : frames) {
        for (const auto& r : recs) train_classes.insert(r.cls);
      }
    }
    for (const auto& c : train_classes) {
      CHECK(std::find(cfg.data.known_shapes.begin(), cfg.data.known_shapes.end(), c) !=
            cfg.data.known_shapes.end());
    }
    TrackSet eval_gt = parse_track_file(dir + "/eval/gt.ndjson");
    for (const auto& [v, frames] : eval_gt.videos) {
      for (const auto& [f, recs] : frames) {
        for (const auto& r : recs) eval_classes.insert(r.cls);
      }
    }
    bool has_unknown = false;
    for (const auto& u : cfg.data.unknown_shapes) has_unknown |= eval_classes.count(u) > 0;
    CHECK(has_unknown);
  }
  SUBCASE("flip pairs obey x' = W - x - w") {
    auto pairs = read_pair_manifest(dir + "/train/pairs.ndjson");
    int64_t checked = 0;
    for (const auto& p : pairs) {
      if (p.augment != "flip") continue;
      for (const auto& b : p.boxes) {
        CHECK(b.pair_box[0] ==
              doctest::Approx(cfg.data.image_size - b.box[0] - b.box[2]).epsilon(1e-12));
        CHECK(b.pair_box[1] == b.box[1]);
        ++checked;
      }
    }
    CHECK(checked > 0);
  }
  SUBCASE("every pair keeps at least two identities") {
    auto pairs = read_pair_manifest(dir + "/train/pairs.ndjson");
    CHECK(pairs.size() == 2 * 3);
    for (const auto& p : pairs) CHECK(p.boxes.size() >= 2);
  }
  SUBCASE("gt boxes are tight: every box covers its shape in the image") {
    TrackSet train_gt = parse_track_file(dir + "/train/gt.ndjson");
    for (const auto& [video, frames] : train_gt.videos) {
      for (const auto& [frame, recs] : frames) {
        Image img = read_pnm(frame_image_path(dir, "train", video, frame));
        for (const auto& r : recs) {
          CHECK(r.bbox[0] >= 0);
          CHECK(r.bbox[1] >= 0);
          CHECK(r.bbox[0] + r.bbox[2] <= img.width);
          CHECK(r.bbox[1] + r.bbox[3] <= img.height);
        }
      }
    }
  }
}

TEST_CASE("dataset generation is byte-identical for a fixed seed") {
  ExperimentConfig cfg = tiny_config();
  wipe("/tmp/effowt_ds_a");
  wipe("/tmp/effowt_ds_b");
  generate_dataset(cfg.data, "/tmp/effowt_ds_a");
  generate_dataset(cfg.data, "/tmp/effowt_ds_b");
  for (const auto& e : fs::recursive_directory_iterator("/tmp/effowt_ds_a")) {
    if (!e.is_regular_file()) continue;
    std::string rel = fs::relative(e.path(), "/tmp/effowt_ds_a").string();
    CHECK_MESSAGE(slurp(e.path().string()) == slurp("/tmp/effowt_ds_b/" + rel), rel);
  }
}

TEST_CASE("training behaviors") {
  ExperimentConfig cfg = tiny_config();
  std::string ds = "/tmp/effowt_train_ds";
  wipe(ds);
  generate_dataset(cfg.data, ds);

  SUBCASE("zero learning rate leaves weights bit-identical to initialization") {
    ExperimentConfig frozen = cfg;
    frozen.optimizer.lr = 0.0;
    frozen.optimizer.steps = 3;
    wipe("/tmp/effowt_lr0");
    train_model(frozen, ds, "/tmp/effowt_lr0", /*quiet=*/true);
    TrackerModel fresh(frozen.backbone, frozen.side, frozen.head, frozen.strategy_enum(),
                       frozen.data.seed);
    save_checkpoint(fresh.registry(), "/tmp/effowt_lr0/fresh");
    CHECK(slurp("/tmp/effowt_lr0/checkpoint.bin") == slurp("/tmp/effowt_lr0/fresh.bin"));
  }
  SUBCASE("side training never touches backbone bytes") {
    ExperimentConfig side_cfg = cfg;
    side_cfg.optimizer.steps = 5;
    wipe("/tmp/effowt_iso");
    train_model(side_cfg, ds, "/tmp/effowt_iso", true);
    TrackerModel fresh(side_cfg.backbone, side_cfg.side, side_cfg.head,
                       side_cfg.strategy_enum(), side_cfg.data.seed);
    TrackerModel trained(side_cfg.backbone, side_cfg.side, side_cfg.head,
                         side_cfg.strategy_enum(), side_cfg.data.seed);
    load_checkpoint(trained.registry(), "/tmp/effowt_iso/checkpoint");
    bool side_changed = false;
    for (const auto& [name, p] : fresh.registry().params()) {
      const auto& after = trained.registry().find(name)->tensor.data();
      if (name.rfind("backbone.", 0) == 0) {
        CHECK(after == p.tensor.data());
      } else if (after != p.tensor.data()) {
        side_changed = true;
      }
    }
    CHECK(side_changed);
  }
  SUBCASE("loss falls over a short run") {
    ExperimentConfig run = cfg;
    run.optimizer.steps = 40;
    run.optimizer.lr = 1e-3;
    wipe("/tmp/effowt_smoke");
    TrainOutput out = train_model(run, ds, "/tmp/effowt_smoke", true);
    CHECK(out.losses.front() > out.tail_mean_loss);
  }
  SUBCASE("training twice gives byte-identical checkpoints and curves") {
    ExperimentConfig run = cfg;
    run.optimizer.steps = 6;
    wipe("/tmp/effowt_det_a");
    wipe("/tmp/effowt_det_b");
    train_model(run, ds, "/tmp/effowt_det_a", true);
    train_model(run, ds, "/tmp/effowt_det_b", true);
    CHECK(slurp("/tmp/effowt_det_a/checkpoint.bin") == slurp("/tmp/effowt_det_b/checkpoint.bin"));
    CHECK(slurp("/tmp/effowt_det_a/checkpoint.json") ==
          slurp("/tmp/effowt_det_b/checkpoint.json"));
    CHECK(slurp("/tmp/effowt_det_a/loss_curve.csv") == slurp("/tmp/effowt_det_b/loss_curve.csv"));
  }
  SUBCASE("runaway values abort naming the step and offending op") {
    // an absurd learning rate overflows the first conv accumulation on the
    // following step; the strict-mode check names the op
    ExperimentConfig blow = cfg;
    blow.optimizer.lr = 1e308;
    blow.optimizer.steps = 4;
    wipe("/tmp/effowt_nan");
    CHECK_THROWS_WITH_AS(train_model(blow, ds, "/tmp/effowt_nan", true),
                         doctest::Contains("train step"), Error);
  }
}

TEST_CASE("inference produces stable ids for static distinct objects") {
  // hand-built split: two static, visually distinct objects over 3 frames
  ExperimentConfig cfg = tiny_config();
  std::string dir = "/tmp/effowt_static_ds";
  wipe(dir);
  fs::create_directories(dir + "/eval/videos/v0");
  Image frame = Image::create(32, 32, 3, 10);
  for (int64_t y = 4; y < 12; ++y) {
    for (int64_t x = 4; x < 12; ++x) {
      frame.at(y, x, 0) = 250;  // red square
    }
  }
  for (int64_t y = 20; y < 28; ++y) {
    for (int64_t x = 20; x < 28; ++x) {
      frame.at(y, x, 2) = 250;  // blue square
    }
  }
  TrackSet gt;
  for (int64_t f = 0; f < 3; ++f) {
    write_pnm(frame, frame_image_path(dir, "eval", "v0", f));
    TrackRecord a{"v0", f, 1, {4, 4, 8, 8}, "square", 1.0};
    TrackRecord b{"v0", f, 2, {20, 20, 8, 8}, "square", 1.0};
    gt.insert(a);
    gt.insert(b);
  }
  write_track_file(gt, dir + "/eval/gt.ndjson");

  TrackerModel model(cfg.backbone, cfg.side, cfg.head, cfg.strategy_enum(), cfg.data.seed);
  save_checkpoint(model.registry(), dir + "/ckpt");
  run_inference(cfg, dir + "/ckpt", dir, "eval", dir + "/pred.ndjson", true);

  TrackSet pred = parse_track_file(dir + "/pred.ndjson");  // parses with zero complaints
  std::set<int64_t> ids_first, ids_last;
  for (const auto& r : pred.videos.at("v0").at(0)) ids_first.insert(r.track_id);
  for (const auto& r : pred.videos.at("v0").at(2)) ids_last.insert(r.track_id);
  CHECK(ids_first.size() == 2);
  CHECK(ids_first == ids_last);  // no identity switches

  // perfect static tracking scores 1.0
  OwtaConfig ocfg;
  OwtaResult res = compute_owta(gt, pred, ocfg);
  CHECK(res.owta == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cli surface") {
  std::string dir = "/tmp/effowt_cli";
  wipe(dir);
  fs::create_directories(dir);
  std::string cfg_path = dir + "/cfg.json";
  {
    std::ofstream out(cfg_path);
    out << R"({"backbone": {"image_size": 32, "patch": 8, "dim": 32, "depth": 4, "heads": 4},
               "side": {"layers_per_block": 1, "scales": [{"dim_divisor": 4, "num_blocks": 1}]},
               "optimizer": {"steps": 2, "batch": 1},
               "data": {"image_size": 32, "n_videos": 1, "frames_per_video": 2, "seed": 3},
               "head": {"embed_dim": 8, "hidden": 16}})";
  }

  SUBCASE("strict config parsing rejects unknown keys") {
    std::string bad_path = dir + "/bad.json";
    std::ofstream(bad_path) << R"({"backbone": {"image_size": 32}, "walrus": 1})";
    CHECK(cli({"gen-data", "--config", bad_path.c_str(), "--out", dir.c_str()}) == 1);
    std::string bad_nested = dir + "/bad2.json";
    std::ofstream(bad_nested) << R"({"backbone": {"image_size": 32, "patches": 8}})";
    CHECK(cli({"gen-data", "--config", bad_nested.c_str(), "--out", dir.c_str()}) == 1);
  }
  SUBCASE("gen-data, report, probe, and eval round trip") {
    std::string ds = dir + "/ds";
    CHECK(cli({"--quiet", "gen-data", "--config", cfg_path.c_str(), "--out", ds.c_str()}) == 0);
    CHECK(fs::exists(ds + "/train/gt.ndjson"));

    std::string rep = dir + "/reports";
    CHECK(cli({"--quiet", "report", "params", "--config", cfg_path.c_str(), "--out",
               rep.c_str()}) == 0);
    std::string csv = slurp(rep + "/params.csv");
    CHECK(csv.rfind("strategy,trainable_params,param_ratio,peak_bytes,memory_ratio\n", 0) == 0);

    std::string probe_dir = dir + "/probe";
    CHECK(cli({"--quiet", "probe", "receptive-field", "--grid", "4x4", "--layers", "2", "--out",
               probe_dir.c_str()}) == 0);
    Json probe_json = Json::parse(slurp(probe_dir + "/receptive_field.json"));
    CHECK(probe_json.at("coverage").get<double>() == 1.0);
    CHECK(fs::exists(probe_dir + "/receptive_field.pgm"));

    // eval with a custom alpha spec, gt against itself
    std::string out_json = dir + "/owta.json";
    CHECK(cli({"eval", "owta", "--gt", (ds + "/eval/gt.ndjson").c_str(), "--pred",
               (ds + "/eval/gt.ndjson").c_str(), "--split", "all", "--alphas", "0.1:0.9:0.2",
               "--out", out_json.c_str()}) == 0);
    Json owta = Json::parse(slurp(out_json));
    CHECK(owta.at("owta").get<double>() == doctest::Approx(1.0));
    CHECK(owta.at("per_alpha").size() == 5);
  }
  SUBCASE("seed override changes the dataset") {
    std::string a = dir + "/seed_a", b = dir + "/seed_b";
    CHECK(cli({"--quiet", "--seed", "1", "gen-data", "--config", cfg_path.c_str(), "--out",
               a.c_str()}) == 0);
    CHECK(cli({"--quiet", "--seed", "2", "gen-data", "--config", cfg_path.c_str(), "--out",
               b.c_str()}) == 0);
    CHECK(slurp(a + "/train/gt.ndjson") != slurp(b + "/train/gt.ndjson"));
  }
}
