#include "effowt/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "effowt/config.hpp"
#include "effowt/efficiency.hpp"
#include "effowt/image_io.hpp"
#include "effowt/infer.hpp"
#include "effowt/owta.hpp"
#include "effowt/sim.hpp"
#include "effowt/synth.hpp"
#include "effowt/train.hpp"

namespace effowt {

namespace {

namespace fs = std::filesystem;

struct GlobalArgs {
  std::string config_path;
  int64_t seed = -1;  // <0: keep the config's seed
  bool quiet = false;
};

ExperimentConfig load_config(const GlobalArgs& g) {
  ExperimentConfig cfg =
      g.config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_json_file(g.config_path);
  if (g.seed >= 0) cfg.data.seed = static_cast<uint64_t>(g.seed);
  cfg.validate();
  return cfg;
}

std::set<std::string> parse_class_list(const std::string& arg) {
  std::set<std::string> out;
  if (arg.empty()) return out;
  if (fs::exists(arg) && fs::is_regular_file(arg)) {
    std::ifstream in(arg);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.insert(line);
    }
    return out;
  }
  std::stringstream ss(arg);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.insert(item);
  }
  return out;
}

std::vector<double> parse_alpha_spec(const std::string& spec) {
  if (spec.empty()) return default_alpha_grid();
  std::vector<double> alphas;
  if (spec.find(':') != std::string::npos) {
    double lo = 0, hi = 0, step = 0;
    if (std::sscanf(spec.c_str(), "%lf:%lf:%lf", &lo, &hi, &step) != 3 || step <= 0) {
      throw Error("alphas: expected lo:hi:step, got '" + spec + "'");
    }
    for (double a = lo; a <= hi + 1e-12; a += step) alphas.push_back(a);
    return alphas;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) alphas.push_back(std::stod(item));
  }
  return alphas;
}

void write_owta_json(const OwtaResult& res, EvalSplit split, const std::string& path) {
  Json j;
  j["split"] = split_name(split);
  j["owta"] = res.owta;
  j["det_re"] = res.det_re;
  j["ass_acc"] = res.ass_acc;
  Json per = Json::array();
  for (const auto& am : res.per_alpha) {
    per.push_back({{"alpha", am.alpha},
                   {"owta", am.owta},
                   {"det_re", am.det_re},
                   {"ass_acc", am.ass_acc},
                   {"tp", am.tp},
                   {"fn", am.fn}});
  }
  j["per_alpha"] = per;
  std::string tmp = path + ".tmp";
  std::ofstream out(tmp, std::ios::trunc);
  if (!out) throw Error("eval: cannot write " + tmp);
  out << j.dump(2) << "\n";
  out.close();
  fs::rename(tmp, path);
}

int probe_receptive_field(const std::string& grid_spec, int64_t layers, bool dense,
                          const std::string& out_dir, bool quiet) {
  int64_t h = 0, w = 0;
  if (std::sscanf(grid_spec.c_str(), "%lldx%lld", reinterpret_cast<long long*>(&h),
                  reinterpret_cast<long long*>(&w)) != 2) {
    throw Error("probe: --grid expects HxW, got '" + grid_spec + "'");
  }
  InfluenceMatrix rf = receptive_field(layers, h, w, dense);
  fs::create_directories(out_dir);

  Json j;
  j["grid"] = {h, w};
  j["layers"] = layers;
  j["dense_baseline"] = dense;
  j["coverage"] = rf.coverage();
  Json counts = Json::array();
  for (int64_t i = 0; i < rf.n; ++i) counts.push_back(rf.count_influenced_by(i));
  j["per_token_counts"] = counts;
  Json rows = Json::array();
  for (int64_t i = 0; i < rf.n; ++i) {
    Json row = Json::array();
    for (int64_t jj = 0; jj < rf.n; ++jj) row.push_back(rf.at(i, jj) ? 1 : 0);
    rows.push_back(row);
  }
  j["matrix"] = rows;
  {
    std::string path = out_dir + "/receptive_field.json";
    std::ofstream out(path + ".tmp", std::ios::trunc);
    out << j.dump() << "\n";
    out.close();
    fs::rename(path + ".tmp", path);
  }
  {
    Image bitmap = Image::create(rf.n, rf.n, 1);
    for (int64_t i = 0; i < rf.n; ++i) {
      for (int64_t jj = 0; jj < rf.n; ++jj) {
        bitmap.at(i, jj, 0) = rf.at(i, jj) ? 255 : 0;
      }
    }
    write_pnm(bitmap, out_dir + "/receptive_field.pgm");
  }
  if (!quiet) {
    std::printf("grid %lldx%lld layers %lld coverage %.4f\n", static_cast<long long>(h),
                static_cast<long long>(w), static_cast<long long>(layers), rf.coverage());
  }
  if (layers >= 2 && rf.coverage() < 1.0) return 2;
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"frozen-backbone side-network tracker: training, tracking, metrics, probes"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--config", g.config_path, "experiment config JSON");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_flag("--quiet", g.quiet, "suppress progress output");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render the synthetic shape dataset");
  std::string gen_out = "dataset";
  gen->add_option("--out", gen_out, "output directory");

  // train
  auto* train = app.add_subcommand("train", "run the training loop");
  std::string train_data = "dataset", train_out = "run";
  train->add_option("--data", train_data, "dataset directory (from gen-data)");
  train->add_option("--out", train_out, "output directory");

  // infer
  auto* infer = app.add_subcommand("infer", "tracking inference over a split");
  std::string infer_ckpt, infer_data = "dataset", infer_split = "eval", infer_out = "run";
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint base path (no extension)")
      ->required();
  infer->add_option("--data", infer_data, "dataset directory");
  infer->add_option("--split", infer_split, "dataset split to track");
  infer->add_option("--out", infer_out, "output directory");

  // eval owta
  auto* eval = app.add_subcommand("eval", "metric evaluation");
  auto* owta = eval->add_subcommand("owta", "open-world tracking accuracy");
  std::string eval_gt, eval_pred, eval_known, eval_split = "all", eval_alphas, eval_out;
  bool eval_matched_only = false;
  owta->add_option("--gt", eval_gt, "ground-truth track file")->required();
  owta->add_option("--pred", eval_pred, "prediction track file")->required();
  owta->add_option("--known", eval_known, "known classes: comma list or file");
  owta->add_option("--split", eval_split, "known|unknown|all");
  owta->add_option("--alphas", eval_alphas, "grid: lo:hi:step or comma list");
  owta->add_option("--out", eval_out, "result JSON path");
  owta->add_flag("--assoc-fp-matched-only", eval_matched_only,
                 "count association FPs only on conflicting matches");

  // report params|memory
  auto* report = app.add_subcommand("report", "parameter / memory comparisons");
  auto* rep_params = report->add_subcommand("params", "trainable parameter comparison");
  auto* rep_memory = report->add_subcommand("memory", "retained-memory comparison");
  std::string rep_strategy, rep_out = "reports";
  for (auto* sub : {rep_params, rep_memory}) {
    sub->add_option("--strategy", rep_strategy, "restrict to one strategy");
    sub->add_option("--out", rep_out, "output directory");
  }

  // probe receptive-field
  auto* probe = app.add_subcommand("probe", "structural probes");
  auto* rf = probe->add_subcommand("receptive-field", "token influence after stacked mixers");
  std::string rf_grid = "8x8", rf_out = "probe";
  int64_t rf_layers = 1;
  bool rf_dense = false;
  rf->add_option("--grid", rf_grid, "grid as HxW");
  rf->add_option("--layers", rf_layers, "stacked mixing layers");
  rf->add_flag("--dense", rf_dense, "dense token-mixing baseline");
  rf->add_option("--out", rf_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      ExperimentConfig cfg = load_config(g);
      generate_dataset(cfg.data, gen_out);
      if (!g.quiet) std::printf("dataset written to %s\n", gen_out.c_str());
      return 0;
    }
    if (train->parsed()) {
      ExperimentConfig cfg = load_config(g);
      TrainOutput out = train_model(cfg, train_data, train_out, g.quiet);
      if (!g.quiet) {
        std::printf("final loss %.6f, checkpoint %s\n", out.final_loss,
                    out.checkpoint_base.c_str());
      }
      return 0;
    }
    if (infer->parsed()) {
      ExperimentConfig cfg = load_config(g);
      fs::create_directories(infer_out);
      std::string out_file = infer_out + "/predictions_" + infer_split + ".ndjson";
      run_inference(cfg, infer_ckpt, infer_data, infer_split, out_file, g.quiet);
      if (!g.quiet) std::printf("predictions written to %s\n", out_file.c_str());
      return 0;
    }
    if (owta->parsed()) {
      OwtaConfig cfg;
      cfg.known_classes = parse_class_list(eval_known);
      cfg.split = split_from_string(eval_split);
      cfg.alphas = parse_alpha_spec(eval_alphas);
      cfg.assoc_fp_penalize_unmatched = !eval_matched_only;
      TrackSet gt = parse_track_file(eval_gt);
      TrackSet pred = parse_track_file(eval_pred);
      OwtaResult res = compute_owta(gt, pred, cfg);
      if (!eval_out.empty()) write_owta_json(res, cfg.split, eval_out);
      std::printf("split %s: OWTA %.4f  D.Re %.4f  A.Acc %.4f\n", eval_split.c_str(), res.owta,
                  res.det_re, res.ass_acc);
      return 0;
    }
    if (rep_params->parsed() || rep_memory->parsed()) {
      ExperimentConfig cfg = load_config(g);
      bool measure = rep_memory->parsed();
      EfficiencyReport rep = build_efficiency_report(cfg, measure, rep_strategy);
      fs::create_directories(rep_out);
      std::string stem = measure ? "memory" : "params";
      write_efficiency_json(rep, rep_out + "/" + stem + ".json");
      write_efficiency_csv(rep, rep_out + "/" + stem + ".csv");
      if (!g.quiet) {
        for (const auto& row : rep.rows) {
          std::printf("%-10s trainable %10lld (%.4f of full)", row.strategy.c_str(),
                      static_cast<long long>(row.trainable_params), row.param_ratio_vs_full);
          if (measure) {
            std::printf("  peak %12lld bytes (%.4f of full)",
                        static_cast<long long>(row.peak_bytes), row.memory_ratio_vs_full);
          }
          std::printf("\n");
        }
      }
      return 0;
    }
    if (rf->parsed()) {
      return probe_receptive_field(rf_grid, rf_layers, rf_dense, rf_out, g.quiet);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "error: no subcommand executed\n");
  return 1;
}

}  // namespace effowt
