// Command-line entry point: generate / train / eval / segment / ablate.
// Every command writes its outputs plus an effective-config manifest under
// --out. Exit codes: 0 success, 2 usage error, 1 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfas/dataset.hpp"
#include "sfas/losses.hpp"
#include "sfas/metrics.hpp"
#include "sfas/model.hpp"
#include "sfas/segmentation.hpp"
#include "sfas/sha256.hpp"
#include "sfas/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Fixed design knobs recorded with every run so results stay interpretable.
json design_knobs() {
  json d;
  d["conv_pad"] = 1;
  d["tconv"] = {{"stride", 2}, {"pad", 1}, {"out_pad", 1}};
  d["batchnorm"] = {{"eps", 1e-5}, {"momentum", 0.1}};
  d["leaky_relu_slope"] = sfas::kLeakySlope;
  d["attention"] = {{"reduction", sfas::kAttnReduction},
                    {"spatial_kernel", sfas::kAttnSpatialKernel},
                    {"order", "channel_then_spatial"}};
  d["classifier"] = {{"conv_pad", 2}, {"pool", "floor"}, {"head", "gap_linear_softmax"}};
  d["residual"] = "per_conv_1x1_projection";
  d["adam"] = {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}};
  d["loop_granularity"] = "per_batch";
  d["labeled_sampling"] = "with_replacement_when_pool_below_batch";
  d["seg_loss_pixels"] = sfas::kChipPixels;
  d["log_clamp"] = 1e-12;
  d["history_hash_columns"] = "t,L_r_t,L_s_t,alpha";
  return d;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
}

json train_config_json(const sfas::TrainConfig& cfg) {
  json j;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["loops"] = cfg.loops;
  j["k_labeled_per_class"] = cfg.k_labeled_per_class;
  j["seed"] = cfg.seed;
  j["optimizer"] = cfg.optimizer;
  j["use_segmentation"] = cfg.use_segmentation;
  j["mask_source"] = cfg.mask_source;
  j["eval_every"] = cfg.eval_every;
  return j;
}

json seg_report_json(const sfas::SegmentationReport& s) {
  json j;
  j["target_accuracy"] = s.target_accuracy;
  j["background_accuracy"] = s.background_accuracy;
  j["accuracy"] = s.accuracy;
  j["iou"] = s.iou;
  return j;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  int classes = 10;
  int per_class_train = 270;
  int per_class_test = 230;
  uint64_t seed = 0;
  std::string out;
  std::string png_preview;
  int png_count = 8;
};

int run_generate(const GenerateArgs& a) {
  const double t0 = now_ms();
  sfas::Dataset ds = sfas::generate_dataset(a.classes, a.per_class_train, a.per_class_test, a.seed);
  sfas::save_dataset(ds, a.out);
  const std::string hash = sfas::Sha256::of_file(a.out);

  if (!a.png_preview.empty()) {
    fs::create_directories(a.png_preview);
    for (int i = 0; i < a.png_count && i < static_cast<int>(ds.train.size()); ++i) {
      const auto& s = ds.train[static_cast<size_t>(i)];
      sfas::write_png_gray(a.png_preview + "/chip_" + std::to_string(s.id) + "_" + s.class_name +
                               ".png",
                           s.image, sfas::kChip, sfas::kChip);
      sfas::write_png_mask(a.png_preview + "/mask_" + std::to_string(s.id) + "_" + s.class_name +
                               ".png",
                           s.mask, sfas::kChip, sfas::kChip);
    }
  }

  json manifest;
  manifest["command"] = "generate";
  manifest["config"] = {{"classes", a.classes},
                        {"per_class_train", a.per_class_train},
                        {"per_class_test", a.per_class_test},
                        {"seed", a.seed}};
  manifest["dataset_sha256"] = hash;
  manifest["wall_ms"] = now_ms() - t0;
  write_json(a.out + ".manifest.json", manifest);

  std::cout << "wrote " << a.out << " (" << ds.train.size() << " train, " << ds.test.size()
            << " test, " << ds.class_names.size() << " classes)\n"
            << "sha256 " << hash << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  sfas::TrainConfig cfg;
  bool no_seg_loss = false;
};

int run_train(const TrainArgs& a) {
  const double t0 = now_ms();
  fs::create_directories(a.out);
  sfas::Dataset ds = sfas::load_dataset(a.data);
  const std::string data_hash = sfas::Sha256::of_file(a.data);

  sfas::TrainConfig cfg = a.cfg;
  cfg.use_segmentation = !a.no_seg_loss;

  std::ofstream history_csv(a.out + "/history.csv", std::ios::trunc);
  std::ofstream evals_csv(a.out + "/evals.csv", std::ios::trunc);
  sfas::TrainSinks sinks;
  sinks.history_csv = &history_csv;
  sinks.evals_csv = &evals_csv;

  sfas::TrainResult result = sfas::train(cfg, ds, sinks);
  history_csv.close();
  evals_csv.close();

  const std::string ckpt = a.out + "/checkpoint.sfas";
  sfas::save_checkpoint(result.model, ckpt);
  sfas::write_metrics_report(result.final_report, a.out + "/report");

  json manifest;
  manifest["command"] = "train";
  manifest["config"] = train_config_json(cfg);
  manifest["dataset_path"] = a.data;
  manifest["dataset_sha256"] = data_hash;
  manifest["design"] = design_knobs();
  manifest["history_hash"] = result.history_hash;
  manifest["checkpoint_sha256"] = sfas::Sha256::of_file(ckpt);
  if (result.autoseg_quality.has_value())
    manifest["autoseg_quality"] = seg_report_json(*result.autoseg_quality);
  if (result.final_report.classification.has_value())
    manifest["final_overall_accuracy"] = result.final_report.classification->overall_accuracy;
  if (result.final_report.segmentation.has_value())
    manifest["final_seg_iou"] = result.final_report.segmentation->iou;
  manifest["wall_ms"] = now_ms() - t0;
  write_json(a.out + "/manifest.json", manifest);

  std::cout << "trained " << cfg.loops << " loops; history " << result.history_hash.substr(0, 12)
            << ", checkpoint " << manifest["checkpoint_sha256"].get<std::string>().substr(0, 12)
            << "\n";
  if (result.final_report.classification.has_value())
    std::cout << "test accuracy " << result.final_report.classification->overall_accuracy << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  const double t0 = now_ms();
  fs::create_directories(a.out);
  sfas::ModelState model = sfas::load_checkpoint(a.checkpoint);
  sfas::Dataset ds = sfas::load_dataset(a.data);
  sfas::MetricsReport report = sfas::evaluate(model, ds.test);
  sfas::write_metrics_report(report, a.out + "/report");

  json manifest;
  manifest["command"] = "eval";
  manifest["checkpoint"] = a.checkpoint;
  manifest["checkpoint_sha256"] = sfas::Sha256::of_file(a.checkpoint);
  manifest["dataset_sha256"] = sfas::Sha256::of_file(a.data);
  if (report.classification.has_value())
    manifest["overall_accuracy"] = report.classification->overall_accuracy;
  if (report.segmentation.has_value()) manifest["segmentation"] = seg_report_json(*report.segmentation);
  manifest["wall_ms"] = now_ms() - t0;
  write_json(a.out + "/manifest.json", manifest);

  if (report.classification.has_value())
    std::cout << "overall accuracy " << report.classification->overall_accuracy << "\n";
  if (report.segmentation.has_value())
    std::cout << "segmentation IoU " << report.segmentation->iou << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SegmentArgs {
  std::string data;
  std::string method = "all";  // otsu | canny | learned | all
  std::string checkpoint;
  std::string out;
  int png_count = 0;
};

int run_segment(const SegmentArgs& a) {
  const double t0 = now_ms();
  fs::create_directories(a.out);
  sfas::Dataset ds = sfas::load_dataset(a.data);

  std::vector<std::vector<uint8_t>> gt;
  for (const auto& s : ds.test) {
    if (!s.has_mask()) throw std::runtime_error("segment: test split lacks ground-truth masks");
    gt.push_back(s.mask);
  }

  const bool want_otsu = a.method == "otsu" || a.method == "all";
  const bool want_canny = a.method == "canny" || a.method == "all";
  const bool want_learned = a.method == "learned" || a.method == "all";
  if (!want_otsu && !want_canny && !want_learned)
    throw CLI::ValidationError("--method must be otsu, canny, learned, or all");
  if (want_learned && a.checkpoint.empty() && a.method == "learned")
    throw CLI::ValidationError("--method learned requires --checkpoint");

  std::vector<sfas::SegMethodRow> rows;
  auto export_pngs = [&](const std::string& name,
                         const std::vector<std::vector<uint8_t>>& masks) {
    for (int i = 0; i < a.png_count && i < static_cast<int>(masks.size()); ++i)
      sfas::write_png_mask(a.out + "/" + name + "_" + std::to_string(i) + ".png",
                           masks[static_cast<size_t>(i)], sfas::kChip, sfas::kChip);
  };

  if (want_otsu) {
    std::vector<std::vector<uint8_t>> masks;
    for (const auto& s : ds.test) masks.push_back(sfas::otsu_threshold(s.image).mask);
    rows.push_back({"otsu", sfas::segmentation_report(masks, gt)});
    export_pngs("otsu", masks);
  }
  if (want_canny) {
    std::vector<std::vector<uint8_t>> masks;
    for (const auto& s : ds.test) masks.push_back(sfas::canny_morph_segment(s.image));
    rows.push_back({"canny", sfas::segmentation_report(masks, gt)});
    export_pngs("canny", masks);
  }
  if (want_learned && !a.checkpoint.empty()) {
    sfas::ModelState model = sfas::load_checkpoint(a.checkpoint);
    std::vector<std::vector<uint8_t>> masks = sfas::predict_masks(model, ds.test);
    rows.push_back({"learned", sfas::segmentation_report(masks, gt)});
    export_pngs("learned", masks);
  }

  sfas::emit_segmentation_tables(rows, a.out + "/table8");

  json manifest;
  manifest["command"] = "segment";
  manifest["method"] = a.method;
  manifest["dataset_sha256"] = sfas::Sha256::of_file(a.data);
  if (!a.checkpoint.empty())
    manifest["checkpoint_sha256"] = sfas::Sha256::of_file(a.checkpoint);
  for (const auto& r : rows) manifest["results"][r.method] = seg_report_json(r.seg);
  manifest["wall_ms"] = now_ms() - t0;
  write_json(a.out + "/manifest.json", manifest);

  for (const auto& r : rows)
    std::cout << r.method << ": target " << r.seg.target_accuracy << ", background "
              << r.seg.background_accuracy << ", accuracy " << r.seg.accuracy << ", IoU "
              << r.seg.iou << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string data;
  std::string out;
  std::vector<int> k_list = {5, 10};
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  long loops = 250;
  int batch = 24;
  double lr = 2e-4;
};

int run_ablate(const AblateArgs& a) {
  const double t0 = now_ms();
  fs::create_directories(a.out);
  sfas::Dataset ds = sfas::load_dataset(a.data);
  const std::string data_hash = sfas::Sha256::of_file(a.data);

  std::vector<sfas::AblationRow> rows;
  for (int k : a.k_list) {
    for (uint64_t seed : a.seeds) {
      for (bool with_seg : {true, false}) {
        sfas::TrainConfig cfg;
        cfg.batch_size = a.batch;
        cfg.learning_rate = a.lr;
        cfg.loops = a.loops;
        cfg.k_labeled_per_class = k;
        cfg.seed = seed;
        cfg.use_segmentation = with_seg;
        cfg.eval_every = 0;
        sfas::TrainResult r = sfas::train(cfg, ds);
        sfas::AblationRow row;
        row.k_labeled = k;
        row.seed = seed;
        row.variant = with_seg ? "with_seg" : "without_seg";
        row.overall_accuracy = r.final_report.classification.has_value()
                                   ? r.final_report.classification->overall_accuracy
                                   : 0.0;
        rows.push_back(row);
        std::cout << "k=" << k << " seed=" << seed << " " << row.variant << " -> "
                  << row.overall_accuracy << "\n";
      }
    }
  }
  sfas::emit_ablation_tables(rows, a.out + "/ablation");

  json manifest;
  manifest["command"] = "ablate";
  manifest["config"] = {{"k_list", a.k_list}, {"seeds", a.seeds},   {"loops", a.loops},
                        {"batch", a.batch},   {"learning_rate", a.lr}};
  manifest["dataset_sha256"] = data_hash;
  manifest["design"] = design_knobs();
  manifest["rows"] = static_cast<int>(rows.size());
  manifest["wall_ms"] = now_ms() - t0;
  write_json(a.out + "/manifest.json", manifest);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised few-shot SAR recognition with auxiliary segmentation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Key-value config file; command-line flags take precedence");
  app.allow_config_extras(true);

  GenerateArgs gen;
  auto* cgen = app.add_subcommand("generate", "Render a synthetic chip dataset");
  cgen->add_option("--classes", gen.classes, "Number of classes (2..10)");
  cgen->add_option("--seed", gen.seed, "Master seed");
  cgen->add_option("--per-class-train", gen.per_class_train, "Training chips per class");
  cgen->add_option("--per-class-test", gen.per_class_test, "Test chips per class");
  cgen->add_option("--out", gen.out, "Output dataset file")->required();
  cgen->add_option("--png-preview", gen.png_preview, "Directory for preview PNGs");
  cgen->add_option("--png-count", gen.png_count, "Number of preview chips");

  TrainArgs tr;
  auto* ctr = app.add_subcommand("train", "Run the alternating training loop");
  ctr->add_option("--data", tr.data, "Dataset file")->required();
  ctr->add_option("--k-labeled", tr.cfg.k_labeled_per_class, "Labeled samples per class");
  ctr->add_option("--loops", tr.cfg.loops, "Training loops");
  ctr->add_option("--seed", tr.cfg.seed, "Run seed");
  ctr->add_option("--batch", tr.cfg.batch_size, "Batch size");
  ctr->add_option("--lr", tr.cfg.learning_rate, "Learning rate");
  ctr->add_option("--optimizer", tr.cfg.optimizer, "adam | sgd");
  ctr->add_option("--mask-source", tr.cfg.mask_source, "manual | otsu | canny");
  ctr->add_option("--eval-every", tr.cfg.eval_every, "Eval cadence in loops (0 = final only)");
  ctr->add_flag("--no-seg-loss", tr.no_seg_loss, "Disable the segmentation phase (ablation)");
  ctr->add_option("--out", tr.out, "Output directory")->required();

  EvalArgs ev;
  auto* cev = app.add_subcommand("eval", "Score a checkpoint on the test split");
  cev->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  cev->add_option("--data", ev.data, "Dataset file")->required();
  cev->add_option("--out", ev.out, "Output directory")->required();

  SegmentArgs sg;
  auto* csg = app.add_subcommand("segment", "Score segmentation methods against ground truth");
  csg->add_option("--data", sg.data, "Dataset file")->required();
  csg->add_option("--method", sg.method, "otsu | canny | learned | all");
  csg->add_option("--checkpoint", sg.checkpoint, "Checkpoint for the learned decoder");
  csg->add_option("--png-count", sg.png_count, "Exported mask PNGs per method");
  csg->add_option("--out", sg.out, "Output directory")->required();

  AblateArgs ab;
  auto* cab = app.add_subcommand("ablate", "With/without-segmentation grid over k and seeds");
  cab->add_option("--data", ab.data, "Dataset file")->required();
  cab->add_option("--k-list", ab.k_list, "Labeled-per-class values");
  cab->add_option("--seeds", ab.seeds, "Run seeds");
  cab->add_option("--loops", ab.loops, "Loops per run");
  cab->add_option("--batch", ab.batch, "Batch size per run");
  cab->add_option("--lr", ab.lr, "Learning rate per run");
  cab->add_option("--out", ab.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (cgen->parsed()) return run_generate(gen);
    if (ctr->parsed()) return run_train(tr);
    if (cev->parsed()) return run_eval(ev);
    if (csg->parsed()) return run_segment(sg);
    if (cab->parsed()) return run_ablate(ab);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
