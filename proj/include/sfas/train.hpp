#pragma once

#include <Eigen/Core>

#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sfas/dataset.hpp"
#include "sfas/metrics.hpp"
#include "sfas/model.hpp"

// The alternating training loop. Each loop runs two semi-blind phases:
//   phase 1: unlabeled batch through extractor+decoder; the plain
//            segmentation loss updates P_D; the IRL combination (plus the
//            alpha-weighted recognition loss recomputed on the previous
//            loop's labeled batch through the frozen classifier) updates P_E.
//   phase 2: labeled batch through extractor+classifier; the plain
//            recognition loss updates P_C; the IRL combination (plus the
//            alpha-weighted segmentation loss recomputed on the previous
//            loop's unlabeled batch through the frozen decoder) updates P_E.
// Caches and the loop counter then advance.

namespace sfas {

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-4;
  long loops = 2000;
  int k_labeled_per_class = 20;
  uint64_t seed = 0;
  std::string optimizer = "adam";  // "adam" | "sgd"
  bool use_segmentation = true;
  std::string mask_source = "manual";  // "manual" | "otsu" | "canny"
  long eval_every = 50;                // 0 = final evaluation only
};

struct Batch {
  Tensor x;  // N x 1 x 80 x 80
  MatrixXd onehot;
  std::vector<int> labels;
  Tensor masks;  // N x 1 x 80 x 80 of {0,1}
  std::vector<int> sample_ids;
  Index size() const { return x.n(); }
};

Batch make_labeled_batch(const std::vector<Sample>& pool, const std::vector<size_t>& idx,
                         int num_classes);
Batch make_unlabeled_batch(const std::vector<Sample>& pool, const std::vector<size_t>& idx);

struct IrlState {
  long t = 1;
  std::optional<Batch> cached_unlabeled;
  std::optional<Batch> cached_labeled;
  double prev_rec_loss = std::numeric_limits<double>::quiet_NaN();
  double prev_seg_loss = std::numeric_limits<double>::quiet_NaN();
};

struct AdamSlot {
  Eigen::ArrayXd m, v;
  long step = 0;
};

// Adam by default (beta1 0.9, beta2 0.999, eps 1e-8); plain SGD selectable.
// Aborts with the layer name on non-finite gradients.
struct Optimizer {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, AdamSlot> slots;

  static Kind kind_from_string(const std::string& name);
  void apply(ModelState& m, Module which);
};

struct StepResult {
  double seg_loss = std::numeric_limits<double>::quiet_NaN();  // plain Eq.(2)
  double rec_loss = std::numeric_limits<double>::quiet_NaN();  // plain Eq.(1)
  double seg_irl = std::numeric_limits<double>::quiet_NaN();   // Eq.(5) combination
  double rec_irl = std::numeric_limits<double>::quiet_NaN();   // Eq.(3) combination
  double alpha_t = 0.0;
};

// Called with the model right after each phase (1 or 2) finishes; the
// routing checks hash parameter blobs here.
using PhaseObserver = std::function<void(int phase, ModelState& m)>;

StepResult training_loop_step(ModelState& m, Optimizer& opt, IrlState& irl,
                              const Batch* unlabeled, const Batch& labeled,
                              const TrainConfig& cfg, const PhaseObserver& observer = {});

struct HistoryRow {
  long t = 0;
  double rec_irl = 0.0;  // L_r^t
  double seg_irl = 0.0;  // L_s^t
  double alpha_t = 0.0;
  double wall_ms = 0.0;
  double rec_loss = 0.0;  // plain losses, kept in memory for analysis
  double seg_loss = 0.0;
};

struct EvalPoint {
  long t = 0;
  double overall_accuracy = 0.0;
  double seg_iou = 0.0;
};

struct TrainSinks {
  std::ostream* history_csv = nullptr;  // streamed: t,L_r_t,L_s_t,alpha,wall_ms
  std::ostream* evals_csv = nullptr;    // streamed: t,overall_accuracy,seg_iou
};

struct TrainResult {
  ModelState model;
  std::vector<HistoryRow> history;
  std::vector<EvalPoint> evals;
  MetricsReport final_report;
  std::string history_hash;  // SHA-256 over (t, L_r^t, L_s^t, alpha) rows
  std::optional<SegmentationReport> autoseg_quality;  // set for auto mask sources
};

// Splits the dataset per the few-shot protocol, optionally replaces the
// unlabeled masks with auto-seg labels, then runs cfg.loops training loops.
TrainResult train(const TrainConfig& cfg, const Dataset& raw, const TrainSinks& sinks = {});

// Eval-mode scoring of a frozen model: per-class accuracy, confusion matrix,
// and a segmentation report when the samples carry masks.
MetricsReport evaluate(ModelState& m, const std::vector<Sample>& test_split, int batch_size = 64);

// Predicted masks from decoder logits (argmax channel), exposed for the
// segmentation comparison table.
std::vector<std::vector<uint8_t>> predict_masks(ModelState& m, const std::vector<Sample>& samples,
                                                int batch_size = 64);

std::string history_hash_of(const std::vector<HistoryRow>& history);

}  // namespace sfas
