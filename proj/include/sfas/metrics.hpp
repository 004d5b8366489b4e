#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

// Classification and segmentation scoring plus CSV/JSON table emission.
// Column orders are frozen; identical reports serialize byte-identically.

namespace sfas {

struct ClassificationReport {
  std::vector<std::string> class_names;
  std::vector<int64_t> per_class_correct;
  std::vector<int64_t> per_class_total;
  std::vector<double> per_class_accuracy;
  double overall_accuracy = 0.0;
  int64_t n_samples = 0;
  Eigen::MatrixX<int64_t> confusion;  // rows = true class, cols = predicted
};

ClassificationReport classification_report(const std::vector<int>& predictions,
                                           const std::vector<int>& labels,
                                           const std::vector<std::string>& class_names);

struct SegmentationReport {
  double target_accuracy = 0.0;      // TP/(TP+FN)
  double background_accuracy = 0.0;  // TN/(TN+FP)
  double accuracy = 0.0;             // per-pixel correct fraction
  double iou = 0.0;                  // TP/(TP+FP+FN)
  uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Micro-aggregated over all pixels of all mask pairs.
SegmentationReport segmentation_report(const std::vector<std::vector<uint8_t>>& pred_masks,
                                       const std::vector<std::vector<uint8_t>>& gt_masks);

struct MetricsReport {
  std::optional<ClassificationReport> classification;
  std::optional<SegmentationReport> segmentation;
};

// <base>.json and <base>.csv (per-class rows + overall row, then
// segmentation metrics when present).
void write_metrics_report(const MetricsReport& report, const std::string& base_path);

std::string metrics_report_json(const MetricsReport& report);

// Ablation grid: one row per (k_labeled, seed, variant).
struct AblationRow {
  int k_labeled = 0;
  uint64_t seed = 0;
  std::string variant;  // "with_seg" or "without_seg"
  double overall_accuracy = 0.0;
};

void emit_ablation_tables(const std::vector<AblationRow>& rows, const std::string& base_path);

// Segmentation method comparison, one row per method.
struct SegMethodRow {
  std::string method;  // "otsu", "canny", "learned"
  SegmentationReport seg;
};

void emit_segmentation_tables(const std::vector<SegMethodRow>& rows,
                              const std::string& base_path);

}  // namespace sfas
