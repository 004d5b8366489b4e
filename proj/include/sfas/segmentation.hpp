#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "sfas/dataset.hpp"

// Classical auto-segmentation: the comparison baselines and the source of
// auto-seg labels for training without manual masks.

namespace sfas {

struct OtsuResult {
  std::vector<uint8_t> mask;
  int threshold_bin = -1;   // 256-bin histogram index; -1 when degenerate
  bool degenerate = false;  // constant image: threshold undefined
};

// Global threshold maximizing between-class variance over a 256-bin
// histogram of the [0,1] image; foreground = bins above the threshold.
// Ties take the lowest bin. Constant images come back all-background with
// the degenerate flag set.
OtsuResult otsu_threshold(const Eigen::ArrayXd& image, int h = kChip, int w = kChip);

// Defaults tuned once on speckled generator chips and frozen; gentler
// smoothing or lower thresholds let single-look speckle edges flood the
// hysteresis stage.
struct CannyConfig {
  double sigma = 3.0;
  double low = 0.2;   // fraction of the max gradient magnitude
  double high = 0.5;  // fraction of the max gradient magnitude
  int close_radius = 3;
};

// Gaussian smooth -> Sobel -> non-max suppression -> hysteresis ->
// morphological closing -> hole filling -> largest connected component.
std::vector<uint8_t> canny_morph_segment(const Eigen::ArrayXd& image, const CannyConfig& cfg = {},
                                         int h = kChip, int w = kChip);

enum class AutosegMethod { otsu, canny };

AutosegMethod autoseg_method_from_string(const std::string& name);

// Replaces every unlabeled-pool mask with the chosen method's output. The
// input split keeps the originals, so callers can score the replacement.
DatasetSplit make_autoseg_labels(const DatasetSplit& split, AutosegMethod method);

}  // namespace sfas
