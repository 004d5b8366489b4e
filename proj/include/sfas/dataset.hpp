#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

// Deterministic generator of SAR-like 80x80 chips with class labels and
// ground-truth masks, plus dataset persistence and the few-shot split
// protocol. Each class is a parametric silhouette family rendered with
// random pose/scale jitter, embedded in clutter and corrupted by
// multiplicative exponential speckle, then log-compressed.

namespace sfas {

constexpr int kChip = 80;
constexpr int kChipPixels = kChip * kChip;

struct Sample {
  Eigen::ArrayXd image;       // kChipPixels values in [0,1], row-major
  int label = -1;             // -1 = absent
  std::vector<uint8_t> mask;  // empty = absent; else kChipPixels of {0,1}
  // meta
  std::string class_name;
  double pose_deg = 0.0;
  uint64_t seed = 0;
  int id = -1;

  bool has_label() const { return label >= 0; }
  bool has_mask() const { return !mask.empty(); }
};

struct Dataset {
  std::vector<Sample> train;  // labels and masks both present
  std::vector<Sample> test;
  std::vector<std::string> class_names;
  uint64_t seed = 0;
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Labeled pool keeps class labels and loses masks; unlabeled pool keeps
// masks and loses class labels; test keeps both for scoring.
struct DatasetSplit {
  std::vector<Sample> labeled;
  std::vector<Sample> unlabeled;
  std::vector<Sample> test;
  std::vector<std::string> class_names;
  uint64_t seed = 0;
  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// Intermediate stages of one chip, exposed for the generator sanity checks
// (speckle ratio, mask/image alignment).
struct ChipStages {
  Eigen::ArrayXd clean;     // pre-speckle reflectivity
  Eigen::ArrayXd speckled;  // clean * E, E ~ Exp(1) iid
  Eigen::ArrayXd final_img; // log-compressed, clipped to [0,1]
  std::vector<uint8_t> mask;
  double pose_deg = 0.0;
};

// Silhouette family names in class-id order.
const std::vector<std::string>& shape_family_names();

ChipStages render_chip(int class_id, uint64_t chip_seed);

Dataset generate_dataset(int num_classes = 10, int per_class_train = 270,
                         int per_class_test = 230, uint64_t seed = 0);

DatasetSplit few_shot_split(const Dataset& raw, int k_labeled_per_class, uint64_t seed);

// Single binary file: magic "SFDS0001"; little-endian u32 counts
// (n_train, n_test, n_classes); length-prefixed meta JSON; per-sample
// u8 flags (bit0 has_label, bit1 has_mask), i32 label, 6400 f64 image,
// optional 6400 u8 mask, length-prefixed UTF-8 meta JSON.
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

// Canonical byte serialization (what save_dataset writes); also used for
// content hashing.
std::string serialize_dataset(const Dataset& ds);

bool dataset_equal(const Dataset& a, const Dataset& b);

// 8-bit grayscale PNG export for inspection; values clamped to [0,1].
void write_png_gray(const std::string& path, const Eigen::ArrayXd& img, int h, int w);
void write_png_mask(const std::string& path, const std::vector<uint8_t>& mask, int h, int w);

}  // namespace sfas
