#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "sfas/metrics.hpp"

using namespace sfas;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("classification_report: all correct and trivial errors") {
  std::vector<int> y = {0, 1, 2, 0, 1, 2};
  auto r = classification_report(y, y, {"a", "b", "c"});
  CHECK(r.overall_accuracy == 1.0);
  for (double a : r.per_class_accuracy) CHECK(a == 1.0);
  for (int c = 0; c < 3; ++c) CHECK(r.confusion(c, c) == 2);
  CHECK(r.confusion.sum() == 6);

  CHECK_THROWS_AS(classification_report({}, {}, {"a"}), std::invalid_argument);
  CHECK_THROWS_AS(classification_report({0, 3}, {0, 1}, {"a", "b"}), std::invalid_argument);
}

TEST_CASE("classification_report: half right per class is 50% everywhere") {
  std::vector<int> labels = {0, 0, 1, 1};
  std::vector<int> preds = {0, 1, 1, 0};
  auto r = classification_report(preds, labels, {"a", "b"});
  CHECK(r.overall_accuracy == 0.5);
  CHECK(r.per_class_accuracy[0] == 0.5);
  CHECK(r.per_class_accuracy[1] == 0.5);
}

TEST_CASE("classification_report: random case against a naive counting oracle") {
  Rng rng(81);
  const int C = 7, N = 500;
  std::vector<int> labels, preds;
  for (int i = 0; i < N; ++i) {
    labels.push_back(static_cast<int>(rng.below(C)));
    preds.push_back(static_cast<int>(rng.below(C)));
  }
  std::vector<std::string> names;
  for (int c = 0; c < C; ++c) names.push_back("c" + std::to_string(c));
  auto r = classification_report(preds, labels, names);

  long correct = 0;
  std::vector<long> pc_correct(C, 0), pc_total(C, 0);
  for (int i = 0; i < N; ++i) {
    ++pc_total[static_cast<size_t>(labels[static_cast<size_t>(i)])];
    if (labels[static_cast<size_t>(i)] == preds[static_cast<size_t>(i)]) {
      ++correct;
      ++pc_correct[static_cast<size_t>(labels[static_cast<size_t>(i)])];
    }
  }
  CHECK(r.overall_accuracy == doctest::Approx(static_cast<double>(correct) / N));
  for (int c = 0; c < C; ++c) {
    CHECK(r.per_class_total[static_cast<size_t>(c)] == pc_total[static_cast<size_t>(c)]);
    CHECK(r.per_class_correct[static_cast<size_t>(c)] == pc_correct[static_cast<size_t>(c)]);
  }
}

TEST_CASE("segmentation_report: exact and inverted masks") {
  std::vector<uint8_t> gt = {1, 1, 0, 0, 1, 0};
  auto perfect = segmentation_report({gt}, {gt});
  CHECK(perfect.target_accuracy == 1.0);
  CHECK(perfect.background_accuracy == 1.0);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.iou == 1.0);

  std::vector<uint8_t> inv;
  for (uint8_t v : gt) inv.push_back(v ? 0 : 1);
  auto flipped = segmentation_report({inv}, {gt});
  CHECK(flipped.target_accuracy == 0.0);
  CHECK(flipped.background_accuracy == 0.0);
  CHECK(flipped.iou == 0.0);
}

TEST_CASE("segmentation_report: hand-counted 2x2 case") {
  // TP=1, FP=1, FN=0, TN=2
  std::vector<uint8_t> gt = {1, 0, 0, 0};
  std::vector<uint8_t> pred = {1, 1, 0, 0};
  auto r = segmentation_report({pred}, {gt});
  CHECK(r.target_accuracy == 1.0);
  CHECK(r.background_accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(r.accuracy == doctest::Approx(0.75));
  CHECK(r.iou == doctest::Approx(0.5));

  std::vector<uint8_t> bad = {2, 0, 0, 0};
  CHECK_THROWS_WITH_AS(segmentation_report({bad}, {gt}), doctest::Contains("non-binary"),
                       std::invalid_argument);
}

TEST_CASE("segmentation_report: accuracy is a weighted mean; IoU bounded by target acc and precision") {
  Rng rng(82);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<uint8_t> gt(200), pred(200);
    for (int i = 0; i < 200; ++i) {
      gt[static_cast<size_t>(i)] = rng.uniform() < 0.35 ? 1 : 0;
      pred[static_cast<size_t>(i)] = rng.uniform() < 0.4 ? 1 : 0;
    }
    auto r = segmentation_report({pred}, {gt});
    CHECK(r.accuracy >= std::min(r.target_accuracy, r.background_accuracy) - 1e-12);
    CHECK(r.accuracy <= std::max(r.target_accuracy, r.background_accuracy) + 1e-12);
    const double precision =
        r.tp + r.fp == 0 ? 1.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
    CHECK(r.iou <= std::min(r.target_accuracy, precision) + 1e-12);
  }
}

TEST_CASE("emit tables: deterministic bytes and exact JSON round-trip") {
  std::vector<AblationRow> rows = {{5, 1, "with_seg", 0.8125}, {5, 1, "without_seg", 0.5}};
  emit_ablation_tables(rows, "test_ablation");
  const std::string csv1 = slurp("test_ablation.csv");
  emit_ablation_tables(rows, "test_ablation");
  CHECK(csv1 == slurp("test_ablation.csv"));

  std::istringstream csv(csv1);
  std::string line;
  int nlines = 0;
  while (std::getline(csv, line)) ++nlines;
  CHECK(nlines == 3);  // header + 2 rows

  auto parsed = nlohmann::json::parse(slurp("test_ablation.json"));
  REQUIRE(parsed.size() == 2);
  CHECK(parsed[0]["overall_accuracy"].get<double>() == 0.8125);
  CHECK(parsed[1]["variant"] == "without_seg");
  std::remove("test_ablation.csv");
  std::remove("test_ablation.json");

  SegmentationReport s;
  s.target_accuracy = 0.5817;
  s.background_accuracy = 0.8835;
  s.accuracy = 0.7326;
  s.iou = 0.5210;
  emit_segmentation_tables({{"otsu", s}}, "test_table8");
  auto t8 = nlohmann::json::parse(slurp("test_table8.json"));
  CHECK(t8[0]["method"] == "otsu");
  CHECK(t8[0]["metrics"]["iou"].get<double>() == 0.5210);
  std::remove("test_table8.csv");
  std::remove("test_table8.json");
}

TEST_CASE("metrics report writer: files appear with both sections") {
  MetricsReport rep;
  rep.classification = classification_report({0, 1}, {0, 1}, {"a", "b"});
  SegmentationReport s;
  s.target_accuracy = s.background_accuracy = s.accuracy = s.iou = 1.0;
  rep.segmentation = s;
  write_metrics_report(rep, "test_report");
  auto j = nlohmann::json::parse(slurp("test_report.json"));
  CHECK(j.contains("classification"));
  CHECK(j.contains("segmentation"));
  CHECK(slurp("test_report.csv").find("overall,all,1") != std::string::npos);
  std::remove("test_report.json");
  std::remove("test_report.csv");
}
