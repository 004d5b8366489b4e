#include <doctest.h>

#include <cstdio>
#include <set>

#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "sfas/dataset.hpp"
#include "sfas/rng.hpp"

using namespace sfas;

TEST_CASE("generate_dataset: same seed gives byte-identical serialization") {
  Dataset a = generate_dataset(3, 8, 5, 123);
  Dataset b = generate_dataset(3, 8, 5, 123);
  CHECK(serialize_dataset(a) == serialize_dataset(b));
  CHECK(dataset_equal(a, b));
  Dataset c = generate_dataset(3, 8, 5, 124);
  CHECK(!dataset_equal(a, c));
}

TEST_CASE("generate_dataset: counts, labels, masks, and argument validation") {
  Dataset ds = generate_dataset(4, 6, 3, 9);
  CHECK(ds.train.size() == 24);
  CHECK(ds.test.size() == 12);
  CHECK(ds.class_names.size() == 4);
  for (const auto& s : ds.train) {
    CHECK(s.has_label());
    CHECK(s.has_mask());
    CHECK(s.image.size() == kChipPixels);
    CHECK(s.image.minCoeff() >= 0.0);
    CHECK(s.image.maxCoeff() <= 1.0);
  }
  CHECK_THROWS_AS(generate_dataset(1, 5, 5, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(11, 5, 5, 0), std::invalid_argument);
}

TEST_CASE("generator: every mask foreground fraction lies in [2%, 40%]") {
  for (int c = 0; c < 10; ++c) {
    for (int j = 0; j < 30; ++j) {
      ChipStages st = render_chip(c, derive_seed(31337, static_cast<uint64_t>(c * 30 + j)));
      double fg = 0;
      for (uint8_t v : st.mask) fg += v;
      fg /= kChipPixels;
      CHECK(fg >= 0.02);
      CHECK(fg <= 0.40);
    }
  }
}

TEST_CASE("generator: speckle ratio over target pixels averages 1 (exponential mean)") {
  // 1000 chips; mean of speckled/clean over mask pixels within 5% of 1.
  double sum = 0.0;
  long count = 0;
  for (int j = 0; j < 1000; ++j) {
    ChipStages st = render_chip(j % 10, derive_seed(777, static_cast<uint64_t>(j)));
    for (int i = 0; i < kChipPixels; ++i) {
      if (!st.mask[static_cast<size_t>(i)]) continue;
      sum += st.speckled[i] / st.clean[i];
      ++count;
    }
  }
  CHECK(count > 100000);
  CHECK(sum / static_cast<double>(count) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("generator: masks align with clean intensity above the clutter mean") {
  for (int c = 0; c < 10; ++c) {
    ChipStages st = render_chip(c, derive_seed(4242, static_cast<uint64_t>(c)));
    double clutter_sum = 0.0;
    long clutter_n = 0;
    for (int i = 0; i < kChipPixels; ++i)
      if (!st.mask[static_cast<size_t>(i)]) {
        clutter_sum += st.clean[i];
        ++clutter_n;
      }
    const double clutter_mean = clutter_sum / static_cast<double>(clutter_n);
    for (int i = 0; i < kChipPixels; ++i)
      if (st.mask[static_cast<size_t>(i)]) CHECK(st.clean[i] > clutter_mean);
  }
}

TEST_CASE("generator: nearest-centroid on clean images separates the classes (>90%)") {
  // Learnability oracle at reduced size; the full-size check runs in the
  // acceptance suite.
  const int C = 10, per_train = 40, per_test = 20;
  std::vector<Eigen::ArrayXd> centroid(C, Eigen::ArrayXd::Zero(kChipPixels));
  for (int c = 0; c < C; ++c) {
    for (int j = 0; j < per_train; ++j)
      centroid[static_cast<size_t>(c)] +=
          render_chip(c, derive_seed(21, static_cast<uint64_t>(c * per_train + j))).clean;
    centroid[static_cast<size_t>(c)] /= per_train;
  }
  int correct = 0;
  for (int c = 0; c < C; ++c)
    for (int j = 0; j < per_test; ++j) {
      Eigen::ArrayXd x =
          render_chip(c, derive_seed(22, static_cast<uint64_t>(c * per_test + j))).clean;
      int best = -1;
      double bd = 1e300;
      for (int k = 0; k < C; ++k) {
        const double d = (x - centroid[static_cast<size_t>(k)]).matrix().squaredNorm();
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      correct += best == c;
    }
  CHECK(static_cast<double>(correct) / (C * per_test) > 0.9);
}

TEST_CASE("few_shot_split: pools, counts, determinism, and boundary cases") {
  Dataset ds = generate_dataset(5, 10, 4, 55);
  DatasetSplit sp = few_shot_split(ds, 3, 7);
  CHECK(sp.labeled.size() == 15);
  CHECK(sp.unlabeled.size() == 35);
  CHECK(sp.test.size() == 20);
  for (const auto& s : sp.labeled) {
    CHECK(s.has_label());
    CHECK(!s.has_mask());
  }
  for (const auto& s : sp.unlabeled) {
    CHECK(!s.has_label());
    CHECK(s.has_mask());
  }
  // id-disjoint pools
  std::set<int> labeled_ids, unlabeled_ids;
  for (const auto& s : sp.labeled) labeled_ids.insert(s.id);
  for (const auto& s : sp.unlabeled) unlabeled_ids.insert(s.id);
  for (int id : labeled_ids) CHECK(unlabeled_ids.count(id) == 0);

  // determinism / seed sensitivity
  DatasetSplit sp2 = few_shot_split(ds, 3, 7);
  std::set<int> ids2;
  for (const auto& s : sp2.labeled) ids2.insert(s.id);
  CHECK(ids2 == labeled_ids);
  DatasetSplit sp3 = few_shot_split(ds, 3, 8);
  std::set<int> ids3;
  for (const auto& s : sp3.labeled) ids3.insert(s.id);
  CHECK(ids3 != labeled_ids);

  // k = population empties the unlabeled pool; k beyond it throws
  DatasetSplit all = few_shot_split(ds, 10, 1);
  CHECK(all.unlabeled.empty());
  CHECK(all.labeled.size() == 50);
  CHECK_THROWS_WITH_AS(few_shot_split(ds, 11, 1), doctest::Contains("exceeds population"),
                       std::invalid_argument);
}

TEST_CASE("dataset file: round-trip is deep-equal and size is exactly predictable") {
  Dataset ds = generate_dataset(4, 5, 3, 99);
  const std::string path = "test_dataset.sfds";
  save_dataset(ds, path);
  Dataset back = load_dataset(path);
  CHECK(dataset_equal(ds, back));

  // size arithmetic from the format definition
  nlohmann::json meta;
  meta["class_names"] = ds.class_names;
  meta["seed"] = ds.seed;
  size_t expect = 8 + 3 * 4 + 4 + meta.dump().size();
  auto sample_size = [](const Sample& s) {
    nlohmann::json m;
    m["class_name"] = s.class_name;
    m["pose_deg"] = s.pose_deg;
    m["seed"] = s.seed;
    m["id"] = s.id;
    return 1 + 4 + 6400 * 8 + (s.has_mask() ? 6400 : 0) + 4 + m.dump().size();
  };
  for (const auto& s : ds.train) expect += sample_size(s);
  for (const auto& s : ds.test) expect += sample_size(s);
  FILE* f = fopen(path.c_str(), "rb");
  fseek(f, 0, SEEK_END);
  CHECK(static_cast<size_t>(ftell(f)) == expect);
  fclose(f);
  std::remove(path.c_str());
}

TEST_CASE("dataset file: truncation reports the failing byte offset") {
  Dataset ds = generate_dataset(2, 3, 2, 1);
  const std::string path = "test_dataset_trunc.sfds";
  const std::string buf = serialize_dataset(ds);
  {
    FILE* f = fopen(path.c_str(), "wb");
    fwrite(buf.data(), 1, buf.size() / 2, f);
    fclose(f);
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("byte offset"), std::runtime_error);
  std::remove(path.c_str());

  {
    FILE* f = fopen(path.c_str(), "wb");
    fwrite("XXXX0000", 1, 8, f);
    fclose(f);
  }
  CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("bad magic"), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("png export: files carry the PNG signature") {
  ChipStages st = render_chip(0, 5);
  const std::string p1 = "test_chip.png", p2 = "test_mask.png";
  write_png_gray(p1, st.final_img, kChip, kChip);
  write_png_mask(p2, st.mask, kChip, kChip);
  for (const auto& p : {p1, p2}) {
    FILE* f = fopen(p.c_str(), "rb");
    REQUIRE(f != nullptr);
    unsigned char sig[8];
    REQUIRE(fread(sig, 1, 8, f) == 8);
    CHECK(sig[0] == 0x89);
    CHECK(sig[1] == 'P');
    CHECK(sig[2] == 'N');
    CHECK(sig[3] == 'G');
    fclose(f);
    std::remove(p.c_str());
  }
}
