#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <cstring>

#include "oracles.hpp"
#include "sfas/losses.hpp"
#include "sfas/model.hpp"

using namespace sfas;

namespace {

Tensor random_chips(Rng& rng, Index n) { return oracle::random_tensor(rng, n, 1, 80, 80, 0.0, 1.0); }

}  // namespace

TEST_CASE("init_model: deterministic per seed, different across seeds") {
  ModelState a = init_model(10, 42);
  ModelState b = init_model(10, 42);
  ModelState c = init_model(10, 43);
  CHECK(module_state_hash(a, Module::extractor) == module_state_hash(b, Module::extractor));
  CHECK(module_state_hash(a, Module::decoder) == module_state_hash(b, Module::decoder));
  CHECK(module_state_hash(a, Module::classifier) == module_state_hash(b, Module::classifier));
  CHECK(module_state_hash(a, Module::extractor) != module_state_hash(c, Module::extractor));
  CHECK_THROWS_AS(init_model(1, 0), std::invalid_argument);
}

TEST_CASE("architecture inventory matches the hyper-parameter table row counts") {
  const auto rows = architecture_rows();
  int e = 0, d = 0, c = 0;
  for (const auto& r : rows) {
    if (r.module == "extractor") ++e;
    if (r.module == "decoder") ++d;
    if (r.module == "classifier") ++c;
  }
  CHECK(e == 6);
  CHECK(d == 7);
  CHECK(c == 5);
}

TEST_CASE("shape chain: 80->40->20->10 extractor, 10->...->80x2 decoder, C-simplex classifier") {
  Rng rng(50);
  ModelState m = init_model(10, 7);
  Tensor x = random_chips(rng, 4);

  Tensor f = extractor_forward(m, x, BnMode::eval, nullptr);
  CHECK(f.shape() == std::array<Index, 4>{4, 64, 10, 10});

  Tensor logits = decoder_forward(m, f, BnMode::eval, nullptr);
  CHECK(logits.shape() == std::array<Index, 4>{4, 2, 80, 80});
  CHECK(logits.all_finite());

  MatrixXd probs = classifier_forward(m, f, BnMode::eval, nullptr);
  CHECK(probs.rows() == 4);
  CHECK(probs.cols() == 10);
  for (Index i = 0; i < 4; ++i) {
    CHECK(std::abs(probs.row(i).sum() - 1.0) < 1e-9);
    for (Index j = 0; j < 10; ++j) CHECK(probs(i, j) > 0.0);
  }

  CHECK_THROWS_AS(extractor_forward(m, Tensor(1, 1, 64, 64), BnMode::eval, nullptr),
                  std::invalid_argument);
  CHECK_THROWS_AS(decoder_forward(m, Tensor(1, 32, 10, 10), BnMode::eval, nullptr),
                  std::invalid_argument);
  CHECK_THROWS_AS(classifier_forward(m, Tensor(1, 64, 8, 8), BnMode::eval, nullptr),
                  std::invalid_argument);
}

TEST_CASE("extractor: eval and train modes differ only through batch-norm sources") {
  Rng rng(51);
  ModelState m = init_model(4, 3);
  Tensor x = random_chips(rng, 2);
  Tensor f_eval1 = extractor_forward(m, x, BnMode::eval, nullptr);
  Tensor f_eval2 = extractor_forward(m, x, BnMode::eval, nullptr);
  // eval is pure: bit-identical on repeat
  CHECK(std::memcmp(f_eval1.data(), f_eval2.data(), sizeof(double) * f_eval1.size()) == 0);

  Tensor f_frozen = extractor_forward(m, x, BnMode::train_frozen_stats, nullptr);
  // fresh-ish running stats vs batch stats: outputs differ
  CHECK(std::memcmp(f_eval1.data(), f_frozen.data(), sizeof(double) * f_eval1.size()) != 0);
}

TEST_CASE("classifier: permuting the batch permutes outputs identically (eval mode)") {
  Rng rng(52);
  ModelState m = init_model(5, 11);
  Tensor x = random_chips(rng, 3);
  Tensor f = extractor_forward(m, x, BnMode::eval, nullptr);
  MatrixXd p = classifier_forward(m, f, BnMode::eval, nullptr);

  // reverse the batch
  Tensor xr(3, 1, 80, 80);
  for (Index n = 0; n < 3; ++n)
    std::memcpy(xr.plane(2 - n, 0), x.plane(n, 0), sizeof(double) * 6400);
  Tensor fr = extractor_forward(m, xr, BnMode::eval, nullptr);
  MatrixXd pr = classifier_forward(m, fr, BnMode::eval, nullptr);
  for (Index n = 0; n < 3; ++n)
    for (Index c = 0; c < 5; ++c) CHECK(pr(2 - n, c) == doctest::Approx(p(n, c)).epsilon(1e-12));
}

TEST_CASE("end-to-end gradients: extractor+decoder and extractor+classifier vs finite differences") {
  Rng rng(53);
  ModelState m = init_model(3, 17);
  Tensor x = random_chips(rng, 2);
  Tensor masks(2, 1, 80, 80);
  for (Index i = 0; i < masks.size(); ++i) masks.array()[i] = rng.uniform() < 0.2 ? 1.0 : 0.0;
  std::vector<int> labels = {1, 2};
  MatrixXd onehot = one_hot(labels, 3);

  // --- segmentation path ---
  {
    ExtractorCache ec;
    DecoderCache dc;
    Tensor f = extractor_forward(m, x, BnMode::train_frozen_stats, &ec);
    Tensor logits = decoder_forward(m, f, BnMode::train_frozen_stats, &dc);
    zero_grads(m, Module::extractor);
    zero_grads(m, Module::decoder);
    Tensor dlog = segmentation_loss_grad_logits(logits, masks);
    Tensor dfeat = decoder_backward(m, dc, dlog, true);
    extractor_backward(m, ec, dfeat, true);

    auto loss = [&]() {
      Tensor ff = extractor_forward(m, x, BnMode::train_frozen_stats, nullptr);
      Tensor ll = decoder_forward(m, ff, BnMode::train_frozen_stats, nullptr);
      return segmentation_loss(ll, masks);
    };
    // spot-check a few coordinates in every parameter tensor of both modules
    for (Module which : {Module::extractor, Module::decoder}) {
      auto params = module_params(m, which);
      auto grads = module_grads(m, which);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        Rng pick(900 + static_cast<uint64_t>(pi));
        for (int rep = 0; rep < 2; ++rep) {
          const Index i = static_cast<Index>(pick.below(static_cast<uint64_t>(params[pi].size)));
          double* slot = params[pi].data + i;
          const double saved = *slot;
          const double eps = 1e-5;
          *slot = saved + eps;
          const double fp = loss();
          *slot = saved - eps;
          const double fm = loss();
          *slot = saved;
          const double fd = (fp - fm) / (2 * eps);
          CHECK_MESSAGE(oracle::rel_err(grads[pi].data[i], fd) < 1e-4,
                        params[pi].name << "[" << i << "] analytic=" << grads[pi].data[i]
                                        << " fd=" << fd);
        }
      }
    }
  }

  // --- recognition path ---
  {
    ExtractorCache ec;
    ClassifierCache cc;
    Tensor f = extractor_forward(m, x, BnMode::train_frozen_stats, &ec);
    MatrixXd probs = classifier_forward(m, f, BnMode::train_frozen_stats, &cc);
    zero_grads(m, Module::extractor);
    zero_grads(m, Module::classifier);
    MatrixXd dlog = recognition_loss_grad_logits(probs, onehot);
    Tensor dfeat = classifier_backward(m, cc, dlog, true);
    extractor_backward(m, ec, dfeat, true);

    auto loss = [&]() {
      Tensor ff = extractor_forward(m, x, BnMode::train_frozen_stats, nullptr);
      MatrixXd pp = classifier_forward(m, ff, BnMode::train_frozen_stats, nullptr);
      return recognition_loss(pp, onehot);
    };
    for (Module which : {Module::extractor, Module::classifier}) {
      auto params = module_params(m, which);
      auto grads = module_grads(m, which);
      for (size_t pi = 0; pi < params.size(); ++pi) {
        Rng pick(1700 + static_cast<uint64_t>(pi));
        for (int rep = 0; rep < 2; ++rep) {
          const Index i = static_cast<Index>(pick.below(static_cast<uint64_t>(params[pi].size)));
          double* slot = params[pi].data + i;
          const double saved = *slot;
          const double eps = 1e-5;
          *slot = saved + eps;
          const double fp = loss();
          *slot = saved - eps;
          const double fm = loss();
          *slot = saved;
          const double fd = (fp - fm) / (2 * eps);
          CHECK_MESSAGE(oracle::rel_err(grads[pi].data[i], fd) < 1e-4,
                        params[pi].name << "[" << i << "] analytic=" << grads[pi].data[i]
                                        << " fd=" << fd);
        }
      }
    }
  }
}

TEST_CASE("checkpoint: save/load round-trip restores every parameter and buffer") {
  Rng rng(54);
  ModelState m = init_model(7, 99);
  // dirty the running stats so buffers are exercised too
  Tensor x = random_chips(rng, 2);
  extractor_forward(m, x, BnMode::train, nullptr);

  const std::string path = "test_checkpoint.sfas";
  save_checkpoint(m, path);
  ModelState loaded = load_checkpoint(path);
  CHECK(loaded.num_classes == 7);
  for (Module which : {Module::extractor, Module::decoder, Module::classifier})
    CHECK(module_state_hash(m, which) == module_state_hash(loaded, which));
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: bad magic and truncation are rejected") {
  const std::string path = "test_checkpoint_bad.sfas";
  {
    FILE* f = fopen(path.c_str(), "wb");
    fwrite("NOTSFAS0", 1, 8, f);
    fclose(f);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"),
                       std::runtime_error);
  std::remove(path.c_str());

  ModelState m = init_model(3, 5);
  save_checkpoint(m, path);
  // truncate the blob section
  {
    FILE* f = fopen(path.c_str(), "rb+");
    fseek(f, 0, SEEK_END);
    const long size = ftell(f);
    (void)!truncate(path.c_str(), size / 2);
    fclose(f);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("truncated"),
                       std::runtime_error);
  std::remove(path.c_str());
}
