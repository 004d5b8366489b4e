#include <doctest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "sfas/nn_ops.hpp"
#include "sfas/tensor.hpp"

using namespace sfas;

namespace {

double dot(const Tensor& a, const Tensor& b) { return (a.array() * b.array()).sum(); }

}  // namespace

TEST_CASE("conv2d: identity kernel passes the input through") {
  Rng rng(1);
  Tensor x = oracle::random_tensor(rng, 1, 1, 5, 5);
  Tensor w = Tensor::full(1, 1, 1, 1, 1.0);
  VectorXd b = VectorXd::Zero(1);
  Tensor y = conv2d(x, w, b, 1, 0);
  REQUIRE(y.same_shape(x));
  for (Index i = 0; i < x.size(); ++i) CHECK(y.array()[i] == doctest::Approx(x.array()[i]));
}

TEST_CASE("conv2d: all-ones 3x3 kernel sums the window") {
  Tensor x = Tensor::full(1, 1, 3, 3, 1.0);
  Tensor w = Tensor::full(1, 1, 3, 3, 1.0);
  VectorXd b = VectorXd::Zero(1);
  Tensor y = conv2d(x, w, b, 1, 0);
  REQUIRE(y.shape() == std::array<Index, 4>{1, 1, 1, 1});
  CHECK(y(0, 0, 0, 0) == doctest::Approx(9.0));
}

TEST_CASE("conv2d: matches the 6-nested-loop reference on an 80x80 chip") {
  Rng rng(2);
  Tensor x = oracle::random_tensor(rng, 1, 1, 80, 80);
  Tensor w = oracle::random_tensor(rng, 16, 1, 3, 3);
  VectorXd b = oracle::random_vector(rng, 16);
  Tensor y = conv2d(x, w, b, 1, 1);
  REQUIRE(y.shape() == std::array<Index, 4>{1, 16, 80, 80});
  Tensor ref = oracle::conv2d_ref(x, w, b, 1, 1);
  CHECK(oracle::max_rel_err(y, ref) < 1e-12);
}

TEST_CASE("conv2d: stride and batch handling matches the reference") {
  Rng rng(3);
  Tensor x = oracle::random_tensor(rng, 3, 4, 11, 9);
  Tensor w = oracle::random_tensor(rng, 5, 4, 3, 3);
  VectorXd b = oracle::random_vector(rng, 5);
  Tensor y = conv2d(x, w, b, 2, 1);
  Tensor ref = oracle::conv2d_ref(x, w, b, 2, 1);
  REQUIRE(y.same_shape(ref));
  CHECK(oracle::max_rel_err(y, ref) < 1e-12);
}

TEST_CASE("conv2d: rejects channel mismatch with a descriptive error") {
  Tensor x(1, 3, 8, 8);
  Tensor w(4, 2, 3, 3);
  VectorXd b = VectorXd::Zero(4);
  CHECK_THROWS_WITH_AS(conv2d(x, w, b, 1, 1),
                       doctest::Contains("input channels (3) do not match weight K_in (2)"),
                       std::invalid_argument);
}

TEST_CASE("conv2d_backward: identity kernel routes grad_out through") {
  Rng rng(4);
  Tensor x = oracle::random_tensor(rng, 1, 1, 5, 5);
  Tensor w = Tensor::full(1, 1, 1, 1, 1.0);
  Tensor gout = oracle::random_tensor(rng, 1, 1, 5, 5);
  auto grads = conv2d_backward(x, w, gout, 1, 0);
  CHECK(oracle::max_rel_err(grads.grad_x, gout) < 1e-15);
}

TEST_CASE("conv2d_backward: zero grad_out gives zero gradients") {
  Rng rng(5);
  Tensor x = oracle::random_tensor(rng, 2, 3, 6, 6);
  Tensor w = oracle::random_tensor(rng, 4, 3, 3, 3);
  Tensor gout(2, 4, 6, 6);
  auto grads = conv2d_backward(x, w, gout, 1, 1);
  CHECK(grads.grad_x.array().abs().maxCoeff() == 0.0);
  CHECK(grads.grad_w.array().abs().maxCoeff() == 0.0);
  CHECK(grads.grad_b.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d_backward: all-ones kernel, unit grad_out sums input windows") {
  // With w = ones(3x3), pad 1 and grad_out = 1, each grad_w entry equals the
  // sum of the input samples its tap touches.
  Rng rng(6);
  Tensor x = oracle::random_tensor(rng, 1, 1, 6, 6);
  Tensor w = Tensor::full(1, 1, 3, 3, 1.0);
  Tensor gout = Tensor::full(1, 1, 6, 6, 1.0);
  auto grads = conv2d_backward(x, w, gout, 1, 1);
  for (Index ky = 0; ky < 3; ++ky)
    for (Index kx = 0; kx < 3; ++kx) {
      double expect = 0.0;
      for (Index oy = 0; oy < 6; ++oy)
        for (Index ox = 0; ox < 6; ++ox) {
          const Index iy = oy - 1 + ky, ix = ox - 1 + kx;
          if (iy >= 0 && iy < 6 && ix >= 0 && ix < 6) expect += x(0, 0, iy, ix);
        }
      CHECK(grads.grad_w(0, 0, ky, kx) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("conv2d_backward: matches finite differences") {
  Rng rng(7);
  Tensor x = oracle::random_tensor(rng, 2, 3, 8, 8);
  Tensor w = oracle::random_tensor(rng, 4, 3, 3, 3);
  VectorXd b = oracle::random_vector(rng, 4);
  Tensor gout = oracle::random_tensor(rng, 2, 4, 8, 8);

  auto grads = conv2d_backward(x, w, gout, 1, 1);

  auto loss_of_x = [&](const Tensor& xx) { return dot(conv2d(xx, w, b, 1, 1), gout); };
  Tensor fd_x = finite_diff_grad(loss_of_x, x);
  CHECK(oracle::max_rel_err(grads.grad_x, fd_x) < 1e-4);

  auto loss_of_w = [&](const Tensor& ww) { return dot(conv2d(x, ww, b, 1, 1), gout); };
  Tensor fd_w = finite_diff_grad(loss_of_w, w);
  CHECK(oracle::max_rel_err(grads.grad_w, fd_w) < 1e-4);
}

TEST_CASE("transposed_conv2d: 1x1 scalar case multiplies") {
  Tensor x = Tensor::full(1, 1, 1, 1, 3.0);
  Tensor w = Tensor::full(1, 1, 1, 1, -2.0);
  VectorXd b = VectorXd::Zero(1);
  Tensor y = transposed_conv2d(x, w, b, 1, 0, 0);
  REQUIRE(y.shape() == std::array<Index, 4>{1, 1, 1, 1});
  CHECK(y(0, 0, 0, 0) == doctest::Approx(-6.0));
}

TEST_CASE("transposed_conv2d: 10x10 -> 20x20 with stride 2 and matches reference") {
  Rng rng(8);
  Tensor x = oracle::random_tensor(rng, 1, 3, 10, 10);
  Tensor w = oracle::random_tensor(rng, 3, 5, 3, 3);
  VectorXd b = oracle::random_vector(rng, 5);
  Tensor y = transposed_conv2d(x, w, b, 2, 1, 1);
  REQUIRE(y.shape() == std::array<Index, 4>{1, 5, 20, 20});
  Tensor ref = oracle::tconv2d_ref(x, w, b, 2, 1, 1);
  CHECK(oracle::max_rel_err(y, ref) < 1e-12);
}

TEST_CASE("transposed_conv2d: adjoint of conv2d for matched geometry") {
  Rng rng(9);
  // <conv(x), y> == <x, tconv(y)> with zero biases and the same weights.
  Tensor x = oracle::random_tensor(rng, 2, 3, 9, 9);
  Tensor w = oracle::random_tensor(rng, 4, 3, 3, 3);
  VectorXd b0conv = VectorXd::Zero(4);
  VectorXd b0t = VectorXd::Zero(3);
  for (int stride : {1, 2}) {
    Tensor cx = conv2d(x, w, b0conv, stride, 1);
    Tensor y = oracle::random_tensor(rng, 2, 4, cx.h(), cx.w());
    // out_pad recovers the input size when the conv floor division dropped rows.
    const int out_pad = static_cast<int>(x.h() - ((cx.h() - 1) * stride - 2 + 3));
    Tensor ty = transposed_conv2d(y, w, b0t, stride, 1, out_pad);
    REQUIRE(ty.same_shape(x));
    CHECK(std::abs(dot(cx, y) - dot(x, ty)) < 1e-9);
  }
}

TEST_CASE("transposed_conv2d: negative output size is rejected") {
  Tensor x(1, 1, 1, 1);
  Tensor w(1, 1, 3, 3);
  VectorXd b = VectorXd::Zero(1);
  CHECK_THROWS_AS(transposed_conv2d(x, w, b, 1, 2, 0), std::invalid_argument);
}

TEST_CASE("transposed_conv2d backward: matches finite differences") {
  Rng rng(10);
  Tensor x = oracle::random_tensor(rng, 2, 3, 5, 5);
  Tensor w = oracle::random_tensor(rng, 3, 4, 3, 3);
  VectorXd b = oracle::random_vector(rng, 4);
  Tensor y = transposed_conv2d(x, w, b, 2, 1, 1);
  Tensor gout = oracle::random_tensor(rng, 2, 4, y.h(), y.w());

  auto grads = transposed_conv2d_backward(x, w, gout, 2, 1, 1);
  auto loss_of_x = [&](const Tensor& xx) {
    return dot(transposed_conv2d(xx, w, b, 2, 1, 1), gout);
  };
  CHECK(oracle::max_rel_err(grads.grad_x, finite_diff_grad(loss_of_x, x)) < 1e-4);
  auto loss_of_w = [&](const Tensor& ww) {
    return dot(transposed_conv2d(x, ww, b, 2, 1, 1), gout);
  };
  CHECK(oracle::max_rel_err(grads.grad_w, finite_diff_grad(loss_of_w, w)) < 1e-4);
}

TEST_CASE("maxpool2d: picks window maxima and their indices") {
  Tensor x(1, 1, 2, 2);
  x(0, 0, 0, 0) = 1;
  x(0, 0, 0, 1) = 2;
  x(0, 0, 1, 0) = 3;
  x(0, 0, 1, 1) = 4;
  auto r = maxpool2d(x);
  CHECK(r.y(0, 0, 0, 0) == 4.0);
  CHECK(r.argmax[0] == 3);
}

TEST_CASE("maxpool2d: constant input breaks ties toward the first scan index") {
  Tensor x = Tensor::full(1, 2, 4, 4, 7.5);
  auto r = maxpool2d(x);
  for (double v : r.y.array()) CHECK(v == 7.5);
  CHECK(r.argmax[0] == 0);
  CHECK(r.argmax[1] == 2);  // window starting at column 2
  CHECK(r.argmax[2] == 8);  // window starting at row 2
}

TEST_CASE("maxpool2d: 80x80 matches the loop oracle and halves the size") {
  Rng rng(11);
  Tensor x = oracle::random_tensor(rng, 1, 1, 80, 80);
  auto r = maxpool2d(x);
  REQUIRE(r.y.shape() == std::array<Index, 4>{1, 1, 40, 40});
  Tensor ref = oracle::maxpool_ref(x, 2, 2);
  CHECK(oracle::max_rel_err(r.y, ref) == 0.0);
}

TEST_CASE("maxpool2d: odd input rejected in strict mode, floored in floor mode") {
  Rng rng(12);
  Tensor x = oracle::random_tensor(rng, 1, 1, 11, 11);
  CHECK_THROWS_AS(maxpool2d(x), std::invalid_argument);
  auto r = maxpool2d(x, 2, 2, PoolMode::floor);
  CHECK(r.y.h() == 5);
  CHECK(r.y.w() == 5);
}

TEST_CASE("maxpool2d backward: routes gradient to the argmax") {
  Rng rng(13);
  Tensor x = oracle::random_tensor(rng, 2, 3, 8, 8);
  auto r = maxpool2d(x);
  Tensor gout = oracle::random_tensor(rng, 2, 3, 4, 4);
  Tensor gx = maxpool2d_backward(x.shape(), r.argmax, gout);

  auto loss = [&](const Tensor& xx) { return dot(maxpool2d(xx).y, gout); };
  CHECK(oracle::max_rel_err(gx, finite_diff_grad(loss, x, 1e-6)) < 1e-4);
}

TEST_CASE("batchnorm2d: train mode standardizes per channel") {
  Rng rng(14);
  Tensor x = oracle::random_tensor(rng, 4, 3, 6, 6, -2.0, 5.0);
  VectorXd gamma = VectorXd::Ones(3), beta = VectorXd::Zero(3);
  VectorXd rm = VectorXd::Zero(3), rv = VectorXd::Ones(3);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, BnMode::train, 1e-5, 0.1, nullptr);
  for (Index c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 36; ++i) mean += y.plane(n, c)[i];
    mean /= 4 * 36;
    for (Index n = 0; n < 4; ++n)
      for (Index i = 0; i < 36; ++i) var += (y.plane(n, c)[i] - mean) * (y.plane(n, c)[i] - mean);
    var /= 4 * 36;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(rm[c] != 0.0);  // EMA moved
  }
}

TEST_CASE("batchnorm2d: affine output for standardized input") {
  Rng rng(15);
  // Standardize a random tensor first, then check gamma/beta scaling.
  Tensor x = oracle::random_tensor(rng, 8, 2, 4, 4);
  VectorXd g1 = VectorXd::Ones(2), b0 = VectorXd::Zero(2);
  VectorXd rm = VectorXd::Zero(2), rv = VectorXd::Ones(2);
  Tensor xs = batchnorm2d(x, g1, b0, rm, rv, BnMode::train_frozen_stats, 0.0, 0.1, nullptr);

  VectorXd gamma = VectorXd::Constant(2, 2.0), beta = VectorXd::Constant(2, 3.0);
  Tensor y = batchnorm2d(xs, gamma, beta, rm, rv, BnMode::train_frozen_stats, 0.0, 0.1, nullptr);
  for (Index i = 0; i < y.size(); ++i)
    CHECK(y.array()[i] == doctest::Approx(2.0 * xs.array()[i] + 3.0).epsilon(1e-9));
}

TEST_CASE("batchnorm2d: eval mode with unit running stats is a pure affine map") {
  Rng rng(16);
  Tensor x = oracle::random_tensor(rng, 2, 3, 5, 5);
  VectorXd gamma = VectorXd::Constant(3, 1.5), beta = VectorXd::Constant(3, -0.5);
  VectorXd rm = VectorXd::Zero(3), rv = VectorXd::Ones(3);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, BnMode::eval, 0.0, 0.1, nullptr);
  for (Index i = 0; i < y.size(); ++i)
    CHECK(y.array()[i] == doctest::Approx(1.5 * x.array()[i] - 0.5).epsilon(1e-12));
}

TEST_CASE("batchnorm2d: frozen-stats mode leaves running statistics untouched") {
  Rng rng(17);
  Tensor x = oracle::random_tensor(rng, 4, 2, 4, 4);
  VectorXd gamma = VectorXd::Ones(2), beta = VectorXd::Zero(2);
  VectorXd rm = VectorXd::Constant(2, 0.25), rv = VectorXd::Constant(2, 2.0);
  VectorXd rm0 = rm, rv0 = rv;
  batchnorm2d(x, gamma, beta, rm, rv, BnMode::train_frozen_stats, 1e-5, 0.1, nullptr);
  CHECK(rm == rm0);
  CHECK(rv == rv0);
}

TEST_CASE("batchnorm2d: channel mismatch rejected") {
  Tensor x(1, 3, 4, 4);
  VectorXd g = VectorXd::Ones(2), b = VectorXd::Zero(2);
  VectorXd rm = VectorXd::Zero(2), rv = VectorXd::Ones(2);
  CHECK_THROWS_AS(batchnorm2d(x, g, b, rm, rv, BnMode::train, 1e-5, 0.1, nullptr),
                  std::invalid_argument);
}

TEST_CASE("batchnorm2d backward: matches finite differences in train mode") {
  Rng rng(18);
  Tensor x = oracle::random_tensor(rng, 2, 3, 4, 4);
  VectorXd gamma = oracle::random_vector(rng, 3, 0.5, 2.0);
  VectorXd beta = oracle::random_vector(rng, 3);
  Tensor gout = oracle::random_tensor(rng, 2, 3, 4, 4);

  VectorXd rm = VectorXd::Zero(3), rv = VectorXd::Ones(3);
  BnCache cache;
  batchnorm2d(x, gamma, beta, rm, rv, BnMode::train_frozen_stats, 1e-5, 0.1, &cache);
  VectorXd gg = VectorXd::Zero(3), gb = VectorXd::Zero(3);
  Tensor gx = batchnorm2d_backward(x, gamma, cache, gout, &gg, &gb);

  auto loss = [&](const Tensor& xx) {
    VectorXd rm2 = VectorXd::Zero(3), rv2 = VectorXd::Ones(3);
    return dot(batchnorm2d(xx, gamma, beta, rm2, rv2, BnMode::train_frozen_stats, 1e-5, 0.1,
                           nullptr),
               gout);
  };
  CHECK(oracle::max_rel_err(gx, finite_diff_grad(loss, x)) < 1e-4);

  // gamma/beta via directional finite differences
  for (Index c = 0; c < 3; ++c) {
    const double eps = 1e-5;
    VectorXd gp = gamma, gm = gamma;
    gp[c] += eps;
    gm[c] -= eps;
    VectorXd rm2 = VectorXd::Zero(3), rv2 = VectorXd::Ones(3);
    const double fp = dot(
        batchnorm2d(x, gp, beta, rm2, rv2, BnMode::train_frozen_stats, 1e-5, 0.1, nullptr), gout);
    const double fm = dot(
        batchnorm2d(x, gm, beta, rm2, rv2, BnMode::train_frozen_stats, 1e-5, 0.1, nullptr), gout);
    CHECK(oracle::rel_err(gg[c], (fp - fm) / (2 * eps)) < 1e-5);
  }
}

TEST_CASE("leaky_relu: values and slope validation") {
  Tensor x(1, 1, 1, 2);
  x(0, 0, 0, 0) = -1.0;
  x(0, 0, 0, 1) = 2.0;
  Tensor y = leaky_relu(x, 0.01);
  CHECK(y(0, 0, 0, 0) == doctest::Approx(-0.01));
  CHECK(y(0, 0, 0, 1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(leaky_relu(x, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(leaky_relu(x, -0.1), std::invalid_argument);
}

TEST_CASE("leaky_relu backward: matches finite differences away from the kink") {
  Rng rng(19);
  Tensor x = oracle::random_tensor(rng, 2, 3, 8, 8);
  // keep all entries away from 0 so central differences are clean
  for (Index i = 0; i < x.size(); ++i)
    if (std::abs(x.array()[i]) < 1e-2) x.array()[i] = 0.5;
  Tensor gout = oracle::random_tensor(rng, 2, 3, 8, 8);
  Tensor gx = leaky_relu_backward(x, gout, 0.01);
  auto loss = [&](const Tensor& xx) { return dot(leaky_relu(xx, 0.01), gout); };
  CHECK(oracle::max_rel_err(gx, finite_diff_grad(loss, x, 1e-4)) < 1e-6);
}

TEST_CASE("leaky_relu: gradient at exactly zero takes the positive branch") {
  Tensor x(1, 1, 1, 1);
  Tensor gout = Tensor::full(1, 1, 1, 1, 3.0);
  Tensor gx = leaky_relu_backward(x, gout, 0.01);
  CHECK(gx(0, 0, 0, 0) == 3.0);
}

TEST_CASE("softmax: equal logits over 10 classes give 0.1 each") {
  Tensor x = Tensor::full(2, 10, 1, 1, 4.2);
  Tensor p = softmax(x, 1);
  for (Index i = 0; i < p.size(); ++i) CHECK(p.array()[i] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("softmax: survives huge logits without overflow") {
  Tensor x(1, 2, 1, 1);
  x(0, 0, 0, 0) = 1000.0;
  x(0, 1, 0, 0) = 0.0;
  Tensor p = softmax(x, 1);
  CHECK(p(0, 0, 0, 0) == doctest::Approx(1.0));
  CHECK(p(0, 1, 0, 0) == doctest::Approx(0.0));
  CHECK(p.all_finite());
}

TEST_CASE("softmax: matches the exp/sum oracle and sums to one") {
  Rng rng(20);
  Tensor x = oracle::random_tensor(rng, 2, 7, 3, 3, -4.0, 4.0);
  Tensor p = softmax(x, 1);
  Tensor ref = oracle::softmax_ref(x);
  CHECK(oracle::max_rel_err(p, ref) < 1e-12);
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 9; ++i) {
      double sum = 0.0;
      for (Index c = 0; c < 7; ++c) sum += p.plane(n, c)[i];
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  CHECK_THROWS_AS(softmax(x, 0), std::invalid_argument);
}

TEST_CASE("finite_diff_grad: analytic cases") {
  Rng rng(21);
  Tensor x = oracle::random_tensor(rng, 1, 2, 3, 3);
  Tensor g1 = finite_diff_grad([](const Tensor& t) { return t.array().sum(); }, x);
  for (Index i = 0; i < g1.size(); ++i) CHECK(g1.array()[i] == doctest::Approx(1.0));
  Tensor g2 = finite_diff_grad([](const Tensor& t) { return t.array().square().sum(); }, x);
  for (Index i = 0; i < g2.size(); ++i)
    CHECK(g2.array()[i] == doctest::Approx(2.0 * x.array()[i]).epsilon(1e-6));
}

TEST_CASE("linear primitives satisfy the adjoint identity") {
  Rng rng(22);
  // conv2d with zero bias: <L(x), y> == <x, L^T(y)>
  Tensor x = oracle::random_tensor(rng, 2, 3, 8, 8);
  Tensor w = oracle::random_tensor(rng, 4, 3, 3, 3);
  VectorXd b0 = VectorXd::Zero(4);
  Tensor lx = conv2d(x, w, b0, 1, 1);
  Tensor y = oracle::random_tensor(rng, 2, 4, 8, 8);
  Tensor lty = conv2d_backward_acc(x, w, y, 1, 1, nullptr, nullptr);
  CHECK(std::abs(dot(lx, y) - dot(x, lty)) < 1e-9);
}

TEST_CASE("primitives are deterministic across repeated calls") {
  Rng rng(23);
  Tensor x = oracle::random_tensor(rng, 4, 3, 16, 16);
  Tensor w = oracle::random_tensor(rng, 8, 3, 3, 3);
  VectorXd b = oracle::random_vector(rng, 8);
  Tensor y1 = conv2d(x, w, b, 1, 1);
  Tensor y2 = conv2d(x, w, b, 1, 1);
  CHECK(std::memcmp(y1.data(), y2.data(), sizeof(double) * y1.size()) == 0);
}
