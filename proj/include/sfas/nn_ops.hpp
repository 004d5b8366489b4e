#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "sfas/tensor.hpp"

// Forward and hand-derived backward passes for every primitive the model
// needs. All functions are pure over their inputs plus a fresh output buffer;
// batch items are processed in parallel with disjoint writes, so results do
// not depend on the thread schedule.

namespace sfas {

using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Convolution. weight is (C_out, C_in, kh, kw); bias has length C_out.
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const VectorXd& bias, int stride, int pad);

// Accumulating form used by the model backward passes: adds grad_w/grad_b in
// place when the pointers are non-null (skipping them skips two GEMMs, which
// the residue passes exploit). Always returns grad_x.
Tensor conv2d_backward_acc(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                           int stride, int pad, Tensor* grad_w, VectorXd* grad_b);

struct ConvGrads {
  Tensor grad_x;
  Tensor grad_w;
  VectorXd grad_b;
};
ConvGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                          int stride, int pad);

// ---------------------------------------------------------------------------
// Transposed convolution (adjoint of conv2d in its linear part). weight is
// (C_in, C_out, kh, kw), so for matched geometry the adjoint identity
// <conv2d(x, W), y> == <x, transposed_conv2d(y, W)> holds with the same
// weight memory viewed both ways.
// ---------------------------------------------------------------------------

Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const VectorXd& bias, int stride,
                         int pad, int out_pad);

Tensor transposed_conv2d_backward_acc(const Tensor& x, const Tensor& weight,
                                      const Tensor& grad_out, int stride, int pad, int out_pad,
                                      Tensor* grad_w, VectorXd* grad_b);

ConvGrads transposed_conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                                     int stride, int pad, int out_pad);

// ---------------------------------------------------------------------------
// Max pooling, kernel 2 stride 2. strict_even rejects odd H/W (the extractor
// chain 80->40->20->10 never produces them); floor discards the trailing
// row/column, which the classifier head needs for its odd maps.
// ---------------------------------------------------------------------------

enum class PoolMode { strict_even, floor };

struct PoolResult {
  Tensor y;
  std::vector<int32_t> argmax;  // flat input offset within each (n,c) plane
};

PoolResult maxpool2d(const Tensor& x, int k = 2, int s = 2, PoolMode mode = PoolMode::strict_even);

Tensor maxpool2d_backward(const std::array<Index, 4>& input_shape,
                          const std::vector<int32_t>& argmax, const Tensor& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.
//   train:              batch statistics; running stats updated by EMA
//   train_frozen_stats: batch statistics; running stats left untouched
//                       (the residue passes must not perturb other heads)
//   eval:               running statistics, nothing updated
// ---------------------------------------------------------------------------

enum class BnMode { train, train_frozen_stats, eval };

struct BnCache {
  VectorXd mean;
  VectorXd inv_std;
  BnMode mode = BnMode::train;
};

Tensor batchnorm2d(const Tensor& x, const VectorXd& gamma, const VectorXd& beta,
                   VectorXd& running_mean, VectorXd& running_var, BnMode mode, double eps,
                   double momentum, BnCache* cache);

Tensor batchnorm2d_backward(const Tensor& x, const VectorXd& gamma, const BnCache& cache,
                            const Tensor& grad_out, VectorXd* grad_gamma, VectorXd* grad_beta);

// ---------------------------------------------------------------------------
// Elementwise activations. Gradient at exactly 0 takes the positive branch.
// ---------------------------------------------------------------------------

Tensor leaky_relu(const Tensor& x, double slope);
Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double slope);

inline Tensor relu(const Tensor& x) { return leaky_relu(x, 0.0); }
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  return leaky_relu_backward(x, grad_out, 0.0);
}

// Softmax over the channel axis (axis must be 1), max-subtracted for
// stability. Backward is fused with cross-entropy in the loss module.
Tensor softmax(const Tensor& x, int axis);

// Effective number of worker threads for batch-parallel primitives.
int num_threads();

}  // namespace sfas
