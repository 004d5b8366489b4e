#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

#include "sfas/tensor.hpp"

// Channel and spatial attention gates (CBAM layout: channel first, then
// spatial). Both keep the tensor shape and scale it by sigmoid gates, so all
// gating coefficients lie strictly in (0,1); with zero parameters the block
// is exactly a 0.5x scaling.

namespace sfas {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct AttentionParams {
  // Shared channel MLP, no biases: C -> C/r -> C.
  MatrixXd w1;  // (C/r) x C
  MatrixXd w2;  // C x (C/r)
  // Single 2-input-channel spatial kernel, no bias: (1, 2, k, k).
  Tensor spatial_w;

  MatrixXd gw1, gw2;
  Tensor gspatial_w;

  Index channels() const { return w2.rows(); }
  int spatial_pad() const { return static_cast<int>(spatial_w.h() / 2); }

  void zero_grads();
};

// Throws if reduction does not divide channels, or spatial kernel size is even.
AttentionParams make_attention_params(Index channels, Index reduction, Index spatial_kernel);

struct ChannelAttnCache {
  MatrixXd avg, mx;        // N x C pooled descriptors
  std::vector<int32_t> mx_idx;  // spatial argmax per (n, c)
  MatrixXd u_avg, u_mx;    // N x C/r pre-ReLU hidden units
  MatrixXd gate;           // N x C sigmoid output
};

Tensor channel_attention(const Tensor& x, const AttentionParams& p, ChannelAttnCache* cache);
Tensor channel_attention_backward(const Tensor& x, AttentionParams& p, const ChannelAttnCache& c,
                                  const Tensor& grad_out, bool param_grads);

struct SpatialAttnCache {
  Tensor pooled;                 // N x 2 x H x W: channel mean; channel max
  std::vector<int32_t> max_c;    // argmax channel per (n, h, w)
  Tensor z;                      // N x 1 x H x W pre-sigmoid
  Tensor gate;                   // N x 1 x H x W sigmoid
};

Tensor spatial_attention(const Tensor& x, const AttentionParams& p, SpatialAttnCache* cache);
Tensor spatial_attention_backward(const Tensor& x, AttentionParams& p, const SpatialAttnCache& c,
                                  const Tensor& grad_out, bool param_grads);

// Channel-then-spatial composition used by the model.
struct AttnCache {
  ChannelAttnCache ca;
  Tensor mid;  // channel-attention output, input of the spatial stage
  SpatialAttnCache sa;
};

Tensor attention_forward(const Tensor& x, const AttentionParams& p, AttnCache* cache);
Tensor attention_backward(const Tensor& x, AttentionParams& p, const AttnCache& c,
                          const Tensor& grad_out, bool param_grads);

}  // namespace sfas
