#include "sfas/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "sfas/nn_ops.hpp"

namespace sfas {

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

void AttentionParams::zero_grads() {
  gw1.setZero();
  gw2.setZero();
  gspatial_w.array().setZero();
}

AttentionParams make_attention_params(Index channels, Index reduction, Index spatial_kernel) {
  if (reduction < 1 || channels % reduction != 0)
    throw std::invalid_argument("attention: reduction ratio " + std::to_string(reduction) +
                                " does not divide channels " + std::to_string(channels));
  if (spatial_kernel % 2 == 0)
    throw std::invalid_argument("attention: spatial kernel must be odd, got " +
                                std::to_string(spatial_kernel));
  AttentionParams p;
  const Index hidden = channels / reduction;
  p.w1 = MatrixXd::Zero(hidden, channels);
  p.w2 = MatrixXd::Zero(channels, hidden);
  p.spatial_w = Tensor(1, 2, spatial_kernel, spatial_kernel);
  p.gw1 = MatrixXd::Zero(hidden, channels);
  p.gw2 = MatrixXd::Zero(channels, hidden);
  p.gspatial_w = Tensor(1, 2, spatial_kernel, spatial_kernel);
  return p;
}

// ---------------------------------------------------------------------------
// channel attention: y = x * sigmoid(MLP(avgpool(x)) + MLP(maxpool(x)))
// ---------------------------------------------------------------------------

Tensor channel_attention(const Tensor& x, const AttentionParams& p, ChannelAttnCache* cache) {
  const Index N = x.n(), C = x.c(), hw = x.h() * x.w();
  if (p.channels() != C)
    throw std::invalid_argument("channel_attention: params built for " +
                                std::to_string(p.channels()) + " channels, input has " +
                                std::to_string(C));

  MatrixXd avg(N, C), mx(N, C);
  std::vector<int32_t> mx_idx(static_cast<size_t>(N * C));
#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      const double* plane = x.plane(n, c);
      double sum = 0.0;
      double best = -std::numeric_limits<double>::infinity();
      int32_t best_i = 0;
      for (Index i = 0; i < hw; ++i) {
        sum += plane[i];
        if (plane[i] > best) {
          best = plane[i];
          best_i = static_cast<int32_t>(i);
        }
      }
      avg(n, c) = sum / static_cast<double>(hw);
      mx(n, c) = best;
      mx_idx[static_cast<size_t>(n * C + c)] = best_i;
    }
  }

  // Shared MLP on both descriptors; rows are samples.
  MatrixXd u_avg = avg * p.w1.transpose();  // N x C/r
  MatrixXd u_mx = mx * p.w1.transpose();
  MatrixXd h_avg = u_avg.cwiseMax(0.0) * p.w2.transpose();  // N x C
  MatrixXd h_mx = u_mx.cwiseMax(0.0) * p.w2.transpose();
  MatrixXd gate = (h_avg + h_mx).unaryExpr([](double v) { return sigmoid(v); });

  Tensor y(N, C, x.h(), x.w());
#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      const double s = gate(n, c);
      const double* in = x.plane(n, c);
      double* out = y.plane(n, c);
      for (Index i = 0; i < hw; ++i) out[i] = in[i] * s;
    }
  }

  if (cache != nullptr) {
    cache->avg = std::move(avg);
    cache->mx = std::move(mx);
    cache->mx_idx = std::move(mx_idx);
    cache->u_avg = std::move(u_avg);
    cache->u_mx = std::move(u_mx);
    cache->gate = std::move(gate);
  }
  return y;
}

Tensor channel_attention_backward(const Tensor& x, AttentionParams& p, const ChannelAttnCache& c,
                                  const Tensor& grad_out, bool param_grads) {
  const Index N = x.n(), C = x.c(), hw = x.h() * x.w();
  if (!grad_out.same_shape(x))
    throw std::invalid_argument("channel_attention_backward: grad_out shape " +
                                grad_out.shape_str() + " does not match input " + x.shape_str());

  // d gate(n,c) collects sum_hw grad*x; direct term is grad*gate.
  MatrixXd dgate(N, C);
  Tensor gx(N, C, x.h(), x.w());
#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < N; ++n) {
    for (Index c2 = 0; c2 < C; ++c2) {
      const double s = c.gate(n, c2);
      const double* in = x.plane(n, c2);
      const double* g = grad_out.plane(n, c2);
      double* out = gx.plane(n, c2);
      double acc = 0.0;
      for (Index i = 0; i < hw; ++i) {
        acc += g[i] * in[i];
        out[i] = g[i] * s;
      }
      dgate(n, c2) = acc;
    }
  }

  // Through the sigmoid and both MLP branches (shared weights).
  MatrixXd dz = dgate.cwiseProduct(c.gate.cwiseProduct(MatrixXd::Ones(N, C) - c.gate));
  MatrixXd v_avg = c.u_avg.cwiseMax(0.0);
  MatrixXd v_mx = c.u_mx.cwiseMax(0.0);
  MatrixXd dv = dz * p.w2;  // N x C/r, same for both branches
  MatrixXd du_avg =
      dv.cwiseProduct(c.u_avg.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; }));
  MatrixXd du_mx =
      dv.cwiseProduct(c.u_mx.unaryExpr([](double v) { return v >= 0.0 ? 1.0 : 0.0; }));

  if (param_grads) {
    p.gw2.noalias() += dz.transpose() * v_avg;
    p.gw2.noalias() += dz.transpose() * v_mx;
    p.gw1.noalias() += du_avg.transpose() * c.avg;
    p.gw1.noalias() += du_mx.transpose() * c.mx;
  }

  MatrixXd davg = du_avg * p.w1;  // N x C
  MatrixXd dmx = du_mx * p.w1;

#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < N; ++n) {
    for (Index c2 = 0; c2 < C; ++c2) {
      double* out = gx.plane(n, c2);
      const double da = davg(n, c2) / static_cast<double>(hw);
      for (Index i = 0; i < hw; ++i) out[i] += da;
      out[c.mx_idx[static_cast<size_t>(n * C + c2)]] += dmx(n, c2);
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// spatial attention: y = x * sigmoid(conv_k([mean_c(x); max_c(x)]))
// ---------------------------------------------------------------------------

Tensor spatial_attention(const Tensor& x, const AttentionParams& p, SpatialAttnCache* cache) {
  const Index N = x.n(), C = x.c(), H = x.h(), W = x.w();
  const Index hw = H * W;

  Tensor pooled(N, 2, H, W);
  std::vector<int32_t> max_c(static_cast<size_t>(N * hw));
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < N; ++n) {
    double* mean_plane = pooled.plane(n, 0);
    double* max_plane = pooled.plane(n, 1);
    for (Index i = 0; i < hw; ++i) {
      double sum = 0.0;
      double best = -std::numeric_limits<double>::infinity();
      int32_t best_c = 0;
      for (Index c = 0; c < C; ++c) {
        const double v = x.plane(n, c)[i];
        sum += v;
        if (v > best) {
          best = v;
          best_c = static_cast<int32_t>(c);
        }
      }
      mean_plane[i] = sum / static_cast<double>(C);
      max_plane[i] = best;
      max_c[static_cast<size_t>(n * hw + i)] = best_c;
    }
  }

  const VectorXd no_bias = VectorXd::Zero(1);
  Tensor z = conv2d(pooled, p.spatial_w, no_bias, 1, p.spatial_pad());
  Tensor gate(N, 1, H, W);
  gate.array() = z.array().unaryExpr([](double v) { return sigmoid(v); });

  Tensor y(N, C, H, W);
#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      const double* in = x.plane(n, c);
      const double* s = gate.plane(n, 0);
      double* out = y.plane(n, c);
      for (Index i = 0; i < hw; ++i) out[i] = in[i] * s[i];
    }
  }

  if (cache != nullptr) {
    cache->pooled = std::move(pooled);
    cache->max_c = std::move(max_c);
    cache->z = std::move(z);
    cache->gate = std::move(gate);
  }
  return y;
}

Tensor spatial_attention_backward(const Tensor& x, AttentionParams& p, const SpatialAttnCache& c,
                                  const Tensor& grad_out, bool param_grads) {
  const Index N = x.n(), C = x.c(), H = x.h(), W = x.w();
  const Index hw = H * W;
  if (!grad_out.same_shape(x))
    throw std::invalid_argument("spatial_attention_backward: grad_out shape " +
                                grad_out.shape_str() + " does not match input " + x.shape_str());

  Tensor gx(N, C, H, W);
  Tensor dgate(N, 1, H, W);
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < N; ++n) {
    double* dg = dgate.plane(n, 0);
    const double* s = c.gate.plane(n, 0);
    for (Index i = 0; i < hw; ++i) dg[i] = 0.0;
    for (Index ch = 0; ch < C; ++ch) {
      const double* in = x.plane(n, ch);
      const double* g = grad_out.plane(n, ch);
      double* out = gx.plane(n, ch);
      for (Index i = 0; i < hw; ++i) {
        dg[i] += g[i] * in[i];
        out[i] = g[i] * s[i];
      }
    }
  }

  Tensor dz(N, 1, H, W);
  dz.array() = dgate.array() * c.gate.array() * (1.0 - c.gate.array());

  Tensor gpooled = conv2d_backward_acc(c.pooled, p.spatial_w, dz, 1, p.spatial_pad(),
                                       param_grads ? &p.gspatial_w : nullptr, nullptr);

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < N; ++n) {
    const double* dmean = gpooled.plane(n, 0);
    const double* dmax = gpooled.plane(n, 1);
    for (Index i = 0; i < hw; ++i) {
      const double dm = dmean[i] / static_cast<double>(C);
      for (Index ch = 0; ch < C; ++ch) gx.plane(n, ch)[i] += dm;
      gx.plane(n, c.max_c[static_cast<size_t>(n * hw + i)])[i] += dmax[i];
    }
  }
  return gx;
}

Tensor attention_forward(const Tensor& x, const AttentionParams& p, AttnCache* cache) {
  if (cache == nullptr) {
    return spatial_attention(channel_attention(x, p, nullptr), p, nullptr);
  }
  cache->mid = channel_attention(x, p, &cache->ca);
  return spatial_attention(cache->mid, p, &cache->sa);
}

Tensor attention_backward(const Tensor& x, AttentionParams& p, const AttnCache& c,
                          const Tensor& grad_out, bool param_grads) {
  Tensor gmid = spatial_attention_backward(c.mid, p, c.sa, grad_out, param_grads);
  return channel_attention_backward(x, p, c.ca, gmid, param_grads);
}

}  // namespace sfas
