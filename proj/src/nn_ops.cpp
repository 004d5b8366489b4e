#include "sfas/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace sfas {

namespace {

#ifdef __GLIBC__
// Activation buffers churn megabytes per call; keeping large allocations on
// the reusable heap instead of fresh mmaps avoids repeated page-fault storms.
[[maybe_unused]] const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
  return true;
}();
#endif

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::MatrixXd;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Grow-only per-thread scratch; every user finishes with it before returning,
// so concurrent callers on different threads never alias.
double* scratch_a(size_t n) {
  static thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

struct ConvGeom {
  Index c_in, h, w;  // image being lowered
  Index kh, kw;
  int stride, pad;
  Index oh, ow;  // lowered-column grid
  Index k() const { return c_in * kh * kw; }
  Index ohw() const { return oh * ow; }
};

ConvGeom conv_geom(const char* op, Index c_in, Index h, Index w, Index kh, Index kw, int stride,
                   int pad) {
  if (stride < 1) fail(std::string(op) + ": stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) fail(std::string(op) + ": pad must be >= 0, got " + std::to_string(pad));
  if (h + 2 * pad - kh < 0 || w + 2 * pad - kw < 0)
    fail(std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
         " exceeds padded input " + std::to_string(h + 2 * pad) + "x" +
         std::to_string(w + 2 * pad));
  const Index oh = (h + 2 * pad - kh) / stride + 1;
  const Index ow = (w + 2 * pad - kw) / stride + 1;
  return ConvGeom{c_in, h, w, kh, kw, stride, pad, oh, ow};
}

// Lowered matrix, row-major (k() rows of ohw() contiguous values): row
// (c, ki, kj) holds the input sample each output pixel sees through that
// kernel tap. Stride-1 rows are interior memcpys plus zeroed borders.
void im2col(const double* x, const ConvGeom& g, double* col) {
  const Index ohw = g.ohw();
  for (Index c = 0; c < g.c_in; ++c) {
    const double* plane = x + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * ohw;
        for (Index oy = 0; oy < g.oh; ++oy) {
          double* dst = row + oy * g.ow;
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) {
            std::memset(dst, 0, sizeof(double) * static_cast<size_t>(g.ow));
            continue;
          }
          const double* src_row = plane + iy * g.w;
          if (g.stride == 1) {
            const Index shift = kj - g.pad;  // ix = ox + shift
            const Index ox_lo = std::max<Index>(0, -shift);
            const Index ox_hi = std::min<Index>(g.ow, g.w - shift);
            if (ox_lo > 0) std::memset(dst, 0, sizeof(double) * static_cast<size_t>(ox_lo));
            if (ox_hi > ox_lo)
              std::memcpy(dst + ox_lo, src_row + ox_lo + shift,
                          sizeof(double) * static_cast<size_t>(ox_hi - ox_lo));
            if (ox_hi < g.ow)
              std::memset(dst + std::max<Index>(ox_lo, ox_hi), 0,
                          sizeof(double) * static_cast<size_t>(g.ow - std::max<Index>(ox_lo, ox_hi)));
          } else {
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kj;
              dst[ox] = (ix < 0 || ix >= g.w) ? 0.0 : src_row[ix];
            }
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col; same row layout.
void col2im_add(const double* col, const ConvGeom& g, double* x) {
  const Index ohw = g.ohw();
  for (Index c = 0; c < g.c_in; ++c) {
    double* plane = x + c * g.h * g.w;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * ohw;
        for (Index oy = 0; oy < g.oh; ++oy) {
          const Index iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = row + oy * g.ow;
          double* dst_row = plane + iy * g.w;
          if (g.stride == 1) {
            const Index shift = kj - g.pad;
            const Index ox_lo = std::max<Index>(0, -shift);
            const Index ox_hi = std::min<Index>(g.ow, g.w - shift);
            for (Index ox = ox_lo; ox < ox_hi; ++ox) dst_row[ox + shift] += src[ox];
          } else {
            for (Index ox = 0; ox < g.ow; ++ox) {
              const Index ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) dst_row[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// Row ranges assigning each output row to exactly one worker; per-element
// accumulation order (samples ascending, K ascending) is identical under any
// partition, so results are schedule-independent.
std::vector<std::pair<Index, Index>> row_blocks(Index rows, int threads) {
  std::vector<std::pair<Index, Index>> blocks;
  const Index nb = std::max<Index>(1, std::min<Index>(rows, threads));
  for (Index b = 0; b < nb; ++b) {
    const Index lo = rows * b / nb;
    const Index hi = rows * (b + 1) / nb;
    if (hi > lo) blocks.emplace_back(lo, hi);
  }
  return blocks;
}

void check_weight4(const char* op, const Tensor& w) {
  if (w.n() <= 0 || w.c() <= 0 || w.h() <= 0 || w.w() <= 0)
    fail(std::string(op) + ": weight has empty dimension " + w.shape_str());
}

}  // namespace

int num_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& weight, const VectorXd& bias, int stride, int pad) {
  check_weight4("conv2d", weight);
  const Index c_out = weight.n();
  if (x.c() != weight.c())
    fail("conv2d: input channels (" + std::to_string(x.c()) + ") do not match weight K_in (" +
         std::to_string(weight.c()) + ")");
  if (bias.size() != c_out)
    fail("conv2d: bias length (" + std::to_string(bias.size()) + ") does not match K_out (" +
         std::to_string(c_out) + ")");
  const ConvGeom g = conv_geom("conv2d", x.c(), x.h(), x.w(), weight.h(), weight.w(), stride, pad);

  Tensor out = Tensor::uninitialized(x.n(), c_out, g.oh, g.ow);
  const Index ohw = g.ohw();
  Eigen::Map<const RowMat> wm(weight.data(), c_out, g.k());

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < x.n(); ++n) {
    double* col = scratch_a(static_cast<size_t>(g.k() * ohw));
    im2col(x.plane(n, 0), g, col);
    Eigen::Map<const RowMat> cm(col, g.k(), ohw);
    Eigen::Map<RowMat> om(out.plane(n, 0), c_out, ohw);
    om.noalias() = wm * cm;
    om.colwise() += bias;
  }
  return out;
}

Tensor conv2d_backward_acc(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                           int stride, int pad, Tensor* grad_w, VectorXd* grad_b) {
  check_weight4("conv2d_backward", weight);
  const Index c_out = weight.n();
  if (x.c() != weight.c())
    fail("conv2d_backward: input channels (" + std::to_string(x.c()) +
         ") do not match weight K_in (" + std::to_string(weight.c()) + ")");
  const ConvGeom g =
      conv_geom("conv2d_backward", x.c(), x.h(), x.w(), weight.h(), weight.w(), stride, pad);
  if (grad_out.n() != x.n() || grad_out.c() != c_out || grad_out.h() != g.oh ||
      grad_out.w() != g.ow)
    fail("conv2d_backward: grad_out shape " + grad_out.shape_str() + " does not match output (" +
         std::to_string(x.n()) + "," + std::to_string(c_out) + "," + std::to_string(g.oh) + "," +
         std::to_string(g.ow) + ")");

  const Index ohw = g.ohw();
  Eigen::Map<const RowMat> wm(weight.data(), c_out, g.k());
  Tensor grad_x(x.n(), x.c(), x.h(), x.w());

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < x.n(); ++n) {
    double* colg = scratch_a(static_cast<size_t>(g.k() * ohw));
    Eigen::Map<const RowMat> gm(grad_out.plane(n, 0), c_out, ohw);
    Eigen::Map<RowMat> cgm(colg, g.k(), ohw);
    cgm.noalias() = wm.transpose() * gm;
    col2im_add(colg, g, grad_x.plane(n, 0));
  }

  if (grad_w != nullptr) {
    if (!grad_w->same_shape(weight))
      fail("conv2d_backward: grad_w shape " + grad_w->shape_str() + " does not match weight " +
           weight.shape_str());
    Eigen::Map<RowMat> gw(grad_w->data(), c_out, g.k());
    const auto blocks = row_blocks(c_out, num_threads());
    // Each worker owns a row block and re-lowers every sample; accumulation
    // order per element stays (n ascending, K panels ascending).
#pragma omp parallel for schedule(static)
    for (size_t b = 0; b < blocks.size(); ++b) {
      double* col = scratch_a(static_cast<size_t>(g.k() * ohw));
      const auto [lo, hi] = blocks[b];
      for (Index n = 0; n < x.n(); ++n) {
        im2col(x.plane(n, 0), g, col);
        Eigen::Map<const RowMat> cm(col, g.k(), ohw);
        Eigen::Map<const RowMat> gm(grad_out.plane(n, 0), c_out, ohw);
        gw.middleRows(lo, hi - lo).noalias() += gm.middleRows(lo, hi - lo) * cm.transpose();
      }
    }
  }

  if (grad_b != nullptr) {
    if (grad_b->size() != c_out)
      fail("conv2d_backward: grad_b length " + std::to_string(grad_b->size()) +
           " does not match K_out " + std::to_string(c_out));
    for (Index n = 0; n < x.n(); ++n) {
      Eigen::Map<const RowMat> gm(grad_out.plane(n, 0), c_out, ohw);
      *grad_b += gm.rowwise().sum();
    }
  }
  return grad_x;
}

ConvGrads conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                          int stride, int pad) {
  ConvGrads out;
  out.grad_w = Tensor(weight.n(), weight.c(), weight.h(), weight.w());
  out.grad_b = VectorXd::Zero(weight.n());
  out.grad_x = conv2d_backward_acc(x, weight, grad_out, stride, pad, &out.grad_w, &out.grad_b);
  return out;
}

// ---------------------------------------------------------------------------
// transposed_conv2d
// ---------------------------------------------------------------------------

namespace {

// Geometry of the conv whose input-gradient path realizes this transposed
// conv: the "image" is the tconv output, the lowered grid is the tconv input.
ConvGeom tconv_geom(const char* op, const Tensor& x, const Tensor& weight, int stride, int pad,
                    int out_pad) {
  if (stride < 1) fail(std::string(op) + ": stride must be >= 1");
  if (pad < 0) fail(std::string(op) + ": pad must be >= 0");
  if (out_pad < 0 || out_pad >= stride)
    fail(std::string(op) + ": out_pad must lie in [0, stride), got " + std::to_string(out_pad));
  const Index oh = (x.h() - 1) * stride - 2 * pad + weight.h() + out_pad;
  const Index ow = (x.w() - 1) * stride - 2 * pad + weight.w() + out_pad;
  if (oh <= 0 || ow <= 0)
    fail(std::string(op) + ": computed output size " + std::to_string(oh) + "x" +
         std::to_string(ow) + " is not positive");
  ConvGeom g;
  g.c_in = weight.c();  // tconv output channels
  g.h = oh;
  g.w = ow;
  g.kh = weight.h();
  g.kw = weight.w();
  g.stride = stride;
  g.pad = pad;
  g.oh = x.h();
  g.ow = x.w();
  return g;
}

}  // namespace

Tensor transposed_conv2d(const Tensor& x, const Tensor& weight, const VectorXd& bias, int stride,
                         int pad, int out_pad) {
  check_weight4("transposed_conv2d", weight);
  if (x.c() != weight.n())
    fail("transposed_conv2d: input channels (" + std::to_string(x.c()) +
         ") do not match weight C_in (" + std::to_string(weight.n()) + ")");
  const Index c_out = weight.c();
  if (bias.size() != c_out)
    fail("transposed_conv2d: bias length (" + std::to_string(bias.size()) +
         ") does not match C_out (" + std::to_string(c_out) + ")");
  const ConvGeom g = tconv_geom("transposed_conv2d", x, weight, stride, pad, out_pad);

  Tensor out = Tensor::uninitialized(x.n(), c_out, g.h, g.w);
  const Index ihw = x.h() * x.w();
  Eigen::Map<const RowMat> vm(weight.data(), x.c(), g.k());

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < x.n(); ++n) {
    double* colg = scratch_a(static_cast<size_t>(g.k() * ihw));
    Eigen::Map<const RowMat> xm(x.plane(n, 0), x.c(), ihw);
    Eigen::Map<RowMat> cgm(colg, g.k(), ihw);
    cgm.noalias() = vm.transpose() * xm;
    for (Index c = 0; c < c_out; ++c)
      Eigen::Map<Eigen::ArrayXd>(out.plane(n, c), g.h * g.w).setConstant(bias[c]);
    col2im_add(colg, g, out.plane(n, 0));
  }
  return out;
}

Tensor transposed_conv2d_backward_acc(const Tensor& x, const Tensor& weight,
                                      const Tensor& grad_out, int stride, int pad, int out_pad,
                                      Tensor* grad_w, VectorXd* grad_b) {
  check_weight4("transposed_conv2d_backward", weight);
  if (x.c() != weight.n())
    fail("transposed_conv2d_backward: input channels (" + std::to_string(x.c()) +
         ") do not match weight C_in (" + std::to_string(weight.n()) + ")");
  const Index c_out = weight.c();
  const ConvGeom g = tconv_geom("transposed_conv2d_backward", x, weight, stride, pad, out_pad);
  if (grad_out.n() != x.n() || grad_out.c() != c_out || grad_out.h() != g.h ||
      grad_out.w() != g.w)
    fail("transposed_conv2d_backward: grad_out shape " + grad_out.shape_str() +
         " does not match output (" + std::to_string(x.n()) + "," + std::to_string(c_out) + "," +
         std::to_string(g.h) + "," + std::to_string(g.w) + ")");

  const Index ihw = x.h() * x.w();
  Eigen::Map<const RowMat> vm(weight.data(), x.c(), g.k());
  Tensor grad_x = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());

#pragma omp parallel for schedule(static)
  for (Index n = 0; n < x.n(); ++n) {
    double* col = scratch_a(static_cast<size_t>(g.k() * ihw));
    im2col(grad_out.plane(n, 0), g, col);
    Eigen::Map<const RowMat> cm(col, g.k(), ihw);
    Eigen::Map<RowMat> gxm(grad_x.plane(n, 0), x.c(), ihw);
    gxm.noalias() = vm * cm;
  }

  if (grad_w != nullptr) {
    if (!grad_w->same_shape(weight))
      fail("transposed_conv2d_backward: grad_w shape " + grad_w->shape_str() +
           " does not match weight " + weight.shape_str());
    Eigen::Map<RowMat> gw(grad_w->data(), x.c(), g.k());
    const auto blocks = row_blocks(x.c(), num_threads());
#pragma omp parallel for schedule(static)
    for (size_t b = 0; b < blocks.size(); ++b) {
      double* col = scratch_a(static_cast<size_t>(g.k() * ihw));
      const auto [lo, hi] = blocks[b];
      for (Index n = 0; n < x.n(); ++n) {
        im2col(grad_out.plane(n, 0), g, col);
        Eigen::Map<const RowMat> cm(col, g.k(), ihw);
        Eigen::Map<const RowMat> xm(x.plane(n, 0), x.c(), ihw);
        gw.middleRows(lo, hi - lo).noalias() += xm.middleRows(lo, hi - lo) * cm.transpose();
      }
    }
  }

  if (grad_b != nullptr) {
    if (grad_b->size() != c_out)
      fail("transposed_conv2d_backward: grad_b length " + std::to_string(grad_b->size()) +
           " does not match C_out " + std::to_string(c_out));
    for (Index n = 0; n < x.n(); ++n)
      for (Index c = 0; c < c_out; ++c)
        (*grad_b)[c] += Eigen::Map<const Eigen::ArrayXd>(grad_out.plane(n, c), g.h * g.w).sum();
  }
  return grad_x;
}

ConvGrads transposed_conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out,
                                     int stride, int pad, int out_pad) {
  ConvGrads out;
  out.grad_w = Tensor(weight.n(), weight.c(), weight.h(), weight.w());
  out.grad_b = VectorXd::Zero(weight.c());
  out.grad_x = transposed_conv2d_backward_acc(x, weight, grad_out, stride, pad, out_pad,
                                              &out.grad_w, &out.grad_b);
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2d
// ---------------------------------------------------------------------------

PoolResult maxpool2d(const Tensor& x, int k, int s, PoolMode mode) {
  if (k < 1 || s < 1) fail("maxpool2d: kernel and stride must be >= 1");
  if (mode == PoolMode::strict_even && (x.h() % 2 != 0 || x.w() % 2 != 0))
    fail("maxpool2d: odd input size " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
         " (strict_even mode)");
  const Index oh = (x.h() - k) / s + 1;
  const Index ow = (x.w() - k) / s + 1;
  if (oh <= 0 || ow <= 0)
    fail("maxpool2d: input " + std::to_string(x.h()) + "x" + std::to_string(x.w()) +
         " smaller than kernel");

  PoolResult r;
  r.y = Tensor::uninitialized(x.n(), x.c(), oh, ow);
  r.argmax.resize(static_cast<size_t>(r.y.size()));

  const Index planes = x.n() * x.c();
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const double* in = x.data() + p * x.h() * x.w();
    double* out = r.y.data() + p * oh * ow;
    int32_t* idx = r.argmax.data() + p * oh * ow;
    for (Index oy = 0; oy < oh; ++oy) {
      for (Index ox = 0; ox < ow; ++ox) {
        double best = -std::numeric_limits<double>::infinity();
        int32_t best_idx = 0;
        for (Index ki = 0; ki < k; ++ki) {
          for (Index kj = 0; kj < k; ++kj) {
            const Index ih = oy * s + ki;
            const Index iw = ox * s + kj;
            const double v = in[ih * x.w() + iw];
            if (v > best) {  // ties keep the first index in scan order
              best = v;
              best_idx = static_cast<int32_t>(ih * x.w() + iw);
            }
          }
        }
        out[oy * ow + ox] = best;
        idx[oy * ow + ox] = best_idx;
      }
    }
  }
  return r;
}

Tensor maxpool2d_backward(const std::array<Index, 4>& input_shape,
                          const std::vector<int32_t>& argmax, const Tensor& grad_out) {
  if (static_cast<Index>(argmax.size()) != grad_out.size())
    fail("maxpool2d_backward: argmax size " + std::to_string(argmax.size()) +
         " does not match grad_out " + grad_out.shape_str());
  Tensor grad_x(input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
  const Index planes = grad_out.n() * grad_out.c();
  const Index ohw = grad_out.h() * grad_out.w();
  const Index ihw = input_shape[2] * input_shape[3];
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < planes; ++p) {
    const double* g = grad_out.data() + p * ohw;
    const int32_t* idx = argmax.data() + p * ohw;
    double* gx = grad_x.data() + p * ihw;
    for (Index i = 0; i < ohw; ++i) gx[idx[i]] += g[i];
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const VectorXd& gamma, const VectorXd& beta,
                   VectorXd& running_mean, VectorXd& running_var, BnMode mode, double eps,
                   double momentum, BnCache* cache) {
  const Index C = x.c();
  if (gamma.size() != C || beta.size() != C)
    fail("batchnorm2d: gamma/beta length (" + std::to_string(gamma.size()) + "," +
         std::to_string(beta.size()) + ") does not match channels (" + std::to_string(C) + ")");
  if (running_mean.size() != C || running_var.size() != C)
    fail("batchnorm2d: running stats length does not match channels (" + std::to_string(C) + ")");

  const Index m = x.n() * x.h() * x.w();
  if (m == 0) fail("batchnorm2d: empty input");
  const Index hw = x.h() * x.w();

  VectorXd mean(C), inv_std(C);
  if (mode == BnMode::eval) {
    mean = running_mean;
    for (Index c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  } else {
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < C; ++c) {
      double sum = 0.0;
      for (Index n = 0; n < x.n(); ++n) {
        const double* p = x.plane(n, c);
        for (Index i = 0; i < hw; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (Index n = 0; n < x.n(); ++n) {
        const double* p = x.plane(n, c);
        for (Index i = 0; i < hw; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + eps);
      if (mode == BnMode::train) {
        const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
      }
    }
  }

  Tensor y = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());
#pragma omp parallel for schedule(static) collapse(2)
  for (Index n = 0; n < x.n(); ++n) {
    for (Index c = 0; c < C; ++c) {
      const double* in = x.plane(n, c);
      double* out = y.plane(n, c);
      const double a = gamma[c] * inv_std[c];
      const double b = beta[c] - a * mean[c];
      for (Index i = 0; i < hw; ++i) out[i] = a * in[i] + b;
    }
  }

  if (cache != nullptr) {
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return y;
}

Tensor batchnorm2d_backward(const Tensor& x, const VectorXd& gamma, const BnCache& cache,
                            const Tensor& grad_out, VectorXd* grad_gamma, VectorXd* grad_beta) {
  const Index C = x.c();
  if (!grad_out.same_shape(x))
    fail("batchnorm2d_backward: grad_out shape " + grad_out.shape_str() +
         " does not match input " + x.shape_str());
  if (cache.mean.size() != C || cache.inv_std.size() != C)
    fail("batchnorm2d_backward: cache does not match channels");

  const Index m = x.n() * x.h() * x.w();
  const Index hw = x.h() * x.w();
  Tensor grad_x = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());

#pragma omp parallel for schedule(static)
  for (Index c = 0; c < C; ++c) {
    const double mu = cache.mean[c], is = cache.inv_std[c];
    double sum_g = 0.0, sum_gx = 0.0;
    for (Index n = 0; n < x.n(); ++n) {
      const double* xp = x.plane(n, c);
      const double* gp = grad_out.plane(n, c);
      for (Index i = 0; i < hw; ++i) {
        sum_g += gp[i];
        sum_gx += gp[i] * (xp[i] - mu) * is;
      }
    }
    if (grad_gamma != nullptr) (*grad_gamma)[c] += sum_gx;
    if (grad_beta != nullptr) (*grad_beta)[c] += sum_g;

    const double ga = gamma[c];
    if (cache.mode == BnMode::eval) {
      // running statistics are constants
      for (Index n = 0; n < x.n(); ++n) {
        const double* gp = grad_out.plane(n, c);
        double* gxp = grad_x.plane(n, c);
        for (Index i = 0; i < hw; ++i) gxp[i] = gp[i] * ga * is;
      }
    } else {
      const double inv_m = 1.0 / static_cast<double>(m);
      for (Index n = 0; n < x.n(); ++n) {
        const double* xp = x.plane(n, c);
        const double* gp = grad_out.plane(n, c);
        double* gxp = grad_x.plane(n, c);
        for (Index i = 0; i < hw; ++i) {
          const double xhat = (xp[i] - mu) * is;
          gxp[i] = ga * is * inv_m * (static_cast<double>(m) * gp[i] - sum_g - xhat * sum_gx);
        }
      }
    }
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// activations / softmax
// ---------------------------------------------------------------------------

Tensor leaky_relu(const Tensor& x, double slope) {
  if (slope < 0.0 || slope >= 1.0)
    fail("leaky_relu: slope must lie in [0,1), got " + std::to_string(slope));
  Tensor y = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());
  const double* in = x.data();
  double* out = y.data();
  const Index sz = x.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < sz; ++i) out[i] = in[i] >= 0.0 ? in[i] : slope * in[i];
  return y;
}

Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double slope) {
  if (!grad_out.same_shape(x))
    fail("leaky_relu_backward: grad_out shape " + grad_out.shape_str() + " does not match input " +
         x.shape_str());
  Tensor gx = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());
  const double* in = x.data();
  const double* g = grad_out.data();
  double* out = gx.data();
  const Index sz = x.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < sz; ++i) out[i] = in[i] >= 0.0 ? g[i] : slope * g[i];
  return gx;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 1) fail("softmax: axis must be the channel axis (1), got " + std::to_string(axis));
  Tensor y = Tensor::uninitialized(x.n(), x.c(), x.h(), x.w());
  const Index C = x.c();
  const Index hw = x.h() * x.w();
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < x.n(); ++n) {
    for (Index i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < C; ++c) mx = std::max(mx, x.plane(n, c)[i]);
      double sum = 0.0;
      for (Index c = 0; c < C; ++c) {
        const double e = std::exp(x.plane(n, c)[i] - mx);
        y.plane(n, c)[i] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (Index c = 0; c < C; ++c) y.plane(n, c)[i] *= inv;
    }
  }
  return y;
}

}  // namespace sfas
