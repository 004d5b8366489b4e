#include "sfas/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "sfas/rng.hpp"
#include "sfas/sha256.hpp"

namespace sfas {

namespace {

using nlohmann::json;

ConvLayer make_conv(Index c_out, Index c_in, Index k, int stride, int pad) {
  ConvLayer l;
  l.w = Tensor(c_out, c_in, k, k);
  l.b = VectorXd::Zero(c_out);
  l.gw = Tensor(c_out, c_in, k, k);
  l.gb = VectorXd::Zero(c_out);
  l.stride = stride;
  l.pad = pad;
  return l;
}

TConvLayer make_tconv(Index c_in, Index c_out, Index k, int stride, int pad, int out_pad) {
  TConvLayer l;
  l.w = Tensor(c_in, c_out, k, k);
  l.b = VectorXd::Zero(c_out);
  l.gw = Tensor(c_in, c_out, k, k);
  l.gb = VectorXd::Zero(c_out);
  l.stride = stride;
  l.pad = pad;
  l.out_pad = out_pad;
  return l;
}

BnLayer make_bn(Index c) {
  BnLayer l;
  l.gamma = VectorXd::Ones(c);
  l.beta = VectorXd::Zero(c);
  l.running_mean = VectorXd::Zero(c);
  l.running_var = VectorXd::Ones(c);
  l.ggamma = VectorXd::Zero(c);
  l.gbeta = VectorXd::Zero(c);
  return l;
}

void he_uniform(Rng& rng, double* p, Index n, Index fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < n; ++i) p[i] = rng.uniform(-bound, bound);
}

void init_conv(Rng& rng, ConvLayer& l) {
  he_uniform(rng, l.w.data(), l.w.size(), l.w.c() * l.w.h() * l.w.w());
}

void init_tconv(Rng& rng, TConvLayer& l) {
  he_uniform(rng, l.w.data(), l.w.size(), l.w.n() * l.w.h() * l.w.w());
}

void init_attention(Rng& rng, AttentionParams& p) {
  he_uniform(rng, p.w1.data(), p.w1.size(), p.w1.cols());
  he_uniform(rng, p.w2.data(), p.w2.size(), p.w2.cols());
  he_uniform(rng, p.spatial_w.data(), p.spatial_w.size(),
             p.spatial_w.c() * p.spatial_w.h() * p.spatial_w.w());
}

}  // namespace

ModelState init_model(int num_classes, uint64_t seed) {
  if (num_classes < 2)
    throw std::invalid_argument("init_model: num_classes must be >= 2, got " +
                                std::to_string(num_classes));
  ModelState m;
  m.num_classes = num_classes;
  m.rng_seed = seed;

  const Index ec[4] = {1, 16, 32, 64};
  for (int b = 0; b < 3; ++b) {
    m.e_conv[b] = make_conv(ec[b + 1], ec[b], 3, 1, 1);
    m.e_proj[b] = make_conv(ec[b + 1], ec[b], 1, 1, 0);
    m.e_bn[b] = make_bn(ec[b + 1]);
  }
  m.e_attn = make_attention_params(64, kAttnReduction, kAttnSpatialKernel);

  m.d_tconv[0] = make_tconv(64, 64, 3, 2, 1, 1);
  m.d_tconv[1] = make_tconv(32, 32, 3, 2, 1, 1);
  m.d_tconv[2] = make_tconv(16, 16, 3, 2, 1, 1);
  m.d_tbn[0] = make_bn(64);
  m.d_tbn[1] = make_bn(32);
  m.d_tbn[2] = make_bn(16);
  m.d_conv[0] = make_conv(32, 64, 3, 1, 1);
  m.d_conv[1] = make_conv(16, 32, 3, 1, 1);
  m.d_cbn[0] = make_bn(32);
  m.d_cbn[1] = make_bn(16);
  m.d_attn[0] = make_attention_params(32, kAttnReduction, kAttnSpatialKernel);
  m.d_attn[1] = make_attention_params(16, kAttnReduction, kAttnSpatialKernel);
  m.d_conv8 = make_conv(8, 16, 3, 1, 1);
  m.d_conv2 = make_conv(2, 8, 3, 1, 1);

  m.c_conv[0] = make_conv(128, 64, 4, 1, 2);
  m.c_conv[1] = make_conv(256, 128, 4, 1, 2);
  m.c_bn[0] = make_bn(128);
  m.c_bn[1] = make_bn(256);
  m.c_fc.w = MatrixXd::Zero(num_classes, 256);
  m.c_fc.b = VectorXd::Zero(num_classes);
  m.c_fc.gw = MatrixXd::Zero(num_classes, 256);
  m.c_fc.gb = VectorXd::Zero(num_classes);

  // One stream fills everything in registry order; same seed, same bits.
  Rng rng(derive_seed(seed, 0xE11));
  for (int b = 0; b < 3; ++b) {
    init_conv(rng, m.e_conv[b]);
    init_conv(rng, m.e_proj[b]);
  }
  init_attention(rng, m.e_attn);
  for (int s = 0; s < 3; ++s) init_tconv(rng, m.d_tconv[s]);
  for (int s = 0; s < 2; ++s) {
    init_conv(rng, m.d_conv[s]);
    init_attention(rng, m.d_attn[s]);
  }
  init_conv(rng, m.d_conv8);
  init_conv(rng, m.d_conv2);
  init_conv(rng, m.c_conv[0]);
  init_conv(rng, m.c_conv[1]);
  he_uniform(rng, m.c_fc.w.data(), m.c_fc.w.size(), m.c_fc.w.cols());
  return m;
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

namespace {

enum class Sel { value, grad, buffer };

void add(std::vector<ParamRef>& out, const std::string& name, double* v, Index size,
         std::vector<Index> shape) {
  out.push_back(ParamRef{name, v, size, std::move(shape)});
}

void add_conv(std::vector<ParamRef>& out, const std::string& prefix, ConvLayer& l, Sel sel) {
  if (sel == Sel::buffer) return;
  Tensor& w = (sel == Sel::value) ? l.w : l.gw;
  VectorXd& b = (sel == Sel::value) ? l.b : l.gb;
  add(out, prefix + ".w", w.data(), w.size(), {w.n(), w.c(), w.h(), w.w()});
  add(out, prefix + ".b", b.data(), b.size(), {b.size()});
}

void add_tconv(std::vector<ParamRef>& out, const std::string& prefix, TConvLayer& l, Sel sel) {
  if (sel == Sel::buffer) return;
  Tensor& w = (sel == Sel::value) ? l.w : l.gw;
  VectorXd& b = (sel == Sel::value) ? l.b : l.gb;
  add(out, prefix + ".w", w.data(), w.size(), {w.n(), w.c(), w.h(), w.w()});
  add(out, prefix + ".b", b.data(), b.size(), {b.size()});
}

void add_bn(std::vector<ParamRef>& out, const std::string& prefix, BnLayer& l, Sel sel) {
  if (sel == Sel::buffer) {
    add(out, prefix + ".running_mean", l.running_mean.data(), l.running_mean.size(),
        {l.running_mean.size()});
    add(out, prefix + ".running_var", l.running_var.data(), l.running_var.size(),
        {l.running_var.size()});
    return;
  }
  VectorXd& g = (sel == Sel::value) ? l.gamma : l.ggamma;
  VectorXd& b = (sel == Sel::value) ? l.beta : l.gbeta;
  add(out, prefix + ".gamma", g.data(), g.size(), {g.size()});
  add(out, prefix + ".beta", b.data(), b.size(), {b.size()});
}

void add_attn(std::vector<ParamRef>& out, const std::string& prefix, AttentionParams& p, Sel sel) {
  if (sel == Sel::buffer) return;
  MatrixXd& w1 = (sel == Sel::value) ? p.w1 : p.gw1;
  MatrixXd& w2 = (sel == Sel::value) ? p.w2 : p.gw2;
  Tensor& sw = (sel == Sel::value) ? p.spatial_w : p.gspatial_w;
  add(out, prefix + ".mlp1", w1.data(), w1.size(), {w1.rows(), w1.cols()});
  add(out, prefix + ".mlp2", w2.data(), w2.size(), {w2.rows(), w2.cols()});
  add(out, prefix + ".spatial", sw.data(), sw.size(), {sw.n(), sw.c(), sw.h(), sw.w()});
}

void collect(ModelState& m, Module which, Sel sel, std::vector<ParamRef>& out) {
  switch (which) {
    case Module::extractor:
      for (int b = 0; b < 3; ++b) {
        const std::string p = "extractor.block" + std::to_string(b + 1);
        add_conv(out, p + ".conv", m.e_conv[b], sel);
        add_conv(out, p + ".proj", m.e_proj[b], sel);
        add_bn(out, p + ".bn", m.e_bn[b], sel);
      }
      add_attn(out, "extractor.block3.attn", m.e_attn, sel);
      break;
    case Module::decoder:
      for (int s = 0; s < 3; ++s) {
        const std::string p = "decoder.up" + std::to_string(s + 1);
        add_tconv(out, p + ".tconv", m.d_tconv[s], sel);
        add_bn(out, p + ".bn", m.d_tbn[s], sel);
        if (s < 2) {
          const std::string q = "decoder.refine" + std::to_string(s + 1);
          add_conv(out, q + ".conv", m.d_conv[s], sel);
          add_bn(out, q + ".bn", m.d_cbn[s], sel);
          add_attn(out, q + ".attn", m.d_attn[s], sel);
        }
      }
      add_conv(out, "decoder.seg8.conv", m.d_conv8, sel);
      add_conv(out, "decoder.seg2.conv", m.d_conv2, sel);
      break;
    case Module::classifier:
      for (int i = 0; i < 2; ++i) {
        const std::string p = "classifier.conv" + std::to_string(i + 1);
        add_conv(out, p, m.c_conv[i], sel);
        add_bn(out, "classifier.bn" + std::to_string(i + 1), m.c_bn[i], sel);
      }
      if (sel != Sel::buffer) {
        MatrixXd& w = (sel == Sel::value) ? m.c_fc.w : m.c_fc.gw;
        VectorXd& b = (sel == Sel::value) ? m.c_fc.b : m.c_fc.gb;
        add(out, "classifier.fc.w", w.data(), w.size(), {w.rows(), w.cols()});
        add(out, "classifier.fc.b", b.data(), b.size(), {b.size()});
      }
      break;
  }
}

}  // namespace

std::vector<ParamRef> module_params(ModelState& m, Module which) {
  std::vector<ParamRef> out;
  collect(m, which, Sel::value, out);
  return out;
}

std::vector<ParamRef> module_grads(ModelState& m, Module which) {
  std::vector<ParamRef> out;
  collect(m, which, Sel::grad, out);
  return out;
}

std::vector<ParamRef> module_buffers(ModelState& m, Module which) {
  std::vector<ParamRef> out;
  collect(m, which, Sel::buffer, out);
  return out;
}

std::vector<ParamRef> all_state(ModelState& m) {
  std::vector<ParamRef> out;
  for (Module which : {Module::extractor, Module::decoder, Module::classifier}) {
    collect(m, which, Sel::value, out);
    collect(m, which, Sel::buffer, out);
  }
  return out;
}

void zero_grads(ModelState& m, Module which) {
  for (auto& ref : module_grads(m, which)) std::memset(ref.data, 0, sizeof(double) * ref.size);
}

std::string module_state_hash(const ModelState& m, Module which) {
  auto& mm = const_cast<ModelState&>(m);  // read-only walk
  Sha256 h;
  std::vector<ParamRef> refs;
  collect(mm, which, Sel::value, refs);
  collect(mm, which, Sel::buffer, refs);
  for (const auto& ref : refs) {
    h.update(ref.name.data(), ref.name.size());
    h.update(ref.data, sizeof(double) * static_cast<size_t>(ref.size));
  }
  return h.hex_digest();
}

std::vector<LayerRow> architecture_rows() {
  return {
      {"extractor", "Conv3x3@16", "BatchNorm"},
      {"extractor", "ReLU+MaxPool", "Neither"},
      {"extractor", "Conv3x3@32", "BatchNorm"},
      {"extractor", "ReLU+MaxPool", "Neither"},
      {"extractor", "Conv3x3@64", "Both"},
      {"extractor", "ReLU+MaxPool", "Neither"},
      {"decoder", "TransConv3x3@64", "BatchNorm"},
      {"decoder", "Conv3x3@32", "Both"},
      {"decoder", "TransConv3x3@32", "BatchNorm"},
      {"decoder", "Conv3x3@16", "Both"},
      {"decoder", "TransConv3x3@16", "BatchNorm"},
      {"decoder", "Conv3x3@8", "Neither"},
      {"decoder", "Conv3x3@2", "Neither"},
      {"classifier", "Conv4x4@128", "BatchNorm"},
      {"classifier", "ReLU+MaxPool", "Neither"},
      {"classifier", "Conv4x4@256", "BatchNorm"},
      {"classifier", "ReLU+MaxPool", "Neither"},
      {"classifier", "SoftMax", "Neither"},
  };
}

// ---------------------------------------------------------------------------
// Extractor
// ---------------------------------------------------------------------------

Tensor extractor_forward(ModelState& m, const Tensor& x, BnMode mode, ExtractorCache* cache) {
  if (x.c() != 1 || x.h() != 80 || x.w() != 80)
    throw std::invalid_argument("extractor_forward: expected (N,1,80,80) input, got " +
                                x.shape_str());
  Tensor cur = x;
  for (int b = 0; b < 3; ++b) {
    ExtBlockCache local;
    ExtBlockCache& c = cache ? cache->block[b] : local;
    c.x_in = std::move(cur);

    Tensor pre = conv2d(c.x_in, m.e_conv[b].w, m.e_conv[b].b, m.e_conv[b].stride, m.e_conv[b].pad);
    Tensor skip = conv2d(c.x_in, m.e_proj[b].w, m.e_proj[b].b, 1, 0);
    pre.array() += skip.array();
    c.pre_bn = std::move(pre);

    Tensor bn_out = batchnorm2d(c.pre_bn, m.e_bn[b].gamma, m.e_bn[b].beta, m.e_bn[b].running_mean,
                                m.e_bn[b].running_var, mode, m.e_bn[b].eps, m.e_bn[b].momentum,
                                &c.bn);
    if (b == 2) {
      c.bn_out = std::move(bn_out);
      c.act_in = attention_forward(c.bn_out, m.e_attn, cache ? &c.attn : nullptr);
    } else {
      c.act_in = std::move(bn_out);
    }
    Tensor act_out = leaky_relu(c.act_in, kLeakySlope);
    PoolResult pool = maxpool2d(act_out);
    c.pool_idx = std::move(pool.argmax);
    cur = std::move(pool.y);
  }
  return cur;
}

Tensor extractor_backward(ModelState& m, const ExtractorCache& cache, const Tensor& grad_feat,
                          bool param_grads) {
  Tensor g = grad_feat;
  for (int b = 2; b >= 0; --b) {
    const ExtBlockCache& c = cache.block[b];
    g = maxpool2d_backward(c.act_in.shape(), c.pool_idx, g);
    g = leaky_relu_backward(c.act_in, g, kLeakySlope);
    if (b == 2) g = attention_backward(c.bn_out, m.e_attn, c.attn, g, param_grads);
    g = batchnorm2d_backward(c.pre_bn, m.e_bn[b].gamma, c.bn, g,
                             param_grads ? &m.e_bn[b].ggamma : nullptr,
                             param_grads ? &m.e_bn[b].gbeta : nullptr);
    Tensor gx = conv2d_backward_acc(c.x_in, m.e_conv[b].w, g, m.e_conv[b].stride, m.e_conv[b].pad,
                                    param_grads ? &m.e_conv[b].gw : nullptr,
                                    param_grads ? &m.e_conv[b].gb : nullptr);
    Tensor gskip = conv2d_backward_acc(c.x_in, m.e_proj[b].w, g, 1, 0,
                                       param_grads ? &m.e_proj[b].gw : nullptr,
                                       param_grads ? &m.e_proj[b].gb : nullptr);
    gx.array() += gskip.array();
    g = std::move(gx);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

Tensor decoder_forward(ModelState& m, const Tensor& features, BnMode mode, DecoderCache* cache) {
  if (features.c() != 64 || features.h() != 10 || features.w() != 10)
    throw std::invalid_argument("decoder_forward: expected (N,64,10,10) features, got " +
                                features.shape_str());
  Tensor cur = features;
  for (int s = 0; s < 3; ++s) {
    TConvStageCache local_up;
    TConvStageCache& u = cache ? cache->up[s] : local_up;
    u.x_in = std::move(cur);
    u.pre_bn = transposed_conv2d(u.x_in, m.d_tconv[s].w, m.d_tconv[s].b, m.d_tconv[s].stride,
                                 m.d_tconv[s].pad, m.d_tconv[s].out_pad);
    u.act_in = batchnorm2d(u.pre_bn, m.d_tbn[s].gamma, m.d_tbn[s].beta, m.d_tbn[s].running_mean,
                           m.d_tbn[s].running_var, mode, m.d_tbn[s].eps, m.d_tbn[s].momentum,
                           &u.bn);
    cur = leaky_relu(u.act_in, kLeakySlope);

    if (s < 2) {
      RefineStageCache local_ref;
      RefineStageCache& r = cache ? cache->refine[s] : local_ref;
      r.x_in = std::move(cur);
      r.pre_bn = conv2d(r.x_in, m.d_conv[s].w, m.d_conv[s].b, m.d_conv[s].stride, m.d_conv[s].pad);
      r.bn_out = batchnorm2d(r.pre_bn, m.d_cbn[s].gamma, m.d_cbn[s].beta, m.d_cbn[s].running_mean,
                             m.d_cbn[s].running_var, mode, m.d_cbn[s].eps, m.d_cbn[s].momentum,
                             &r.bn);
      r.act_in = attention_forward(r.bn_out, m.d_attn[s], cache ? &r.attn : nullptr);
      cur = leaky_relu(r.act_in, kLeakySlope);
    }
  }

  DecoderCache tail_local;
  DecoderCache& c = cache ? *cache : tail_local;
  c.c8_in = std::move(cur);
  c.c8_out = conv2d(c.c8_in, m.d_conv8.w, m.d_conv8.b, 1, 1);
  c.c2_in = leaky_relu(c.c8_out, kLeakySlope);
  return conv2d(c.c2_in, m.d_conv2.w, m.d_conv2.b, 1, 1);
}

Tensor decoder_backward(ModelState& m, const DecoderCache& cache, const Tensor& grad_logits,
                        bool param_grads) {
  Tensor g = conv2d_backward_acc(cache.c2_in, m.d_conv2.w, grad_logits, 1, 1,
                                 param_grads ? &m.d_conv2.gw : nullptr,
                                 param_grads ? &m.d_conv2.gb : nullptr);
  g = leaky_relu_backward(cache.c8_out, g, kLeakySlope);
  g = conv2d_backward_acc(cache.c8_in, m.d_conv8.w, g, 1, 1,
                          param_grads ? &m.d_conv8.gw : nullptr,
                          param_grads ? &m.d_conv8.gb : nullptr);

  for (int s = 2; s >= 0; --s) {
    if (s < 2) {
      const RefineStageCache& r = cache.refine[s];
      g = leaky_relu_backward(r.act_in, g, kLeakySlope);
      g = attention_backward(r.bn_out, m.d_attn[s], r.attn, g, param_grads);
      g = batchnorm2d_backward(r.pre_bn, m.d_cbn[s].gamma, r.bn, g,
                               param_grads ? &m.d_cbn[s].ggamma : nullptr,
                               param_grads ? &m.d_cbn[s].gbeta : nullptr);
      g = conv2d_backward_acc(r.x_in, m.d_conv[s].w, g, m.d_conv[s].stride, m.d_conv[s].pad,
                              param_grads ? &m.d_conv[s].gw : nullptr,
                              param_grads ? &m.d_conv[s].gb : nullptr);
    }
    const TConvStageCache& u = cache.up[s];
    g = leaky_relu_backward(u.act_in, g, kLeakySlope);
    g = batchnorm2d_backward(u.pre_bn, m.d_tbn[s].gamma, u.bn, g,
                             param_grads ? &m.d_tbn[s].ggamma : nullptr,
                             param_grads ? &m.d_tbn[s].gbeta : nullptr);
    g = transposed_conv2d_backward_acc(u.x_in, m.d_tconv[s].w, g, m.d_tconv[s].stride,
                                       m.d_tconv[s].pad, m.d_tconv[s].out_pad,
                                       param_grads ? &m.d_tconv[s].gw : nullptr,
                                       param_grads ? &m.d_tconv[s].gb : nullptr);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

namespace {

MatrixXd row_softmax(const MatrixXd& logits) {
  MatrixXd probs(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
    probs.row(i) = (e / e.sum()).matrix();
  }
  return probs;
}

}  // namespace

MatrixXd classifier_forward(ModelState& m, const Tensor& features, BnMode mode,
                            ClassifierCache* cache) {
  if (features.c() != 64 || features.h() != 10 || features.w() != 10)
    throw std::invalid_argument("classifier_forward: expected (N,64,10,10) features, got " +
                                features.shape_str());
  ClassifierCache local;
  ClassifierCache& c = cache ? *cache : local;
  c.x_in = features;

  c.pre_bn1 = conv2d(c.x_in, m.c_conv[0].w, m.c_conv[0].b, m.c_conv[0].stride, m.c_conv[0].pad);
  c.act1_in = batchnorm2d(c.pre_bn1, m.c_bn[0].gamma, m.c_bn[0].beta, m.c_bn[0].running_mean,
                          m.c_bn[0].running_var, mode, m.c_bn[0].eps, m.c_bn[0].momentum, &c.bn1);
  Tensor a1 = relu(c.act1_in);
  c.pool1_in_shape = a1.shape();
  PoolResult p1 = maxpool2d(a1, 2, 2, PoolMode::floor);
  c.pool1_idx = std::move(p1.argmax);
  c.pool1_out = std::move(p1.y);

  c.pre_bn2 = conv2d(c.pool1_out, m.c_conv[1].w, m.c_conv[1].b, m.c_conv[1].stride,
                     m.c_conv[1].pad);
  c.act2_in = batchnorm2d(c.pre_bn2, m.c_bn[1].gamma, m.c_bn[1].beta, m.c_bn[1].running_mean,
                          m.c_bn[1].running_var, mode, m.c_bn[1].eps, m.c_bn[1].momentum, &c.bn2);
  Tensor a2 = relu(c.act2_in);
  c.pool2_in_shape = a2.shape();
  PoolResult p2 = maxpool2d(a2, 2, 2, PoolMode::floor);
  c.pool2_idx = std::move(p2.argmax);
  c.pool2_out_shape = p2.y.shape();

  // Global average pool to (N, 256).
  const Index N = p2.y.n(), C = p2.y.c(), hw = p2.y.h() * p2.y.w();
  c.gap_out = MatrixXd(N, C);
  for (Index n = 0; n < N; ++n)
    for (Index ch = 0; ch < C; ++ch)
      c.gap_out(n, ch) =
          Eigen::Map<const Eigen::ArrayXd>(p2.y.plane(n, ch), hw).mean();

  MatrixXd logits = c.gap_out * m.c_fc.w.transpose();
  logits.rowwise() += m.c_fc.b.transpose();
  c.probs = row_softmax(logits);
  return c.probs;
}

Tensor classifier_backward(ModelState& m, const ClassifierCache& c, const MatrixXd& grad_logits,
                           bool param_grads) {
  if (grad_logits.rows() != c.gap_out.rows() || grad_logits.cols() != m.num_classes)
    throw std::invalid_argument("classifier_backward: grad_logits is " +
                                std::to_string(grad_logits.rows()) + "x" +
                                std::to_string(grad_logits.cols()) + ", expected N x " +
                                std::to_string(m.num_classes));
  if (param_grads) {
    m.c_fc.gw.noalias() += grad_logits.transpose() * c.gap_out;
    m.c_fc.gb += grad_logits.colwise().sum();
  }
  MatrixXd dgap = grad_logits * m.c_fc.w;  // N x 256

  const auto& s = c.pool2_out_shape;
  Tensor dpool2(s[0], s[1], s[2], s[3]);
  const Index hw2 = s[2] * s[3];
  for (Index n = 0; n < s[0]; ++n)
    for (Index ch = 0; ch < s[1]; ++ch) {
      const double v = dgap(n, ch) / static_cast<double>(hw2);
      Eigen::Map<Eigen::ArrayXd>(dpool2.plane(n, ch), hw2).setConstant(v);
    }

  Tensor g = maxpool2d_backward(c.pool2_in_shape, c.pool2_idx, dpool2);
  g = relu_backward(c.act2_in, g);
  g = batchnorm2d_backward(c.pre_bn2, m.c_bn[1].gamma, c.bn2, g,
                           param_grads ? &m.c_bn[1].ggamma : nullptr,
                           param_grads ? &m.c_bn[1].gbeta : nullptr);
  g = conv2d_backward_acc(c.pool1_out, m.c_conv[1].w, g, m.c_conv[1].stride, m.c_conv[1].pad,
                          param_grads ? &m.c_conv[1].gw : nullptr,
                          param_grads ? &m.c_conv[1].gb : nullptr);
  g = maxpool2d_backward(c.pool1_in_shape, c.pool1_idx, g);
  g = relu_backward(c.act1_in, g);
  g = batchnorm2d_backward(c.pre_bn1, m.c_bn[0].gamma, c.bn1, g,
                           param_grads ? &m.c_bn[0].ggamma : nullptr,
                           param_grads ? &m.c_bn[0].gbeta : nullptr);
  g = conv2d_backward_acc(c.x_in, m.c_conv[0].w, g, m.c_conv[0].stride, m.c_conv[0].pad,
                          param_grads ? &m.c_conv[0].gw : nullptr,
                          param_grads ? &m.c_conv[0].gb : nullptr);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void save_checkpoint(const ModelState& m, const std::string& path) {
  auto& mm = const_cast<ModelState&>(m);  // read-only walk
  std::vector<ParamRef> refs = all_state(mm);

  json manifest;
  manifest["num_classes"] = m.num_classes;
  manifest["rng_seed"] = m.rng_seed;
  json layers = json::array();

  // Two passes: sizes first so offsets are known before writing.
  const std::string magic = "SFAS0001";
  uint64_t blob_offset = 0;
  std::vector<uint64_t> offsets(refs.size());
  for (size_t i = 0; i < refs.size(); ++i) {
    offsets[i] = blob_offset;
    blob_offset += sizeof(double) * static_cast<uint64_t>(refs[i].size);
  }
  for (size_t i = 0; i < refs.size(); ++i) {
    json entry;
    entry["name"] = refs[i].name;
    entry["shape"] = refs[i].shape;
    entry["dtype"] = "f64";
    entry["offset"] = offsets[i];  // relative to the blob section
    layers.push_back(entry);
  }
  manifest["layers"] = layers;
  const std::string manifest_bytes = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(magic.data(), 8);
  const uint64_t len = manifest_bytes.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(manifest_bytes.data(), static_cast<std::streamsize>(manifest_bytes.size()));
  for (const auto& ref : refs)
    out.write(reinterpret_cast<const char*>(ref.data),
              static_cast<std::streamsize>(sizeof(double) * ref.size));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);

  char magic[8];
  if (!in.read(magic, 8) || std::string(magic, 8) != "SFAS0001")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), 8))
    throw std::runtime_error("load_checkpoint: truncated manifest length at byte 8");
  std::string manifest_bytes(len, '\0');
  if (!in.read(manifest_bytes.data(), static_cast<std::streamsize>(len)))
    throw std::runtime_error("load_checkpoint: truncated manifest at byte 16");

  json manifest;
  try {
    manifest = json::parse(manifest_bytes);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("load_checkpoint: manifest parse error: ") + e.what());
  }

  ModelState m = init_model(manifest.at("num_classes").get<int>(),
                            manifest.at("rng_seed").get<uint64_t>());
  std::vector<ParamRef> refs = all_state(m);

  const uint64_t blob_base = 16 + len;
  size_t loaded = 0;
  for (const auto& entry : manifest.at("layers")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<Index> shape = entry.at("shape").get<std::vector<Index>>();
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    auto it = std::find_if(refs.begin(), refs.end(),
                           [&](const ParamRef& r) { return r.name == name; });
    if (it == refs.end())
      throw std::runtime_error("load_checkpoint: unknown layer '" + name + "' in " + path);
    if (it->shape != shape) {
      std::string want, got;
      for (Index d : it->shape) want += std::to_string(d) + ",";
      for (Index d : shape) got += std::to_string(d) + ",";
      throw std::runtime_error("load_checkpoint: layer '" + name + "' has shape [" + got +
                               "], architecture expects [" + want + "]");
    }
    in.seekg(static_cast<std::streamoff>(blob_base + offset));
    if (!in.read(reinterpret_cast<char*>(it->data),
                 static_cast<std::streamsize>(sizeof(double) * it->size)))
      throw std::runtime_error("load_checkpoint: truncated blob for '" + name + "' at byte " +
                               std::to_string(blob_base + offset));
    ++loaded;
  }
  if (loaded != refs.size())
    throw std::runtime_error("load_checkpoint: manifest lists " + std::to_string(loaded) +
                             " layers, architecture has " + std::to_string(refs.size()));
  return m;
}

}  // namespace sfas
