#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

#include "sfas/attention.hpp"
#include "sfas/nn_ops.hpp"
#include "sfas/tensor.hpp"

// The three networks of the framework, wired per the hyper-parameter table:
// a shared extractor (80x80 -> 64x10x10, three residual conv blocks), a
// segmentation decoder (10x10 -> 2-channel 80x80 logits, three stride-2
// transposed-conv stages) and a recognition classifier (two 4x4 conv blocks,
// global average pooling, linear head, softmax).

namespace sfas {

struct ConvLayer {
  Tensor w;  // (C_out, C_in, kh, kw)
  VectorXd b;
  Tensor gw;
  VectorXd gb;
  int stride = 1;
  int pad = 1;
};

struct TConvLayer {
  Tensor w;  // (C_in, C_out, kh, kw)
  VectorXd b;
  Tensor gw;
  VectorXd gb;
  int stride = 2;
  int pad = 1;
  int out_pad = 1;
};

struct BnLayer {
  VectorXd gamma, beta;
  VectorXd running_mean, running_var;
  VectorXd ggamma, gbeta;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct LinearLayer {
  MatrixXd w;  // (out, in)
  VectorXd b;
  MatrixXd gw;
  VectorXd gb;
};

// Activation slope shared by extractor and decoder.
constexpr double kLeakySlope = 0.01;
// CBAM internals.
constexpr Index kAttnReduction = 4;
constexpr Index kAttnSpatialKernel = 7;

struct ModelState {
  int num_classes = 0;
  uint64_t rng_seed = 0;

  // Extractor: three blocks of conv(+1x1 projection skip) -> BN
  // [-> attention on block 3] -> leaky ReLU -> maxpool.
  ConvLayer e_conv[3];
  ConvLayer e_proj[3];
  BnLayer e_bn[3];
  AttentionParams e_attn;

  // Decoder: tconv->BN->lrelu, conv->BN->attention->lrelu (x2 interleaved),
  // then conv@8 -> lrelu -> conv@2 logits.
  TConvLayer d_tconv[3];
  BnLayer d_tbn[3];
  ConvLayer d_conv[2];
  BnLayer d_cbn[2];
  AttentionParams d_attn[2];
  ConvLayer d_conv8;
  ConvLayer d_conv2;

  // Classifier: conv4x4@128 -> BN -> ReLU -> pool, conv4x4@256 -> BN -> ReLU
  // -> pool, GAP -> linear -> softmax.
  ConvLayer c_conv[2];
  BnLayer c_bn[2];
  LinearLayer c_fc;
};

ModelState init_model(int num_classes, uint64_t seed);

// ---------------------------------------------------------------------------
// Parameter registry. Learnable parameters and batch-norm running statistics
// are exposed as named flat views in a fixed order; the order defines the
// checkpoint layout and the optimizer slot keys.
// ---------------------------------------------------------------------------

enum class Module { extractor, decoder, classifier };

struct ParamRef {
  std::string name;
  double* data;
  Index size;
  std::vector<Index> shape;
};

std::vector<ParamRef> module_params(ModelState& m, Module which);   // learnable, with grads
std::vector<ParamRef> module_grads(ModelState& m, Module which);    // matching grad views
std::vector<ParamRef> module_buffers(ModelState& m, Module which);  // running stats
std::vector<ParamRef> all_state(ModelState& m);  // params + buffers of all modules

void zero_grads(ModelState& m, Module which);

// SHA-256 over the raw bytes of a module's parameters and buffers; the
// update-routing checks compare these around each training phase.
std::string module_state_hash(const ModelState& m, Module which);

// Hyper-parameter table inventory (module, layer, batchnorm/attention tag);
// 6 extractor rows, 7 decoder rows, 5 classifier rows.
struct LayerRow {
  std::string module;
  std::string layer;
  std::string extras;
};
std::vector<LayerRow> architecture_rows();

// ---------------------------------------------------------------------------
// Forward / backward. Backward passes accumulate into the layer gradient
// buffers (call zero_grads first); param_grads=false skips parameter-gradient
// GEMMs and only propagates input gradients (residue passes through a frozen
// head need exactly that).
// ---------------------------------------------------------------------------

struct ExtBlockCache {
  Tensor x_in;
  Tensor pre_bn;
  BnCache bn;
  Tensor bn_out;  // only kept when the block carries attention
  AttnCache attn;
  Tensor act_in;
  std::vector<int32_t> pool_idx;
};

struct ExtractorCache {
  ExtBlockCache block[3];
};

Tensor extractor_forward(ModelState& m, const Tensor& x, BnMode mode, ExtractorCache* cache);
Tensor extractor_backward(ModelState& m, const ExtractorCache& cache, const Tensor& grad_feat,
                          bool param_grads = true);

struct TConvStageCache {
  Tensor x_in;
  Tensor pre_bn;
  BnCache bn;
  Tensor act_in;
};

struct RefineStageCache {
  Tensor x_in;
  Tensor pre_bn;
  BnCache bn;
  Tensor bn_out;
  AttnCache attn;
  Tensor act_in;
};

struct DecoderCache {
  TConvStageCache up[3];
  RefineStageCache refine[2];
  Tensor c8_in;
  Tensor c8_out;
  Tensor c2_in;
};

Tensor decoder_forward(ModelState& m, const Tensor& features, BnMode mode, DecoderCache* cache);
Tensor decoder_backward(ModelState& m, const DecoderCache& cache, const Tensor& grad_logits,
                        bool param_grads = true);

struct ClassifierCache {
  Tensor x_in;
  Tensor pre_bn1;
  BnCache bn1;
  Tensor act1_in;
  std::vector<int32_t> pool1_idx;
  std::array<Index, 4> pool1_in_shape;
  Tensor pool1_out;
  Tensor pre_bn2;
  BnCache bn2;
  Tensor act2_in;
  std::vector<int32_t> pool2_idx;
  std::array<Index, 4> pool2_in_shape;
  std::array<Index, 4> pool2_out_shape;
  MatrixXd gap_out;  // N x 256
  MatrixXd probs;    // N x num_classes
};

// Returns row-stochastic probabilities (N x C).
MatrixXd classifier_forward(ModelState& m, const Tensor& features, BnMode mode,
                            ClassifierCache* cache);
// grad_logits is the gradient at the pre-softmax logits (the loss module
// provides the fused softmax+CE form).
Tensor classifier_backward(ModelState& m, const ClassifierCache& cache,
                           const MatrixXd& grad_logits, bool param_grads = true);

// ---------------------------------------------------------------------------
// Checkpoints: magic "SFAS0001", u64 little-endian JSON manifest length, the
// manifest (layer name/shape/dtype/offset), then raw little-endian f64 blobs.
// Loading validates every shape against the architecture.
// ---------------------------------------------------------------------------

void save_checkpoint(const ModelState& m, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace sfas
