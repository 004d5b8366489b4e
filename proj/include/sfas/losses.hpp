#pragma once

#include <Eigen/Core>

#include <optional>
#include <vector>

#include "sfas/tensor.hpp"

// The four loss functions and the residue schedule. Recognition and
// segmentation both use cross-entropy; the IRL combinations couple the
// current loss of one task with the alpha-weighted loss of the other task
// recomputed on the previous loop's cached batch. With the per-pixel
// normalization folded into segmentation_loss, both combinations reduce to
// current + alpha(t) * residue.

namespace sfas {

using Eigen::MatrixXd;

// Floor for log arguments; keeps saturated softmax outputs finite.
constexpr double kLogClamp = 1e-12;

// Batch-mean cross-entropy over probability rows (classifier output).
// labels are one-hot rows.
double recognition_loss(const MatrixXd& probs, const MatrixXd& onehot);

// Gradient at the pre-softmax logits of the fused softmax+CE: (p - y)/N.
MatrixXd recognition_loss_grad_logits(const MatrixXd& probs, const MatrixXd& onehot);

// Per-pixel 2-way softmax cross-entropy, averaged over the n = H*W pixels of
// each chip and over the batch. mask holds {0,1} per pixel (1 = target).
double segmentation_loss(const Tensor& logits, const Tensor& mask);

Tensor segmentation_loss_grad_logits(const Tensor& logits, const Tensor& mask);

// Residue ratio: -1/t + 1. Zero at t=1, monotone nondecreasing, < 1.
double alpha(long t);

// current + alpha(t) * residue. The residue is the other task's CE
// recomputed on the loop-(t-1) cached batch; it may be absent only at t=1.
double irl_recognition_loss(double current, std::optional<double> residue, long t);
double irl_segmentation_loss(double current, std::optional<double> residue, long t);

// One-hot encoding helper for recognition labels.
MatrixXd one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace sfas
