#include "sfas/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "sfas/nn_ops.hpp"

namespace sfas {

double recognition_loss(const MatrixXd& probs, const MatrixXd& onehot) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols())
    throw std::invalid_argument("recognition_loss: probs " + std::to_string(probs.rows()) + "x" +
                                std::to_string(probs.cols()) + " vs labels " +
                                std::to_string(onehot.rows()) + "x" +
                                std::to_string(onehot.cols()));
  if (probs.rows() == 0) throw std::invalid_argument("recognition_loss: empty batch");
  double total = 0.0;
  for (Index i = 0; i < probs.rows(); ++i) {
    for (Index c = 0; c < probs.cols(); ++c) {
      if (onehot(i, c) != 0.0)
        total -= onehot(i, c) * std::log(std::max(probs(i, c), kLogClamp));
    }
  }
  return total / static_cast<double>(probs.rows());
}

MatrixXd recognition_loss_grad_logits(const MatrixXd& probs, const MatrixXd& onehot) {
  if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols())
    throw std::invalid_argument("recognition_loss_grad_logits: shape mismatch");
  return (probs - onehot) / static_cast<double>(probs.rows());
}

namespace {

void check_mask(const Tensor& logits, const Tensor& mask) {
  if (logits.c() != 2)
    throw std::invalid_argument("segmentation_loss: expected 2-channel logits, got " +
                                logits.shape_str());
  if (mask.n() != logits.n() || mask.c() != 1 || mask.h() != logits.h() || mask.w() != logits.w())
    throw std::invalid_argument("segmentation_loss: mask shape " + mask.shape_str() +
                                " does not match logits " + logits.shape_str());
  for (Index i = 0; i < mask.size(); ++i) {
    const double v = mask.array()[i];
    if (v != 0.0 && v != 1.0)
      throw std::invalid_argument("segmentation_loss: mask contains non-binary value " +
                                  std::to_string(v));
  }
}

}  // namespace

double segmentation_loss(const Tensor& logits, const Tensor& mask) {
  check_mask(logits, mask);
  if (logits.n() == 0) throw std::invalid_argument("segmentation_loss: empty batch");
  const Index n_pixels = logits.h() * logits.w();
  double total = 0.0;
  for (Index n = 0; n < logits.n(); ++n) {
    const double* l0 = logits.plane(n, 0);
    const double* l1 = logits.plane(n, 1);
    const double* mk = mask.plane(n, 0);
    double chip = 0.0;
    for (Index i = 0; i < n_pixels; ++i) {
      const double mx = std::max(l0[i], l1[i]);
      const double e0 = std::exp(l0[i] - mx);
      const double e1 = std::exp(l1[i] - mx);
      const double inv = 1.0 / (e0 + e1);
      const double p_true = (mk[i] == 1.0 ? e1 : e0) * inv;
      chip -= std::log(std::max(p_true, kLogClamp));
    }
    total += chip / static_cast<double>(n_pixels);
  }
  return total / static_cast<double>(logits.n());
}

Tensor segmentation_loss_grad_logits(const Tensor& logits, const Tensor& mask) {
  check_mask(logits, mask);
  const Index n_pixels = logits.h() * logits.w();
  const double scale = 1.0 / (static_cast<double>(n_pixels) * static_cast<double>(logits.n()));
  Tensor g(logits.n(), 2, logits.h(), logits.w());
  for (Index n = 0; n < logits.n(); ++n) {
    const double* l0 = logits.plane(n, 0);
    const double* l1 = logits.plane(n, 1);
    const double* mk = mask.plane(n, 0);
    double* g0 = g.plane(n, 0);
    double* g1 = g.plane(n, 1);
    for (Index i = 0; i < n_pixels; ++i) {
      const double mx = std::max(l0[i], l1[i]);
      const double e0 = std::exp(l0[i] - mx);
      const double e1 = std::exp(l1[i] - mx);
      const double inv = 1.0 / (e0 + e1);
      const double p1 = e1 * inv;
      const double y1 = mk[i];
      g1[i] = (p1 - y1) * scale;
      g0[i] = ((1.0 - p1) - (1.0 - y1)) * scale;
    }
  }
  return g;
}

double alpha(long t) {
  if (t < 1) throw std::invalid_argument("alpha: t must be >= 1, got " + std::to_string(t));
  return -1.0 / static_cast<double>(t) + 1.0;
}

namespace {

double irl_combine(const char* op, double current, std::optional<double> residue, long t) {
  const double a = alpha(t);
  if (!residue.has_value()) {
    if (t >= 2)
      throw std::invalid_argument(std::string(op) + ": residue required at t=" +
                                  std::to_string(t));
    return current;
  }
  return current + a * residue.value();
}

}  // namespace

double irl_recognition_loss(double current, std::optional<double> residue, long t) {
  return irl_combine("irl_recognition_loss", current, residue, t);
}

double irl_segmentation_loss(double current, std::optional<double> residue, long t) {
  return irl_combine("irl_segmentation_loss", current, residue, t);
}

MatrixXd one_hot(const std::vector<int>& labels, int num_classes) {
  MatrixXd y = MatrixXd::Zero(static_cast<Index>(labels.size()), num_classes);
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                  " outside [0," + std::to_string(num_classes) + ")");
    y(static_cast<Index>(i), labels[i]) = 1.0;
  }
  return y;
}

}  // namespace sfas
