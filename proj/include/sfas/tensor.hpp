#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <functional>
#include <string>

namespace sfas {

using Eigen::Index;

// Dense rank-4 array of f64, contiguous row-major (N, C, H, W), with an
// optional same-shape gradient buffer. The universal value type of the
// network stack: input chips, feature maps, weights, activations.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Index n, Index c, Index h, Index w) : dims_{n, c, h, w} {
    check_dims();
    data_ = Eigen::ArrayXd::Zero(size());
  }

  static Tensor zeros(Index n, Index c, Index h, Index w) { return Tensor(n, c, h, w); }

  static Tensor full(Index n, Index c, Index h, Index w, double value) {
    Tensor t(n, c, h, w);
    t.data_.setConstant(value);
    return t;
  }

  // Allocated but not zero-filled; for outputs the caller overwrites fully.
  static Tensor uninitialized(Index n, Index c, Index h, Index w) {
    Tensor t;
    t.dims_ = {n, c, h, w};
    t.check_dims();
    t.data_.resize(t.size());
    return t;
  }

  Index n() const { return dims_[0]; }
  Index c() const { return dims_[1]; }
  Index h() const { return dims_[2]; }
  Index w() const { return dims_[3]; }
  const std::array<Index, 4>& shape() const { return dims_; }
  Index size() const { return dims_[0] * dims_[1] * dims_[2] * dims_[3]; }
  bool empty() const { return size() == 0; }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * dims_[1] + c) * dims_[2] + h) * dims_[3] + w;
  }
  double& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  double operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  // Flat view over all N*C*H*W elements, row-major order.
  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }

  // Pointer to the start of one (n, c) plane of H*W contiguous values.
  double* plane(Index n, Index c) { return data_.data() + offset(n, c, 0, 0); }
  const double* plane(Index n, Index c) const { return data_.data() + offset(n, c, 0, 0); }

  bool has_grad() const { return grad_.size() == data_.size() && data_.size() > 0; }
  void alloc_grad() { grad_ = Eigen::ArrayXd::Zero(size()); }
  void zero_grad() {
    if (has_grad()) grad_.setZero();
  }
  Eigen::ArrayXd& grad() { return grad_; }
  const Eigen::ArrayXd& grad() const { return grad_; }

  bool all_finite() const { return data_.isFinite().all(); }

  std::string shape_str() const;

 private:
  void check_dims() const;

  std::array<Index, 4> dims_{0, 0, 0, 0};
  Eigen::ArrayXd data_;
  Eigen::ArrayXd grad_;
};

// Central-difference gradient of a scalar function, element by element:
// (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps). Testing oracle for every
// hand-written backward pass.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps = 1e-4);

// Same oracle restricted to a subset of flat coordinates; the remaining
// entries of the result are zero. Keeps end-to-end checks affordable.
Tensor finite_diff_grad_at(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           const std::vector<Index>& coords, double eps = 1e-4);

}  // namespace sfas
