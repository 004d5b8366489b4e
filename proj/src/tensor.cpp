#include "sfas/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace sfas {

void Tensor::check_dims() const {
  for (Index d : dims_) {
    if (d < 0) throw std::invalid_argument("Tensor: negative dimension " + shape_str());
  }
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(" << dims_[0] << "," << dims_[1] << "," << dims_[2] << "," << dims_[3] << ")";
  return os.str();
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  std::vector<Index> coords(static_cast<size_t>(x.size()));
  for (Index i = 0; i < x.size(); ++i) coords[static_cast<size_t>(i)] = i;
  return finite_diff_grad_at(f, x, coords, eps);
}

Tensor finite_diff_grad_at(const std::function<double(const Tensor&)>& f, const Tensor& x,
                           const std::vector<Index>& coords, double eps) {
  if (eps <= 0) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Tensor g(x.n(), x.c(), x.h(), x.w());
  Tensor probe = x;
  for (Index i : coords) {
    const double saved = probe.array()[i];
    probe.array()[i] = saved + eps;
    const double fp = f(probe);
    probe.array()[i] = saved - eps;
    const double fm = f(probe);
    probe.array()[i] = saved;
    g.array()[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

}  // namespace sfas
