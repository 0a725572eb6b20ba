#include "vitdiv/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace vitdiv {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor probe = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()),
                              true);
  Tensor out = f(probe);
  if (out.numel() != 1) throw ShapeError("grad_check: function must return a scalar");

  std::vector<double> analytic(probe.numel(), 0.0);
  if (out.requires_grad()) {
    out.backward();
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  }

  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<double> base(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
    const double numeric = (fp - fm) / (2.0 * step);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace vitdiv
