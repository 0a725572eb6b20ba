#pragma once

#include <functional>

#include "vitdiv/tensor.hpp"

namespace vitdiv {

/// Compares the tape gradient of a scalar function against central differences.
///
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
/// `f` must be deterministic; it is re-evaluated 2 * numel(x) times with the
/// tape disabled.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace vitdiv
