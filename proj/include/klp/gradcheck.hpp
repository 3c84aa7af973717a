#pragma once

#include <functional>

#include "klp/tensor.hpp"

namespace klp {

/// Central-difference check of an analytic gradient. Returns the maximum
/// over components of |fd - an| / max(1, |fd|, |an|). Throws on non-finite
/// function evaluations.
double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic_grad, double eps = 1e-5);

} // namespace klp
