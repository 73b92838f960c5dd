#pragma once

#include <functional>
#include <vector>

#include "adeptlab/autograd.hpp"

namespace adeptlab {

// Central-difference gradient check. build_loss must construct a fresh
// graph each call and return a scalar loss computed from the current
// values of `params`. Returns the worst relative error
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
// over every coordinate of every parameter. Parameter values are
// restored exactly; accumulated gradients are cleared.
double grad_check(const std::function<TensorPtr(Graph&)>& build_loss,
                  const std::vector<TensorPtr>& params, double eps);

}  // namespace adeptlab
