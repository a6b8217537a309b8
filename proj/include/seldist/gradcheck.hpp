#pragma once

#include <functional>

#include "seldist/tensor.hpp"

namespace seldist {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Central-difference check of f's tape gradient at x. Returns the worst
// coordinate's |analytic - numeric| / max(1, |analytic|, |numeric|).
double gradcheck(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace seldist
