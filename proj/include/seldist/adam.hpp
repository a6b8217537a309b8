#pragma once

#include <vector>

#include "seldist/tensor.hpp"

namespace seldist {

// First/second moment buffers, one pair per parameter, lazily sized on the
// first step.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

// Standard Adam with bias correction. The whole step is aborted (NumericError,
// no parameter touched) if any gradient holds a non-finite value.
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

}  // namespace seldist
