#include "seldist/adam.hpp"

#include <cmath>

namespace seldist {

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  const std::size_t n = params.size();
  if (grads.size() != n)
    throw ShapeError("adam_step: " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(n) + " parameters");
  if (state.m.empty()) {
    state.m.resize(n);
    state.v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      state.m[i].assign(params[i]->size(), 0.0);
      state.v[i].assign(params[i]->size(), 0.0);
    }
  }
  if (state.m.size() != n || state.v.size() != n)
    throw ShapeError("adam_step: state tracks " +
                     std::to_string(state.m.size()) + " parameters, got " +
                     std::to_string(n));

  // Validate everything before mutating anything: a NaN aborts the step.
  for (std::size_t i = 0; i < n; ++i) {
    if (grads[i].size() != params[i]->size())
      throw ShapeError("adam_step: gradient size " +
                       std::to_string(grads[i].size()) +
                       " mismatches parameter size " +
                       std::to_string(params[i]->size()) + " at index " +
                       std::to_string(i));
    for (double g : grads[i].data())
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient for parameter " +
                           std::to_string(i) + " at step " +
                           std::to_string(state.step + 1));
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(beta2, double(state.step));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double>& p = params[i]->mutable_data();
    const std::vector<double>& g = grads[i].data();
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
    }
  }
}

}  // namespace seldist
