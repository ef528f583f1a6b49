#include "clbd/adam.hpp"

#include <cmath>

namespace clbd {

void adam_step(MlpModel& model, const Gradients& grads, AdamState& state) {
  auto params = parameter_blocks(model);
  auto gblocks = gradient_blocks(grads);
  if (params.size() != gblocks.size()) throw DimensionError("adam_step: gradient block count mismatch");
  std::size_t total = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != gblocks[b].size()) throw DimensionError("adam_step: gradient block shape mismatch");
    total += params[b].size();
  }
  if (state.m.empty() && state.t == 0) {
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  }
  if (state.m.size() != total || state.v.size() != total) {
    throw DimensionError("adam_step: optimizer state does not match model parameters");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  std::size_t k = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    auto g = gblocks[b];
    for (std::size_t i = 0; i < p.size(); ++i, ++k) {
      state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g[i];
      state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = state.m[k] / c1;
      const double vhat = state.v[k] / c2;
      p[i] -= state.alpha * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace clbd
