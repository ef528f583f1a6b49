#pragma once

#include <cstdint>
#include <vector>

#include "clbd/model.hpp"

namespace clbd {

struct AdamState {
  double alpha = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  /// Flat moments in parameter_blocks order. Empty until the first step.
  std::vector<double> m;
  std::vector<double> v;

  void reset() {
    t = 0;
    m.clear();
    v.clear();
  }
};

/// One bias-corrected Adam update. Moments are (re)sized on the first step;
/// a later parameter-count change is an error.
void adam_step(MlpModel& model, const Gradients& grads, AdamState& state);

}  // namespace clbd
