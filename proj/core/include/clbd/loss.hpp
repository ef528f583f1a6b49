#pragma once

#include <cstddef>
#include <span>

#include "clbd/model.hpp"
#include "clbd/tensor.hpp"

namespace clbd {

struct LossResult {
  double loss = 0.0;
  Tensor2 dlogits;
};

/// Mean cross-entropy of softmax(logits) against integer labels;
/// dlogits = (softmax - onehot) / rows.
LossResult softmax_cross_entropy(const Tensor2& logits, std::span<const std::size_t> labels);

/// Per-row softmax, numerically stabilised.
Tensor2 softmax(const Tensor2& logits, double temperature = 1.0);

/// Mean over rows of T^2 * KL(softmax(teacher/T) || softmax(student/T)); the
/// gradient is taken with respect to the student logits.
LossResult distillation_loss(const Tensor2& student, const Tensor2& teacher, double temperature);

/// A scalar loss together with its full parameter gradient.
struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Cross-entropy through the given task head, with gradients.
LossAndGrad task_loss(const MlpModel& model, const Tensor2& x, std::span<const std::size_t> labels,
                      std::size_t task_id);

}  // namespace clbd
