#include "clbd/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace clbd {

Tensor2 softmax(const Tensor2& logits, double temperature) {
  Tensor2 p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto out = p.row(r);
    const double mx = *std::max_element(in.begin(), in.end()) / temperature;
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      out[c] = std::exp(in[c] / temperature - mx);
      sum += out[c];
    }
    for (double& v : out) v /= sum;
  }
  return p;
}

LossResult softmax_cross_entropy(const Tensor2& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows()) throw DimensionError("softmax_cross_entropy: label count != rows");
  LossResult out{0.0, Tensor2(logits.rows(), logits.cols())};
  if (logits.rows() == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (labels[r] >= logits.cols()) {
      throw Error("softmax_cross_entropy: label " + std::to_string(labels[r]) + " out of range [0, " +
                  std::to_string(logits.cols()) + ")");
    }
    auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double log_norm = mx + std::log(sum);
    out.loss += (log_norm - z[labels[r]]) * inv_n;
    auto g = out.dlogits.row(r);
    for (std::size_t c = 0; c < z.size(); ++c) {
      g[c] = (std::exp(z[c] - log_norm) - (c == labels[r] ? 1.0 : 0.0)) * inv_n;
    }
  }
  return out;
}

LossResult distillation_loss(const Tensor2& student, const Tensor2& teacher, double temperature) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw DimensionError("distillation_loss: student/teacher shape mismatch");
  }
  LossResult out{0.0, Tensor2(student.rows(), student.cols())};
  if (student.rows() == 0) return out;
  const Tensor2 p = softmax(teacher, temperature);
  const Tensor2 q = softmax(student, temperature);
  const double inv_n = 1.0 / static_cast<double>(student.rows());
  const double t2 = temperature * temperature;
  for (std::size_t r = 0; r < student.rows(); ++r) {
    double kl = 0.0;
    for (std::size_t c = 0; c < student.cols(); ++c) {
      const double pc = p(r, c);
      if (pc > 0.0) kl += pc * (std::log(pc) - std::log(std::max(q(r, c), 1e-300)));
      out.dlogits(r, c) = temperature * (q(r, c) - pc) * inv_n;
    }
    out.loss += t2 * kl * inv_n;
  }
  return out;
}

LossAndGrad task_loss(const MlpModel& model, const Tensor2& x, std::span<const std::size_t> labels,
                      std::size_t task_id) {
  auto fwd = forward(model, x, task_id);
  auto ce = softmax_cross_entropy(fwd.logits, labels);
  return {ce.loss, backward(model, fwd.cache, ce.dlogits, task_id)};
}

}  // namespace clbd
