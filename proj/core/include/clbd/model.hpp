#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "clbd/tensor.hpp"

namespace clbd {

enum class Activation { relu, identity };

struct DenseLayer {
  Tensor2 weights;  // out x in
  std::vector<double> bias;
  Activation activation = Activation::relu;

  std::size_t in_dim() const { return weights.cols(); }
  std::size_t out_dim() const { return weights.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// 1 = unit active, 0 = unit gated off.
using UnitMask = std::vector<std::uint8_t>;

/// Per-task hidden-unit gating, one mask per trunk layer.
struct TaskGate {
  std::vector<UnitMask> layers;
  friend bool operator==(const TaskGate&, const TaskGate&) = default;
};

/// Shared ReLU trunk with one output head per task (task-incremental).
struct MlpModel {
  std::size_t input_dim = 0;
  std::vector<DenseLayer> trunk;
  std::vector<DenseLayer> heads;
  /// Indexed by task id; tasks without an entry (or with an empty gate) run ungated.
  std::vector<TaskGate> gates;

  std::size_t feature_dim() const { return trunk.empty() ? input_dim : trunk.back().out_dim(); }
  const TaskGate* gate_for(std::size_t task_id) const;

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

/// Identifies one hidden unit: its incoming weight row plus its bias.
struct NeuronId {
  std::size_t layer = 0;
  std::size_t unit = 0;
  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

struct LayerGrad {
  Tensor2 weights;
  std::vector<double> bias;
};

struct Gradients {
  std::vector<LayerGrad> trunk;
  std::vector<LayerGrad> heads;
};

struct ForwardCache {
  std::size_t task_id = 0;
  /// inputs[l] is the input to trunk layer l; inputs.back() is the head input.
  std::vector<Tensor2> inputs;
  /// Pre-activations of each trunk layer.
  std::vector<Tensor2> pre;
};

struct ForwardResult {
  Tensor2 logits;
  ForwardCache cache;
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weights and bias.
DenseLayer make_dense(std::size_t in, std::size_t out, Activation act, std::uint64_t seed);

MlpModel make_mlp(std::size_t input_dim, std::span<const std::size_t> hidden, std::uint64_t seed);
/// Appends a head for the next task; returns its index.
std::size_t add_head(MlpModel& model, std::size_t classes, std::uint64_t seed);

ForwardResult forward(const MlpModel& model, const Tensor2& x, std::size_t task_id);
/// Logits of another head on the trunk features held in `cache`.
Tensor2 head_logits(const MlpModel& model, const ForwardCache& cache, std::size_t task_id);

struct HeadGrad {
  std::size_t task_id;
  const Tensor2* dlogits;
};

Gradients backward(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits, std::size_t task_id);
Gradients backward(const MlpModel& model, const ForwardCache& cache, std::span<const HeadGrad> head_grads);

/// Sum over rows of the squared per-row parameter gradients, where row i of
/// `dlogits` is the logit gradient of sample i alone.
Gradients backward_squared(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits,
                           std::size_t task_id);

/// Gradient of sum(dlogits . logits) with respect to the input.
Tensor2 input_gradient(const MlpModel& model, const ForwardCache& cache, const Tensor2& dlogits,
                       std::size_t task_id);

/// Argmax of the task head; ties resolve to the lowest class index.
std::vector<std::size_t> predict(const MlpModel& model, const Tensor2& x, std::size_t task_id);
std::size_t argmax(std::span<const double> row);

Gradients zeros_like(const MlpModel& model);
void add_scaled(Gradients& into, const Gradients& other, double scale);
void scale(Gradients& g, double factor);

// Flat parameter view. Order: trunk layers, then heads; each layer's weights
// (row-major) followed by its bias.
std::size_t parameter_count(const MlpModel& model);
std::vector<std::span<double>> parameter_blocks(MlpModel& model);
std::vector<std::span<const double>> parameter_blocks(const MlpModel& model);
std::vector<std::span<double>> gradient_blocks(Gradients& grads);
std::vector<std::span<const double>> gradient_blocks(const Gradients& grads);

std::vector<double> flatten(const MlpModel& model);
std::vector<double> flatten(const Gradients& grads);
void assign_flat(MlpModel& model, std::span<const double> flat);
void assign_flat(Gradients& grads, std::span<const double> flat);

bool all_finite(const MlpModel& model);

/// Incoming weights followed by bias of one hidden unit.
std::vector<double> neuron_parameters(const MlpModel& model, NeuronId id);
std::size_t hidden_unit_count(const MlpModel& model);

}  // namespace clbd
