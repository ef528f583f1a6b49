#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "clbd/adam.hpp"
#include "clbd/data.hpp"
#include "clbd/loss.hpp"
#include "clbd/model.hpp"
#include "clbd/rng.hpp"

namespace clbd {

// Strategy hyperparameters. Defaults follow common practice for these methods.
struct Ewc {
  double lambda = 1000.0;
};
struct Si {
  double c = 0.5;
  double xi = 0.1;
};
struct Xdg {
  double gate_fraction = 0.8;
};
struct Lwf {
  double temperature = 2.0;
  double distill_weight = 1.0;
};
struct Agem {
  std::size_t buffer_per_task = 256;
  std::size_t reference_batch = 256;
};

using ClStrategy = std::variant<Ewc, Si, Xdg, Lwf, Agem>;

std::string strategy_name(const ClStrategy& s);
/// Replay-based strategies rehearse stored data; the rest regularise.
bool is_replay_based(const ClStrategy& s);
void validate(const ClStrategy& s);

struct EwcMemory {
  std::vector<double> fisher;
  std::vector<double> anchor;
};

struct MemoryBuffer {
  std::size_t task_id = 0;
  LabeledDataset samples;
};

/// Per-strategy memory carried across tasks. Only the members of the active
/// strategy are populated.
struct ClState {
  std::vector<EwcMemory> ewc;
  std::vector<double> si_omega;
  std::vector<double> si_path;
  std::vector<double> si_anchor;
  std::optional<MlpModel> lwf_previous;
  std::vector<MemoryBuffer> agem_memory;
  std::size_t tasks_seen = 0;
};

struct TrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  /// Cap on samples used for Fisher estimates (0 = whole set).
  std::size_t fisher_samples = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double test_accuracy = 0.0;
  std::size_t steps = 0;
  double wall_seconds = 0.0;
};

/// Mean over samples of the squared per-sample gradient of -log p(y|x) for
/// the given head (empirical diagonal Fisher), flat in parameter_blocks order.
std::vector<double> empirical_fisher(const MlpModel& model, const LabeledDataset& ds, std::size_t task_id,
                                     std::size_t max_samples = 0, std::uint64_t seed = 0);

/// (lambda/2) * sum_k sum_p F_k[p] (theta[p] - anchor_k[p])^2. Parameters beyond
/// a stored vector's length (heads added later) carry no penalty.
double ewc_penalty(const MlpModel& model, const ClState& state, double lambda, Gradients* grad = nullptr);

/// Path-integral accumulation: w[p] += -grad[p] * (after[p] - before[p]).
void si_update(ClState& state, std::span<const double> before, std::span<const double> after,
               std::span<const double> grads);
/// omega[p] += w[p] / (dtheta_task[p]^2 + xi); resets w and re-anchors.
void si_consolidate(ClState& state, const MlpModel& model, double xi);
/// c * sum_p omega[p] (theta[p] - anchor[p])^2
double si_penalty(const MlpModel& model, const ClState& state, double c, Gradients* grad = nullptr);

/// Gates off floor(gate_fraction * n) units per hidden layer; a pure function
/// of (seed, task_id, layer).
TaskGate xdg_mask(std::size_t task_id, std::span<const std::size_t> layer_sizes, double gate_fraction,
                  std::uint64_t seed);

/// sum over old heads of T^2 KL(prev || current) on x.
LossAndGrad lwf_distillation(const MlpModel& model, const MlpModel& previous, const Tensor2& x,
                             std::size_t task_id, double temperature);
/// Cross-entropy on the current head plus distill_weight times the distillation term.
LossAndGrad lwf_loss(const MlpModel& model, const MlpModel* previous, const Tensor2& x,
                     std::span<const std::size_t> y, std::size_t task_id, double temperature,
                     double distill_weight);

/// Returns g when g.g_ref >= 0, else g minus its projection onto g_ref.
std::vector<double> agem_project(std::span<const double> g, std::span<const double> g_ref);

struct HookContext {
  const MlpModel& model;
  const Batch& batch;
  std::size_t task_id;
  std::size_t step;
};

/// Replaces the data-loss computation of a training step. The strategy's own
/// penalty terms are still added by the trainer.
using LossHook = std::function<LossAndGrad(const HookContext&)>;

/// Drives one task: opens a head (and gate) when needed, applies strategy
/// terms on every step, and consolidates the strategy memory at the end.
class TaskTrainer {
 public:
  TaskTrainer(MlpModel& model, std::size_t task_id, std::size_t classes, const ClStrategy& strategy, ClState& state,
              const TrainOptions& options);

  /// Adds the strategy terms to `data_term`, projects (A-GEM), steps Adam and
  /// tracks the SI path integral. Returns the total loss.
  double step(const Tensor2& x, LossAndGrad data_term);
  /// Runs the strategy consolidation on the data the task was trained on.
  void consolidate(const LabeledDataset& train);

  std::size_t steps() const { return steps_; }
  MlpModel& model() { return *model_; }
  const ClStrategy& strategy() const { return *strategy_; }
  std::size_t task_id() const { return task_id_; }

 private:
  MlpModel* model_;
  std::size_t task_id_;
  const ClStrategy* strategy_;
  ClState* state_;
  TrainOptions options_;
  AdamState adam_;
  Rng rng_;
  std::size_t steps_ = 0;
};

double accuracy(const MlpModel& model, const LabeledDataset& ds, std::size_t task_id);

/// Trains one task with the strategy. Without a hook the data term is plain
/// cross-entropy on the batch.
TrainReport train_task(MlpModel& model, const Task& task, std::size_t task_id, const ClStrategy& strategy,
                       ClState& state, const TrainOptions& options, const LossHook& hook = {});

/// Same as train_task with an explicit training set (e.g. a poisoned copy).
TrainReport train_on(MlpModel& model, const LabeledDataset& train, const LabeledDataset& test, std::size_t task_id,
                     const ClStrategy& strategy, ClState& state, const TrainOptions& options,
                     const LossHook& hook = {});

}  // namespace clbd
