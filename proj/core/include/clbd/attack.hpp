#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clbd/cl.hpp"
#include "clbd/trigger.hpp"

namespace clbd {

// ---------------------------------------------------------------------------
// Blind task backdoor: the loss computation itself is replaced for every task.
// The attacked task trains on clean + triggered data; every task keeps the
// blind losses of earlier tasks within a tolerance through an augmented
// Lagrangian with per-task multipliers and a decaying quadratic penalty.
// ---------------------------------------------------------------------------

struct BtbConfig {
  std::size_t n = 300;         // iteration cap per task
  double alpha = 0.001;        // learning rate
  double beta = 0.0001;        // multiplier step
  double tau_factor = 0.05;    // tolerance as a fraction of the recorded loss
  double mu0 = 0.1;            // initial penalty
  double gamma = 0.99;         // penalty decay per iteration
  double lambda_bd = 1.0;      // backdoor-loss weight in the blind loss
  std::size_t reference_size = 128;  // samples kept per prior task to re-evaluate its loss
  std::size_t plateau_window = 10;
  double plateau_tol = 1e-4;
  double divergence_factor = 10.0;

  void validate() const;
};

/// Data kept from one finished task to re-evaluate its blind loss.
struct PriorSlice {
  std::size_t task_id = 0;
  LabeledDataset clean;
  LabeledDataset triggered;  // empty when the task was not poisoned
};

struct BtbState {
  std::vector<double> lambda;      // one multiplier per finished task, >= 0
  double mu = 0.1;
  std::vector<double> ell_prior;   // blind loss recorded when each task finished
  std::vector<double> tau;         // tolerance per finished task
  std::vector<PriorSlice> slices;
};

struct BlindLoss {
  double loss = 0.0;
  double clean_loss = 0.0;
  double backdoor_loss = 0.0;
  Gradients grads;
};

/// L(x, y) + lambda_bd * L(x+, y+). An empty triggered batch contributes nothing.
BlindLoss blind_loss(const MlpModel& model, const Tensor2& clean_x, std::span<const std::size_t> clean_y,
                     const Tensor2& trig_x, std::span<const std::size_t> trig_y, double lambda_bd,
                     std::size_t task_id);

/// delta_j = current_j - ell_prior_j - tau_j; positive means the constraint is violated.
std::vector<double> constraint_violation(const BtbState& state, std::span<const double> current_prior_losses);

/// blind + sum_j lambda_j delta_j + (mu / 2) sum_j delta_j^2
double augmented_objective(double blind, std::span<const double> delta, std::span<const double> lambda, double mu);

/// d objective / d theta = g_blind + sum_j (lambda_j + mu delta_j) g_j
Gradients augmented_gradient(Gradients blind, std::span<const Gradients> prior_grads, std::span<const double> delta,
                             std::span<const double> lambda, double mu);

/// lambda_j <- max(0, lambda_j + beta * delta_j)
void update_multipliers(std::span<double> lambda, std::span<const double> delta, double beta);

/// Blind loss of one finished task on its reference slice, with gradients.
BlindLoss prior_blind_loss(const MlpModel& model, const PriorSlice& slice, double lambda_bd);

struct BtbReport {
  TrainReport train;
  std::size_t iterations = 0;
  bool early_stopped = false;
  /// delta_j for each earlier task measured after the final update.
  std::vector<double> exit_violation;
  std::vector<double> lambda;
  double mu = 0.0;
};

/// Runs the constrained blind-loss training for one task. `poison` is null for
/// tasks the attack code does not poison; those train on the clean blind loss
/// (still under the prior-task constraints).
BtbReport btb_train_task(MlpModel& model, const Task& task, const PoisonedDataset* poison, std::size_t task_id,
                         const ClStrategy& strategy, ClState& cl_state, const BtbConfig& config, BtbState& state,
                         const TrainOptions& options);

// ---------------------------------------------------------------------------
// Latent task backdoor: the adversary controls a single task. After clean
// training it ranks hidden units by diagonal Fisher importance, shifts the
// most important ones by v_trigger and retrains with the latent loss.
// ---------------------------------------------------------------------------

struct LtbConfig {
  double v_trigger = 0.5;
  double epsilon_factor = 0.1;
  double kappa_percentile = 98.0;
  double p_regularization = 0.70;
  double p_replay = 0.90;
  /// Epochs of latent-loss training (0 = same as the clean phase).
  std::size_t latent_epochs = 0;

  void validate() const;
  double p_select(const ClStrategy& strategy) const {
    return is_replay_based(strategy) ? p_replay : p_regularization;
  }
};

/// One importance score per hidden unit, in (layer, unit) order.
struct ImportanceMap {
  std::vector<NeuronId> neurons;
  std::vector<double> scores;
};

/// Per-parameter empirical Fisher averaged into per-unit scores (incoming
/// weights and bias of each hidden unit).
ImportanceMap compute_dfm(const MlpModel& model, const LabeledDataset& clean, std::size_t task_id,
                          std::size_t max_samples = 0);

/// Linear-interpolated percentile (numpy "linear" convention).
double percentile(std::vector<double> values, double pct);

/// Candidates are units scoring >= the kappa percentile; returns the top
/// ceil(p * |candidates|) of them by score, ties by (layer, unit).
std::vector<NeuronId> select_stable_neurons(const ImportanceMap& importance, double kappa_percentile,
                                            double p_select);

/// Adds v_trigger to the bias of each listed unit, once per unit.
void embed_v_trigger(MlpModel& model, std::span<const NeuronId> neurons, double v_trigger);

struct LatentLoss {
  double loss = 0.0;
  double backdoor_loss = 0.0;
  double clean_loss = 0.0;
  double epsilon = 0.0;
  bool hinge_active = false;
  Gradients grads;
};

/// L(x+, y+) + relu(L(x, y) - eps) with eps = epsilon_factor * L(x+, y+) held constant.
LatentLoss latent_loss(const MlpModel& model, const Tensor2& trig_x, std::span<const std::size_t> trig_y,
                       const Tensor2& clean_x, std::span<const std::size_t> clean_y, double epsilon_factor,
                       std::size_t task_id);

struct LtbReport {
  TrainReport clean_phase;
  TrainReport latent_phase;
  ImportanceMap importance;
  std::vector<NeuronId> selected;
};

LtbReport ltb_train_task(MlpModel& model, const Task& task, const PoisonedDataset& poison, std::size_t task_id,
                         const ClStrategy& strategy, ClState& cl_state, const LtbConfig& config,
                         const TrainOptions& options);

/// Data-poisoning baseline: ordinary training on the poisoned set.
TrainReport badnets_baseline_train(MlpModel& model, const Task& task, const PoisonedDataset& poison,
                                   std::size_t task_id, const ClStrategy& strategy, ClState& cl_state,
                                   const TrainOptions& options);

}  // namespace clbd
