#include "clbd/attack.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace clbd {
namespace {

// Endless shuffled pass over a fixed row set.
class CyclicSampler {
 public:
  CyclicSampler(std::vector<std::size_t> rows, std::uint64_t seed) : rows_(std::move(rows)), rng_(seed) { reshuffle(); }

  bool empty() const { return rows_.empty(); }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    if (rows_.empty()) return out;
    out.reserve(count);
    while (out.size() < count) {
      if (cursor_ == rows_.size()) reshuffle();
      out.push_back(rows_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(rows_.begin(), rows_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> rows_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

std::vector<std::size_t> first_n(std::vector<std::size_t> rows, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  if (rows.size() > n) rows.resize(n);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace

void BtbConfig::validate() const {
  if (n == 0) throw Error("btb.n must be >= 1");
  if (!(alpha > 0.0 && beta > 0.0 && tau_factor > 0.0 && mu0 > 0.0 && lambda_bd > 0.0)) {
    throw Error("btb: alpha, beta, tau_factor, mu0 and lambda_bd must be positive");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw Error("btb.gamma must lie in (0, 1]");
  if (reference_size == 0) throw Error("btb.reference_size must be >= 1");
}

BlindLoss blind_loss(const MlpModel& model, const Tensor2& clean_x, std::span<const std::size_t> clean_y,
                     const Tensor2& trig_x, std::span<const std::size_t> trig_y, double lambda_bd,
                     std::size_t task_id) {
  if (clean_y.empty()) throw Error("blind_loss: empty clean batch");
  auto clean = task_loss(model, clean_x, clean_y, task_id);
  BlindLoss out{clean.loss, clean.loss, 0.0, std::move(clean.grads)};
  if (!trig_y.empty() && lambda_bd != 0.0) {
    auto bd = task_loss(model, trig_x, trig_y, task_id);
    out.backdoor_loss = bd.loss;
    out.loss += lambda_bd * bd.loss;
    add_scaled(out.grads, bd.grads, lambda_bd);
  }
  return out;
}

std::vector<double> constraint_violation(const BtbState& state, std::span<const double> current_prior_losses) {
  if (current_prior_losses.size() != state.ell_prior.size() || state.tau.size() != state.ell_prior.size()) {
    throw DimensionError("constraint_violation: " + std::to_string(current_prior_losses.size()) +
                         " current losses for " + std::to_string(state.ell_prior.size()) + " recorded tasks");
  }
  std::vector<double> delta(current_prior_losses.size());
  for (std::size_t j = 0; j < delta.size(); ++j) {
    delta[j] = current_prior_losses[j] - state.ell_prior[j] - state.tau[j];
  }
  return delta;
}

double augmented_objective(double blind, std::span<const double> delta, std::span<const double> lambda, double mu) {
  if (delta.size() != lambda.size()) throw DimensionError("augmented_objective: lambda/delta length mismatch");
  double linear = 0.0;
  double quadratic = 0.0;
  for (std::size_t j = 0; j < delta.size(); ++j) {
    linear += lambda[j] * delta[j];
    quadratic += delta[j] * delta[j];
  }
  return blind + linear + 0.5 * mu * quadratic;
}

void update_multipliers(std::span<double> lambda, std::span<const double> delta, double beta) {
  if (delta.size() != lambda.size()) throw DimensionError("update_multipliers: length mismatch");
  for (std::size_t j = 0; j < lambda.size(); ++j) lambda[j] = std::max(0.0, lambda[j] + beta * delta[j]);
}

Gradients augmented_gradient(Gradients blind, std::span<const Gradients> prior_grads, std::span<const double> delta,
                             std::span<const double> lambda, double mu) {
  if (prior_grads.size() != delta.size() || delta.size() != lambda.size()) {
    throw DimensionError("augmented_gradient: length mismatch");
  }
  for (std::size_t j = 0; j < delta.size(); ++j) add_scaled(blind, prior_grads[j], lambda[j] + mu * delta[j]);
  return blind;
}

BlindLoss prior_blind_loss(const MlpModel& model, const PriorSlice& slice, double lambda_bd) {
  return blind_loss(model, slice.clean.x, slice.clean.y, slice.triggered.x, slice.triggered.y, lambda_bd,
                    slice.task_id);
}

BtbReport btb_train_task(MlpModel& model, const Task& task, const PoisonedDataset* poison, std::size_t task_id,
                         const ClStrategy& strategy, ClState& cl_state, const BtbConfig& config, BtbState& state,
                         const TrainOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const LabeledDataset& train = poison ? poison->data : task.train;
  if (train.size() == 0) throw DataError("btb: empty task");
  if (state.lambda.size() != state.slices.size() || state.ell_prior.size() != state.slices.size()) {
    throw Error("btb: state has inconsistent task counts");
  }
  // Each task starts a fresh constrained solve.
  std::fill(state.lambda.begin(), state.lambda.end(), 0.0);
  state.mu = config.mu0;

  std::vector<std::size_t> clean_rows, trig_rows;
  if (poison) {
    clean_rows = poison->clean_rows();
    trig_rows = poison->poisoned_rows();
  } else {
    clean_rows.resize(train.size());
    std::iota(clean_rows.begin(), clean_rows.end(), std::size_t{0});
  }
  if (clean_rows.empty()) throw DataError("btb: no clean samples in task");

  TrainOptions opts = options;
  opts.learning_rate = config.alpha;
  TaskTrainer trainer(model, task_id, train.class_count, strategy, cl_state, opts);
  CyclicSampler clean_sampler(clean_rows, derive_seed(options.seed, {50, task_id}));
  CyclicSampler trig_sampler(trig_rows, derive_seed(options.seed, {51, task_id}));
  const std::size_t priors = state.slices.size();

  BtbReport report;
  double initial_objective = 0.0;
  double ema = 0.0;
  double best_ema = std::numeric_limits<double>::infinity();
  std::size_t stall = 0;
  std::vector<double> delta(priors, 0.0);

  for (std::size_t k = 0; k < config.n; ++k) {
    const auto crow = clean_sampler.next(options.batch_size);
    const auto trow = trig_sampler.next(options.batch_size);
    const auto clean = subset(train, crow);
    const auto trig = subset(train, trow);
    BlindLoss blind = blind_loss(model, clean.x, clean.y, trig.x, trig.y, config.lambda_bd, task_id);

    std::vector<double> current(priors);
    std::vector<Gradients> prior_grads;
    prior_grads.reserve(priors);
    for (std::size_t j = 0; j < priors; ++j) {
      auto pl = prior_blind_loss(model, state.slices[j], config.lambda_bd);
      current[j] = pl.loss;
      prior_grads.push_back(std::move(pl.grads));
    }
    delta = constraint_violation(state, current);
    const double objective = augmented_objective(blind.loss, delta, state.lambda, state.mu);
    Gradients grads = augmented_gradient(std::move(blind.grads), prior_grads, delta, state.lambda, state.mu);
    if (k == 0) initial_objective = objective;
    if (!std::isfinite(objective) || objective > config.divergence_factor * initial_objective) {
      throw Error("btb: objective diverged at iteration " + std::to_string(k) + " of task " +
                  std::to_string(task_id));
    }
    trainer.step(clean.x, LossAndGrad{objective, std::move(grads)});
    update_multipliers(state.lambda, delta, config.beta);
    state.mu *= config.gamma;
    report.iterations = k + 1;

    ema = k == 0 ? blind.loss : 0.9 * ema + 0.1 * blind.loss;
    if (ema < best_ema - config.plateau_tol) {
      best_ema = ema;
      stall = 0;
    } else {
      ++stall;
    }
    const bool satisfied = std::all_of(delta.begin(), delta.end(), [](double d) { return d <= 0.0; });
    if (satisfied && stall >= config.plateau_window) {
      report.early_stopped = true;
      break;
    }
  }

  std::vector<double> exit_losses(priors);
  for (std::size_t j = 0; j < priors; ++j) exit_losses[j] = prior_blind_loss(model, state.slices[j], config.lambda_bd).loss;
  report.exit_violation = constraint_violation(state, exit_losses);

  PriorSlice slice;
  slice.task_id = task_id;
  slice.clean = subset(train, first_n(clean_rows, config.reference_size, derive_seed(options.seed, {52, task_id})));
  if (!trig_rows.empty()) {
    slice.triggered = subset(train, first_n(trig_rows, config.reference_size, derive_seed(options.seed, {53, task_id})));
  }
  const double ell = prior_blind_loss(model, slice, config.lambda_bd).loss;
  state.slices.push_back(std::move(slice));
  state.ell_prior.push_back(ell);
  state.tau.push_back(config.tau_factor * ell);
  state.lambda.push_back(0.0);

  trainer.consolidate(train);
  report.lambda = state.lambda;
  report.mu = state.mu;
  report.train.steps = trainer.steps();
  report.train.test_accuracy = accuracy(model, task.test, task_id);
  report.train.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void LtbConfig::validate() const {
  if (!(kappa_percentile > 0.0 && kappa_percentile < 100.0)) throw Error("ltb.kappa_percentile must lie in (0, 100)");
  for (double p : {p_regularization, p_replay, epsilon_factor}) {
    if (!(p > 0.0 && p <= 1.0)) throw Error("ltb: fractions must lie in (0, 1]");
  }
  if (!(v_trigger >= 0.0)) throw Error("ltb.v_trigger must be >= 0");
}

ImportanceMap compute_dfm(const MlpModel& model, const LabeledDataset& clean, std::size_t task_id,
                          std::size_t max_samples) {
  if (clean.size() == 0) throw DataError("compute_dfm: empty dataset");
  const auto fisher = empirical_fisher(model, clean, task_id, max_samples);
  ImportanceMap map;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < model.trunk.size(); ++l) {
    const auto& layer = model.trunk[l];
    const std::size_t in = layer.in_dim();
    const std::size_t out = layer.out_dim();
    const std::size_t bias_offset = offset + in * out;
    for (std::size_t u = 0; u < out; ++u) {
      double sum = fisher[bias_offset + u];
      for (std::size_t i = 0; i < in; ++i) sum += fisher[offset + u * in + i];
      map.neurons.push_back({l, u});
      map.scores.push_back(sum / static_cast<double>(in + 1));
    }
    offset = bias_offset + out;
  }
  return map;
}

double percentile(std::vector<double> values, double pct) {
  if (values.empty()) throw Error("percentile: no values");
  std::sort(values.begin(), values.end());
  const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

std::vector<NeuronId> select_stable_neurons(const ImportanceMap& importance, double kappa_percentile,
                                            double p_select) {
  if (importance.scores.empty()) throw Error("select_stable_neurons: empty importance map");
  if (importance.scores.size() != importance.neurons.size()) throw DimensionError("select_stable_neurons: malformed map");
  std::vector<std::size_t> order(importance.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (importance.scores[a] != importance.scores[b]) return importance.scores[a] > importance.scores[b];
    return importance.neurons[a] < importance.neurons[b];
  });
  const double kappa = percentile(importance.scores, kappa_percentile);
  std::size_t candidates = 0;
  while (candidates < order.size() && importance.scores[order[candidates]] >= kappa) ++candidates;
  if (candidates == 0) {
    const double frac = (100.0 - kappa_percentile) / 100.0 * static_cast<double>(order.size());
    candidates = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac - 1e-9)));
    spdlog::info("select_stable_neurons: empty candidate set at percentile {}, falling back to top {}",
                 kappa_percentile, candidates);
  }
  const auto take = std::min(
      candidates, static_cast<std::size_t>(std::ceil(p_select * static_cast<double>(candidates) - 1e-9)));
  std::vector<NeuronId> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(importance.neurons[order[i]]);
  return out;
}

void embed_v_trigger(MlpModel& model, std::span<const NeuronId> neurons, double v_trigger) {
  const std::set<NeuronId> unique(neurons.begin(), neurons.end());
  for (const auto& id : unique) {
    if (id.layer >= model.trunk.size() || id.unit >= model.trunk[id.layer].out_dim()) {
      throw Error("embed_v_trigger: unknown neuron (" + std::to_string(id.layer) + ", " + std::to_string(id.unit) +
                  ")");
    }
  }
  for (const auto& id : unique) model.trunk[id.layer].bias[id.unit] += v_trigger;
}

LatentLoss latent_loss(const MlpModel& model, const Tensor2& trig_x, std::span<const std::size_t> trig_y,
                       const Tensor2& clean_x, std::span<const std::size_t> clean_y, double epsilon_factor,
                       std::size_t task_id) {
  LatentLoss out;
  out.grads = zeros_like(model);
  if (!trig_y.empty()) {
    auto bd = task_loss(model, trig_x, trig_y, task_id);
    out.backdoor_loss = bd.loss;
    out.grads = std::move(bd.grads);
  }
  out.epsilon = epsilon_factor * out.backdoor_loss;
  out.loss = out.backdoor_loss;
  if (!clean_y.empty()) {
    auto clean = task_loss(model, clean_x, clean_y, task_id);
    out.clean_loss = clean.loss;
    if (clean.loss > out.epsilon) {
      out.hinge_active = true;
      out.loss += clean.loss - out.epsilon;
      add_scaled(out.grads, clean.grads, 1.0);
    }
  }
  return out;
}

LtbReport ltb_train_task(MlpModel& model, const Task& task, const PoisonedDataset& poison, std::size_t task_id,
                         const ClStrategy& strategy, ClState& cl_state, const LtbConfig& config,
                         const TrainOptions& options) {
  config.validate();
  LtbReport report;
  const auto start = std::chrono::steady_clock::now();
  TaskTrainer trainer(model, task_id, task.train.class_count, strategy, cl_state, options);

  // Clean training on the task first; the importance ranking needs a trained head.
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    auto it = batches(task.train, options.batch_size, derive_seed(options.seed, {42, task_id, epoch}));
    double sum = 0.0;
    std::size_t count = 0;
    while (!it.done()) {
      const Batch b = it.next();
      sum += trainer.step(b.x, task_loss(model, b.x, b.y, task_id));
      ++count;
    }
    report.clean_phase.epoch_loss.push_back(sum / static_cast<double>(count));
  }
  report.clean_phase.steps = trainer.steps();
  report.clean_phase.test_accuracy = accuracy(model, task.test, task_id);

  report.importance = compute_dfm(model, task.train, task_id, options.fisher_samples);
  report.selected = select_stable_neurons(report.importance, config.kappa_percentile, config.p_select(strategy));
  embed_v_trigger(model, report.selected, config.v_trigger);

  const auto& data = poison.data;
  CyclicSampler trig_sampler(poison.poisoned_rows(), derive_seed(options.seed, {60, task_id}));
  const std::size_t latent_epochs = config.latent_epochs ? config.latent_epochs : options.epochs;
  for (std::size_t epoch = 0; epoch < latent_epochs; ++epoch) {
    auto it = batches(data, options.batch_size, derive_seed(options.seed, {61, task_id, epoch}));
    double sum = 0.0;
    std::size_t count = 0;
    while (!it.done()) {
      const Batch b = it.next();
      std::vector<std::size_t> clean_idx;
      for (std::size_t i = 0; i < b.rows.size(); ++i) {
        if (!poison.poisoned_mask[b.rows[i]]) clean_idx.push_back(i);
      }
      const Tensor2 clean_x = gather_rows(b.x, clean_idx);
      std::vector<std::size_t> clean_y;
      for (std::size_t i : clean_idx) clean_y.push_back(b.y[i]);
      const auto trig = subset(data, trig_sampler.next(options.batch_size));
      auto ll = latent_loss(model, trig.x, trig.y, clean_x, clean_y, config.epsilon_factor, task_id);
      sum += trainer.step(b.x, LossAndGrad{ll.loss, std::move(ll.grads)});
      ++count;
    }
    report.latent_phase.epoch_loss.push_back(sum / static_cast<double>(count));
  }
  trainer.consolidate(data);
  report.latent_phase.steps = trainer.steps() - report.clean_phase.steps;
  report.latent_phase.test_accuracy = accuracy(model, task.test, task_id);
  report.latent_phase.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

TrainReport badnets_baseline_train(MlpModel& model, const Task& task, const PoisonedDataset& poison,
                                   std::size_t task_id, const ClStrategy& strategy, ClState& cl_state,
                                   const TrainOptions& options) {
  return train_on(model, poison.data, task.test, task_id, strategy, cl_state, options);
}

}  // namespace clbd
