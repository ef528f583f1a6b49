#include "clbd/cl.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace clbd {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Adds a flat gradient vector (possibly shorter than the model) into `grad`.
void add_flat_prefix(Gradients& grad, std::span<const double> flat) {
  std::size_t k = 0;
  for (auto block : gradient_blocks(grad)) {
    for (double& v : block) {
      if (k >= flat.size()) return;
      v += flat[k++];
    }
  }
}

std::vector<std::size_t> sample_rows(std::size_t n, std::size_t want, Rng& rng) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  if (want < n) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(want);
    std::sort(rows.begin(), rows.end());
  }
  return rows;
}

// Mean cross-entropy over a mixed-task memory batch, each sample through its own head.
std::vector<double> reference_gradient(const MlpModel& model, const std::vector<MemoryBuffer>& memory,
                                       std::size_t batch, Rng& rng) {
  std::size_t total = 0;
  for (const auto& m : memory) total += m.samples.size();
  std::vector<std::pair<std::size_t, std::size_t>> pool;  // (buffer, row)
  pool.reserve(total);
  for (std::size_t b = 0; b < memory.size(); ++b) {
    for (std::size_t r = 0; r < memory[b].samples.size(); ++r) pool.emplace_back(b, r);
  }
  if (pool.size() > batch) {
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(batch);
  }
  Gradients g = zeros_like(model);
  const double n = static_cast<double>(pool.size());
  for (std::size_t b = 0; b < memory.size(); ++b) {
    std::vector<std::size_t> rows;
    for (const auto& [buf, row] : pool) {
      if (buf == b) rows.push_back(row);
    }
    if (rows.empty()) continue;
    const auto part = subset(memory[b].samples, rows);
    auto lg = task_loss(model, part.x, part.y, memory[b].task_id);
    add_scaled(g, lg.grads, static_cast<double>(rows.size()) / n);
  }
  return flatten(g);
}

}  // namespace

std::string strategy_name(const ClStrategy& s) {
  return std::visit(overloaded{[](const Ewc&) { return std::string("ewc"); },
                               [](const Si&) { return std::string("si"); },
                               [](const Xdg&) { return std::string("xdg"); },
                               [](const Lwf&) { return std::string("lwf"); },
                               [](const Agem&) { return std::string("agem"); }},
                    s);
}

bool is_replay_based(const ClStrategy& s) { return std::holds_alternative<Agem>(s); }

void validate(const ClStrategy& s) {
  std::visit(overloaded{[](const Ewc& e) {
                          if (!(e.lambda >= 0.0)) throw Error("strategy.lambda_ewc must be >= 0");
                        },
                        [](const Si& si) {
                          if (!(si.c >= 0.0)) throw Error("strategy.c must be >= 0");
                          if (!(si.xi > 0.0)) throw Error("strategy.xi must be > 0");
                        },
                        [](const Xdg& x) {
                          if (!(x.gate_fraction > 0.0 && x.gate_fraction < 1.0)) {
                            throw Error("strategy.gate_fraction must lie in (0, 1)");
                          }
                        },
                        [](const Lwf& l) {
                          if (!(l.temperature > 0.0)) throw Error("strategy.temperature must be > 0");
                          if (!(l.distill_weight >= 0.0)) throw Error("strategy.distill_weight must be >= 0");
                        },
                        [](const Agem& a) {
                          if (a.reference_batch == 0) throw Error("strategy.reference_batch must be >= 1");
                        }},
             s);
}

std::vector<double> empirical_fisher(const MlpModel& model, const LabeledDataset& ds, std::size_t task_id,
                                     std::size_t max_samples, std::uint64_t seed) {
  if (ds.size() == 0) throw DataError("empirical_fisher: empty dataset");
  Rng rng(derive_seed(seed, {20, task_id}));
  const auto rows = sample_rows(ds.size(), max_samples == 0 ? ds.size() : max_samples, rng);
  std::vector<double> sum(parameter_count(model), 0.0);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < rows.size(); start += kChunk) {
    const std::size_t end = std::min(rows.size(), start + kChunk);
    const std::span<const std::size_t> chunk(rows.data() + start, end - start);
    const auto part = subset(ds, chunk);
    auto fwd = forward(model, part.x, task_id);
    // Per-sample gradient of -log p(y|x): softmax minus one-hot, unscaled.
    Tensor2 dlogits = softmax(fwd.logits);
    for (std::size_t r = 0; r < dlogits.rows(); ++r) dlogits(r, part.y[r]) -= 1.0;
    const auto sq = flatten(backward_squared(model, fwd.cache, dlogits, task_id));
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += sq[i];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (double& v : sum) v *= inv;
  return sum;
}

double ewc_penalty(const MlpModel& model, const ClState& state, double lambda, Gradients* grad) {
  if (state.ewc.empty()) return 0.0;
  const auto theta = flatten(model);
  double total = 0.0;
  std::vector<double> g(theta.size(), 0.0);
  for (const auto& mem : state.ewc) {
    const std::size_t n = std::min(mem.fisher.size(), theta.size());
    for (std::size_t p = 0; p < n; ++p) {
      const double d = theta[p] - mem.anchor[p];
      total += mem.fisher[p] * d * d;
      g[p] += lambda * mem.fisher[p] * d;
    }
  }
  if (grad) add_flat_prefix(*grad, g);
  return 0.5 * lambda * total;
}

void si_update(ClState& state, std::span<const double> before, std::span<const double> after,
               std::span<const double> grads) {
  if (before.size() != after.size() || before.size() != grads.size()) {
    throw DimensionError("si_update: length mismatch");
  }
  if (state.si_path.size() < before.size()) state.si_path.resize(before.size(), 0.0);
  for (std::size_t p = 0; p < before.size(); ++p) state.si_path[p] += -grads[p] * (after[p] - before[p]);
}

void si_consolidate(ClState& state, const MlpModel& model, double xi) {
  const auto theta = flatten(model);
  state.si_omega.resize(theta.size(), 0.0);
  state.si_path.resize(theta.size(), 0.0);
  if (state.si_anchor.size() < theta.size()) {
    const std::size_t old = state.si_anchor.size();
    state.si_anchor.resize(theta.size());
    std::copy(theta.begin() + static_cast<std::ptrdiff_t>(old), theta.end(),
              state.si_anchor.begin() + static_cast<std::ptrdiff_t>(old));
  }
  for (std::size_t p = 0; p < theta.size(); ++p) {
    const double delta = theta[p] - state.si_anchor[p];
    state.si_omega[p] += state.si_path[p] / (delta * delta + xi);
  }
  std::fill(state.si_path.begin(), state.si_path.end(), 0.0);
  state.si_anchor = theta;
}

double si_penalty(const MlpModel& model, const ClState& state, double c, Gradients* grad) {
  if (state.si_omega.empty()) return 0.0;
  const auto theta = flatten(model);
  const std::size_t n = std::min({state.si_omega.size(), state.si_anchor.size(), theta.size()});
  double total = 0.0;
  std::vector<double> g(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const double d = theta[p] - state.si_anchor[p];
    total += state.si_omega[p] * d * d;
    g[p] = 2.0 * c * state.si_omega[p] * d;
  }
  if (grad) add_flat_prefix(*grad, g);
  return c * total;
}

TaskGate xdg_mask(std::size_t task_id, std::span<const std::size_t> layer_sizes, double gate_fraction,
                  std::uint64_t seed) {
  if (!(gate_fraction > 0.0 && gate_fraction < 1.0)) throw Error("xdg_mask: gate_fraction must lie in (0, 1)");
  TaskGate gate;
  for (std::size_t l = 0; l < layer_sizes.size(); ++l) {
    const std::size_t n = layer_sizes[l];
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, {30, task_id, l}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto gated = static_cast<std::size_t>(std::floor(gate_fraction * static_cast<double>(n)));
    UnitMask mask(n, 1);
    for (std::size_t i = 0; i < gated; ++i) mask[order[i]] = 0;
    gate.layers.push_back(std::move(mask));
  }
  return gate;
}

LossAndGrad lwf_distillation(const MlpModel& model, const MlpModel& previous, const Tensor2& x,
                             std::size_t task_id, double temperature) {
  LossAndGrad out{0.0, zeros_like(model)};
  const std::size_t old_heads = std::min(task_id, previous.heads.size());
  if (old_heads == 0) return out;
  auto cur = forward(model, x, task_id);
  auto prev = forward(previous, x, 0);
  std::vector<Tensor2> dlogits;
  dlogits.reserve(old_heads);
  for (std::size_t h = 0; h < old_heads; ++h) {
    const Tensor2 teacher = head_logits(previous, prev.cache, h);
    const Tensor2 student = head_logits(model, cur.cache, h);
    auto d = distillation_loss(student, teacher, temperature);
    out.loss += d.loss;
    dlogits.push_back(std::move(d.dlogits));
  }
  std::vector<HeadGrad> hg;
  for (std::size_t h = 0; h < old_heads; ++h) hg.push_back({h, &dlogits[h]});
  out.grads = backward(model, cur.cache, hg);
  return out;
}

LossAndGrad lwf_loss(const MlpModel& model, const MlpModel* previous, const Tensor2& x,
                     std::span<const std::size_t> y, std::size_t task_id, double temperature,
                     double distill_weight) {
  auto out = task_loss(model, x, y, task_id);
  if (distill_weight == 0.0 || task_id == 0) return out;
  if (previous == nullptr) throw Error("lwf_loss: missing previous-model snapshot");
  auto d = lwf_distillation(model, *previous, x, task_id, temperature);
  out.loss += distill_weight * d.loss;
  add_scaled(out.grads, d.grads, distill_weight);
  return out;
}

std::vector<double> agem_project(std::span<const double> g, std::span<const double> g_ref) {
  if (g.size() != g_ref.size()) throw DimensionError("agem_project: length mismatch");
  std::vector<double> out(g.begin(), g.end());
  const double gd = dot(g, g_ref);
  if (gd >= 0.0) return out;
  const double rr = dot(g_ref, g_ref);
  if (rr == 0.0) {
    spdlog::warn("agem_project: zero reference gradient with negative dot product");
    return out;
  }
  const double coef = gd / rr;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= coef * g_ref[i];
  return out;
}

TaskTrainer::TaskTrainer(MlpModel& model, std::size_t task_id, std::size_t classes, const ClStrategy& strategy,
                         ClState& state, const TrainOptions& options)
    : model_(&model),
      task_id_(task_id),
      strategy_(&strategy),
      state_(&state),
      options_(options),
      rng_(derive_seed(options.seed, {40, task_id})) {
  validate(strategy);
  if (task_id > model.heads.size()) throw Error("train: task " + std::to_string(task_id) + " skips a head");
  if (task_id == model.heads.size()) add_head(model, classes, options.seed);
  if (model.heads[task_id].out_dim() != classes) throw DimensionError("train: head width != task class count");
  if (const auto* xdg = std::get_if<Xdg>(&strategy)) {
    std::vector<std::size_t> sizes;
    for (const auto& l : model.trunk) sizes.push_back(l.out_dim());
    if (model.gates.size() <= task_id) model.gates.resize(task_id + 1);
    if (model.gates[task_id].layers.empty()) {
      model.gates[task_id] = xdg_mask(task_id, sizes, xdg->gate_fraction, options.seed);
    }
  }
  if (std::holds_alternative<Si>(strategy)) {
    const auto theta = flatten(model);
    const std::size_t old = state.si_anchor.size();
    if (old < theta.size()) {
      state.si_anchor.resize(theta.size());
      std::copy(theta.begin() + static_cast<std::ptrdiff_t>(old), theta.end(),
                state.si_anchor.begin() + static_cast<std::ptrdiff_t>(old));
    }
    state.si_path.assign(theta.size(), 0.0);
    state.si_omega.resize(theta.size(), 0.0);
  }
  adam_.alpha = options.learning_rate;
}

double TaskTrainer::step(const Tensor2& x, LossAndGrad data_term) {
  MlpModel& model = *model_;
  double loss = data_term.loss;
  Gradients& grads = data_term.grads;
  std::visit(overloaded{[&](const Ewc& e) {
                          if (e.lambda > 0.0) loss += ewc_penalty(model, *state_, e.lambda, &grads);
                        },
                        [&](const Si& s) {
                          if (s.c > 0.0) loss += si_penalty(model, *state_, s.c, &grads);
                        },
                        [](const Xdg&) {},
                        [&](const Lwf& l) {
                          if (l.distill_weight > 0.0 && task_id_ > 0) {
                            if (!state_->lwf_previous) throw Error("lwf: missing previous-model snapshot");
                            auto d = lwf_distillation(model, *state_->lwf_previous, x, task_id_, l.temperature);
                            loss += l.distill_weight * d.loss;
                            add_scaled(grads, d.grads, l.distill_weight);
                          }
                        },
                        [&](const Agem& a) {
                          if (state_->agem_memory.empty()) return;
                          const auto g_ref = reference_gradient(model, state_->agem_memory, a.reference_batch, rng_);
                          const auto g = flatten(grads);
                          assign_flat(grads, agem_project(g, g_ref));
                        }},
             *strategy_);
  if (!std::isfinite(loss)) throw Error("numeric divergence: non-finite loss at step " + std::to_string(steps_));
  if (std::holds_alternative<Si>(*strategy_)) {
    const auto before = flatten(model);
    adam_step(model, grads, adam_);
    const auto after = flatten(model);
    si_update(*state_, before, after, flatten(grads));
  } else {
    adam_step(model, grads, adam_);
  }
  ++steps_;
  return loss;
}

void TaskTrainer::consolidate(const LabeledDataset& train) {
  MlpModel& model = *model_;
  std::visit(overloaded{[&](const Ewc& e) {
                          if (e.lambda == 0.0) return;
                          state_->ewc.push_back({empirical_fisher(model, train, task_id_, options_.fisher_samples,
                                                                  options_.seed),
                                                 flatten(model)});
                        },
                        [&](const Si& s) { si_consolidate(*state_, model, s.xi); },
                        [](const Xdg&) {},
                        [&](const Lwf&) { state_->lwf_previous = model; },
                        [&](const Agem& a) {
                          if (a.buffer_per_task == 0) return;
                          Rng rng(derive_seed(options_.seed, {41, task_id_}));
                          const auto rows = sample_rows(train.size(), a.buffer_per_task, rng);
                          state_->agem_memory.push_back({task_id_, subset(train, rows)});
                        }},
             *strategy_);
  state_->tasks_seen = std::max(state_->tasks_seen, task_id_ + 1);
}

double accuracy(const MlpModel& model, const LabeledDataset& ds, std::size_t task_id) {
  if (ds.size() == 0) throw DataError("accuracy: empty dataset");
  const auto pred = predict(model, ds.x, task_id);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == ds.y[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

TrainReport train_task(MlpModel& model, const Task& task, std::size_t task_id, const ClStrategy& strategy,
                       ClState& state, const TrainOptions& options, const LossHook& hook) {
  return train_on(model, task.train, task.test, task_id, strategy, state, options, hook);
}

TrainReport train_on(MlpModel& model, const LabeledDataset& train, const LabeledDataset& test, std::size_t task_id,
                     const ClStrategy& strategy, ClState& state, const TrainOptions& options,
                     const LossHook& hook) {
  if (train.size() == 0) throw DataError("train_task: empty task");
  const auto start = std::chrono::steady_clock::now();
  TaskTrainer trainer(model, task_id, train.class_count, strategy, state, options);
  TrainReport report;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    auto it = batches(train, options.batch_size, derive_seed(options.seed, {42, task_id, epoch}));
    double sum = 0.0;
    std::size_t count = 0;
    while (!it.done()) {
      const Batch b = it.next();
      LossAndGrad data = hook ? hook(HookContext{model, b, task_id, trainer.steps()})
                              : task_loss(model, b.x, b.y, task_id);
      sum += trainer.step(b.x, std::move(data));
      ++count;
    }
    report.epoch_loss.push_back(sum / static_cast<double>(count));
  }
  trainer.consolidate(train);
  report.steps = trainer.steps();
  if (test.size() > 0) report.test_accuracy = accuracy(model, test, task_id);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace clbd
