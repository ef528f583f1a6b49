#include "clbd/analysis.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "clbd/rng.hpp"

namespace clbd {
namespace {

void check_layer(const MlpModel& a, const MlpModel& b, std::size_t layer) {
  if (layer >= a.trunk.size() || layer >= b.trunk.size()) throw DimensionError("layer index out of range");
  if (a.trunk[layer].weights.rows() != b.trunk[layer].weights.rows() ||
      a.trunk[layer].weights.cols() != b.trunk[layer].weights.cols()) {
    throw DimensionError("snapshot shape mismatch at layer " + std::to_string(layer));
  }
}

std::vector<double> layer_vector(const MlpModel& m, std::size_t layer) {
  const auto& l = m.trunk[layer];
  std::vector<double> out(l.weights.values().begin(), l.weights.values().end());
  out.insert(out.end(), l.bias.begin(), l.bias.end());
  return out;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

GroupStats group_stats(const CheckpointSet& checkpoints, std::span<const NeuronId> neurons) {
  GroupStats g;
  const auto traj = neuron_trajectories(checkpoints, neurons);
  std::vector<double> pooled;
  const std::size_t ks = checkpoints.snapshots.size() - 1;
  g.per_k_mean.assign(ks, 0.0);
  for (const auto& t : traj) {
    pooled.insert(pooled.end(), t.begin(), t.end());
    for (std::size_t k = 0; k < ks; ++k) g.per_k_mean[k] += t[k] / static_cast<double>(traj.size());
    g.final_values.push_back(t.back());
  }
  g.mean = mean_of(pooled);
  g.final_mean = mean_of(g.final_values);
  g.stddev = stddev_of(pooled);
  if (g.final_values.size() >= 2) g.final_kde = kde(g.final_values);
  return g;
}

}  // namespace

void CheckpointSet::validate() const {
  for (std::size_t t = 1; t < snapshots.size(); ++t) {
    if (snapshots[t].trunk.size() != snapshots[0].trunk.size()) throw DimensionError("snapshots differ in depth");
    for (std::size_t l = 0; l < snapshots[0].trunk.size(); ++l) check_layer(snapshots[0], snapshots[t], l);
  }
}

double layer_variation(const MlpModel& before, const MlpModel& after, std::size_t layer) {
  check_layer(before, after, layer);
  const auto& a = before.trunk[layer];
  const auto& b = after.trunk[layer];
  std::vector<double> summed(a.in_dim() + 1, 0.0);
  for (std::size_t u = 0; u < a.out_dim(); ++u) {
    auto ra = a.weights.row(u);
    auto rb = b.weights.row(u);
    for (std::size_t i = 0; i < ra.size(); ++i) summed[i] += rb[i] - ra[i];
    summed.back() += b.bias[u] - a.bias[u];
  }
  return norm(summed);
}

double algorithmic_variation(const CheckpointSet& checkpoints) {
  const auto& snaps = checkpoints.snapshots;
  if (snaps.size() < 2) throw Error("algorithmic_variation: need at least 2 snapshots");
  checkpoints.validate();
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < snaps.size(); ++t) {
    for (std::size_t l = 0; l < snaps[t].trunk.size(); ++l) total += layer_variation(snaps[t], snaps[t + 1], l);
  }
  const double pairs = static_cast<double>(snaps.size() - 1);
  return total / pairs / static_cast<double>(snaps.size());
}

PcaResult pca_power(const std::vector<std::vector<double>>& rows, std::size_t components, std::size_t iterations,
                    double tol) {
  PcaResult out;
  if (rows.empty()) return out;
  const std::size_t n = rows.size();
  const std::size_t d = rows[0].size();
  out.mean.assign(d, 0.0);
  for (const auto& r : rows) {
    if (r.size() != d) throw DimensionError("pca: ragged rows");
    for (std::size_t i = 0; i < d; ++i) out.mean[i] += r[i] / static_cast<double>(n);
  }
  std::vector<std::vector<double>> centered(n, std::vector<double>(d));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < d; ++i) centered[r][i] = rows[r][i] - out.mean[i];
  }
  out.scores.assign(n, std::vector<double>(components, 0.0));
  double total_variance = 0.0;
  for (const auto& r : centered) total_variance += dot(r, r);
  // Covariance-free iteration: v <- X^T (X v), deflating X after each component.
  for (std::size_t c = 0; c < components; ++c) {
    std::vector<double> v(d);
    Rng rng(derive_seed(0x5eed, {c}));
    std::normal_distribution<double> gauss;
    for (double& x : v) x = gauss(rng);
    double vn = norm(v);
    for (double& x : v) x /= vn;
    std::vector<double> proj(n);
    bool degenerate = false;
    for (std::size_t it = 0; it < iterations; ++it) {
      for (std::size_t r = 0; r < n; ++r) proj[r] = dot(centered[r], v);
      std::vector<double> next(d, 0.0);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t i = 0; i < d; ++i) next[i] += centered[r][i] * proj[r];
      }
      const double nn = norm(next);
      // Eigenvalue at rounding level: nothing left after deflation.
      if (nn <= 1e-12 * total_variance || nn < 1e-300) {
        degenerate = true;
        break;
      }
      double change = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        next[i] /= nn;
        change += (next[i] - v[i]) * (next[i] - v[i]);
      }
      v = std::move(next);
      if (change < tol * tol) break;
    }
    if (degenerate) {
      out.components.emplace_back(d, 0.0);
      continue;
    }
    for (std::size_t r = 0; r < n; ++r) {
      const double s = dot(centered[r], v);
      out.scores[r][c] = s;
      for (std::size_t i = 0; i < d; ++i) centered[r][i] -= s * v[i];
    }
    out.components.push_back(std::move(v));
  }
  return out;
}

std::vector<DriftPoint> layer_pca_drift(const CheckpointSet& checkpoints, std::size_t layer) {
  const auto& snaps = checkpoints.snapshots;
  if (snaps.size() < 2) throw Error("layer_pca_drift: need at least 2 snapshots");
  checkpoints.validate();
  std::vector<std::vector<double>> rows;
  for (const auto& s : snaps) {
    if (layer >= s.trunk.size()) throw DimensionError("layer_pca_drift: layer out of range");
    rows.push_back(layer_vector(s, layer));
  }
  const auto pca = pca_power(rows, 2);
  std::vector<DriftPoint> out;
  for (std::size_t t = 0; t + 1 < rows.size(); ++t) {
    out.push_back({pca.scores[t + 1][0] - pca.scores[t][0], pca.scores[t + 1][1] - pca.scores[t][1]});
  }
  return out;
}

std::vector<std::vector<double>> neuron_trajectories(const CheckpointSet& checkpoints,
                                                     std::span<const NeuronId> neurons) {
  const auto& snaps = checkpoints.snapshots;
  if (snaps.size() < 2) throw Error("neuron_trajectories: need at least 2 snapshots");
  std::vector<std::vector<double>> out;
  for (const auto& id : neurons) {
    const auto base = neuron_parameters(snaps[0], id);
    std::vector<double> series;
    for (std::size_t k = 1; k < snaps.size(); ++k) {
      auto cur = neuron_parameters(snaps[k], id);
      for (std::size_t i = 0; i < cur.size(); ++i) cur[i] -= base[i];
      series.push_back(norm(cur));
    }
    out.push_back(std::move(series));
  }
  return out;
}

KdeCurve kde(std::span<const double> values, std::optional<double> bandwidth) {
  if (values.size() < 2) throw Error("kde: need at least 2 values");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  KdeCurve curve;
  if (lo == hi) {
    spdlog::info("kde: all {} values identical; returning a spike", values.size());
    curve.x = {lo};
    curve.density = {std::numeric_limits<double>::infinity()};
    return curve;
  }
  const double n = static_cast<double>(values.size());
  const double h = bandwidth.value_or(1.06 * stddev_of(values) * std::pow(n, -0.2));
  if (!(h > 0.0)) throw Error("kde: bandwidth must be positive");
  curve.bandwidth = h;
  constexpr std::size_t kPoints = 200;
  const double a = lo - 3.0 * h;
  const double b = hi + 3.0 * h;
  const double norm_c = 1.0 / (n * h * std::sqrt(2.0 * std::numbers::pi));
  for (std::size_t i = 0; i < kPoints; ++i) {
    const double x = a + (b - a) * static_cast<double>(i) / static_cast<double>(kPoints - 1);
    double s = 0.0;
    for (double v : values) {
      const double z = (x - v) / h;
      s += std::exp(-0.5 * z * z);
    }
    curve.x.push_back(x);
    curve.density.push_back(s * norm_c);
  }
  return curve;
}

StabilityReport stability_comparison(const CheckpointSet& checkpoints, std::span<const NeuronId> stable,
                                     std::uint64_t random_seed) {
  if (checkpoints.snapshots.empty()) throw Error("stability_comparison: no snapshots");
  const auto& first = checkpoints.snapshots.front();
  std::vector<NeuronId> population;
  for (std::size_t l = 0; l < first.trunk.size(); ++l) {
    for (std::size_t u = 0; u < first.trunk[l].out_dim(); ++u) population.push_back({l, u});
  }
  if (stable.size() > population.size()) throw Error("stability_comparison: stable set larger than population");
  Rng rng(derive_seed(random_seed, {70}));
  std::shuffle(population.begin(), population.end(), rng);
  population.resize(stable.size());
  std::sort(population.begin(), population.end());
  return stability_comparison(checkpoints, stable, population);
}

StabilityReport stability_comparison(const CheckpointSet& checkpoints, std::span<const NeuronId> stable,
                                     std::span<const NeuronId> comparison) {
  if (stable.empty()) throw Error("stability_comparison: empty stable set");
  StabilityReport report;
  report.stable.assign(stable.begin(), stable.end());
  report.random.assign(comparison.begin(), comparison.end());
  report.stable_stats = group_stats(checkpoints, stable);
  report.random_stats = group_stats(checkpoints, comparison);
  return report;
}

std::vector<NeuronId> important_neurons(const ImportanceMap& importance, double percentile_threshold) {
  if (importance.scores.empty()) throw Error("important_neurons: empty importance map");
  const double kappa = percentile(importance.scores, percentile_threshold);
  std::vector<NeuronId> out;
  for (std::size_t i = 0; i < importance.scores.size(); ++i) {
    if (importance.scores[i] >= kappa) out.push_back(importance.neurons[i]);
  }
  return out;
}

std::vector<std::vector<double>> iou_matrix(const std::vector<std::set<NeuronId>>& sets) {
  for (const auto& s : sets) {
    if (s.empty()) throw Error("iou_matrix: empty neuron set");
  }
  const std::size_t n = sets.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      std::size_t inter = 0;
      for (const auto& id : sets[a]) inter += sets[b].count(id);
      const std::size_t uni = sets[a].size() + sets[b].size() - inter;
      m[a][b] = m[b][a] = 100.0 * static_cast<double>(inter) / static_cast<double>(uni);
    }
  }
  return m;
}

Tensor2 input_saliency(const MlpModel& model, std::span<const double> x, std::size_t task_id, std::size_t side) {
  if (side * side != x.size()) throw DimensionError("input_saliency: input is not a side x side image");
  Tensor2 input(1, x.size(), std::vector<double>(x.begin(), x.end()));
  auto fwd = forward(model, input, task_id);
  Tensor2 seed(1, fwd.logits.cols());
  seed(0, argmax(fwd.logits.row(0))) = 1.0;
  const Tensor2 g = input_gradient(model, fwd.cache, seed, task_id);
  Tensor2 map(side, side);
  double mx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    map.values()[i] = std::abs(g.values()[i]);
    mx = std::max(mx, map.values()[i]);
  }
  if (mx > 0.0) {
    for (double& v : map.values()) v /= mx;
  }
  return map;
}

double attack_success_rate(const MlpModel& model, const LabeledDataset& triggered_eval, std::size_t target_label,
                           std::size_t task_id) {
  if (triggered_eval.size() == 0) throw DataError("attack_success_rate: empty evaluation set");
  const auto pred = predict(model, triggered_eval.x, task_id);
  const auto hits = std::count(pred.begin(), pred.end(), target_label);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

AccuracyReport task_accuracies(const MlpModel& model, const TaskSequence& tasks, std::size_t task_count) {
  AccuracyReport r;
  for (std::size_t t = 0; t < task_count; ++t) r.per_task.push_back(accuracy(model, tasks.tasks.at(t).test, t));
  r.mean = mean_of(r.per_task);
  return r;
}

}  // namespace clbd
