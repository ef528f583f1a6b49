#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "clbd/attack.hpp"
#include "clbd/cl.hpp"
#include "clbd/model.hpp"
#include "clbd/trigger.hpp"

namespace clbd {

/// One full model snapshot per completed task. Variation metrics use the
/// shared trunk, which every snapshot has in the same shape.
struct CheckpointSet {
  std::vector<MlpModel> snapshots;
  std::map<std::string, std::string> metadata;

  void validate() const;
};

/// L_i = || sum_j delta_i^j ||_2 where delta_i^j is the change of unit j's
/// (incoming weights, bias) vector in trunk layer i.
double layer_variation(const MlpModel& before, const MlpModel& after, std::size_t layer);

/// Mean over consecutive snapshot pairs of sum_i L_i, divided by the number of
/// snapshots (tasks).
double algorithmic_variation(const CheckpointSet& checkpoints);

struct DriftPoint {
  double d0 = 0.0;
  double d1 = 0.0;
};

struct PcaResult {
  std::vector<double> mean;
  std::vector<std::vector<double>> components;  // unit vectors, up to 2
  std::vector<std::vector<double>> scores;      // per row, per component
};

/// Top principal components of the rows by power iteration with deflation.
PcaResult pca_power(const std::vector<std::vector<double>>& rows, std::size_t components = 2,
                    std::size_t iterations = 500, double tol = 1e-10);

/// Displacement in 2-component PCA space between consecutive snapshots of one layer.
std::vector<DriftPoint> layer_pca_drift(const CheckpointSet& checkpoints, std::size_t layer);

/// T_{1k}[z] = || theta_k[z] - theta_1[z] ||_2 for k = 2..T, per neuron.
std::vector<std::vector<double>> neuron_trajectories(const CheckpointSet& checkpoints,
                                                     std::span<const NeuronId> neurons);

struct KdeCurve {
  std::vector<double> x;
  std::vector<double> density;
  double bandwidth = 0.0;
};

/// Gaussian KDE on 200 points spanning [min - 3h, max + 3h]; Silverman bandwidth by default.
KdeCurve kde(std::span<const double> values, std::optional<double> bandwidth = std::nullopt);

struct GroupStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> per_k_mean;  // k = 2..T
  std::vector<double> final_values;  // T_{1T} for each neuron
  double final_mean = 0.0;
  KdeCurve final_kde;
};

struct StabilityReport {
  std::vector<NeuronId> stable;
  std::vector<NeuronId> random;
  GroupStats stable_stats;
  GroupStats random_stats;
};

/// Compares the drift of `stable` against an equal-size uniformly drawn set of hidden units.
StabilityReport stability_comparison(const CheckpointSet& checkpoints, std::span<const NeuronId> stable,
                                     std::uint64_t random_seed);

/// Same, with an explicit comparison set.
StabilityReport stability_comparison(const CheckpointSet& checkpoints, std::span<const NeuronId> stable,
                                     std::span<const NeuronId> comparison);

/// Units scoring at or above the given percentile of an importance map.
std::vector<NeuronId> important_neurons(const ImportanceMap& importance, double percentile_threshold);

/// entry(a, b) = 100 |A n B| / |A u B|
std::vector<std::vector<double>> iou_matrix(const std::vector<std::set<NeuronId>>& sets);

/// |d logit_pred / d x| for a single input, max-normalised, as side x side.
Tensor2 input_saliency(const MlpModel& model, std::span<const double> x, std::size_t task_id, std::size_t side);

/// Fraction of triggered inputs classified as the target.
double attack_success_rate(const MlpModel& model, const LabeledDataset& triggered_eval, std::size_t target_label,
                           std::size_t task_id);

struct AccuracyReport {
  std::vector<double> per_task;
  double mean = 0.0;
};

/// Clean test accuracy of each task in `tasks` through its own head.
AccuracyReport task_accuracies(const MlpModel& model, const TaskSequence& tasks, std::size_t task_count);

}  // namespace clbd
