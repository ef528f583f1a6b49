#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clbd/analysis.hpp"
#include "clbd/attack.hpp"
#include "clbd/config.hpp"

namespace clbd {

/// One row of metrics.csv.
struct MetricRow {
  std::string run_id;
  std::string strategy;
  std::string attack_mode;
  std::size_t attacked_task = 0;
  std::size_t eval_after_task = 0;
  std::size_t task = 0;
  double acc = 0.0;
  double asr = 0.0;
};

inline constexpr const char* kMetricsHeader = "run_id,strategy,attack_mode,attacked_task,eval_after_task,task,acc,asr";

struct TaskOutcome {
  std::size_t task = 0;
  TrainReport train;
  std::optional<BtbReport> btb;
  /// Units selected and shifted by the latent attack (attacked task only).
  std::vector<NeuronId> ltb_selected;
  /// Units at or above the importance percentile at this task's end.
  std::vector<NeuronId> important;
};

struct RunRecord {
  ExperimentConfig config;
  std::string config_hash;
  std::vector<MetricRow> metrics;
  std::vector<TaskOutcome> tasks;
  CheckpointSet checkpoints;
  double wall_seconds = 0.0;
  std::vector<std::filesystem::path> artifacts;

  /// ASR on the attacked task's head measured after task `after`.
  double attacked_asr(std::size_t after) const;
  double final_asr() const { return attacked_asr(tasks.size() - 1); }
  /// Mean clean accuracy over all tasks after the last task.
  double final_mean_acc() const;
  /// (ASR right after the attack - final ASR) / number of later tasks; 0 when the attack hits the last task.
  double mean_asr_drop_per_task() const;
  std::vector<NeuronId> ltb_selected() const;
};

TaskSequence build_tasks(const DatasetConfig& dataset);

struct RunOptions {
  /// Write config.json, metrics.csv, run.json and checkpoints to config.output_dir.
  bool write_outputs = true;
};

/// Trains the whole sequence, attacking the configured task, evaluating every
/// seen task after every task.
RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

std::string metrics_csv(std::span<const MetricRow> rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

struct AnalyzeSummary {
  double algorithmic_variation = 0.0;
  std::vector<std::vector<double>> iou;
  std::optional<StabilityReport> stability;
  std::vector<std::filesystem::path> outputs;
};

/// Rebuilds data from the stored config and recomputes every analysis from the
/// checkpoints, writing CSV/JSON reports into `run_dir/analysis`.
AnalyzeSummary analyze_run_dir(const std::filesystem::path& run_dir);

/// Joint per-task ASR/ACC table across runs (long format CSV).
std::string compare_runs(std::span<const std::filesystem::path> run_dirs);

}  // namespace clbd
