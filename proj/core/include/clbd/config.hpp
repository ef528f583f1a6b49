#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "clbd/attack.hpp"
#include "clbd/cl.hpp"
#include "clbd/trigger.hpp"

namespace clbd {

/// Validation failure; `field` is a dotted path such as "attack.attacked_task".
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class DatasetKind { synthetic, split_mnist, permuted_mnist };
enum class AttackMode { none, btb, ltb, badnets };

std::string to_string(DatasetKind k);
std::string to_string(AttackMode m);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  /// Directory holding the MNIST IDX files (MNIST kinds only).
  std::string path;
  std::uint64_t seed = 1;
  std::size_t tasks = 5;
  std::size_t classes_per_task = 2;
  /// Synthetic only: flattened image size (a perfect square).
  std::size_t dim = 784;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 200;
  /// Synthetic only: latent model parameters (see synth_latent).
  double noise_sd = 0.2;
  std::size_t latent_dim = 32;
  double separation = 6.0;
  double feature_scale = 0.1;
  /// Per-class cap applied to MNIST train splits (0 = all).
  std::size_t max_train_per_class = 0;
  std::size_t max_test_per_class = 0;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{400, 400};
  std::uint64_t seed = 1;
};

struct AttackConfig {
  AttackMode mode = AttackMode::none;
  std::size_t attacked_task = 0;
  TriggerSpec trigger = TriggerSpec::static_default();
  BtbConfig btb;
  LtbConfig ltb;
};

struct ExperimentConfig {
  std::string run_id = "run";
  DatasetConfig dataset;
  ModelConfig model;
  ClStrategy strategy = Ewc{};
  AttackConfig attack;
  TrainOptions training;
  std::string output_dir;

  /// Cross-field checks. Also checks that referenced files exist.
  void validate() const;
};

/// Parses JSON text. Unknown keys are rejected so typos surface as errors.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON (sorted keys, every field explicit).
std::string config_to_json(const ExperimentConfig& config, int indent = -1);
/// FNV-1a 64 over the canonical JSON without the output block; hex string.
std::string config_hash(const ExperimentConfig& config);

/// Applies CLBD_DATA_DIR, when set, to dataset.path.
void apply_environment(ExperimentConfig& config);

}  // namespace clbd
