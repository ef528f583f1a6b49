#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "clbd/data.hpp"
#include "clbd/rng.hpp"

namespace clbd {

enum class TriggerKind { static_patch, dynamic_patch };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::static_patch;
  std::size_t height = 4;
  std::size_t width = 4;
  /// Constant patch value for static triggers; dynamic triggers draw U[0,1] per pixel.
  double value = 0.0;
  std::size_t target_label = 1;
  double poison_ratio = 0.05;
  std::uint64_t seed = 0;

  static TriggerSpec static_default();
  static TriggerSpec dynamic_default();

  /// Throws when the ratio is out of (0, 1] (0 is accepted as "no poisoning"),
  /// the patch does not fit an image of side `image_side`, or the value is outside [0, 1].
  void validate(std::size_t image_side) const;
};

struct PoisonedDataset {
  LabeledDataset data;
  std::vector<std::uint8_t> poisoned_mask;
  TriggerSpec spec;

  std::vector<std::size_t> poisoned_rows() const;
  std::vector<std::size_t> clean_rows() const;
};

/// Top-left corner of the patch placed on one image.
struct PatchPlacement {
  std::size_t row = 0;
  std::size_t col = 0;
};

/// Stamps the trigger onto one flattened square image in place.
PatchPlacement apply_trigger(std::span<double> image, std::size_t image_side, const TriggerSpec& spec, Rng& rng);

/// Poisons round(ratio * N) uniformly chosen samples with the static patch.
PoisonedDataset embed_static(const LabeledDataset& ds, const TriggerSpec& spec);
/// Poisons round(ratio * N) samples, balanced across classes, with random patches at random positions.
PoisonedDataset embed_dynamic(const LabeledDataset& ds, const TriggerSpec& spec);
/// Dispatches on spec.kind.
PoisonedDataset embed_trigger(const LabeledDataset& ds, const TriggerSpec& spec);

struct EvalSplits {
  LabeledDataset clean;
  /// Non-target test samples with the trigger applied; labels are the original labels.
  LabeledDataset triggered;
  std::size_t target_label = 0;
};

EvalSplits make_eval_splits(const LabeledDataset& test, const TriggerSpec& spec);

}  // namespace clbd
