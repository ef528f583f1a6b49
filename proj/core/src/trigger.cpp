#include "clbd/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace clbd {
namespace {

std::size_t side_of(const LabeledDataset& ds) {
  if (ds.image_side == 0 || ds.image_side * ds.image_side != ds.dim()) {
    throw DataError("trigger: dataset rows are not square images");
  }
  return ds.image_side;
}

std::size_t poison_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
}

PoisonedDataset poison_rows(const LabeledDataset& ds, const TriggerSpec& spec, std::vector<std::size_t> rows,
                            Rng& rng) {
  const std::size_t side = side_of(ds);
  std::sort(rows.begin(), rows.end());
  PoisonedDataset out{ds, std::vector<std::uint8_t>(ds.size(), 0), spec};
  for (std::size_t r : rows) {
    apply_trigger(out.data.x.row(r), side, spec, rng);
    out.data.y[r] = spec.target_label;
    out.poisoned_mask[r] = 1;
  }
  return out;
}

}  // namespace

TriggerSpec TriggerSpec::static_default() { return TriggerSpec{}; }

TriggerSpec TriggerSpec::dynamic_default() {
  TriggerSpec s;
  s.kind = TriggerKind::dynamic_patch;
  s.height = 5;
  s.width = 5;
  s.poison_ratio = 0.15;
  return s;
}

void TriggerSpec::validate(std::size_t image_side) const {
  if (!(poison_ratio >= 0.0 && poison_ratio <= 1.0)) throw Error("trigger: poison_ratio must lie in [0, 1]");
  if (height == 0 || width == 0) throw Error("trigger: empty patch");
  if (height > image_side || width > image_side) {
    throw Error("trigger: " + std::to_string(height) + "x" + std::to_string(width) + " patch larger than " +
                std::to_string(image_side) + "x" + std::to_string(image_side) + " image");
  }
  if (!(value >= 0.0 && value <= 1.0)) throw Error("trigger: value must lie in [0, 1]");
}

std::vector<std::size_t> PoisonedDataset::poisoned_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < poisoned_mask.size(); ++i) {
    if (poisoned_mask[i]) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> PoisonedDataset::clean_rows() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < poisoned_mask.size(); ++i) {
    if (!poisoned_mask[i]) out.push_back(i);
  }
  return out;
}

PatchPlacement apply_trigger(std::span<double> image, std::size_t image_side, const TriggerSpec& spec, Rng& rng) {
  spec.validate(image_side);
  if (image.size() != image_side * image_side) throw DimensionError("apply_trigger: image size mismatch");
  PatchPlacement at{image_side - spec.height, image_side - spec.width};
  const bool dynamic = spec.kind == TriggerKind::dynamic_patch;
  if (dynamic) {
    std::uniform_int_distribution<std::size_t> row_dist(0, image_side - spec.height);
    std::uniform_int_distribution<std::size_t> col_dist(0, image_side - spec.width);
    at.row = row_dist(rng);
    at.col = col_dist(rng);
  }
  std::uniform_real_distribution<double> value_dist(0.0, 1.0);
  for (std::size_t r = 0; r < spec.height; ++r) {
    for (std::size_t c = 0; c < spec.width; ++c) {
      image[(at.row + r) * image_side + at.col + c] = dynamic ? value_dist(rng) : spec.value;
    }
  }
  return at;
}

PoisonedDataset embed_static(const LabeledDataset& ds, const TriggerSpec& spec) {
  if (spec.kind != TriggerKind::static_patch) throw Error("embed_static: spec is not static");
  spec.validate(side_of(ds));
  Rng rng(derive_seed(spec.seed, {10}));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(order.size(), poison_count(spec.poison_ratio, ds.size())));
  return poison_rows(ds, spec, std::move(order), rng);
}

PoisonedDataset embed_dynamic(const LabeledDataset& ds, const TriggerSpec& spec) {
  if (spec.kind != TriggerKind::dynamic_patch) throw Error("embed_dynamic: spec is not dynamic");
  spec.validate(side_of(ds));
  Rng rng(derive_seed(spec.seed, {11}));
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.y[i]].push_back(i);
  const std::size_t total = poison_count(spec.poison_ratio, ds.size());
  std::vector<std::size_t> chosen;
  const std::size_t classes = ds.class_count;
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t want = total / classes + (k < total % classes ? 1 : 0);
    auto& rows = by_class[k];
    std::shuffle(rows.begin(), rows.end(), rng);
    want = std::min(want, rows.size());
    chosen.insert(chosen.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(want));
  }
  return poison_rows(ds, spec, std::move(chosen), rng);
}

PoisonedDataset embed_trigger(const LabeledDataset& ds, const TriggerSpec& spec) {
  return spec.kind == TriggerKind::static_patch ? embed_static(ds, spec) : embed_dynamic(ds, spec);
}

EvalSplits make_eval_splits(const LabeledDataset& test, const TriggerSpec& spec) {
  if (test.size() == 0) throw DataError("make_eval_splits: empty test set");
  const std::size_t side = side_of(test);
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.y[i] != spec.target_label) rows.push_back(i);
  }
  if (rows.empty()) throw DataError("make_eval_splits: no samples outside the target class");
  EvalSplits out{test, subset(test, rows), spec.target_label};
  Rng rng(derive_seed(spec.seed, {12}));
  for (std::size_t r = 0; r < out.triggered.size(); ++r) apply_trigger(out.triggered.x.row(r), side, spec, rng);
  return out;
}

}  // namespace clbd
