#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clbd/tensor.hpp"

namespace clbd {

class DataError : public Error {
 public:
  using Error::Error;
};

struct LabeledDataset {
  Tensor2 x;  // N x D, entries in [0, 1]
  std::vector<std::size_t> y;
  std::size_t class_count = 0;
  /// Image geometry when the rows are flattened square images (0 = unknown).
  std::size_t image_side = 0;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }

  /// Throws DataError when labels or features violate the dataset invariants.
  void validate() const;
};

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> rows);

enum class TaskKind { split, permuted, synthetic };

struct Task {
  LabeledDataset train;
  LabeledDataset test;
  /// class_map[local] = original class id.
  std::vector<std::size_t> class_map;
};

struct TaskSequence {
  std::vector<Task> tasks;
  TaskKind kind = TaskKind::split;

  std::size_t size() const { return tasks.size(); }
};

// IDX (MNIST) files: big-endian u32 magic 0x00000803 for u8 image tensors and
// 0x00000801 for u8 label vectors, then big-endian u32 dimensions, then raw bytes.
LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t class_count = 10);

/// Writes an IDX image/label pair. Pixels are scaled back by 255 and rounded.
void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const LabeledDataset& ds);

/// Finds train/test IDX files in `dir` under the standard MNIST names.
struct MnistFiles {
  std::filesystem::path train_images, train_labels, test_images, test_labels;
};
std::optional<MnistFiles> find_mnist(const std::filesystem::path& dir);

/// Task k holds original classes [k*c, k*c + c) relabelled to [0, c).
TaskSequence make_split_tasks(const LabeledDataset& train, const LabeledDataset& test,
                              std::size_t classes_per_task);

struct PermutationSpec {
  std::uint64_t seed = 0;
  std::vector<std::size_t> perm;  // output pixel i takes input pixel perm[i]
};

PermutationSpec make_permutation(std::uint64_t seed, std::size_t task_index, std::size_t dim);
Tensor2 apply_permutation(const Tensor2& x, const PermutationSpec& spec);
PermutationSpec invert(const PermutationSpec& spec);

/// Task k applies permutation k (task 0 is the identity) to every image.
TaskSequence make_permuted_tasks(const LabeledDataset& train, const LabeledDataset& test, std::size_t task_count,
                                 std::uint64_t seed);

/// Gaussian clouds around per-class binary prototype images, clipped to [0, 1].
/// Prototypes share a base image; each pixel is redrawn per class with
/// probability `class_spread` (1 = independent prototypes).
LabeledDataset synth_blobs(std::uint64_t seed, std::size_t class_count, std::size_t dim, std::size_t n_per_class,
                           double noise_sd, double class_spread = 1.0);

struct LatentSpec {
  std::size_t latent_dim = 32;
  /// Distance between class means of the same group, in latent noise units.
  double separation = 6.0;
  /// Per-pixel standard deviation of each latent feature image.
  double feature_scale = 0.1;
  double noise_sd = 0.2;
};

/// Classes drawn from a shared latent Gaussian model. A fixed set of
/// `latent_dim` random feature images is shared by every class; a sample is
/// base + sum_i z_i * feature_i + pixel noise, clipped to [0, 1], with
/// z ~ N(mean_class, I). Consecutive groups of `group_size` classes (one task
/// each) have means at pairwise distance `separation` around a random group
/// centre. The base is a fixed two-level texture (0.35 / 0.65).
LabeledDataset synth_latent(std::uint64_t seed, std::size_t class_count, std::size_t group_size, std::size_t dim,
                            std::size_t n_per_class, const LatentSpec& spec);

/// Splits each class of `ds` into its first `train_per_class` samples and the rest.
std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& ds, std::size_t train_per_class);

/// Uniform per-class subsample (without replacement, order preserved) capped at `per_class`.
LabeledDataset subsample_per_class(const LabeledDataset& ds, std::size_t per_class, std::uint64_t seed);

struct Batch {
  Tensor2 x;
  std::vector<std::size_t> y;
  std::vector<std::size_t> rows;  // source row indices
};

/// Seeded shuffled mini-batches for one epoch; the final partial batch is kept.
class BatchIterator {
 public:
  BatchIterator(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed);

  bool done() const { return cursor_ >= order_.size(); }
  Batch next();
  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

 private:
  const LabeledDataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

BatchIterator batches(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed);

}  // namespace clbd
