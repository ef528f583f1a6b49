#include "clbd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "clbd/rng.hpp"

namespace clbd {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > buf.size()) throw DataError(path.string() + ": truncated header");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void write_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

std::size_t square_side(std::size_t dim) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  return side * side == dim ? side : 0;
}

std::vector<std::vector<std::size_t>> rows_by_class(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> out(ds.class_count);
  for (std::size_t i = 0; i < ds.size(); ++i) out[ds.y[i]].push_back(i);
  return out;
}

}  // namespace

void LabeledDataset::validate() const {
  if (x.rows() != y.size()) throw DataError("dataset: feature rows != label count");
  for (std::size_t label : y) {
    if (label >= class_count) throw DataError("dataset: label " + std::to_string(label) + " >= class count");
  }
  for (double v : x.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("dataset: feature outside [0, 1]");
  }
}

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  LabeledDataset out{gather_rows(ds.x, rows), {}, ds.class_count, ds.image_side};
  out.y.reserve(rows.size());
  for (std::size_t r : rows) out.y.push_back(ds.y[r]);
  return out;
}

LabeledDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::size_t class_count) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (read_be32(img, 0, images_path) != kImageMagic) throw DataError(images_path.string() + ": bad magic number");
  if (read_be32(lab, 0, labels_path) != kLabelMagic) throw DataError(labels_path.string() + ": bad magic number");
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t rows = read_be32(img, 8, images_path);
  const std::size_t cols = read_be32(img, 12, images_path);
  const std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw DataError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + n * dim) throw DataError(images_path.string() + ": truncated file");
  if (lab.size() < 8 + n) throw DataError(labels_path.string() + ": truncated file");

  LabeledDataset ds{Tensor2(n, dim), std::vector<std::size_t>(n), class_count, rows == cols ? rows : 0};
  for (std::size_t i = 0; i < n * dim; ++i) ds.x.values()[i] = static_cast<double>(img[16 + i]) / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.y[i] = lab[8 + i];
    if (ds.y[i] >= class_count) throw DataError(labels_path.string() + ": label out of range");
  }
  return ds;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const LabeledDataset& ds) {
  const std::size_t side = ds.image_side ? ds.image_side : square_side(ds.dim());
  if (side == 0) throw DataError("write_idx: rows are not square images");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("write_idx: cannot open output files");
  write_be32(img, kImageMagic);
  write_be32(img, static_cast<std::uint32_t>(ds.size()));
  write_be32(img, static_cast<std::uint32_t>(side));
  write_be32(img, static_cast<std::uint32_t>(side));
  for (double v : ds.x.values()) img.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  write_be32(lab, kLabelMagic);
  write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t label : ds.y) lab.put(static_cast<char>(label));
}

std::optional<MnistFiles> find_mnist(const std::filesystem::path& dir) {
  const std::array<std::array<const char*, 4>, 2> layouts{{
      {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"},
      {"train-images.idx3-ubyte", "train-labels.idx1-ubyte", "t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte"},
  }};
  for (const auto& names : layouts) {
    MnistFiles f{dir / names[0], dir / names[1], dir / names[2], dir / names[3]};
    if (std::filesystem::exists(f.train_images) && std::filesystem::exists(f.train_labels) &&
        std::filesystem::exists(f.test_images) && std::filesystem::exists(f.test_labels)) {
      return f;
    }
  }
  return std::nullopt;
}

TaskSequence make_split_tasks(const LabeledDataset& train, const LabeledDataset& test,
                              std::size_t classes_per_task) {
  if (classes_per_task == 0 || train.class_count % classes_per_task != 0) {
    throw DataError("make_split_tasks: class count " + std::to_string(train.class_count) +
                    " is not divisible by " + std::to_string(classes_per_task));
  }
  const std::size_t task_count = train.class_count / classes_per_task;
  auto pick = [&](const LabeledDataset& ds, std::size_t k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.y[i] / classes_per_task == k) rows.push_back(i);
    }
    LabeledDataset out = subset(ds, rows);
    for (auto& label : out.y) label -= k * classes_per_task;
    out.class_count = classes_per_task;
    return out;
  };
  TaskSequence seq;
  seq.kind = TaskKind::split;
  for (std::size_t k = 0; k < task_count; ++k) {
    Task task{pick(train, k), pick(test, k), {}};
    for (std::size_t c = 0; c < classes_per_task; ++c) task.class_map.push_back(k * classes_per_task + c);
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

PermutationSpec make_permutation(std::uint64_t seed, std::size_t task_index, std::size_t dim) {
  PermutationSpec spec{seed, std::vector<std::size_t>(dim)};
  std::iota(spec.perm.begin(), spec.perm.end(), std::size_t{0});
  if (task_index > 0) {
    Rng rng(derive_seed(seed, {3, task_index}));
    std::shuffle(spec.perm.begin(), spec.perm.end(), rng);
  }
  return spec;
}

Tensor2 apply_permutation(const Tensor2& x, const PermutationSpec& spec) {
  if (spec.perm.size() != x.cols()) throw DimensionError("apply_permutation: dimension mismatch");
  Tensor2 out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto src = x.row(r);
    auto dst = out.row(r);
    for (std::size_t i = 0; i < spec.perm.size(); ++i) dst[i] = src[spec.perm[i]];
  }
  return out;
}

PermutationSpec invert(const PermutationSpec& spec) {
  PermutationSpec inv{spec.seed, std::vector<std::size_t>(spec.perm.size())};
  for (std::size_t i = 0; i < spec.perm.size(); ++i) inv.perm[spec.perm[i]] = i;
  return inv;
}

TaskSequence make_permuted_tasks(const LabeledDataset& train, const LabeledDataset& test, std::size_t task_count,
                                 std::uint64_t seed) {
  if (task_count == 0) throw DataError("make_permuted_tasks: task_count must be >= 1");
  if (train.dim() != test.dim()) throw DataError("make_permuted_tasks: train/test dimension mismatch");
  TaskSequence seq;
  seq.kind = TaskKind::permuted;
  for (std::size_t k = 0; k < task_count; ++k) {
    const auto spec = make_permutation(seed, k, train.dim());
    Task task{train, test, {}};
    task.train.x = apply_permutation(train.x, spec);
    task.test.x = apply_permutation(test.x, spec);
    task.class_map.resize(train.class_count);
    std::iota(task.class_map.begin(), task.class_map.end(), std::size_t{0});
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

LabeledDataset synth_blobs(std::uint64_t seed, std::size_t class_count, std::size_t dim, std::size_t n_per_class,
                           double noise_sd, double class_spread) {
  if (dim < class_count) throw DataError("synth_blobs: dim must be >= class_count");
  if (!(class_spread >= 0.0 && class_spread <= 1.0)) throw DataError("synth_blobs: class_spread must lie in [0, 1]");
  constexpr double kLow = 0.2;
  constexpr double kHigh = 0.8;
  Rng proto_rng(derive_seed(seed, {4}));
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution redraw(class_spread);
  std::vector<double> base(dim);
  for (double& v : base) v = coin(proto_rng) ? kHigh : kLow;
  std::vector<std::vector<double>> prototypes(class_count, std::vector<double>(dim));
  for (std::size_t k = 0; k < class_count; ++k) {
    for (std::size_t d = 0; d < dim; ++d) prototypes[k][d] = redraw(proto_rng) ? (coin(proto_rng) ? kHigh : kLow) : base[d];
    // Guarantees distinct prototypes even for tiny dims.
    prototypes[k][k] = kHigh;
    for (std::size_t j = 0; j < class_count; ++j) {
      if (j != k) prototypes[k][j] = kLow;
    }
  }
  LabeledDataset ds{Tensor2(class_count * n_per_class, dim), {}, class_count, square_side(dim)};
  ds.y.reserve(class_count * n_per_class);
  Rng rng(derive_seed(seed, {5}));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t r = 0;
  for (std::size_t k = 0; k < class_count; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i, ++r) {
      auto row = ds.x.row(r);
      for (std::size_t d = 0; d < dim; ++d) {
        const double jitter = noise_sd > 0.0 ? noise_sd * noise(rng) : 0.0;
        row[d] = std::clamp(prototypes[k][d] + jitter, 0.0, 1.0);
      }
      ds.y.push_back(k);
    }
  }
  return ds;
}

LabeledDataset synth_latent(std::uint64_t seed, std::size_t class_count, std::size_t group_size, std::size_t dim,
                            std::size_t n_per_class, const LatentSpec& spec) {
  if (group_size < 2 || class_count % group_size != 0) {
    throw DataError("synth_latent: class_count must be a multiple of group_size >= 2");
  }
  if (spec.latent_dim < group_size) throw DataError("synth_latent: latent_dim must be >= group_size");
  if (!(spec.separation >= 0.0 && spec.feature_scale > 0.0 && spec.noise_sd >= 0.0)) {
    throw DataError("synth_latent: separation and noise_sd must be >= 0, feature_scale > 0");
  }
  constexpr double kLow = 0.35;
  constexpr double kHigh = 0.65;
  const std::size_t q = spec.latent_dim;
  Rng proto_rng(derive_seed(seed, {7}));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  std::vector<double> base(dim);
  for (double& v : base) v = coin(proto_rng) ? kHigh : kLow;
  Tensor2 features(q, dim);
  for (double& v : features.values()) v = spec.feature_scale * gauss(proto_rng);

  // Orthonormal offsets scaled by separation / sqrt(2) put every pair of
  // class means in a group exactly `separation` apart.
  std::vector<std::vector<double>> means(class_count, std::vector<double>(q));
  for (std::size_t g = 0; g < class_count / group_size; ++g) {
    std::vector<double> centre(q);
    for (double& v : centre) v = gauss(proto_rng);
    std::vector<std::vector<double>> dirs;
    while (dirs.size() < group_size) {
      std::vector<double> u(q);
      for (double& v : u) v = gauss(proto_rng);
      for (const auto& d : dirs) {
        const double proj = std::inner_product(u.begin(), u.end(), d.begin(), 0.0);
        for (std::size_t i = 0; i < q; ++i) u[i] -= proj * d[i];
      }
      const double norm = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
      if (norm < 1e-8) continue;
      for (double& v : u) v /= norm;
      dirs.push_back(std::move(u));
    }
    for (std::size_t k = 0; k < group_size; ++k) {
      for (std::size_t i = 0; i < q; ++i) {
        means[g * group_size + k][i] = centre[i] + spec.separation / std::sqrt(2.0) * dirs[k][i];
      }
    }
  }

  LabeledDataset ds{Tensor2(class_count * n_per_class, dim), {}, class_count, square_side(dim)};
  ds.y.reserve(class_count * n_per_class);
  Rng rng(derive_seed(seed, {8}));
  std::vector<double> z(q);
  std::size_t r = 0;
  for (std::size_t k = 0; k < class_count; ++k) {
    for (std::size_t n = 0; n < n_per_class; ++n, ++r) {
      for (std::size_t i = 0; i < q; ++i) z[i] = means[k][i] + gauss(rng);
      auto row = ds.x.row(r);
      for (std::size_t d = 0; d < dim; ++d) {
        double v = base[d];
        for (std::size_t i = 0; i < q; ++i) v += z[i] * features(i, d);
        if (spec.noise_sd > 0.0) v += spec.noise_sd * gauss(rng);
        row[d] = std::clamp(v, 0.0, 1.0);
      }
      ds.y.push_back(k);
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> split_per_class(const LabeledDataset& ds, std::size_t train_per_class) {
  std::vector<std::size_t> train_rows, test_rows;
  for (const auto& rows : rows_by_class(ds)) {
    for (std::size_t i = 0; i < rows.size(); ++i) (i < train_per_class ? train_rows : test_rows).push_back(rows[i]);
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  return {subset(ds, train_rows), subset(ds, test_rows)};
}

LabeledDataset subsample_per_class(const LabeledDataset& ds, std::size_t per_class, std::uint64_t seed) {
  std::vector<std::size_t> keep;
  Rng rng(derive_seed(seed, {6}));
  for (auto rows : rows_by_class(ds)) {
    if (rows.size() > per_class) {
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(per_class);
    }
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  std::sort(keep.begin(), keep.end());
  return subset(ds, keep);
}

BatchIterator::BatchIterator(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), order_(ds.size()) {
  if (batch_size == 0) throw DataError("batches: batch_size must be >= 1");
  if (ds.size() == 0) throw DataError("batches: empty dataset");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {7}));
  std::shuffle(order_.begin(), order_.end(), rng);
}

Batch BatchIterator::next() {
  const std::size_t end = std::min(cursor_ + batch_size_, order_.size());
  Batch b;
  b.rows.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_), order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  b.x = gather_rows(ds_->x, b.rows);
  b.y.reserve(b.rows.size());
  for (std::size_t r : b.rows) b.y.push_back(ds_->y[r]);
  return b;
}

BatchIterator batches(const LabeledDataset& ds, std::size_t batch_size, std::uint64_t seed) {
  return BatchIterator(ds, batch_size, seed);
}

}  // namespace clbd
