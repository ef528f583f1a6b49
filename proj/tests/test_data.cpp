#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "clbd/data.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace clbd;
namespace fs = std::filesystem;

namespace {

void put_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("clbd_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Two 2x2 images with labels 3 and 7, built byte by byte.
void write_fixture(const fs::path& dir) {
  std::string img;
  put_be32(img, 0x00000803);
  put_be32(img, 2);
  put_be32(img, 2);
  put_be32(img, 2);
  for (unsigned char b : {0, 51, 102, 255, 255, 0, 204, 153}) img.push_back(static_cast<char>(b));
  std::string lab;
  put_be32(lab, 0x00000801);
  put_be32(lab, 2);
  lab.push_back(3);
  lab.push_back(7);
  write_bytes(dir / "img", img);
  write_bytes(dir / "lab", lab);
}

}  // namespace

TEST_CASE("IDX loader reads a hand-built fixture") {
  const fs::path dir = scratch_dir("idx");
  write_fixture(dir);
  const auto ds = load_idx(dir / "img", dir / "lab");
  REQUIRE(ds.size() == 2);
  CHECK(ds.dim() == 4);
  CHECK(ds.image_side == 2);
  CHECK(ds.y == std::vector<std::size_t>{3, 7});
  CHECK(ds.x(0, 1) == doctest::Approx(0.2));
  CHECK(ds.x(0, 3) == doctest::Approx(1.0));
  CHECK(ds.x(1, 3) == doctest::Approx(0.6));
}

TEST_CASE("IDX loader rejects corrupt files") {
  const fs::path dir = scratch_dir("idx_bad");
  write_fixture(dir);
  SUBCASE("swapped magic") { CHECK_THROWS_AS(load_idx(dir / "lab", dir / "img"), DataError); }
  SUBCASE("truncated image payload") {
    std::ifstream in(dir / "img", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    write_bytes(dir / "img", bytes.substr(0, bytes.size() - 1));
    CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab"), DataError);
  }
  SUBCASE("label beyond the class count") { CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab", 5), DataError); }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_idx(dir / "nope", dir / "lab"), DataError); }
}

TEST_CASE("write_idx and load_idx round-trip at 8-bit precision") {
  const fs::path dir = scratch_dir("idx_rt");
  auto ds = synth_blobs(3, 4, 16, 5, 0.2);
  write_idx(dir / "i", dir / "l", ds);
  const auto back = load_idx(dir / "i", dir / "l", 4);
  CHECK(back.y == ds.y);
  CHECK(clbd::test::max_abs_diff(std::vector<double>(back.x.values().begin(), back.x.values().end()),
                                 std::vector<double>(ds.x.values().begin(), ds.x.values().end())) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("find_mnist locates the standard file names") {
  const fs::path dir = scratch_dir("mnist_names");
  CHECK_FALSE(find_mnist(dir).has_value());
  for (const char* n : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte"}) {
    write_bytes(dir / n, "x");
  }
  CHECK(find_mnist(dir).has_value());
}

TEST_CASE("split tasks relabel each class pair to 0..1") {
  const auto ds = synth_blobs(1, 10, 16, 3, 0.1);
  const auto seq = make_split_tasks(ds, ds, 2);
  REQUIRE(seq.size() == 5);
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(seq.tasks[k].train.size() == 6);
    CHECK(seq.tasks[k].class_map == std::vector<std::size_t>{2 * k, 2 * k + 1});
    for (auto y : seq.tasks[k].train.y) CHECK(y < 2);
  }
  CHECK_THROWS_AS(make_split_tasks(ds, ds, 3), DataError);
}

TEST_CASE("permutations: task 0 is the identity and inversion restores the input") {
  const auto id = make_permutation(5, 0, 9);
  for (std::size_t i = 0; i < 9; ++i) CHECK(id.perm[i] == i);
  const auto p = make_permutation(5, 2, 9);
  CHECK(std::set<std::size_t>(p.perm.begin(), p.perm.end()).size() == 9);
  CHECK(make_permutation(5, 2, 9).perm == p.perm);
  const Tensor2 x = clbd::test::random_tensor(3, 9, 8, 0.0, 1.0);
  CHECK(apply_permutation(apply_permutation(x, p), invert(p)) == x);
}

TEST_CASE("synthetic blobs are deterministic and bounded") {
  const auto a = synth_blobs(4, 6, 25, 10, 0.3, 0.5);
  const auto b = synth_blobs(4, 6, 25, 10, 0.3, 0.5);
  CHECK(a.x == b.x);
  CHECK(a.image_side == 5);
  a.validate();
  CHECK_THROWS_AS(synth_blobs(4, 6, 25, 10, 0.3, 1.5), DataError);
  CHECK_THROWS_AS(synth_blobs(4, 30, 25, 10, 0.3), DataError);
}

TEST_CASE("latent synthetic classes are deterministic and bounded") {
  const LatentSpec spec{6, 4.0, 0.1, 0.2};
  const auto a = synth_latent(9, 4, 2, 49, 20, spec);
  CHECK(a.x == synth_latent(9, 4, 2, 49, 20, spec).x);
  CHECK_FALSE(a.x == synth_latent(10, 4, 2, 49, 20, spec).x);
  CHECK(a.size() == 80);
  CHECK(a.image_side == 7);
  a.validate();
  for (double v : a.x.values()) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("noise-free latent samples span exactly latent_dim directions") {
  // Small features keep every pixel inside (0, 1), so no clipping.
  const auto ds = synth_latent(3, 2, 2, 64, 40, LatentSpec{5, 3.0, 0.005, 0.0});
  Eigen::MatrixXd x(ds.size(), ds.dim());
  for (std::size_t r = 0; r < ds.size(); ++r)
    for (std::size_t c = 0; c < ds.dim(); ++c) x(r, c) = ds.x(r, c);
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  Eigen::FullPivLU<Eigen::MatrixXd> lu(centred);
  lu.setThreshold(1e-9);
  CHECK(lu.rank() == 5);
}

TEST_CASE("separation controls how far apart a task's classes are") {
  auto nearest_mean_accuracy = [](const LabeledDataset& ds) {
    std::vector<std::vector<double>> mean(2, std::vector<double>(ds.dim(), 0.0));
    std::vector<double> count(2, 0.0);
    for (std::size_t r = 0; r < ds.size(); ++r) {
      count[ds.y[r]] += 1.0;
      for (std::size_t c = 0; c < ds.dim(); ++c) mean[ds.y[r]][c] += ds.x(r, c);
    }
    for (std::size_t k = 0; k < 2; ++k)
      for (double& v : mean[k]) v /= count[k];
    std::size_t hits = 0;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      double d0 = 0.0, d1 = 0.0;
      for (std::size_t c = 0; c < ds.dim(); ++c) {
        d0 += std::pow(ds.x(r, c) - mean[0][c], 2);
        d1 += std::pow(ds.x(r, c) - mean[1][c], 2);
      }
      hits += (d1 < d0 ? 1u : 0u) == ds.y[r];
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
  };
  // Two unit-variance Gaussians 6 apart: Bayes accuracy Phi(3) ~ 0.9987.
  CHECK(nearest_mean_accuracy(synth_latent(5, 2, 2, 196, 300, LatentSpec{16, 6.0, 0.05, 0.05})) >= 0.98);
  CHECK(nearest_mean_accuracy(synth_latent(5, 2, 2, 196, 300, LatentSpec{16, 0.0, 0.05, 0.05})) <= 0.6);
}

TEST_CASE("latent generator validation") {
  CHECK_THROWS_AS(synth_latent(1, 5, 2, 16, 3, LatentSpec{}), DataError);
  CHECK_THROWS_AS(synth_latent(1, 4, 2, 16, 3, LatentSpec{1, 6.0, 0.1, 0.2}), DataError);
  CHECK_THROWS_AS(synth_latent(1, 4, 2, 16, 3, LatentSpec{4, 6.0, 0.0, 0.2}), DataError);
}

TEST_CASE("split_per_class and subsample_per_class keep per-class counts") {
  const auto ds = synth_blobs(2, 3, 16, 10, 0.1);
  const auto [train, test] = split_per_class(ds, 7);
  CHECK(train.size() == 21);
  CHECK(test.size() == 9);
  const auto sub = subsample_per_class(ds, 4, 1);
  CHECK(sub.size() == 12);
}

TEST_CASE("one epoch of batches visits every row exactly once") {
  const auto ds = clbd::test::random_dataset(37, 3, 2, 1);
  auto it = batches(ds, 8, 99);
  CHECK(it.batch_count() == 5);
  std::multiset<std::size_t> seen;
  while (!it.done()) {
    const auto b = it.next();
    CHECK(b.x.rows() == b.y.size());
    for (std::size_t i = 0; i < b.rows.size(); ++i) {
      seen.insert(b.rows[i]);
      CHECK(b.y[i] == ds.y[b.rows[i]]);
    }
  }
  CHECK(seen.size() == 37);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 37);
  CHECK_THROWS_AS(batches(ds, 0, 1), DataError);
}
