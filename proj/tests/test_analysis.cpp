#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <set>
#include <vector>

#include "clbd/analysis.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace clbd;

namespace {

MlpModel one_unit(double w, double b) {
  MlpModel m;
  m.input_dim = 1;
  m.trunk.push_back(DenseLayer{Tensor2(1, 1, w), {b}, Activation::relu});
  return m;
}

}  // namespace

TEST_CASE("layer variation is the norm of the summed unit changes") {
  CHECK(layer_variation(one_unit(1.0, 1.0), one_unit(1.3, 1.4), 0) == doctest::Approx(0.5));
  MlpModel a = clbd::test::small_model(2, {2}, 0, 1);
  MlpModel b = a;
  // Opposite changes in two units cancel in the sum.
  b.trunk[0].weights(0, 0) += 1.0;
  b.trunk[0].weights(1, 0) -= 1.0;
  CHECK(layer_variation(a, b, 0) == doctest::Approx(0.0));
  CHECK_THROWS(layer_variation(a, b, 1));
}

TEST_CASE("algorithmic variation averages over pairs and divides by snapshot count") {
  CheckpointSet set{{one_unit(0, 0), one_unit(0.3, 0.4), one_unit(0.3, 0.4 + 1.0)}, {}};
  // pairs: 0.5 and 1.0 -> mean 0.75, three snapshots
  CHECK(algorithmic_variation(set) == doctest::Approx(0.25));
  CHECK_THROWS(algorithmic_variation(CheckpointSet{{one_unit(0, 0)}, {}}));
}

TEST_CASE("power-iteration PCA agrees with a dense eigensolver") {
  const Tensor2 data = clbd::test::random_tensor(5, 10, 3);
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < 5; ++r) rows.emplace_back(data.row(r).begin(), data.row(r).end());
  const auto pca = pca_power(rows, 2, 5000, 1e-14);

  Eigen::MatrixXd x(5, 10);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 10; ++c) x(r, c) = data(r, c);
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centred.transpose() * centred);
  for (int k = 0; k < 2; ++k) {
    const Eigen::VectorXd ref = eig.eigenvectors().col(9 - k);
    double dotp = 0.0;
    for (int i = 0; i < 10; ++i) dotp += ref(i) * pca.components[k][i];
    const double sign = dotp < 0 ? -1.0 : 1.0;
    for (int i = 0; i < 10; ++i) CHECK(pca.components[k][i] == doctest::Approx(sign * ref(i)).epsilon(1e-8));
    for (int r = 0; r < 5; ++r) {
      const double score = centred.row(r).dot(ref) * sign;
      CHECK(pca.scores[r][k] == doctest::Approx(score).epsilon(1e-8));
    }
  }
}

TEST_CASE("PCA of rank-one data leaves the second component at zero") {
  std::vector<std::vector<double>> rows{{1, 2}, {2, 4}, {3, 6}};
  const auto pca = pca_power(rows, 2);
  CHECK(std::abs(pca.components[0][1] / pca.components[0][0]) == doctest::Approx(2.0));
  for (double v : pca.components[1]) CHECK(v == 0.0);
}

TEST_CASE("KDE matches a naive Gaussian kernel sum and integrates to one") {
  const std::vector<double> values{0.1, 0.4, 0.45, 1.2, 2.0, 2.1, 3.5};
  const auto curve = kde(values);
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v / n;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean) / (n - 1);
  const double h = 1.06 * std::sqrt(var) * std::pow(n, -0.2);
  CHECK(curve.bandwidth == doctest::Approx(h));
  REQUIRE(curve.x.size() == 200);
  for (std::size_t i = 0; i < 200; i += 10) {
    double s = 0.0;
    for (double v : values) s += std::exp(-0.5 * std::pow((curve.x[i] - v) / h, 2));
    CHECK(curve.density[i] == doctest::Approx(s / (n * h * std::sqrt(2 * std::numbers::pi))).epsilon(1e-12));
  }
  double area = 0.0;
  for (std::size_t i = 1; i < 200; ++i) area += 0.5 * (curve.density[i] + curve.density[i - 1]) * (curve.x[i] - curve.x[i - 1]);
  CHECK(area == doctest::Approx(1.0).epsilon(0.01));
}

TEST_CASE("KDE edge cases") {
  CHECK_THROWS(kde(std::vector<double>{1.0}));
  const auto spike = kde(std::vector<double>{2.0, 2.0, 2.0});
  REQUIRE(spike.x.size() == 1);
  CHECK(std::isinf(spike.density[0]));
  CHECK(kde(std::vector<double>{0.0, 1.0}, 0.25).bandwidth == 0.25);
}

TEST_CASE("IoU matrix") {
  const std::vector<std::set<NeuronId>> sets{{{0, 1}, {0, 2}, {0, 3}}, {{0, 2}, {0, 3}, {0, 4}}, {{1, 0}}};
  const auto m = iou_matrix(sets);
  CHECK(m[0][1] == doctest::Approx(50.0));
  CHECK(m[0][2] == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(m[i][i] == 100.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(m[i][j] == m[j][i]);
  }
  CHECK_THROWS(iou_matrix({{}, {{0, 1}}}));
}

TEST_CASE("neuron trajectories measure distance from the first snapshot") {
  CheckpointSet set{{one_unit(0, 0), one_unit(3, 4), one_unit(0, 1)}, {}};
  const std::vector<NeuronId> ids{{0, 0}};
  const auto t = neuron_trajectories(set, ids);
  REQUIRE(t.size() == 1);
  CHECK(t[0] == std::vector<double>{5.0, 1.0});
}

TEST_CASE("stability comparison against an explicit set") {
  MlpModel a = clbd::test::small_model(2, {4}, 0, 5);
  MlpModel b = a;
  b.trunk[0].weights(3, 0) += 2.0;
  CheckpointSet set{{a, b}, {}};
  const std::vector<NeuronId> stable{{0, 0}}, other{{0, 3}};
  const auto r = stability_comparison(set, stable, other);
  CHECK(r.stable_stats.final_mean == 0.0);
  CHECK(r.random_stats.final_mean == doctest::Approx(2.0));
  const auto drawn = stability_comparison(set, stable, std::uint64_t{9});
  CHECK(drawn.random.size() == 1);
}

TEST_CASE("layer PCA drift has one point per consecutive pair") {
  MlpModel a = clbd::test::small_model(3, {4}, 0, 6);
  CheckpointSet set{{a, a, a}, {}};
  set.snapshots[1].trunk[0].bias[0] += 1.0;
  set.snapshots[2].trunk[0].bias[0] += 3.0;
  const auto drift = layer_pca_drift(set, 0);
  CHECK(drift.size() == 2);
}

TEST_CASE("important neurons are those at or above the percentile") {
  ImportanceMap map{{{0, 0}, {0, 1}, {0, 2}, {0, 3}}, {1.0, 4.0, 2.0, 3.0}};
  const auto top = important_neurons(map, 50.0);
  CHECK(std::set<NeuronId>(top.begin(), top.end()) == std::set<NeuronId>{{0, 1}, {0, 3}});
}

TEST_CASE("attack success rate and task accuracies") {
  MlpModel m = clbd::test::small_model(2, {2}, 1, 7);
  for (auto& v : m.heads[0].weights.values()) v = 0.0;
  m.heads[0].bias = {0.0, 1.0};
  auto ds = clbd::test::random_dataset(4, 2, 2, 8);
  CHECK(attack_success_rate(m, ds, 1, 0) == 1.0);
  CHECK(attack_success_rate(m, ds, 0, 0) == 0.0);
  CHECK_THROWS(attack_success_rate(m, subset(ds, std::vector<std::size_t>{}), 1, 0));
  TaskSequence seq;
  seq.tasks.push_back(Task{ds, ds, {0, 1}});
  const auto acc = task_accuracies(m, seq, 1);
  CHECK(acc.mean == doctest::Approx(0.5));
}

TEST_CASE("saliency is max-normalised and shaped like the image") {
  MlpModel m = clbd::test::small_model(9, {4}, 1, 10);
  const auto x = clbd::test::random_tensor(1, 9, 11, 0.0, 1.0);
  const auto s = input_saliency(m, x.row(0), 0, 3);
  CHECK(s.rows() == 3);
  CHECK(s.cols() == 3);
  double mx = 0.0;
  for (double v : s.values()) {
    CHECK(v >= 0.0);
    mx = std::max(mx, v);
  }
  CHECK(mx == doctest::Approx(1.0));
}
