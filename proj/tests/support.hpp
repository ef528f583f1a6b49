#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "clbd/data.hpp"
#include "clbd/model.hpp"
#include "clbd/rng.hpp"

namespace clbd::test {

inline Tensor2 random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor2 t(rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

inline LabeledDataset random_dataset(std::size_t rows, std::size_t dim, std::size_t classes, std::uint64_t seed) {
  LabeledDataset ds{random_tensor(rows, dim, seed, 0.0, 1.0), {}, classes, 0};
  for (std::size_t i = 0; i < rows; ++i) ds.y.push_back(i % classes);
  return ds;
}

/// Model with `heads` two-class heads on the given trunk.
inline MlpModel small_model(std::size_t input, std::vector<std::size_t> hidden, std::size_t heads,
                            std::uint64_t seed) {
  MlpModel m = make_mlp(input, hidden, seed);
  for (std::size_t h = 0; h < heads; ++h) add_head(m, 2, seed + 100 + h);
  return m;
}

/// Central-difference gradient of f over the flat parameter vector.
inline std::vector<double> numeric_gradient(const MlpModel& model, const std::function<double(const MlpModel&)>& f,
                                            double step = 1e-6) {
  std::vector<double> theta = flatten(model);
  std::vector<double> out(theta.size());
  MlpModel probe = model;
  for (std::size_t p = 0; p < theta.size(); ++p) {
    const double keep = theta[p];
    theta[p] = keep + step;
    assign_flat(probe, theta);
    const double up = f(probe);
    theta[p] = keep - step;
    assign_flat(probe, theta);
    const double down = f(probe);
    theta[p] = keep;
    out[p] = (up - down) / (2.0 * step);
  }
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

}  // namespace clbd::test
