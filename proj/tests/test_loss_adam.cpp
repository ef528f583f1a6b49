#include <cmath>
#include <vector>

#include "clbd/adam.hpp"
#include "clbd/loss.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace clbd;

TEST_CASE("cross-entropy of uniform logits is log of the class count") {
  const Tensor2 logits(3, 2, 0.0);
  const std::vector<std::size_t> y{0, 1, 1};
  const auto r = softmax_cross_entropy(logits, y);
  CHECK(r.loss == doctest::Approx(std::log(2.0)));
  // (softmax - onehot) / rows
  CHECK(r.dlogits(0, 0) == doctest::Approx(-0.5 / 3.0));
  CHECK(r.dlogits(0, 1) == doctest::Approx(0.5 / 3.0));
}

TEST_CASE("cross-entropy stays finite for extreme logits") {
  const Tensor2 logits(1, 2, {1000.0, -1000.0});
  const auto r = softmax_cross_entropy(logits, std::vector<std::size_t>{1});
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss == doctest::Approx(2000.0));
}

TEST_CASE("cross-entropy rejects labels out of range") {
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor2(1, 2), std::vector<std::size_t>{2}), Error);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor2(2, 2), std::vector<std::size_t>{0}), DimensionError);
}

TEST_CASE("distillation is zero for identical logits and has the right gradient") {
  const Tensor2 teacher = clbd::test::random_tensor(4, 3, 1);
  CHECK(distillation_loss(teacher, teacher, 2.0).loss == doctest::Approx(0.0).epsilon(1e-12));

  Tensor2 student = clbd::test::random_tensor(4, 3, 2);
  const auto r = distillation_loss(student, teacher, 2.0);
  const double h = 1e-6;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const double keep = student.values()[i];
    student.values()[i] = keep + h;
    const double up = distillation_loss(student, teacher, 2.0).loss;
    student.values()[i] = keep - h;
    const double down = distillation_loss(student, teacher, 2.0).loss;
    student.values()[i] = keep;
    CHECK(r.dlogits.values()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("softmax rows sum to one at any temperature") {
  const Tensor2 logits = clbd::test::random_tensor(5, 4, 3, -20.0, 20.0);
  for (double t : {0.5, 1.0, 4.0}) {
    const Tensor2 p = softmax(logits, t);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) s += v;
      CHECK(s == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("first Adam step moves every parameter by alpha against the gradient sign") {
  MlpModel m = clbd::test::small_model(3, {2}, 1, 4);
  const auto before = flatten(m);
  Gradients g = zeros_like(m);
  std::vector<double> flat(before.size());
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = (i % 2 ? 1.0 : -1.0) * static_cast<double>(i + 1);
  assign_flat(g, flat);
  AdamState st;
  adam_step(m, g, st);
  const auto after = flatten(m);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    // m_hat = g, v_hat = g^2 after bias correction
    const double expected = before[i] - st.alpha * flat[i] / (std::abs(flat[i]) + st.eps);
    CHECK(after[i] == doctest::Approx(expected).epsilon(1e-12));
  }
  CHECK(st.t == 1);
}

TEST_CASE("Adam matches a scalar reference over several steps") {
  MlpModel m = clbd::test::small_model(1, {1}, 1, 5);
  AdamState st;
  std::vector<double> ref = flatten(m), mom(ref.size()), vel(ref.size());
  for (int step = 1; step <= 5; ++step) {
    std::vector<double> grad(ref.size());
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = 0.3 * static_cast<double>(step) - 0.1 * static_cast<double>(i);
    Gradients g = zeros_like(m);
    assign_flat(g, grad);
    adam_step(m, g, st);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      mom[i] = 0.9 * mom[i] + 0.1 * grad[i];
      vel[i] = 0.999 * vel[i] + 0.001 * grad[i] * grad[i];
      const double mh = mom[i] / (1 - std::pow(0.9, step));
      const double vh = vel[i] / (1 - std::pow(0.999, step));
      ref[i] -= 0.001 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(clbd::test::max_abs_diff(flatten(m), ref) < 1e-14);
}

TEST_CASE("Adam refuses a model whose parameter count changed") {
  MlpModel m = clbd::test::small_model(2, {2}, 1, 6);
  AdamState st;
  adam_step(m, zeros_like(m), st);
  add_head(m, 2, 7);
  CHECK_THROWS_AS(adam_step(m, zeros_like(m), st), DimensionError);
}
