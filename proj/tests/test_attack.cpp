#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "clbd/attack.hpp"
#include "clbd/loss.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace clbd;

namespace {

struct Fixture {
  MlpModel model = clbd::test::small_model(6, {5, 4}, 1, 21);
  Tensor2 clean_x = clbd::test::random_tensor(6, 6, 22, 0.0, 1.0);
  std::vector<std::size_t> clean_y{0, 1, 0, 1, 1, 0};
  Tensor2 trig_x = clbd::test::random_tensor(3, 6, 23, 0.0, 1.0);
  std::vector<std::size_t> trig_y{1, 1, 1};
};

Task image_task(std::uint64_t seed, std::size_t n) {
  auto ds = synth_blobs(seed, 2, 36, n, 0.2);
  auto [train, test] = split_per_class(ds, n / 2);
  return Task{train, test, {0, 1}};
}

TrainOptions quick() {
  TrainOptions o;
  o.epochs = 2;
  o.batch_size = 16;
  o.seed = 2;
  return o;
}

}  // namespace

TEST_CASE("blind loss is clean loss plus weighted backdoor loss") {
  Fixture f;
  const auto clean = task_loss(f.model, f.clean_x, f.clean_y, 0);
  const auto trig = task_loss(f.model, f.trig_x, f.trig_y, 0);
  const auto b0 = blind_loss(f.model, f.clean_x, f.clean_y, f.trig_x, f.trig_y, 0.0, 0);
  CHECK(b0.loss == doctest::Approx(clean.loss));
  const auto b = blind_loss(f.model, f.clean_x, f.clean_y, f.trig_x, f.trig_y, 0.7, 0);
  CHECK(b.loss == doctest::Approx(clean.loss + 0.7 * trig.loss));
  auto summed = clean.grads;
  add_scaled(summed, trig.grads, 0.7);
  CHECK(clbd::test::max_abs_diff(flatten(b.grads), flatten(summed)) < 1e-14);
}

TEST_CASE("blind loss with two log-2 terms") {
  MlpModel m = clbd::test::small_model(2, {2}, 1, 1);
  for (auto& v : m.heads[0].weights.values()) v = 0.0;
  std::fill(m.heads[0].bias.begin(), m.heads[0].bias.end(), 0.0);
  const Tensor2 x(1, 2, 0.5);
  const std::vector<std::size_t> y{0};
  CHECK(blind_loss(m, x, y, x, y, 1.0, 0).loss == doctest::Approx(1.3863).epsilon(1e-4));
}

TEST_CASE("constraint violation") {
  BtbState st;
  CHECK(constraint_violation(st, {}).empty());
  st.ell_prior = {1.0, 2.0};
  st.tau = {0.05, 0.1};
  const auto d = constraint_violation(st, std::vector<double>{1.0, 2.2});
  CHECK(d[0] == doctest::Approx(-0.05));
  CHECK(d[1] == doctest::Approx(0.1));
  CHECK_THROWS(constraint_violation(st, std::vector<double>{1.0}));
}

TEST_CASE("augmented objective arithmetic") {
  CHECK(augmented_objective(1.0, {}, {}, 0.1) == 1.0);
  const std::vector<double> delta{0.2}, lambda{0.5};
  CHECK(augmented_objective(1.0, delta, lambda, 0.1) == doctest::Approx(1.102));
  CHECK_THROWS(augmented_objective(1.0, delta, std::vector<double>{}, 0.1));
}

TEST_CASE("augmented objective never undercuts the blind loss under violation") {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> delta(3), lambda(3);
    for (auto& v : delta) v = u(rng);
    for (auto& v : lambda) v = u(rng);
    const double blind = u(rng);
    CHECK(augmented_objective(blind, delta, lambda, u(rng)) >= blind);
  }
}

TEST_CASE("augmented gradient matches finite differences through the prior-task losses") {
  Fixture f;
  PriorSlice slice{0, LabeledDataset{f.clean_x, f.clean_y, 2, 0}, LabeledDataset{f.trig_x, f.trig_y, 2, 0}};
  const auto prior = prior_blind_loss(f.model, slice, 1.0);
  BtbState st;
  st.ell_prior = {prior.loss - 0.3};
  st.tau = {0.05};
  st.lambda = {0.4};
  const double mu = 0.2;
  auto objective = [&](const MlpModel& m) {
    const auto blind = blind_loss(m, f.trig_x, f.trig_y, f.clean_x, f.clean_y, 1.0, 0);
    const std::vector<double> cur{prior_blind_loss(m, slice, 1.0).loss};
    return augmented_objective(blind.loss, constraint_violation(st, cur), st.lambda, mu);
  };
  const auto blind = blind_loss(f.model, f.trig_x, f.trig_y, f.clean_x, f.clean_y, 1.0, 0);
  const std::vector<double> delta = constraint_violation(st, std::vector<double>{prior.loss});
  const std::vector<Gradients> priors{prior.grads};
  const auto g = augmented_gradient(blind.grads, priors, delta, st.lambda, mu);
  CHECK(clbd::test::max_abs_diff(flatten(g), clbd::test::numeric_gradient(f.model, objective)) < 1e-7);
}

TEST_CASE("multiplier update is projected and monotone under violation") {
  std::vector<double> lambda{0.0, 0.0, 1e-5};
  update_multipliers(lambda, std::vector<double>{0.5, -1.0, -1.0}, 1e-4);
  CHECK(lambda[0] == doctest::Approx(5e-5));
  CHECK(lambda[1] == 0.0);
  CHECK(lambda[2] == 0.0);
  double prev = lambda[0];
  for (int i = 0; i < 50; ++i) {
    update_multipliers(lambda, std::vector<double>{0.01, -1.0, 0.0}, 1e-4);
    CHECK(lambda[0] > prev);
    prev = lambda[0];
  }
}

TEST_CASE("BTB decays the penalty once per iteration and records the finished task") {
  const Task t = image_task(5, 40);
  MlpModel m = make_mlp(36, std::vector<std::size_t>{8}, 3);
  ClState cl;
  BtbConfig cfg;
  cfg.n = 7;
  cfg.plateau_window = 1000;
  BtbState st;
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.2;
  const auto poison = embed_trigger(t.train, spec);
  const auto r = btb_train_task(m, t, &poison, 0, Ewc{}, cl, cfg, st, quick());
  CHECK(r.iterations == 7);
  CHECK(r.exit_violation.empty());
  CHECK(r.mu == doctest::Approx(0.1 * std::pow(0.99, 7)));
  REQUIRE(st.ell_prior.size() == 1);
  CHECK(st.tau[0] == doctest::Approx(0.05 * st.ell_prior[0]));
  CHECK(st.lambda == std::vector<double>{0.0});

  // Second task: one constraint, lambda reset to zero then grown only by violations.
  const Task t2 = image_task(6, 40);
  const auto r2 = btb_train_task(m, t2, nullptr, 1, Ewc{}, cl, cfg, st, quick());
  CHECK(r2.exit_violation.size() == 1);
  CHECK(st.ell_prior.size() == 2);
  for (double l : st.lambda) CHECK(l >= 0.0);
}

TEST_CASE("BTB configuration validation") {
  BtbConfig c;
  CHECK_NOTHROW(c.validate());
  c.gamma = 1.5;
  CHECK_THROWS(c.validate());
  c = BtbConfig{};
  c.alpha = 0.0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("latent loss hinge") {
  Fixture f;
  const auto bd = task_loss(f.model, f.trig_x, f.trig_y, 0).loss;
  const auto clean = task_loss(f.model, f.clean_x, f.clean_y, 0);
  SUBCASE("active: clean loss above the tolerance adds its excess and its gradient") {
    const auto ll = latent_loss(f.model, f.trig_x, f.trig_y, f.clean_x, f.clean_y, 0.1, 0);
    REQUIRE(clean.loss > 0.1 * bd);
    CHECK(ll.hinge_active);
    CHECK(ll.epsilon == doctest::Approx(0.1 * bd));
    CHECK(ll.loss == doctest::Approx(bd + clean.loss - 0.1 * bd));
    auto expect = task_loss(f.model, f.trig_x, f.trig_y, 0).grads;
    add_scaled(expect, clean.grads, 1.0);
    CHECK(clbd::test::max_abs_diff(flatten(ll.grads), flatten(expect)) < 1e-14);
  }
  SUBCASE("inactive: the loss is the pure backdoor loss") {
    const double factor = 2.0 * clean.loss / bd;
    const auto ll = latent_loss(f.model, f.trig_x, f.trig_y, f.clean_x, f.clean_y, factor, 0);
    CHECK_FALSE(ll.hinge_active);
    CHECK(ll.loss == doctest::Approx(bd));
    CHECK(clbd::test::max_abs_diff(flatten(ll.grads), flatten(task_loss(f.model, f.trig_x, f.trig_y, 0).grads)) <
          1e-14);
  }
}

TEST_CASE("percentile follows linear interpolation") {
  CHECK(percentile({4.0, 1.0, 3.0, 2.0}, 50.0) == doctest::Approx(2.5));
  CHECK(percentile({1.0, 2.0, 3.0}, 0.0) == 1.0);
  CHECK(percentile({1.0, 2.0, 3.0}, 100.0) == 3.0);
  CHECK_THROWS(percentile({}, 50.0));
}

TEST_CASE("stable-neuron selection: 100 units at the 90th percentile") {
  ImportanceMap map;
  for (std::size_t i = 0; i < 100; ++i) {
    map.neurons.push_back({i / 50, i % 50});
    map.scores.push_back(static_cast<double>((i * 37) % 100));
  }
  const auto sel = select_stable_neurons(map, 90.0, 0.7);
  CHECK(sel.size() == 7);
  CHECK(select_stable_neurons(map, 90.0, 1.0).size() == 10);
  // Brute-force oracle: sort everything by score and slice.
  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return map.scores[a] > map.scores[b]; });
  for (std::size_t k = 0; k < 7; ++k) CHECK(sel[k] == map.neurons[order[k]]);
  CHECK(select_stable_neurons(map, 90.0, 0.7) == sel);
}

TEST_CASE("stable-neuron selection breaks ties by unit identity") {
  ImportanceMap map{{{1, 0}, {0, 2}, {0, 1}}, {1.0, 1.0, 1.0}};
  const auto sel = select_stable_neurons(map, 50.0, 1.0);
  REQUIRE(sel.size() == 3);
  CHECK(sel[0] == NeuronId{0, 1});
  CHECK(sel[1] == NeuronId{0, 2});
  CHECK(sel[2] == NeuronId{1, 0});
}

TEST_CASE("v_trigger embedding changes only the selected biases") {
  MlpModel m = clbd::test::small_model(4, {3, 3}, 1, 8);
  m.trunk[0].bias[1] = 0.1;
  const MlpModel before = m;
  const std::vector<NeuronId> sel{{0, 1}, {1, 2}, {0, 1}};
  embed_v_trigger(m, sel, 0.5);
  CHECK(m.trunk[0].bias[1] == doctest::Approx(0.6));
  CHECK(m.trunk[1].bias[2] == doctest::Approx(before.trunk[1].bias[2] + 0.5));
  auto a = flatten(before), b = flatten(m);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i];
  CHECK(changed == 2);
  MlpModel same = before;
  embed_v_trigger(same, sel, 0.0);
  CHECK(same == before);
  CHECK_THROWS(embed_v_trigger(m, std::vector<NeuronId>{{2, 0}}, 0.5));
}

TEST_CASE("DFM unit score is the mean squared gradient of its incoming weights and bias") {
  const MlpModel m = clbd::test::small_model(3, {2}, 1, 9);
  const auto ds = clbd::test::random_dataset(1, 3, 2, 10);
  const auto map = compute_dfm(m, ds, 0);
  const auto numeric = clbd::test::numeric_gradient(m, [&](const MlpModel& p) { return task_loss(p, ds.x, ds.y, 0).loss; });
  REQUIRE(map.scores.size() == 2);
  for (std::size_t u = 0; u < 2; ++u) {
    double s = numeric[6 + u] * numeric[6 + u];
    for (std::size_t i = 0; i < 3; ++i) s += numeric[u * 3 + i] * numeric[u * 3 + i];
    CHECK(map.scores[u] == doctest::Approx(s / 4.0).epsilon(1e-6));
  }
}

TEST_CASE("DFM is invariant to sample order and rejects empty data") {
  const MlpModel m = clbd::test::small_model(4, {6, 5}, 1, 11);
  const auto ds = clbd::test::random_dataset(12, 4, 2, 12);
  std::vector<std::size_t> rev(12);
  std::iota(rev.rbegin(), rev.rend(), std::size_t{0});
  const auto a = compute_dfm(m, ds, 0).scores;
  const auto b = compute_dfm(m, subset(ds, rev), 0).scores;
  CHECK(clbd::test::max_abs_diff(a, b) < 1e-15);
  CHECK(a.size() == 11);
  CHECK_THROWS_AS(compute_dfm(m, subset(ds, std::vector<std::size_t>{}), 0), DataError);
}

TEST_CASE("LTB selects exactly what the selection rule returns and shifts those units") {
  const Task t = image_task(13, 60);
  MlpModel m = make_mlp(36, std::vector<std::size_t>{50, 50}, 4);
  ClState cl;
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.1;
  const auto poison = embed_trigger(t.train, spec);
  LtbConfig cfg;
  const auto r = ltb_train_task(m, t, poison, 0, Agem{}, cl, cfg, quick());
  CHECK(r.selected == select_stable_neurons(r.importance, cfg.kappa_percentile, cfg.p_replay));
  CHECK(r.importance.scores.size() == 100);
  CHECK(r.selected.size() == 2);  // ceil(0.9 * 2 candidates)
  CHECK(cl.agem_memory.size() == 1);
}

TEST_CASE("LTB with nothing poisoned still trains the task") {
  const Task t = image_task(14, 60);
  MlpModel m = make_mlp(36, std::vector<std::size_t>{16}, 5);
  ClState cl;
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.0;
  const auto poison = embed_trigger(t.train, spec);
  TrainOptions o = quick();
  o.epochs = 6;
  const auto r = ltb_train_task(m, t, poison, 0, Ewc{}, cl, LtbConfig{}, o);
  CHECK(r.latent_phase.test_accuracy >= 0.9);
}

TEST_CASE("BadNets with an unpoisoned copy equals clean training") {
  const Task t = image_task(15, 40);
  MlpModel a = make_mlp(36, std::vector<std::size_t>{8}, 6);
  MlpModel b = a;
  ClState sa, sb;
  auto spec = TriggerSpec::static_default();
  spec.poison_ratio = 0.0;
  badnets_baseline_train(a, t, embed_trigger(t.train, spec), 0, Ewc{}, sa, quick());
  train_task(b, t, 0, Ewc{}, sb, quick());
  CHECK(a == b);
}

TEST_CASE("LTB configuration picks the selection fraction by strategy family") {
  LtbConfig c;
  CHECK(c.p_select(Ewc{}) == 0.70);
  CHECK(c.p_select(Si{}) == 0.70);
  CHECK(c.p_select(Agem{}) == 0.90);
  c.kappa_percentile = 100.0;
  CHECK_THROWS(c.validate());
}
