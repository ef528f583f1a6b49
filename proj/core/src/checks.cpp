#include "clbd/checks.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <map>
#include <ostream>
#include <random>

#include "clbd/analysis.hpp"
#include "clbd/attack.hpp"
#include "clbd/checkpoint.hpp"
#include "clbd/run.hpp"

namespace clbd {
namespace {

using Clock = std::chrono::steady_clock;
using Objective = std::function<double(const MlpModel&)>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// Gradient checks

struct ToyNet {
  MlpModel model;
  Tensor2 x;
  std::vector<std::size_t> y;
  Tensor2 x2;
  std::vector<std::size_t> y2;
};

Tensor2 uniform_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor2 m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return m;
}

std::vector<std::size_t> uniform_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::uniform_int_distribution<std::size_t> u(0, classes - 1);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

ToyNet random_toy(std::uint64_t seed) {
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::size_t in = pick(4, 9);
  std::vector<std::size_t> hidden(pick(1, 2));
  for (auto& h : hidden) h = pick(3, 7);
  ToyNet net;
  net.model = make_mlp(in, hidden, seed);
  add_head(net.model, pick(2, 3), seed);
  const std::size_t classes = pick(2, 3);
  add_head(net.model, classes, seed);
  if (pick(0, 2) == 0) {
    net.model.gates.resize(2);
    net.model.gates[1] = xdg_mask(1, hidden, 0.4, seed);
  }
  const std::size_t n = pick(4, 8);
  net.x = uniform_matrix(rng, n, in);
  net.y = uniform_labels(rng, n, classes);
  net.x2 = uniform_matrix(rng, pick(3, 6), in);
  net.y2 = uniform_labels(rng, net.x2.rows(), classes);
  return net;
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8)
double relative_gradient_error(const MlpModel& model, const Objective& f, const Gradients& analytic, double h) {
  MlpModel probe = model;
  auto theta = flatten(model);
  const auto a = flatten(analytic);
  if (a.size() != theta.size()) throw DimensionError("gradcheck: gradient/parameter size mismatch");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t p = 0; p < theta.size(); ++p) {
    const double keep = theta[p];
    theta[p] = keep + h;
    assign_flat(probe, theta);
    const double up = f(probe);
    theta[p] = keep - h;
    assign_flat(probe, theta);
    const double down = f(probe);
    theta[p] = keep;
    const double num = (up - down) / (2.0 * h);
    diff += (a[p] - num) * (a[p] - num);
    na += a[p] * a[p];
    nn += num * num;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

MlpModel perturbed(const MlpModel& m, Rng& rng, double sd) {
  MlpModel out = m;
  std::normal_distribution<double> g(0.0, sd);
  auto theta = flatten(out);
  for (double& v : theta) v += g(rng);
  assign_flat(out, theta);
  return out;
}

ClState random_penalty_state(const MlpModel& m, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 0.3);
  const auto theta = flatten(m);
  ClState st;
  // Shorter vectors exercise the "later heads are unpenalised" prefix rule.
  const std::size_t prefix = theta.size() - m.heads.back().weights.size() - m.heads.back().bias.size();
  for (std::size_t k = 0; k < 2; ++k) {
    EwcMemory mem;
    for (std::size_t p = 0; p < prefix; ++p) {
      mem.fisher.push_back(u(rng));
      mem.anchor.push_back(theta[p] + g(rng));
    }
    st.ewc.push_back(std::move(mem));
  }
  for (std::size_t p = 0; p < prefix; ++p) {
    st.si_omega.push_back(u(rng));
    st.si_anchor.push_back(theta[p] + g(rng));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Acceptance runs

struct RunSummary {
  RunRecord record;  // snapshots dropped after the metrics below are taken
  double variation = 0.0;
  std::optional<StabilityReport> stability;
  double iou_max_off = 0.0;
  bool iou_diag_ok = true;
};

class RunBank {
 public:
  explicit RunBank(const AcceptanceOptions& opts) : opts_(opts) {}

  const RunSummary& get(const std::string& strategy, AttackMode mode, std::size_t attacked, std::uint64_t seed_offset = 0) {
    const std::string key = strategy + "/" + to_string(mode) + "/" + std::to_string(attacked) + "/" + std::to_string(seed_offset);
    if (auto it = runs_.find(key); it != runs_.end()) return it->second;

    ExperimentConfig cfg = opts_.base;
    cfg.run_id = strategy + "-" + to_string(mode) + "-t" + std::to_string(attacked) + "-s" + std::to_string(seed_offset);
    cfg.strategy = strategy_from_name(strategy);
    cfg.attack.mode = mode;
    cfg.attack.attacked_task = attacked;
    cfg.dataset.seed += seed_offset;
    cfg.model.seed += seed_offset;
    cfg.training.seed += seed_offset;
    RunOptions ro;
    ro.write_outputs = opts_.output_root.has_value();
    if (ro.write_outputs) cfg.output_dir = (*opts_.output_root / cfg.run_id).string();
    if (opts_.progress) opts_.progress("run " + cfg.run_id);

    RunSummary s;
    s.record = run_experiment(cfg, ro);
    s.variation = algorithmic_variation(s.record.checkpoints);
    const auto selected = s.record.ltb_selected();
    if (!selected.empty()) s.stability = stability_comparison(s.record.checkpoints, selected, cfg.training.seed);
    std::vector<std::set<NeuronId>> sets;
    for (const auto& t : s.record.tasks) sets.emplace_back(t.important.begin(), t.important.end());
    const auto iou = iou_matrix(sets);
    for (std::size_t a = 0; a < iou.size(); ++a) {
      for (std::size_t b = 0; b < iou.size(); ++b) {
        if (a == b) {
          s.iou_diag_ok = s.iou_diag_ok && iou[a][b] == 100.0;
        } else {
          s.iou_max_off = std::max(s.iou_max_off, iou[a][b]);
        }
      }
    }
    s.record.checkpoints.snapshots.clear();
    if (opts_.progress) {
      opts_.progress(fmt("  %s: acc=%.4f asr=%.4f (%.1fs)", cfg.run_id.c_str(), s.record.final_mean_acc(),
                         mode == AttackMode::none ? 0.0 : s.record.final_asr(), s.record.wall_seconds));
    }
    return runs_.emplace(key, std::move(s)).first->second;
  }

  ClStrategy strategy_from_name(const std::string& name) const {
    if (name == "ewc") return opts_.ewc;
    if (name == "si") return opts_.si;
    if (name == "xdg") return opts_.xdg;
    if (name == "lwf") return opts_.lwf;
    if (name == "agem") return opts_.agem;
    throw Error("unknown strategy '" + name + "'");
  }

 private:
  const AcceptanceOptions& opts_;
  std::map<std::string, RunSummary> runs_;
};

template <typename Body>
CheckResult timed(const std::string& name, Body body) {
  const auto t0 = Clock::now();
  CheckResult r{name, false, "", 0.0};
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail += std::string(r.detail.empty() ? "" : "; ") + "exception: " + e.what();
  }
  r.seconds = seconds_since(t0);
  return r;
}

}  // namespace

bool SuiteReport::all_passed() const {
  return !results.empty() && std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

void print_report(std::ostream& out, const SuiteReport& report) {
  for (const auto& r : report.results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << fmt(" (%.1fs)", r.seconds);
    if (!r.detail.empty()) out << " " << r.detail;
    out << "\n";
  }
  out.flush();
}

SuiteReport gradcheck_suite(const GradcheckOptions& options) {
  struct Worst {
    double error = 0.0;
    std::size_t net = 0;
  };
  std::map<std::string, Worst> worst;
  auto record = [&](const std::string& name, std::size_t net, double err) {
    auto& w = worst[name];
    if (!(err <= w.error)) w = {err, net};
  };
  const auto t0 = Clock::now();

  for (std::size_t i = 0; i < options.networks; ++i) {
    const std::uint64_t seed = derive_seed(options.seed, {i});
    ToyNet net = random_toy(seed);
    const MlpModel& m = net.model;
    Rng rng(derive_seed(seed, {1}));
    const std::size_t task = 1;
    const double h = options.step;

    {
      auto lg = task_loss(m, net.x, net.y, task);
      record("task_loss", i, relative_gradient_error(m, [&](const MlpModel& p) { return task_loss(p, net.x, net.y, task).loss; },
                                                  lg.grads, h));
    }
    {
      const double lbd = 0.7;
      auto bl = blind_loss(m, net.x, net.y, net.x2, net.y2, lbd, task);
      record("blind_loss", i, relative_gradient_error(m, [&](const MlpModel& p) {
               return task_loss(p, net.x, net.y, task).loss + lbd * task_loss(p, net.x2, net.y2, task).loss;
             }, bl.grads, h));
    }
    for (const double eps_factor : {0.1, 1e3}) {
      auto ll = latent_loss(m, net.x2, net.y2, net.x, net.y, eps_factor, task);
      // The threshold is a constant for differentiation purposes.
      const double eps = ll.epsilon;
      const std::string name = eps_factor < 1.0 ? "latent_loss_hinge_active" : "latent_loss_hinge_inactive";
      record(name, i, relative_gradient_error(m, [&](const MlpModel& p) {
               const double bd = task_loss(p, net.x2, net.y2, task).loss;
               return bd + std::max(0.0, task_loss(p, net.x, net.y, task).loss - eps);
             }, ll.grads, h));
    }
    {
      const ClState st = random_penalty_state(m, rng);
      const double lambda = 5.0;
      Gradients g = zeros_like(m);
      ewc_penalty(m, st, lambda, &g);
      record("ewc_penalty", i, relative_gradient_error(m, [&](const MlpModel& p) { return ewc_penalty(p, st, lambda); }, g, h));
      Gradients gs = zeros_like(m);
      si_penalty(m, st, 0.5, &gs);
      record("si_penalty", i, relative_gradient_error(m, [&](const MlpModel& p) { return si_penalty(p, st, 0.5); }, gs, h));
    }
    {
      const MlpModel prev = perturbed(m, rng, 0.2);
      const double temperature = 2.0, weight = 0.8;
      auto lw = lwf_loss(m, &prev, net.x, net.y, task, temperature, weight);
      record("lwf_loss", i, relative_gradient_error(m, [&](const MlpModel& p) {
               return lwf_loss(p, &prev, net.x, net.y, task, temperature, weight).loss;
             }, lw.grads, h));
    }
    {
      BtbState st;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (std::size_t j = 0; j < 2; ++j) {
        PriorSlice slice;
        slice.task_id = j;
        const std::size_t classes = m.heads[j].out_dim();
        slice.clean.x = uniform_matrix(rng, 5, m.input_dim);
        slice.clean.y = uniform_labels(rng, 5, classes);
        slice.clean.class_count = classes;
        if (j == 0) {
          slice.triggered.x = uniform_matrix(rng, 3, m.input_dim);
          slice.triggered.y = uniform_labels(rng, 3, classes);
          slice.triggered.class_count = classes;
        }
        st.slices.push_back(std::move(slice));
        st.ell_prior.push_back(u(rng));
        st.tau.push_back(0.05 * st.ell_prior.back());
        st.lambda.push_back(2.0 * u(rng));
      }
      const double mu = 0.05 + u(rng);
      const double lbd = 1.0;
      auto objective = [&](const MlpModel& p, Gradients* grad) {
        auto blind = blind_loss(p, net.x, net.y, net.x2, net.y2, lbd, task);
        std::vector<double> current;
        std::vector<Gradients> prior;
        for (const auto& s : st.slices) {
          auto pl = prior_blind_loss(p, s, lbd);
          current.push_back(pl.loss);
          prior.push_back(std::move(pl.grads));
        }
        const auto delta = constraint_violation(st, current);
        if (grad) *grad = augmented_gradient(std::move(blind.grads), prior, delta, st.lambda, mu);
        return augmented_objective(blind.loss, delta, st.lambda, mu);
      };
      Gradients g;
      objective(m, &g);
      record("augmented_objective", i, relative_gradient_error(m, [&](const MlpModel& p) { return objective(p, nullptr); }, g, h));
    }
  }

  const double elapsed = seconds_since(t0);
  SuiteReport report;
  for (const auto& [name, w] : worst) {
    CheckResult r;
    r.name = "gradcheck/" + name;
    r.passed = w.error <= options.tolerance;
    r.detail = fmt("max rel err %.3e over %zu nets (worst net %zu, tol %.0e)", w.error, options.networks, w.net,
                   options.tolerance);
    report.add(r);
  }
  CheckResult runtime{"gradcheck/runtime", elapsed < 60.0, fmt("%.2fs total (limit 60s)", elapsed), elapsed};
  report.add(runtime);
  return report;
}

SuiteReport property_suite(std::uint64_t seed) {
  SuiteReport report;
  const auto images = synth_blobs(derive_seed(seed, {1}), 3, 64, 30, 0.3);
  const std::size_t side = images.image_side;

  report.add(timed("property/trigger_static_idempotent", [&](CheckResult& r) {
    const auto spec = TriggerSpec::static_default();
    Rng rng(seed);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      std::vector<double> once(images.x.row(i).begin(), images.x.row(i).end());
      apply_trigger(once, side, spec, rng);
      auto twice = once;
      apply_trigger(twice, side, spec, rng);
      bad += once != twice;
    }
    r.passed = bad == 0;
    r.detail = fmt("%zu/%zu images changed by a second application", bad, images.size());
  }));

  report.add(timed("property/trigger_bounds", [&](CheckResult& r) {
    std::size_t violations = 0, trials = 0;
    for (const auto& base : {TriggerSpec::static_default(), TriggerSpec::dynamic_default()}) {
      Rng rng(derive_seed(seed, {2}));
      for (std::size_t rep = 0; rep < 20; ++rep) {
        for (std::size_t i = 0; i < images.size(); ++i, ++trials) {
          const auto src = images.x.row(i);
          std::vector<double> img(src.begin(), src.end());
          const auto at = apply_trigger(img, side, base, rng);
          if (at.row + base.height > side || at.col + base.width > side) ++violations;
          for (std::size_t p = 0; p < img.size(); ++p) {
            const std::size_t rr = p / side, cc = p % side;
            const bool inside = rr >= at.row && rr < at.row + base.height && cc >= at.col && cc < at.col + base.width;
            if (img[p] < 0.0 || img[p] > 1.0 || (!inside && img[p] != src[p])) ++violations;
          }
        }
      }
    }
    r.passed = violations == 0;
    r.detail = fmt("%zu violations over %zu stamped images", violations, trials);
  }));

  report.add(timed("property/trigger_poison_counts", [&](CheckResult& r) {
    std::string problems;
    for (const auto& base : {TriggerSpec::static_default(), TriggerSpec::dynamic_default()}) {
      auto spec = base;
      spec.seed = seed;
      const auto p = embed_trigger(images, spec);
      const auto rows = p.poisoned_rows();
      const auto expected = static_cast<std::size_t>(std::llround(spec.poison_ratio * static_cast<double>(images.size())));
      if (rows.size() != expected) problems += fmt("count %zu != %zu; ", rows.size(), expected);
      for (std::size_t i : rows) {
        if (p.data.y[i] != spec.target_label) problems += "poisoned label not target; ";
      }
      for (std::size_t i : p.clean_rows()) {
        if (p.data.y[i] != images.y[i] || !std::equal(p.data.x.row(i).begin(), p.data.x.row(i).end(), images.x.row(i).begin())) {
          problems += "clean row modified; ";
        }
      }
    }
    r.passed = problems.empty();
    r.detail = problems.empty() ? "poison counts, labels and clean rows as expected" : problems;
  }));

  report.add(timed("property/agem_projection", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, {3}));
    std::normal_distribution<double> g(0.0, 1.0);
    double worst_dot = 0.0;
    std::size_t unchanged_bad = 0, projected = 0;
    for (std::size_t trial = 0; trial < 500; ++trial) {
      std::vector<double> a(20), b(20);
      for (auto& v : a) v = g(rng);
      for (auto& v : b) v = g(rng);
      const auto out = agem_project(a, b);
      const double before = dot(a, b);
      if (before >= 0.0) {
        unchanged_bad += out != a;
      } else {
        ++projected;
        const double scale = std::sqrt(dot(out, out) * dot(b, b)) + 1e-300;
        worst_dot = std::max(worst_dot, std::abs(dot(out, b)) / scale);
      }
    }
    r.passed = worst_dot <= 1e-12 && unchanged_bad == 0 && projected > 0;
    r.detail = fmt("max |cos(g~, g_ref)| %.2e over %zu projections; %zu non-conflicting altered", worst_dot, projected,
                   unchanged_bad);
  }));

  report.add(timed("property/multipliers", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, {4}));
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.001, 1.0);
    std::size_t negative = 0, non_monotone = 0;
    for (std::size_t trial = 0; trial < 200; ++trial) {
      std::vector<double> lambda(4, 0.0);
      for (std::size_t k = 0; k < 50; ++k) {
        std::vector<double> delta(4);
        for (auto& d : delta) d = g(rng);
        update_multipliers(lambda, delta, u(rng));
        negative += std::count_if(lambda.begin(), lambda.end(), [](double v) { return v < 0.0; });
      }
      for (std::size_t k = 0; k < 50; ++k) {
        const auto before = lambda;
        std::vector<double> delta(4);
        for (auto& d : delta) d = u(rng);
        update_multipliers(lambda, delta, u(rng));
        for (std::size_t j = 0; j < 4; ++j) non_monotone += lambda[j] <= before[j];
      }
    }
    r.passed = negative == 0 && non_monotone == 0;
    r.detail = fmt("%zu negative multipliers, %zu non-increasing steps under sustained violation", negative, non_monotone);
  }));

  report.add(timed("property/checkpoint_roundtrip", [&](CheckResult& r) {
    std::string problems;
    for (std::size_t i = 0; i < 20; ++i) {
      ToyNet net = random_toy(derive_seed(seed, {5, i}));
      const std::map<std::string, std::string> meta{{"k", std::to_string(i)}};
      const auto bytes = encode_checkpoint(net.model, meta);
      const auto back = decode_checkpoint(bytes);
      const auto a = flatten(net.model), b = flatten(back.model);
      if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0 ||
          back.model.gates != net.model.gates || back.metadata != meta) {
        problems += fmt("net %zu differs; ", i);
      }
      auto expect_error = [&](const std::string& blob, const char* needle) {
        try {
          decode_checkpoint(blob);
          problems += fmt("no error for %s; ", needle);
        } catch (const CheckpointError& e) {
          if (std::string(e.what()).find(needle) == std::string::npos) problems += fmt("wrong error for %s; ", needle);
        }
      };
      expect_error(bytes.substr(0, bytes.size() - 3), "length mismatch");
      auto magic = bytes;
      magic[0] = 'X';
      expect_error(magic, "bad magic");
      auto version = bytes;
      version[4] = 9;
      expect_error(version, "version mismatch");
    }
    r.passed = problems.empty();
    r.detail = problems.empty() ? "20 models bit-exact; truncation, magic and version errors raised" : problems;
  }));

  report.add(timed("property/kde_normalization", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, {6}));
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 60; ++trial) {
      const std::size_t n = 5 + trial * 5;
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = (trial % 3 == 2 && i % 2 ? 6.0 : 0.0) + (trial % 3 ? g(rng) : std::exp(g(rng)));
      const auto curve = kde(v);
      double area = 0.0;
      for (std::size_t i = 1; i < curve.x.size(); ++i) {
        area += 0.5 * (curve.density[i] + curve.density[i - 1]) * (curve.x[i] - curve.x[i - 1]);
      }
      worst = std::max(worst, std::abs(area - 1.0));
    }
    r.passed = worst <= 0.01;
    r.detail = fmt("max |integral - 1| = %.2e over 60 samples", worst);
  }));

  report.add(timed("property/iou_symmetry", [&](CheckResult& r) {
    Rng rng(derive_seed(seed, {7}));
    std::uniform_int_distribution<std::size_t> unit(0, 39);
    std::size_t bad = 0;
    for (std::size_t trial = 0; trial < 50; ++trial) {
      std::vector<std::set<NeuronId>> sets(5);
      for (auto& s : sets) {
        while (s.size() < 8) s.insert({unit(rng) % 2, unit(rng)});
      }
      const auto m = iou_matrix(sets);
      for (std::size_t a = 0; a < 5; ++a) {
        bad += m[a][a] != 100.0;
        for (std::size_t b = 0; b < 5; ++b) bad += m[a][b] != m[b][a] || m[a][b] < 0.0 || m[a][b] > 100.0;
      }
    }
    r.passed = bad == 0;
    r.detail = fmt("%zu violations over 50 random 5x5 matrices", bad);
  }));

  return report;
}

ExperimentConfig default_acceptance_config() {
  ExperimentConfig c;
  c.run_id = "acceptance";
  c.dataset.kind = DatasetKind::synthetic;
  c.dataset.seed = 11;
  c.dataset.tasks = 5;
  c.dataset.classes_per_task = 2;
  c.dataset.dim = 784;
  c.dataset.train_per_class = 600;
  c.dataset.test_per_class = 200;
  c.dataset.noise_sd = 0.2;
  c.dataset.latent_dim = 32;
  c.dataset.separation = 6.0;
  c.dataset.feature_scale = 0.1;
  c.model.hidden = {400, 400};
  c.model.seed = 7;
  c.training.epochs = 20;
  c.training.batch_size = 128;
  c.training.seed = 3;
  return c;
}

SuiteReport acceptance_suite(const AcceptanceOptions& options) {
  SuiteReport report;
  auto wanted = [&](int c) { return options.criteria.empty() || options.criteria.count(c) > 0; };
  RunBank bank(options);
  const std::vector<std::string> all_strategies{"ewc", "si", "xdg", "lwf", "agem"};
  const double clean_floor = options.base.dataset.kind == DatasetKind::synthetic ? 0.95 : 0.90;
  const std::size_t last = options.base.dataset.tasks - 1;

  if (wanted(1)) {
    report.add(timed("criterion 1: gradient correctness", [&](CheckResult& r) {
      const auto g = gradcheck_suite();
      r.passed = g.all_passed();
      for (const auto& c : g.results) {
        if (!c.passed) r.detail += c.name + " " + c.detail + "; ";
      }
      if (r.passed) r.detail = fmt("%zu gradient families green; %s", g.results.size() - 1, g.results.back().detail.c_str());
    }));
  }

  if (wanted(2)) {
    for (const auto& s : all_strategies) {
      report.add(timed("criterion 2: clean baseline " + s, [&](CheckResult& r) {
        const auto& run = bank.get(s, AttackMode::none, 0);
        const double acc = run.record.final_mean_acc();
        r.passed = acc >= clean_floor && run.record.wall_seconds < 600.0;
        r.detail = fmt("mean final ACC %.4f (floor %.2f), %.1fs (limit 600s)", acc, clean_floor, run.record.wall_seconds);
      }));
    }
  }

  if (wanted(3)) {
    for (const std::string s : {"ewc", "lwf", "agem"}) {
      report.add(timed("criterion 3: ltb efficacy/persistence " + s, [&](CheckResult& r) {
        const auto& clean = bank.get(s, AttackMode::none, 0);
        const auto& run = bank.get(s, AttackMode::ltb, 0);
        const double asr = run.record.final_asr();
        const double acc = run.record.final_mean_acc();
        const double gap = std::abs(acc - clean.record.final_mean_acc());
        const double drop = run.record.mean_asr_drop_per_task();
        r.passed = asr >= 0.85 && gap <= 0.10 && drop <= 0.03;
        r.detail = fmt("final ASR %.4f (>=0.85), ACC %.4f vs clean %.4f (gap %.4f <= 0.10), per-task ASR drop %.4f (<=0.03)",
                       asr, acc, clean.record.final_mean_acc(), gap, drop);
      }));
    }
  }

  if (wanted(4)) {
    report.add(timed("criterion 4: persistence vs badnets (lwf)", [&](CheckResult& r) {
      const auto& ltb = bank.get("lwf", AttackMode::ltb, 0);
      const auto& bad = bank.get("lwf", AttackMode::badnets, 0);
      const double ltb_final = ltb.record.final_asr(), bad_final = bad.record.final_asr();
      const double ltb_decay = ltb.record.attacked_asr(0) - ltb_final;
      const double bad_decay = bad.record.attacked_asr(0) - bad_final;
      r.passed = ltb_final - bad_final >= 0.15 && bad_decay >= 0.20 && ltb_decay <= 0.10;
      r.detail = fmt("final ASR ltb %.4f badnets %.4f (gap %.4f >= 0.15); decay badnets %.4f (>=0.20) ltb %.4f (<=0.10)",
                     ltb_final, bad_final, ltb_final - bad_final, bad_decay, ltb_decay);
    }));
  }

  if (wanted(5)) {
    for (const std::string s : {"ewc", "agem"}) {
      report.add(timed("criterion 5: btb efficacy " + s, [&](CheckResult& r) {
        const auto& clean = bank.get(s, AttackMode::none, 0);
        const auto& run = bank.get(s, AttackMode::btb, 0);
        const double asr = run.record.final_asr();
        const double acc = run.record.final_mean_acc();
        const double gap = std::abs(acc - clean.record.final_mean_acc());
        double worst = -std::numeric_limits<double>::infinity();
        for (const auto& t : run.record.tasks) {
          for (double d : t.btb->exit_violation) worst = std::max(worst, d);
        }
        r.passed = asr >= 0.88 && gap <= 0.10 && worst <= 0.02;
        r.detail = fmt("final ASR %.4f (>=0.88), ACC %.4f vs clean %.4f (gap %.4f <= 0.10), max exit violation %.4f (<=0.02)",
                       asr, acc, clean.record.final_mean_acc(), gap, worst);
      }));
    }
  }

  if (wanted(6)) {
    report.add(timed("criterion 6a: variation ewc < agem", [&](CheckResult& r) {
      std::size_t wins = 0;
      std::string values;
      for (std::size_t k = 0; k < options.variation_seeds; ++k) {
        const double e = bank.get("ewc", AttackMode::none, 0, k).variation;
        const double a = bank.get("agem", AttackMode::none, 0, k).variation;
        wins += e < a;
        values += fmt("%s%.3f/%.3f", k ? " " : "", e, a);
      }
      r.passed = wins == options.variation_seeds;
      r.detail = fmt("%zu/%zu seeds ewc < agem (ewc/agem: %s)", wins, options.variation_seeds, values.c_str());
    }));
    report.add(timed("criterion 6b: stable vs random neuron drift", [&](CheckResult& r) {
      const auto& run = bank.get("ewc", AttackMode::ltb, 0);
      const auto& st = *run.stability;
      const double ratio = st.stable_stats.final_mean / std::max(st.random_stats.final_mean, 1e-300);
      r.passed = st.stable_stats.final_mean <= 0.5 * st.random_stats.final_mean;
      r.detail = fmt("mean T1T stable %.4f random %.4f over %zu units (ratio %.3f <= 0.5)", st.stable_stats.final_mean,
                     st.random_stats.final_mean, st.stable.size(), ratio);
    }));
    report.add(timed("criterion 6c: importance IoU", [&](CheckResult& r) {
      r.passed = true;
      for (const auto& s : all_strategies) {
        const auto& run = bank.get(s, AttackMode::none, 0);
        r.passed = r.passed && run.iou_diag_ok && run.iou_max_off <= 25.0;
        r.detail += fmt("%s%s max off-diag %.1f%s", r.detail.empty() ? "" : "; ", s.c_str(), run.iou_max_off,
                        run.iou_diag_ok ? "" : " (bad diagonal)");
      }
      r.detail += " (limit 25)";
    }));
  }

  if (wanted(7)) {
    report.add(timed("criterion 7: ltb at every task (ewc)", [&](CheckResult& r) {
      r.passed = true;
      for (std::size_t t = 0; t <= last; ++t) {
        const double asr = bank.get("ewc", AttackMode::ltb, t).record.final_asr();
        r.passed = r.passed && asr >= 0.85;
        r.detail += fmt("%stask %zu: %.4f", t ? ", " : "", t + 1, asr);
      }
      r.detail += " (each >= 0.85)";
    }));
  }

  if (wanted(8)) {
    report.add(timed("criterion 8: property suites", [&](CheckResult& r) {
      const auto p = property_suite();
      r.passed = p.all_passed();
      for (const auto& c : p.results) {
        if (!c.passed) r.detail += c.name + ": " + c.detail + "; ";
      }
      if (r.passed) r.detail = fmt("%zu property checks green", p.results.size());
    }));
    report.results.back().passed = report.results.back().passed && report.results.back().seconds < 300.0;
  }
  return report;
}

}  // namespace clbd
