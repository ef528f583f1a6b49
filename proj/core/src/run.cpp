#include "clbd/run.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "clbd/checkpoint.hpp"
#include "json.hpp"

namespace clbd {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json neurons_json(std::span<const NeuronId> ids) {
  json arr = json::array();
  for (const auto& id : ids) arr.push_back({id.layer, id.unit});
  return arr;
}

std::vector<NeuronId> neurons_from_json(const json& arr) {
  std::vector<NeuronId> out;
  for (const auto& p : arr) out.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
  return out;
}

fs::path checkpoint_path(const fs::path& dir, std::size_t task) {
  return dir / "checkpoints" / ("task_" + std::to_string(task) + ".clbd");
}

json task_json(const TaskOutcome& t) {
  json j = {{"task", t.task},
            {"steps", t.train.steps},
            {"epoch_loss", t.train.epoch_loss},
            {"test_accuracy", t.train.test_accuracy},
            {"wall_seconds", t.train.wall_seconds},
            {"important", neurons_json(t.important)}};
  if (t.btb) {
    j["btb"] = {{"iterations", t.btb->iterations},
                {"early_stopped", t.btb->early_stopped},
                {"exit_violation", t.btb->exit_violation},
                {"lambda", t.btb->lambda},
                {"mu", t.btb->mu}};
  }
  if (!t.ltb_selected.empty()) j["ltb_selected"] = neurons_json(t.ltb_selected);
  return j;
}

std::string csv_matrix(const std::vector<std::vector<double>>& m) {
  std::string out;
  for (const auto& row : m) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + fmt_real(row[i]);
    out += "\n";
  }
  return out;
}

}  // namespace

double RunRecord::attacked_asr(std::size_t after) const {
  const std::size_t a = config.attack.attacked_task;
  for (const auto& r : metrics) {
    if (r.eval_after_task == after && r.task == a) return r.asr;
  }
  throw Error("no ASR recorded for task " + std::to_string(a) + " after task " + std::to_string(after));
}

double RunRecord::final_mean_acc() const {
  const std::size_t last = tasks.size() - 1;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : metrics) {
    if (r.eval_after_task == last) {
      sum += r.acc;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

double RunRecord::mean_asr_drop_per_task() const {
  const std::size_t a = config.attack.attacked_task;
  const std::size_t last = tasks.size() - 1;
  if (a >= last) return 0.0;
  return (attacked_asr(a) - attacked_asr(last)) / static_cast<double>(last - a);
}

std::vector<NeuronId> RunRecord::ltb_selected() const {
  for (const auto& t : tasks) {
    if (!t.ltb_selected.empty()) return t.ltb_selected;
  }
  return {};
}

TaskSequence build_tasks(const DatasetConfig& d) {
  if (d.kind == DatasetKind::synthetic) {
    const std::size_t classes = d.tasks * d.classes_per_task;
    const LatentSpec spec{d.latent_dim, d.separation, d.feature_scale, d.noise_sd};
    const auto all = synth_latent(d.seed, classes, d.classes_per_task, d.dim, d.train_per_class + d.test_per_class, spec);
    auto [train, test] = split_per_class(all, d.train_per_class);
    auto seq = make_split_tasks(train, test, d.classes_per_task);
    seq.kind = TaskKind::synthetic;
    return seq;
  }
  const auto files = find_mnist(d.path);
  if (!files) throw ConfigError("dataset.path", "no MNIST IDX files under '" + d.path + "'");
  auto train = load_idx(files->train_images, files->train_labels);
  auto test = load_idx(files->test_images, files->test_labels);
  if (d.max_train_per_class) train = subsample_per_class(train, d.max_train_per_class, derive_seed(d.seed, {81}));
  if (d.max_test_per_class) test = subsample_per_class(test, d.max_test_per_class, derive_seed(d.seed, {82}));
  if (d.kind == DatasetKind::permuted_mnist) return make_permuted_tasks(train, test, d.tasks, d.seed);
  auto seq = make_split_tasks(train, test, d.classes_per_task);
  seq.tasks.resize(std::min(seq.tasks.size(), d.tasks));
  return seq;
}

RunRecord run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = config;
  rec.config_hash = config_hash(config);

  const TaskSequence seq = build_tasks(config.dataset);
  if (seq.size() == 0) throw DataError("dataset produced no tasks");
  const std::size_t attacked = config.attack.attacked_task;
  if (attacked >= seq.size()) throw ConfigError("attack.attacked_task", "beyond the task sequence");
  const auto& trigger = config.attack.trigger;

  fs::path out_dir = config.output_dir;
  if (options.write_outputs) {
    if (out_dir.empty()) throw ConfigError("output.directory", "required when writing outputs");
    fs::create_directories(out_dir / "checkpoints");
    write_text(out_dir / "config.json", config_to_json(config, 2) + "\n");
    rec.artifacts.push_back(out_dir / "config.json");
  }

  std::vector<EvalSplits> splits;
  for (const auto& t : seq.tasks) splits.push_back(make_eval_splits(t.test, trigger));

  MlpModel model = make_mlp(seq.tasks[0].train.dim(), config.model.hidden, config.model.seed);
  ClState cl_state;
  BtbState btb_state;
  const std::string strategy = strategy_name(config.strategy);
  const std::string mode = to_string(config.attack.mode);
  const std::map<std::string, std::string> meta_base = {
      {"run_id", config.run_id}, {"strategy", strategy}, {"config_hash", rec.config_hash}, {"attack_mode", mode}};
  rec.checkpoints.metadata = meta_base;

  for (std::size_t t = 0; t < seq.size(); ++t) {
    const Task& task = seq.tasks[t];
    TaskOutcome outcome;
    outcome.task = t;
    const bool hit = t == attacked;
    std::optional<PoisonedDataset> poison;
    if (hit && config.attack.mode != AttackMode::none) {
      TriggerSpec spec = trigger;
      spec.seed = derive_seed(trigger.seed, {90, t});
      poison = embed_trigger(task.train, spec);
    }
    spdlog::info("[{}] task {}/{} strategy={} attack={}{}", config.run_id, t + 1, seq.size(), strategy, mode,
                 hit && poison ? " (attacked)" : "");
    switch (config.attack.mode) {
      case AttackMode::none:
        outcome.train = train_task(model, task, t, config.strategy, cl_state, config.training);
        break;
      case AttackMode::badnets:
        outcome.train = hit ? badnets_baseline_train(model, task, *poison, t, config.strategy, cl_state, config.training)
                            : train_task(model, task, t, config.strategy, cl_state, config.training);
        break;
      case AttackMode::ltb:
        if (hit) {
          auto rep = ltb_train_task(model, task, *poison, t, config.strategy, cl_state, config.attack.ltb,
                                    config.training);
          outcome.train = rep.latent_phase;
          outcome.ltb_selected = rep.selected;
        } else {
          outcome.train = train_task(model, task, t, config.strategy, cl_state, config.training);
        }
        break;
      case AttackMode::btb: {
        auto rep = btb_train_task(model, task, poison ? &*poison : nullptr, t, config.strategy, cl_state,
                                  config.attack.btb, btb_state, config.training);
        outcome.train = rep.train;
        outcome.btb = std::move(rep);
        break;
      }
    }
    if (!all_finite(model)) throw Error("numeric divergence: non-finite parameters after task " + std::to_string(t));

    const auto importance = compute_dfm(model, task.train, t, config.training.fisher_samples);
    outcome.important = important_neurons(importance, config.attack.ltb.kappa_percentile);

    for (std::size_t s = 0; s <= t; ++s) {
      MetricRow row{config.run_id, strategy, mode, attacked, t, s, 0.0, 0.0};
      row.acc = accuracy(model, seq.tasks[s].test, s);
      row.asr = attack_success_rate(model, splits[s].triggered, splits[s].target_label, s);
      rec.metrics.push_back(row);
    }
    spdlog::info("[{}] after task {}: acc(task)={:.4f} asr(attacked)={}", config.run_id, t + 1,
                 rec.metrics.back().acc, t >= attacked ? fmt_real(rec.attacked_asr(t)) : std::string("-"));

    rec.checkpoints.snapshots.push_back(model);
    if (options.write_outputs) {
      auto meta = meta_base;
      meta["task"] = std::to_string(t);
      save_checkpoint(checkpoint_path(out_dir, t), model, meta);
      rec.artifacts.push_back(checkpoint_path(out_dir, t));
    }
    rec.tasks.push_back(std::move(outcome));
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (options.write_outputs) {
    write_text(out_dir / "metrics.csv", metrics_csv(rec.metrics));
    json run = {{"run_id", config.run_id},
                {"config_hash", rec.config_hash},
                {"strategy", strategy},
                {"attack_mode", mode},
                {"attacked_task", attacked},
                {"wall_seconds", rec.wall_seconds},
                {"final_mean_acc", rec.final_mean_acc()},
                {"tasks", json::array()}};
    if (config.attack.mode != AttackMode::none) run["final_asr"] = rec.final_asr();
    for (const auto& t : rec.tasks) run["tasks"].push_back(task_json(t));
    write_text(out_dir / "run.json", run.dump(2) + "\n");
    rec.artifacts.push_back(out_dir / "metrics.csv");
    rec.artifacts.push_back(out_dir / "run.json");
  }
  return rec;
}

std::string metrics_csv(std::span<const MetricRow> rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += r.run_id + "," + r.strategy + "," + r.attack_mode + "," + std::to_string(r.attacked_task) + "," +
           std::to_string(r.eval_after_task) + "," + std::to_string(r.task) + "," + fmt_real(r.acc) + "," +
           fmt_real(r.asr) + "\n";
  }
  return out;
}

std::vector<MetricRow> read_metrics_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw DataError("'" + path.string() + "': unexpected metrics header");
  }
  std::vector<MetricRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DataError("'" + path.string() + "' line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      rows.push_back({f[0], f[1], f[2], std::stoul(f[3]), std::stoul(f[4]), std::stoul(f[5]), std::stod(f[6]),
                      std::stod(f[7])});
    } catch (const std::logic_error&) {
      throw DataError("'" + path.string() + "' line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

AnalyzeSummary analyze_run_dir(const fs::path& run_dir) {
  auto config = load_config(run_dir / "config.json");
  apply_environment(config);
  const TaskSequence seq = build_tasks(config.dataset);

  CheckpointSet set;
  for (std::size_t t = 0; fs::exists(checkpoint_path(run_dir, t)); ++t) {
    auto cp = load_checkpoint(checkpoint_path(run_dir, t));
    if (t == 0) set.metadata = cp.metadata;
    set.snapshots.push_back(std::move(cp.model));
  }
  if (set.snapshots.size() < 2) throw Error("analyze: need at least 2 checkpoints in '" + run_dir.string() + "'");
  if (set.snapshots.size() > seq.size()) throw Error("analyze: more checkpoints than tasks");

  const fs::path out = run_dir / "analysis";
  fs::create_directories(out);
  AnalyzeSummary summary;
  json report;

  std::string variation = "from_task,to_task,layer,l2\n";
  for (std::size_t t = 0; t + 1 < set.snapshots.size(); ++t) {
    for (std::size_t l = 0; l < set.snapshots[t].trunk.size(); ++l) {
      variation += std::to_string(t) + "," + std::to_string(t + 1) + "," + std::to_string(l) + "," +
                   fmt_real(layer_variation(set.snapshots[t], set.snapshots[t + 1], l)) + "\n";
    }
  }
  write_text(out / "variation.csv", variation);
  summary.algorithmic_variation = algorithmic_variation(set);
  report["algorithmic_variation"] = summary.algorithmic_variation;
  report["algorithmic_variation_reading"] =
      "mean over consecutive snapshot pairs of the summed per-layer L2 variation, divided by the snapshot count";

  std::string drift = "layer,from_task,to_task,d0,d1\n";
  for (std::size_t l = 0; l < set.snapshots[0].trunk.size(); ++l) {
    const auto pts = layer_pca_drift(set, l);
    for (std::size_t t = 0; t < pts.size(); ++t) {
      drift += std::to_string(l) + "," + std::to_string(t) + "," + std::to_string(t + 1) + "," + fmt_real(pts[t].d0) +
               "," + fmt_real(pts[t].d1) + "\n";
    }
  }
  write_text(out / "pca_drift.csv", drift);

  std::vector<std::set<NeuronId>> sets;
  for (std::size_t t = 0; t < set.snapshots.size(); ++t) {
    const auto imp = compute_dfm(set.snapshots[t], seq.tasks[t].train, t, config.training.fisher_samples);
    const auto ids = important_neurons(imp, config.attack.ltb.kappa_percentile);
    sets.emplace_back(ids.begin(), ids.end());
  }
  summary.iou = iou_matrix(sets);
  write_text(out / "iou.csv", csv_matrix(summary.iou));
  double max_off = 0.0;
  for (std::size_t a = 0; a < summary.iou.size(); ++a) {
    for (std::size_t b = 0; b < summary.iou.size(); ++b) {
      if (a != b) max_off = std::max(max_off, summary.iou[a][b]);
    }
  }
  report["iou_max_off_diagonal"] = max_off;

  std::vector<NeuronId> selected;
  if (fs::exists(run_dir / "run.json")) {
    const auto run = json::parse(read_text(run_dir / "run.json"));
    for (const auto& t : run.at("tasks")) {
      if (t.contains("ltb_selected")) selected = neurons_from_json(t.at("ltb_selected"));
    }
  }
  if (!selected.empty()) {
    auto st = stability_comparison(set, selected, config.training.seed);
    std::string csv = "group,layer,unit,k,variation\n";
    auto emit = [&](const std::string& group, std::span<const NeuronId> ids) {
      const auto traj = neuron_trajectories(set, ids);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t k = 0; k < traj[i].size(); ++k) {
          csv += group + "," + std::to_string(ids[i].layer) + "," + std::to_string(ids[i].unit) + "," +
                 std::to_string(k + 2) + "," + fmt_real(traj[i][k]) + "\n";
        }
      }
    };
    emit("stable", st.stable);
    emit("random", st.random);
    write_text(out / "stability.csv", csv);
    std::string kde_csv = "group,x,density\n";
    for (const auto& [name, g] : {std::pair{"stable", &st.stable_stats}, std::pair{"random", &st.random_stats}}) {
      for (std::size_t i = 0; i < g->final_kde.x.size(); ++i) {
        kde_csv += std::string(name) + "," + fmt_real(g->final_kde.x[i]) + "," + fmt_real(g->final_kde.density[i]) + "\n";
      }
    }
    write_text(out / "stability_kde.csv", kde_csv);
    report["stability"] = {{"stable_mean", st.stable_stats.mean},
                           {"stable_std", st.stable_stats.stddev},
                           {"random_mean", st.random_stats.mean},
                           {"random_std", st.random_stats.stddev},
                           {"stable_final_mean", st.stable_stats.final_mean},
                           {"random_final_mean", st.random_stats.final_mean}};
    summary.stability = std::move(st);
  }
  write_text(out / "analysis.json", report.dump(2) + "\n");
  for (const char* f : {"variation.csv", "pca_drift.csv", "iou.csv", "analysis.json"}) summary.outputs.push_back(out / f);
  return summary;
}

std::string compare_runs(std::span<const fs::path> run_dirs) {
  std::string out = "run_id,strategy,attack_mode,attacked_task,eval_after_task,attacked_asr,attacked_acc,mean_acc_seen\n";
  for (const auto& dir : run_dirs) {
    const auto rows = read_metrics_csv(dir / "metrics.csv");
    std::map<std::size_t, std::pair<double, std::size_t>> seen;
    for (const auto& r : rows) {
      seen[r.eval_after_task].first += r.acc;
      seen[r.eval_after_task].second += 1;
    }
    for (const auto& r : rows) {
      if (r.task != r.attacked_task) continue;
      const auto& [sum, n] = seen[r.eval_after_task];
      out += r.run_id + "," + r.strategy + "," + r.attack_mode + "," + std::to_string(r.attacked_task) + "," +
             std::to_string(r.eval_after_task) + "," + fmt_real(r.asr) + "," + fmt_real(r.acc) + "," +
             fmt_real(sum / static_cast<double>(n)) + "\n";
    }
  }
  return out;
}

}  // namespace clbd
