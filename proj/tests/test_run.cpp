#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "clbd/run.hpp"
#include "doctest.h"

using namespace clbd;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny(const std::string& strategy, const std::string& mode) {
  auto c = parse_config(R"({
    "run_id": "tiny-)" + strategy + "-" + mode + R"(",
    "dataset": {"dim": 36, "tasks": 3, "train_per_class": 60, "test_per_class": 20, "noise_sd": 0.2},
    "model": {"hidden": [24, 24], "seed": 2},
    "strategy": {"name": ")" + strategy + R"("},
    "attack": {"mode": ")" + mode + R"(", "attacked_task": 1, "trigger": {"poison_ratio": 0.1},
               "btb": {"n": 20}},
    "training": {"epochs": 8, "batch_size": 16, "seed": 4}
  })");
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("clbd_run_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const std::string& tag) {
  const fs::path err = fs::temp_directory_path() / ("clbd_cli_" + tag + ".err");
  const std::string cmd = std::string(CLBD_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("runs are deterministic for a fixed configuration") {
  RunOptions no_io{false};
  for (const std::string mode : {"none", "ltb", "btb", "badnets"}) {
    CAPTURE(mode);
    const auto a = run_experiment(tiny("ewc", mode), no_io);
    const auto b = run_experiment(tiny("ewc", mode), no_io);
    CHECK(metrics_csv(a.metrics) == metrics_csv(b.metrics));
    CHECK(a.config_hash == b.config_hash);
    // 3 tasks evaluated on every seen task: 1 + 2 + 3 rows
    CHECK(a.metrics.size() == 6);
  }
}

TEST_CASE("attack modes touch only the attacked task's training") {
  RunOptions no_io{false};
  const auto clean = run_experiment(tiny("ewc", "none"), no_io);
  const auto ltb = run_experiment(tiny("ewc", "ltb"), no_io);
  // Task 0 precedes the attack, so its snapshot is identical.
  CHECK(clean.checkpoints.snapshots[0] == ltb.checkpoints.snapshots[0]);
  CHECK_FALSE(clean.checkpoints.snapshots[1] == ltb.checkpoints.snapshots[1]);
  CHECK(ltb.tasks[1].ltb_selected.size() > 0);
  CHECK(ltb.tasks[0].ltb_selected.empty());
  CHECK(ltb.tasks[2].ltb_selected.empty());
}

TEST_CASE("run outputs, metrics CSV round trip, analysis and comparison") {
  auto c = tiny("lwf", "ltb");
  c.output_dir = scratch("outputs").string();
  const auto rec = run_experiment(c);
  const fs::path dir = c.output_dir;
  for (const char* f : {"config.json", "metrics.csv", "run.json", "checkpoints/task_0.clbd", "checkpoints/task_2.clbd"}) {
    CHECK(fs::exists(dir / f));
  }
  const auto rows = read_metrics_csv(dir / "metrics.csv");
  CHECK(metrics_csv(rows) == metrics_csv(rec.metrics));
  CHECK(slurp(dir / "metrics.csv").rfind(kMetricsHeader, 0) == 0);

  const auto summary = analyze_run_dir(dir);
  CHECK(summary.iou.size() == 3);
  CHECK(summary.stability.has_value());
  CHECK(fs::exists(dir / "analysis" / "variation.csv"));
  CHECK(fs::exists(dir / "analysis" / "analysis.json"));

  const std::vector<fs::path> dirs{dir, dir};
  const auto table = compare_runs(dirs);
  CHECK(table.find("attacked_asr") != std::string::npos);
}

TEST_CASE("record helpers") {
  RunRecord r;
  r.config.attack.attacked_task = 1;
  r.tasks.resize(3);
  r.metrics = {{"r", "ewc", "ltb", 1, 1, 1, 1.0, 0.9}, {"r", "ewc", "ltb", 1, 2, 0, 0.8, 0.0},
               {"r", "ewc", "ltb", 1, 2, 1, 1.0, 0.7}, {"r", "ewc", "ltb", 1, 2, 2, 0.9, 0.0}};
  CHECK(r.attacked_asr(1) == doctest::Approx(0.9));
  CHECK(r.final_asr() == doctest::Approx(0.7));
  CHECK(r.final_mean_acc() == doctest::Approx(0.9));
  CHECK(r.mean_asr_drop_per_task() == doctest::Approx(0.2));
}

TEST_CASE("CLI exit codes") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  CHECK(cli("", "none") == 2);
  CHECK(cli("frobnicate", "unknown") == 2);
  CHECK(cli("run " + (dir / "missing.json").string(), "missing") == 2);
  CHECK(slurp(fs::temp_directory_path() / "clbd_cli_missing.err").find("\"error\"") != std::string::npos);

  std::ofstream(dir / "bad.json") << R"({"dataset": {"dimm": 4}})";
  CHECK(cli("run " + (dir / "bad.json").string(), "bad") == 2);
  CHECK(slurp(fs::temp_directory_path() / "clbd_cli_bad.err").find("dataset.dimm") != std::string::npos);

  std::ofstream(dir / "ok.json") << config_to_json(tiny("si", "none"));
  CHECK(cli("run " + (dir / "ok.json").string() + " -o " + (dir / "out").string(), "ok") == 0);
  CHECK(cli("analyze " + (dir / "out").string(), "analyze") == 0);
  CHECK(cli("compare " + (dir / "out").string(), "compare") == 0);
  CHECK(cli("analyze " + (dir / "nope").string(), "analyze_missing") == 2);
  CHECK(cli("gradcheck --networks 3", "gradcheck") == 0);
}
