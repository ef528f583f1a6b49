#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clbd/checks.hpp"
#include "clbd/config.hpp"
#include "clbd/run.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 2;
constexpr int kFailure = 1;

int diagnostic(int code, const std::string& kind, const std::string& message, const std::string& field = {}) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  std::cerr << j.dump() << "\n";
  return code;
}

int cmd_run(const std::string& config_path, const std::string& output, const std::string& mnist_dir, bool synthetic) {
  if (!fs::exists(config_path)) {
    return diagnostic(kUsageError, "config", "config file '" + config_path + "' does not exist", "config");
  }
  auto config = clbd::load_config(config_path);
  clbd::apply_environment(config);
  if (!mnist_dir.empty()) config.dataset.path = mnist_dir;
  if (synthetic) config.dataset.kind = clbd::DatasetKind::synthetic;
  if (!output.empty()) config.output_dir = output;
  if (config.output_dir.empty()) config.output_dir = "runs/" + config.run_id;
  const auto rec = clbd::run_experiment(config);
  std::cout << "run " << config.run_id << " (" << rec.config_hash << ") finished in " << rec.wall_seconds << "s\n";
  std::cout << "final mean ACC " << rec.final_mean_acc();
  if (config.attack.mode != clbd::AttackMode::none) std::cout << ", attacked-task ASR " << rec.final_asr();
  std::cout << "\noutputs in " << config.output_dir << "\n";
  return 0;
}

int cmd_analyze(const std::string& dir) {
  if (!fs::is_directory(dir)) return diagnostic(kUsageError, "input", "run directory '" + dir + "' does not exist");
  const auto s = clbd::analyze_run_dir(dir);
  std::cout << "algorithmic variation " << s.algorithmic_variation << "\n";
  if (s.stability) {
    std::cout << "mean final drift: selected " << s.stability->stable_stats.final_mean << ", random "
              << s.stability->random_stats.final_mean << "\n";
  }
  for (const auto& p : s.outputs) std::cout << "wrote " << p.string() << "\n";
  return 0;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& output) {
  std::vector<fs::path> paths;
  for (const auto& d : dirs) {
    if (!fs::exists(fs::path(d) / "metrics.csv")) {
      return diagnostic(kUsageError, "input", "'" + d + "' has no metrics.csv");
    }
    paths.emplace_back(d);
  }
  const auto table = clbd::compare_runs(paths);
  if (output.empty()) {
    std::cout << table;
  } else {
    std::ofstream(output) << table;
    std::cout << "wrote " << output << "\n";
  }
  return 0;
}

int cmd_gradcheck(std::size_t networks, std::uint64_t seed) {
  clbd::GradcheckOptions o;
  o.networks = networks;
  o.seed = seed;
  const auto report = clbd::gradcheck_suite(o);
  clbd::print_report(std::cout, report);
  return report.all_passed() ? 0 : kFailure;
}

int cmd_selfcheck(const std::vector<int>& criteria, const std::string& output_root) {
  clbd::AcceptanceOptions o;
  o.criteria.insert(criteria.begin(), criteria.end());
  if (!output_root.empty()) o.output_root = output_root;
  o.progress = [](const std::string& s) { std::cerr << s << "\n"; };
  const auto report = clbd::acceptance_suite(o);
  clbd::print_report(std::cout, report);
  return report.all_passed() ? 0 : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning backdoor testbed"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log training progress");

  std::string config_path, output, mnist_dir;
  bool synthetic = false;
  auto* run = app.add_subcommand("run", "Train a task sequence from a JSON config");
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("-o,--output", output, "Output directory (overrides output.directory)");
  run->add_option("--mnist-dir", mnist_dir, "Directory with MNIST IDX files");
  run->add_flag("--synthetic", synthetic, "Force the synthetic dataset");

  std::string run_dir;
  auto* analyze = app.add_subcommand("analyze", "Variation, IoU and stability reports for a run directory");
  analyze->add_option("run_dir", run_dir, "Run directory")->required();

  std::vector<std::string> dirs;
  std::string table;
  auto* compare = app.add_subcommand("compare", "Per-task ASR/ACC table across runs");
  compare->add_option("run_dirs", dirs, "Run directories")->required();
  compare->add_option("-o,--output", table, "Write the CSV table here instead of stdout");

  std::size_t networks = 50;
  std::uint64_t seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--networks", networks, "Number of random networks");
  gradcheck->add_option("--seed", seed, "Base seed");

  std::vector<int> criteria;
  std::string output_root;
  auto* selfcheck = app.add_subcommand("selfcheck", "Synthetic acceptance suite");
  selfcheck->add_option("--criteria", criteria, "Subset of criteria (1-8)")->delimiter(',')->check(CLI::Range(1, 8));
  selfcheck->add_option("--output-root", output_root, "Keep every run's artifacts under this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (*run) return cmd_run(config_path, output, mnist_dir, synthetic);
    if (*analyze) return cmd_analyze(run_dir);
    if (*compare) return cmd_compare(dirs, table);
    if (*gradcheck) return cmd_gradcheck(networks, seed);
    if (*selfcheck) return cmd_selfcheck(criteria, output_root);
  } catch (const clbd::ConfigError& e) {
    return diagnostic(kUsageError, "config", e.what(), e.field());
  } catch (const std::exception& e) {
    return diagnostic(kFailure, "runtime", e.what());
  }
  return kUsageError;
}
