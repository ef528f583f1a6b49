#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "clbd/config.hpp"

namespace clbd {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SuiteReport {
  std::vector<CheckResult> results;

  bool all_passed() const;
  void add(CheckResult r) { results.push_back(std::move(r)); }
};

/// One "PASS|FAIL name (seconds) detail" line per result.
void print_report(std::ostream& out, const SuiteReport& report);

struct GradcheckOptions {
  std::size_t networks = 50;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  double step = 1e-6;
};

/// Central finite differences against every analytic gradient, on seeded random networks.
SuiteReport gradcheck_suite(const GradcheckOptions& options = {});

/// Trigger, A-GEM, multiplier, checkpoint, KDE and IoU properties.
SuiteReport property_suite(std::uint64_t seed = 1);

/// Synthetic 5-task split setup used by the acceptance runs.
ExperimentConfig default_acceptance_config();

struct AcceptanceOptions {
  /// Criteria to run (1..8); empty runs all.
  std::set<int> criteria;
  /// Base experiment; dataset/model/training blocks are shared by every run.
  ExperimentConfig base = default_acceptance_config();
  /// Strategy settings for the acceptance runs. EWC and SI strengths were
  /// selected on clean runs over held-out dataset seeds (101, 102).
  Ewc ewc{1e5};
  Si si{50.0, 0.1};
  Xdg xdg{};
  Lwf lwf{};
  Agem agem{};
  std::size_t variation_seeds = 10;
  /// When set, every run writes its artifacts under this directory.
  std::optional<std::filesystem::path> output_root;
  std::function<void(const std::string&)> progress;
};

SuiteReport acceptance_suite(const AcceptanceOptions& options);

}  // namespace clbd
