// Runs every acceptance criterion on the synthetic setup and prints one
// PASS/FAIL line per criterion. Exit status is non-zero when any fails.
#include <iostream>

#include "clbd/checks.hpp"

int main(int argc, char** argv) {
  clbd::AcceptanceOptions options;
  for (int i = 1; i < argc; ++i) options.criteria.insert(std::stoi(argv[i]));
  options.progress = [](const std::string& line) { std::cerr << line << '\n'; };
  const auto report = clbd::acceptance_suite(options);
  clbd::print_report(std::cout, report);
  return report.all_passed() ? 0 : 1;
}
