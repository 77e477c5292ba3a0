#pragma once

#include "config.hpp"

#include <filesystem>
#include <iosfwd>

namespace selfcons::cli {

enum ExitCode : int {
  exit_ok = 0,
  exit_usage = 1,
  exit_schema = 2,
  exit_nonconvergence = 3,
  exit_divergence = 4,
};

/// <output>/<experiment>/<config hash>/
std::filesystem::path run_directory(const ExperimentConfig& config);

/// Runs the experiment, writes CSVs, containers and manifest.json, and returns
/// the exit code. Non-converged solves still write every output.
int run_experiment(const ExperimentConfig& config, std::ostream& log);

/// Summary of every manifest under `dir` (itself or any subdirectory).
/// Throws selfcons::Error when there is none. Returns exit_usage if a file's
/// row count disagrees with its manifest entry.
int report(const std::filesystem::path& dir, std::ostream& out);

}  // namespace selfcons::cli
