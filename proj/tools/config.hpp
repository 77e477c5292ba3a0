#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace selfcons::cli {

/// Config does not match the schema. Carries every problem found, one per line.
class SchemaError : public std::runtime_error {
 public:
  explicit SchemaError(const std::vector<std::string>& problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

enum class Experiment {
  gp_baseline,
  saddle_solve,
  ek_sweep,
  langevin_sweep,
  spectrum_sweep,
  phase_retrieval,
  diagnostics
};

std::string to_string(Experiment e);

struct ModelBlock {
  std::string kind = "cnn";  // cnn | quad
  std::vector<int> S{8};
  std::optional<int> N;  // defaults to S
  std::vector<int> C{16};
  double sigma_a2 = 1.0;
  double sigma_w2 = 1.0;
  int d = 20;
  int M = 80;
};

struct DataBlock {
  std::vector<long> n{40};
  std::vector<double> n_over_d;  // quad sweeps, overrides n
  long n_test = 100;
  std::string measure = "gaussian_unit";
  bool teacher_normalize = true;
  double target_scale = 1.0;
  int seeds = 1;
};

struct SolverBlock {
  double sigma2 = 1.0;
  std::string method = "damped_fixed_point";
  double damping = 0.5;
  double tol = 1e-10;
  double stage_tol = 1e-8;
  int max_iter = 500;
  double anneal_start = 1.0;
  int anneal_stages = 12;
  std::string cnn_mode = "resummed";
  std::optional<double> q;  // empty: fit from the GP on each dataset
};

struct LangevinBlock {
  std::optional<double> eta;
  double eta_gamma = 2e-3;  // eta * min(gamma) when eta is not given
  long steps = 100000;
  long burn_in = -1;
  long thin = 50;
  int seeds = 2;
  bool rao_blackwell = true;
  int blocks_per_seed = 4;
  bool preconditioned = true;
  long trajectory_stride = 0;
  bool scale_steps_with_C = false;  // steps * C / min(C)
  bool save_snapshots = false;
  bool cold_start = false;
};

struct DiagnosticsBlock {
  double min_simple = 10.0;
  double max_correction = 0.1;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::saddle_solve;
  std::uint64_t seed = 0;
  std::string output = "results";
  ModelBlock model;
  DataBlock data;
  SolverBlock solver;
  LangevinBlock langevin;
  DiagnosticsBlock diagnostics;
  /// Fully expanded config (defaults filled, scalars promoted to lists); hashed.
  nlohmann::json canonical;
};

/// Parses YAML text; unknown keys, wrong types and out-of-range values raise SchemaError.
ExperimentConfig parse_config(const std::string& yaml_text);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace selfcons::cli
