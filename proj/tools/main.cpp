#include "config.hpp"
#include "experiments.hpp"

#include "selfcons/io.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace selfcons;
using namespace selfcons::cli;

namespace {

int print_schema_error(const SchemaError& e) {
  std::cerr << "config rejected:\n";
  for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
  return exit_schema;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-consistent finite-width GP experiments. Worker count: SELFCONS_WORKERS."};
  app.set_version_flag("--version", code_version());
  app.require_subcommand(1);

  std::string run_path, validate_path, report_dir;
  auto* run = app.add_subcommand("run", "run the experiment described by a config file");
  run->add_option("config", run_path, "YAML config")->required();
  auto* validate = app.add_subcommand("validate", "check a config against the schema");
  validate->add_option("config", validate_path, "YAML config")->required();
  auto* rep = app.add_subcommand("report", "summarize the manifests under a results directory");
  rep->add_option("dir", report_dir, "results directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*run) {
      const auto cfg = load_config(run_path);
      return run_experiment(cfg, std::cout);
    }
    if (*validate) {
      const auto cfg = load_config(validate_path);
      std::cout << "ok: " << to_string(cfg.experiment) << " config " << config_hash(cfg.canonical)
                << " -> " << run_directory(cfg).string() << "\n";
      return exit_ok;
    }
    return report(report_dir, std::cout);
  } catch (const SchemaError& e) {
    return print_schema_error(e);
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return exit_divergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_usage;
  }
}
