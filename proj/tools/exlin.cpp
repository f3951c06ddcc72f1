// exlin: data generation, training, evaluation, controller design,
// closed-loop simulation and linearizability checks from JSON configs.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "exlin/cli/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"exlin: learn exactly linearizable models and run constraint-aware controllers on them"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "simulate a plant under excitation and write a dataset CSV"},
      {"train", "fit an exactly linearizable model to a dataset"},
      {"eval", "per-channel R^2 of a model on a dataset"},
      {"design-lqr", "steady-state target, Riccati solution and LQR gain"},
      {"simulate", "closed-loop LQR / I-CBF / Sontag runs with traces and a summary"},
      {"check-linearizable", "sampled rank and involutivity test of an input-affine system"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "global seed (overrides the config)");
    sub->add_option("--out", out, "output directory (overrides the config; default ./out)");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string command = app.get_subcommands().front()->get_name();
  exlin::cli::json config;
  try {
    config = exlin::cli::read_config(config_path);
  } catch (const exlin::cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exlin::cli::kConfigError;
  }
  return exlin::cli::run_command(command, std::move(config), seed, out);
}
