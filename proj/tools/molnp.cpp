#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "molnp/cli.hpp"
#include "molnp/errors.hpp"

namespace cli = molnp::cli;

int main(int argc, char** argv) {
  CLI::App app{"Conditional neural processes for molecular few-shot regression"};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::vector<std::string> overrides;
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "Print the default configuration and exit");

  const std::vector<std::pair<cli::Command, const char*>> commands{
      {cli::Command::Fingerprint, "Compute or validate the fingerprint cache"},
      {cli::Command::Train, "Train a CNP on ftrain x dtrain and write checkpoints"},
      {cli::Command::Calibrate, "Track r2 and log-probability on the four quadrants during training"},
      {cli::Command::Fewshot, "Compare the CNP with QSAR baselines across context sizes"},
      {cli::Command::Generalize, "Plain vs QED-modified training and evaluation grid"},
      {cli::Command::Bo, "Pool-based Bayesian optimization with a trained CNP"},
      {cli::Command::Synth, "Write a synthetic task family as a TSV table"},
  };
  std::vector<std::pair<cli::Command, CLI::App*>> subs;
  for (const auto& [cmd, help] : commands) {
    auto* sub = app.add_subcommand(std::string(cli::to_string(cmd)), help);
    sub->add_option("-c,--config", config_path, "JSON configuration file");
    sub->add_option("--set", overrides, "Override a field, e.g. --set train.epochs=10");
    subs.emplace_back(cmd, sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (print_defaults) {
    std::cout << cli::default_config_json() << "\n";
    return 0;
  }

  std::optional<cli::Command> chosen;
  for (const auto& [cmd, sub] : subs)
    if (sub->parsed()) chosen = cmd;
  if (!chosen) {
    std::cerr << app.help();
    return 2;
  }

  try {
    std::optional<std::filesystem::path> file;
    if (!config_path.empty()) file = config_path;
    const auto config = cli::load_run_config(file, overrides);
    const auto dir = cli::run_command(*chosen, config, std::cerr);
    std::cout << dir.string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "molnp " << cli::to_string(*chosen) << ": " << e.what() << "\n";
    return cli::exit_code(e);
  }
}
