#pragma once

// Command-line surface: run configuration, output bookkeeping and the
// subcommands behind the `molnp` executable.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "molnp/cnp.hpp"
#include "molnp/data.hpp"
#include "molnp/experiments.hpp"

namespace molnp::cli {

using Eigen::Index;

enum class Command { Fingerprint, Train, Calibrate, Fewshot, Generalize, Bo, Synth };

std::string_view to_string(Command c);
/// Throws ConfigError for unknown names.
Command command_from_string(std::string_view s);

struct BoSettings {
  std::string objective = "F2";
  /// Newline-delimited ids; when empty the pool is the first pool_size dtest molecules.
  std::filesystem::path pool_ids;
  std::size_t pool_size = 0;  // 0 means all of dtest
  std::vector<experiments::Strategy> strategies{experiments::Strategy::Random, experiments::Strategy::Greedy,
                                                experiments::Strategy::Lcb};
  double beta = 1.0;
  std::size_t n_init = 5;
  std::size_t n_iterations = 4995;
  std::size_t n_seeds = 20;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path dataset;
  std::filesystem::path output_dir = "out";

  int radius = 3;
  std::size_t nbits = 1024;
  /// Defaults to <output_dir>/fingerprints/<dataset stem>_r<radius>_n<nbits>.ecfp.
  std::filesystem::path fingerprint_cache;

  data::SplitConfig split;
  std::filesystem::path dtrain_ids;
  std::filesystem::path dtest_ids;

  cnp::Architecture architecture;
  cnp::TrainConfig train;
  std::vector<int> train_checkpoints{1000};
  /// Trained model consumed by fewshot and bo.
  std::filesystem::path checkpoint;

  std::vector<int> calibration_checkpoints{0, 100, 250, 500, 1000};
  Index eval_context = 256;
  experiments::FewshotConfig fewshot;
  std::vector<std::string> generalize_functions{"PARP1", "KIT", "F2"};
  BoSettings bo;
  data::SyntheticConfig synth;

  /// Canonical JSON of the merged configuration and its FNV-1a hash (16 hex digits).
  std::string canonical;
  std::string hash;
};

/// Every recognised field with its default; `seed` is null and must be set.
std::string default_config_json();

/// Merges an optional JSON config file and `key.path=value` overrides onto
/// the defaults, then type-checks every field. Unknown fields, wrong types
/// and a missing seed raise ConfigError naming the field.
RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);
RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides);

/// Checks what a command needs before any computation (paths, checkpoint).
void validate_for(const RunConfig& config, Command command);

/// <output_dir>/<command>/<hash>
std::filesystem::path output_directory(const RunConfig& config, Command command);
std::filesystem::path default_fingerprint_cache(const RunConfig& config);

/// Validates, runs and writes outputs plus manifest.json. Returns the output directory.
std::filesystem::path run_command(Command command, const RunConfig& config, std::ostream& log);

/// 2 config, 3 data, 4 numeric, 1 anything else.
int exit_code(const std::exception& e);

}  // namespace molnp::cli
