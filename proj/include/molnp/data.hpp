#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "molnp/chem.hpp"

namespace molnp::data {

using Eigen::Index;

struct Molecule {
  std::string id;
  std::string smiles;
  std::optional<Fingerprint> fingerprint;
  std::optional<double> qed;
};

/// Molecules x functions score matrix. Missing scores are NaN.
struct TaskTable {
  std::vector<Molecule> molecules;
  std::vector<std::string> functions;
  Eigen::MatrixXd scores;

  Index num_molecules() const { return static_cast<Index>(molecules.size()); }
  Index num_functions() const { return static_cast<Index>(functions.size()); }
  bool has_score(Index molecule, Index function) const { return !std::isnan(scores(molecule, function)); }

  std::optional<Index> find_molecule(const std::string& id) const;
  std::optional<Index> find_function(const std::string& name) const;
  /// Throws UnknownFunctionName.
  Index function_index(const std::string& name) const;

  /// Checks unique ids, qed range and matrix dimensions.
  void validate() const;
};

struct LoadOptions {
  int radius = 3;
  std::size_t nbits = 1024;
  /// Compute ECFP from SMILES for rows without a fingerprint column value.
  bool compute_fingerprints = true;
};

/// Reads a TSV with columns `molecule_id`, `smiles`, optional `qed`, optional
/// `fingerprint` (hex) and one column per function. Empty cells and `NaN`
/// are missing scores.
TaskTable load_task_table(const std::filesystem::path& path, const LoadOptions& options = {});
TaskTable read_task_table(std::istream& in, const LoadOptions& options = {});

/// Writes the same format; scores use 17 significant digits, missing as NaN.
void save_task_table(const TaskTable& table, const std::filesystem::path& path);
void write_task_table(const TaskTable& table, std::ostream& out);

/// Fingerprints as sparse 0/1 columns (nbits x molecules). All molecules must
/// carry fingerprints of one length.
Eigen::SparseMatrix<double> fingerprint_features(const TaskTable& table);

struct SplitSpec {
  std::vector<std::string> dtrain;
  std::vector<std::string> dtest;
  std::vector<std::string> ftrain;
  std::vector<std::string> ftest;

  /// Throws InvalidSplit on overlap or unknown ids.
  void validate(const TaskTable& table) const;
};

inline const std::vector<std::string> kDefaultTestFunctions = {"ESR2", "KIT", "PARP1", "PGR", "F2"};

struct SplitConfig {
  std::optional<std::vector<std::string>> dtrain;
  std::optional<std::vector<std::string>> dtest;
  std::optional<std::vector<std::string>> ftrain;
  std::optional<std::vector<std::string>> ftest;
  std::size_t n_dtrain = 2500;
  std::size_t n_dtest = 2500;
  /// Source pools for sampling; empty means every molecule not otherwise taken.
  std::vector<std::string> dtrain_pool;
  std::vector<std::string> dtest_pool;
};

/// Explicit lists are validated and echoed; otherwise molecules are drawn
/// uniformly without replacement from their pools (kept in table order).
/// ftest defaults to kDefaultTestFunctions and ftrain to every other function.
SplitSpec make_splits(const TaskTable& table, const SplitConfig& config, std::uint64_t seed);

std::vector<std::string> read_id_list(const std::filesystem::path& path);
void write_id_list(const std::filesystem::path& path, const std::vector<std::string>& ids);

/// s + 10 (1 - qed). Throws QedOutOfRange unless qed is in [0, 1].
double qed_modified_score(double score, double qed);

inline constexpr std::string_view kModifiedSuffix = "_qed";

/// Appends `<f>_qed` for each selected function (replacing an existing one).
/// Throws MissingQed if a molecule with a score lacks a qed value.
TaskTable derive_modified_functions(const TaskTable& table, const std::vector<std::string>& functions);

struct SyntheticConfig {
  std::uint64_t seed = 0;
  Index n_functions = 45;
  Index n_molecules = 3000;
  Index nbits = 256;
  Index latent_dim = 8;
  double noise_sd = 0.1;
  double bit_density = 0.1;
  /// Function weights are shared_sd * shared + spread * own, per latent dim.
  double weight_shared_sd = 1.0;
  double weight_spread = 0.5;
  double offset_mean = -8.0;
  double offset_sd = 0.3;
};

/// Random fingerprints, a shared projection P to a latent space and
/// f_i(x) = w_i . (P x) + b_i + noise. Molecules also get a qed value in
/// (0, 1) that is a smooth function of the fingerprint.
struct SyntheticFamily {
  TaskTable table;
  Eigen::MatrixXd projection;  // latent_dim x nbits
  Eigen::MatrixXd weights;     // latent_dim x n_functions
  Eigen::VectorXd offsets;     // n_functions
};

SyntheticFamily synthetic_task_family(const SyntheticConfig& config);

}  // namespace molnp::data
