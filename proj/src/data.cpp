#include "molnp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "molnp/errors.hpp"
#include "molnp/random.hpp"

namespace molnp::data {

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      cells.push_back(line.substr(start));
      return cells;
    }
    cells.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

bool is_missing_literal(std::string_view cell) {
  return cell.empty() || cell == "NaN" || cell == "nan" || cell == "NA";
}

std::optional<double> parse_double(std::string_view cell) {
  double value = 0.0;
  const char* first = cell.data();
  const char* last = first + cell.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || !std::isfinite(value)) return std::nullopt;
  return value;
}

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

}  // namespace

std::optional<Index> TaskTable::find_molecule(const std::string& id) const {
  for (std::size_t i = 0; i < molecules.size(); ++i)
    if (molecules[i].id == id) return static_cast<Index>(i);
  return std::nullopt;
}

std::optional<Index> TaskTable::find_function(const std::string& name) const {
  for (std::size_t j = 0; j < functions.size(); ++j)
    if (functions[j] == name) return static_cast<Index>(j);
  return std::nullopt;
}

Index TaskTable::function_index(const std::string& name) const {
  const auto j = find_function(name);
  if (!j) throw Error(ErrorKind::UnknownFunctionName, "unknown function '" + name + "'");
  return *j;
}

void TaskTable::validate() const {
  if (scores.rows() != num_molecules() || scores.cols() != num_functions())
    throw Error(ErrorKind::DimensionMismatch, "score matrix is " + std::to_string(scores.rows()) + "x" +
                                                  std::to_string(scores.cols()) + ", expected " +
                                                  std::to_string(num_molecules()) + "x" +
                                                  std::to_string(num_functions()));
  std::unordered_set<std::string> seen;
  for (const auto& m : molecules) {
    if (!seen.insert(m.id).second) throw DataError(ErrorKind::DuplicateMoleculeId, 0, "duplicate molecule id '" + m.id + "'");
    if (m.qed && !(*m.qed >= 0.0 && *m.qed <= 1.0))
      throw DataError(ErrorKind::QedOutOfRange, 0, "qed of '" + m.id + "' outside [0, 1]");
  }
  seen.clear();
  for (const auto& f : functions)
    if (!seen.insert(f).second) throw DataError(ErrorKind::MalformedHeader, 0, "duplicate function id '" + f + "'");
}

TaskTable read_task_table(std::istream& in, const LoadOptions& options) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(ErrorKind::MalformedHeader, 1, "missing header row");
  const auto header = split_tabs(strip_cr(line));

  std::optional<std::size_t> id_col, smiles_col, qed_col, fp_col;
  std::vector<std::size_t> function_cols;
  TaskTable table;
  std::unordered_set<std::string> names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name(header[c]);
    if (name.empty()) throw DataError(ErrorKind::MalformedHeader, 1, "empty column name at column " + std::to_string(c + 1));
    if (!names.insert(name).second) throw DataError(ErrorKind::MalformedHeader, 1, "duplicate column '" + name + "'");
    if (name == "molecule_id") id_col = c;
    else if (name == "smiles") smiles_col = c;
    else if (name == "qed") qed_col = c;
    else if (name == "fingerprint") fp_col = c;
    else {
      function_cols.push_back(c);
      table.functions.push_back(name);
    }
  }
  if (!id_col) throw DataError(ErrorKind::MalformedHeader, 1, "missing 'molecule_id' column");
  if (!smiles_col) throw DataError(ErrorKind::MalformedHeader, 1, "missing 'smiles' column");

  std::vector<double> values;
  std::unordered_set<std::string> ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = strip_cr(line);
    if (row.empty()) continue;
    const auto cells = split_tabs(row);
    if (cells.size() != header.size())
      throw DataError(ErrorKind::RaggedRow, line_no,
                      "expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()));

    Molecule mol;
    mol.id = std::string(cells[*id_col]);
    if (mol.id.empty()) throw DataError(ErrorKind::MalformedHeader, line_no, "empty molecule_id");
    if (!ids.insert(mol.id).second)
      throw DataError(ErrorKind::DuplicateMoleculeId, line_no, "duplicate molecule id '" + mol.id + "'");
    mol.smiles = std::string(cells[*smiles_col]);

    if (qed_col && !is_missing_literal(cells[*qed_col])) {
      const auto q = parse_double(cells[*qed_col]);
      if (!q) throw DataError(ErrorKind::BadNumeric, line_no, "column 'qed': cannot parse '" + std::string(cells[*qed_col]) + "'");
      if (*q < 0.0 || *q > 1.0)
        throw DataError(ErrorKind::QedOutOfRange, line_no, "qed " + std::string(cells[*qed_col]) + " outside [0, 1]");
      mol.qed = *q;
    }

    if (fp_col && !cells[*fp_col].empty()) {
      try {
        mol.fingerprint = Fingerprint::from_hex(cells[*fp_col], options.radius);
      } catch (const Error& e) {
        throw DataError(e.kind(), line_no, "molecule '" + mol.id + "': " + e.what());
      }
    } else if (options.compute_fingerprints) {
      try {
        mol.fingerprint = ecfp_fingerprint(parse_smiles(mol.smiles), options.radius, options.nbits);
      } catch (const Error& e) {
        throw DataError(e.kind(), line_no, "molecule '" + mol.id + "': " + e.what());
      }
    }

    for (std::size_t k = 0; k < function_cols.size(); ++k) {
      const std::string_view cell = cells[function_cols[k]];
      if (is_missing_literal(cell)) {
        values.push_back(kMissing);
        continue;
      }
      const auto v = parse_double(cell);
      if (!v)
        throw DataError(ErrorKind::BadNumeric, line_no,
                        "column '" + table.functions[k] + "': cannot parse '" + std::string(cell) + "'");
      values.push_back(*v);
    }
    table.molecules.push_back(std::move(mol));
  }

  const Index n = table.num_molecules();
  const Index f = table.num_functions();
  table.scores = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(values.data(), n, f);
  return table;
}

TaskTable load_task_table(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open '" + path.string() + "'");
  return read_task_table(in, options);
}

void write_task_table(const TaskTable& table, std::ostream& out) {
  table.validate();
  const bool any_qed = std::any_of(table.molecules.begin(), table.molecules.end(), [](const Molecule& m) { return m.qed.has_value(); });
  const bool any_fp = std::any_of(table.molecules.begin(), table.molecules.end(), [](const Molecule& m) { return m.fingerprint.has_value(); });
  out << "molecule_id\tsmiles";
  if (any_qed) out << "\tqed";
  if (any_fp) out << "\tfingerprint";
  for (const auto& f : table.functions) out << '\t' << f;
  out << '\n';
  for (Index i = 0; i < table.num_molecules(); ++i) {
    const auto& m = table.molecules[static_cast<std::size_t>(i)];
    out << m.id << '\t' << m.smiles;
    if (any_qed) out << '\t' << (m.qed ? format_double(*m.qed) : std::string());
    if (any_fp) out << '\t' << (m.fingerprint ? m.fingerprint->to_hex() : std::string());
    for (Index j = 0; j < table.num_functions(); ++j)
      out << '\t' << (table.has_score(i, j) ? format_double(table.scores(i, j)) : std::string("NaN"));
    out << '\n';
  }
}

void save_task_table(const TaskTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
  write_task_table(table, out);
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for '" + path.string() + "'");
}

Eigen::SparseMatrix<double> fingerprint_features(const TaskTable& table) {
  if (table.molecules.empty()) return {};
  std::size_t nbits = 0;
  std::size_t nnz = 0;
  for (const auto& m : table.molecules) {
    if (!m.fingerprint) throw Error(ErrorKind::DimensionMismatch, "molecule '" + m.id + "' has no fingerprint");
    if (nbits == 0) nbits = m.fingerprint->nbits();
    if (m.fingerprint->nbits() != nbits)
      throw Error(ErrorKind::LengthMismatch, "molecule '" + m.id + "' fingerprint has " +
                                                 std::to_string(m.fingerprint->nbits()) + " bits, expected " +
                                                 std::to_string(nbits));
    nnz += m.fingerprint->popcount();
  }
  Eigen::SparseMatrix<double> x(static_cast<Index>(nbits), table.num_molecules());
  x.reserve(static_cast<Index>(nnz));
  for (Index j = 0; j < table.num_molecules(); ++j) {
    x.startVec(j);
    const auto& fp = *table.molecules[static_cast<std::size_t>(j)].fingerprint;
    for (std::size_t b = 0; b < nbits; ++b)
      if (fp.test(b)) x.insertBack(static_cast<Index>(b), j) = 1.0;
  }
  x.finalize();
  return x;
}

void SplitSpec::validate(const TaskTable& table) const {
  std::unordered_set<std::string> molecules_taken;
  auto check_molecules = [&](const std::vector<std::string>& ids, const char* name) {
    for (const auto& id : ids) {
      if (!table.find_molecule(id)) throw Error(ErrorKind::InvalidSplit, std::string(name) + " names unknown molecule '" + id + "'");
      if (!molecules_taken.insert(id).second)
        throw Error(ErrorKind::InvalidSplit, "molecule '" + id + "' appears twice across dtrain/dtest");
    }
  };
  check_molecules(dtrain, "dtrain");
  check_molecules(dtest, "dtest");

  std::unordered_set<std::string> functions_taken;
  auto check_functions = [&](const std::vector<std::string>& ids, const char* name) {
    for (const auto& id : ids) {
      if (!table.find_function(id))
        throw Error(ErrorKind::UnknownFunctionName, std::string(name) + " names unknown function '" + id + "'");
      if (!functions_taken.insert(id).second)
        throw Error(ErrorKind::InvalidSplit, "function '" + id + "' appears twice across ftrain/ftest");
    }
  };
  check_functions(ftrain, "ftrain");
  check_functions(ftest, "ftest");
}

namespace {

std::vector<std::string> sample_ids(const std::vector<std::string>& pool, std::size_t n, const char* what, Rng& rng,
                                    const TaskTable& table) {
  if (n > pool.size())
    throw Error(ErrorKind::InsufficientPool, std::string(what) + " needs " + std::to_string(n) + " molecules, pool has " +
                                                 std::to_string(pool.size()));
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + rng.uniform_index(pool.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::vector<std::pair<Index, std::string>> chosen;
  chosen.reserve(n);
  for (std::size_t i : idx) chosen.emplace_back(*table.find_molecule(pool[i]), pool[i]);
  std::sort(chosen.begin(), chosen.end());
  std::vector<std::string> out;
  out.reserve(n);
  for (auto& [row, id] : chosen) out.push_back(std::move(id));
  return out;
}

std::vector<std::string> pool_or_rest(const TaskTable& table, const std::vector<std::string>& pool,
                                      const std::unordered_set<std::string>& taken, const char* what) {
  std::vector<std::string> out;
  if (pool.empty()) {
    for (const auto& m : table.molecules)
      if (!taken.count(m.id)) out.push_back(m.id);
    return out;
  }
  std::unordered_set<std::string> seen;
  for (const auto& id : pool) {
    if (!table.find_molecule(id)) throw Error(ErrorKind::InvalidSplit, std::string(what) + " pool names unknown molecule '" + id + "'");
    if (!taken.count(id) && seen.insert(id).second) out.push_back(id);
  }
  return out;
}

}  // namespace

SplitSpec make_splits(const TaskTable& table, const SplitConfig& config, std::uint64_t seed) {
  SplitSpec spec;
  spec.ftest = config.ftest ? *config.ftest : kDefaultTestFunctions;
  for (const auto& f : spec.ftest) table.function_index(f);
  if (config.ftrain) {
    spec.ftrain = *config.ftrain;
  } else {
    const std::unordered_set<std::string> test(spec.ftest.begin(), spec.ftest.end());
    for (const auto& f : table.functions)
      if (!test.count(f)) spec.ftrain.push_back(f);
  }

  std::unordered_set<std::string> taken;
  if (config.dtrain) {
    spec.dtrain = *config.dtrain;
  } else {
    Rng rng(derive_seed(seed, {0}));
    if (config.dtest) taken.insert(config.dtest->begin(), config.dtest->end());
    spec.dtrain = sample_ids(pool_or_rest(table, config.dtrain_pool, taken, "dtrain"), config.n_dtrain, "dtrain", rng, table);
  }
  if (config.dtest) {
    spec.dtest = *config.dtest;
  } else {
    Rng rng(derive_seed(seed, {1}));
    taken.insert(spec.dtrain.begin(), spec.dtrain.end());
    spec.dtest = sample_ids(pool_or_rest(table, config.dtest_pool, taken, "dtest"), config.n_dtest, "dtest", rng, table);
  }
  spec.validate(table);
  return spec;
}

std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open '" + path.string() + "'");
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    const std::string_view s = strip_cr(line);
    if (!s.empty()) ids.emplace_back(s);
  }
  return ids;
}

void write_id_list(const std::filesystem::path& path, const std::vector<std::string>& ids) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
  for (const auto& id : ids) out << id << '\n';
}

double qed_modified_score(double score, double qed) {
  if (!(qed >= 0.0 && qed <= 1.0)) throw Error(ErrorKind::QedOutOfRange, "qed " + format_double(qed) + " outside [0, 1]");
  return score + 10.0 * (1.0 - qed);
}

TaskTable derive_modified_functions(const TaskTable& table, const std::vector<std::string>& functions) {
  TaskTable out = table;
  for (const auto& name : functions) {
    const Index src = table.function_index(name);
    Eigen::VectorXd column(table.num_molecules());
    for (Index i = 0; i < table.num_molecules(); ++i) {
      if (!table.has_score(i, src)) {
        column(i) = kMissing;
        continue;
      }
      const auto& m = table.molecules[static_cast<std::size_t>(i)];
      if (!m.qed) throw Error(ErrorKind::MissingQed, "molecule '" + m.id + "' has a '" + name + "' score but no qed");
      column(i) = qed_modified_score(table.scores(i, src), *m.qed);
    }
    const std::string derived = name + std::string(kModifiedSuffix);
    if (const auto existing = out.find_function(derived)) {
      out.scores.col(*existing) = column;
    } else {
      out.functions.push_back(derived);
      out.scores.conservativeResize(Eigen::NoChange, out.num_functions());
      out.scores.col(out.num_functions() - 1) = column;
    }
  }
  return out;
}

SyntheticFamily synthetic_task_family(const SyntheticConfig& config) {
  if (config.n_functions <= 0 || config.n_molecules <= 0 || config.nbits <= 0 || config.latent_dim <= 0)
    throw Error(ErrorKind::DimensionMismatch, "synthetic family sizes must be positive");
  if (!(config.bit_density > 0.0 && config.bit_density < 1.0))
    throw Error(ErrorKind::DimensionMismatch, "bit_density must lie in (0, 1)");

  const Index n = config.n_molecules;
  const Index d = config.nbits;
  const Index k = config.latent_dim;
  const Index nf = config.n_functions;
  SyntheticFamily family;
  TaskTable& table = family.table;

  Rng bits_rng(derive_seed(config.seed, {0}));
  table.molecules.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto& m = table.molecules[static_cast<std::size_t>(i)];
    char id[24];
    std::snprintf(id, sizeof id, "m%05lld", static_cast<long long>(i));
    m.id = id;
    Fingerprint fp(static_cast<std::size_t>(d), 0);
    for (Index b = 0; b < d; ++b)
      if (bits_rng.uniform() < config.bit_density) fp.set(static_cast<std::size_t>(b));
    m.fingerprint = std::move(fp);
  }
  const Eigen::SparseMatrix<double> x = fingerprint_features(table);

  // Entries scaled so each latent coordinate has unit variance over random bits.
  Rng proj_rng(derive_seed(config.seed, {1}));
  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(d) * config.bit_density * (1.0 - config.bit_density));
  family.projection.resize(k, d);
  for (Index r = 0; r < k; ++r)
    for (Index c = 0; c < d; ++c) family.projection(r, c) = proj_rng.normal(0.0, proj_sd);

  Rng weight_rng(derive_seed(config.seed, {2}));
  const double norm = 1.0 / std::sqrt(static_cast<double>(k));
  Eigen::VectorXd shared(k);
  for (Index r = 0; r < k; ++r) shared(r) = weight_rng.normal();
  family.weights.resize(k, nf);
  family.offsets.resize(nf);
  for (Index f = 0; f < nf; ++f) {
    for (Index r = 0; r < k; ++r)
      family.weights(r, f) = norm * (config.weight_shared_sd * shared(r) + config.weight_spread * weight_rng.normal());
    family.offsets(f) = config.offset_mean + config.offset_sd * weight_rng.normal();
  }

  const Eigen::MatrixXd latent = family.projection * x;  // k x n
  table.scores = (family.weights.transpose() * latent).transpose();
  table.scores.rowwise() += family.offsets.transpose();
  if (config.noise_sd > 0.0) {
    Rng noise_rng(derive_seed(config.seed, {3}));
    for (Index i = 0; i < n; ++i)
      for (Index f = 0; f < nf; ++f) table.scores(i, f) += config.noise_sd * noise_rng.normal();
  }

  Rng qed_rng(derive_seed(config.seed, {4}));
  Eigen::VectorXd q(d);
  for (Index c = 0; c < d; ++c) q(c) = qed_rng.normal(0.0, proj_sd);
  const Eigen::VectorXd qed_logit = (x.transpose() * q).array() - (q.sum() * config.bit_density) + 0.4;
  for (Index i = 0; i < n; ++i) table.molecules[static_cast<std::size_t>(i)].qed = 1.0 / (1.0 + std::exp(-qed_logit(i)));

  table.functions.reserve(static_cast<std::size_t>(nf));
  for (Index f = 0; f < nf; ++f) {
    char name[24];
    std::snprintf(name, sizeof name, "f%02lld", static_cast<long long>(f));
    table.functions.emplace_back(name);
  }
  return family;
}

}  // namespace molnp::data
