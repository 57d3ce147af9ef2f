#include "molnp/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <Eigen/Core>

#include "json.hpp"
#include "molnp/chem.hpp"
#include "molnp/errors.hpp"
#include "molnp/random.hpp"

#ifndef MOLNP_VERSION
#define MOLNP_VERSION "0.0.0"
#endif

namespace molnp::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace experiments;

namespace {

[[noreturn]] void config_error(const std::string& field, const std::string& message) {
  throw Error(ErrorKind::ConfigError, "field '" + field + "': " + message);
}

const json& defaults() {
  static const json d = json::parse(R"({
    "seed": null,
    "dataset": "",
    "output_dir": "out",
    "checkpoint": "",
    "fingerprint": {"radius": 3, "nbits": 1024, "cache": ""},
    "split": {
      "dtrain_ids": "", "dtest_ids": "",
      "ftrain": null, "ftest": null,
      "n_dtrain": 2500, "n_dtest": 2500
    },
    "model": {
      "encoder_hidden": [256, 256], "repr_dim": 128, "decoder_hidden": [256, 256],
      "variance_floor": 1e-6
    },
    "train": {
      "epochs": 1000, "checkpoints": [1000], "learning_rate": 1e-3,
      "context_min": 5, "context_max": 256, "target_min": 1, "target_max": 256
    },
    "calibrate": {"checkpoints": [0, 100, 250, 500, 1000], "eval_context": 256},
    "fewshot": {
      "context_sizes": [5, 10, 25, 50, 100, 250, 1000],
      "models": ["cnp", "knn", "fss", "rf", "nn", "finetuned_nn"],
      "repeats": 10, "knn_k": 5,
      "rf_trees": 200, "rf_max_features": 0.3333333333333333, "rf_min_samples_leaf": 2,
      "nn_hidden": [256, 256, 256, 256, 256], "nn_epochs": 300, "nn_batch_size": 128, "nn_learning_rate": 1e-3,
      "pretrain_epochs": 300, "finetune_epochs": 300, "finetune_lr_factor": 0.1
    },
    "generalize": {"functions": ["PARP1", "KIT", "F2"]},
    "bo": {
      "objective": "F2", "pool_ids": "", "pool_size": 0,
      "strategies": ["random", "greedy", "lcb"], "beta": 1.0,
      "n_init": 5, "n_iterations": 4995, "n_seeds": 20
    },
    "synth": {
      "n_functions": 45, "n_molecules": 3000, "nbits": 256, "latent_dim": 8,
      "noise_sd": 0.1, "bit_density": 0.1, "weight_shared_sd": 1.0, "weight_spread": 0.5,
      "offset_mean": -8.0, "offset_sd": 0.3
    }
  })");
  return d;
}

const json& defaults_at(const std::string& field) {
  std::string pointer = "/" + field;
  std::replace(pointer.begin(), pointer.end(), '.', '/');
  return defaults().at(json::json_pointer(pointer));
}

// Fields whose default is null accept these types.
bool nullable_accepts(const std::string& field, const json& v) {
  if (v.is_null()) return true;
  if (field == "seed") return v.is_number_unsigned();
  if (field == "split.ftrain" || field == "split.ftest") return v.is_array();
  return false;
}

bool same_kind(const json& def, const json& v) {
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

void merge(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) config_error(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string field = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) config_error(field, "unknown field");
    json& slot = base[key];
    if (slot.is_object()) {
      merge(slot, value, field);
    } else if (defaults_at(field).is_null()) {
      if (!nullable_accepts(field, value)) config_error(field, "wrong type " + std::string(value.type_name()));
      slot = value;
    } else {
      if (!same_kind(slot, value))
        config_error(field, std::string("expected ") + slot.type_name() + ", got " + value.type_name());
      slot = value;
    }
  }
}

json parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw Error(ErrorKind::ConfigError, "override '" + text + "' is not key=value");
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  return patch;
}

template <typename T>
T get(const json& tree, const std::string& field) {
  const json* node = &tree;
  std::string rest = field;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1))
    node = &node->at(rest.substr(0, pos));
  try {
    return node->at(rest).get<T>();
  } catch (const json::exception&) {
    config_error(field, "invalid value " + node->at(rest).dump());
  }
}

template <typename T>
T positive(const json& tree, const std::string& field) {
  const auto v = get<T>(tree, field);
  if (!(v > T{0})) config_error(field, "must be positive");
  return v;
}

template <typename T>
std::vector<T> positive_list(const json& tree, const std::string& field, bool allow_zero = false) {
  const auto v = get<std::vector<T>>(tree, field);
  for (const auto& x : v)
    if (x < T{0} || (!allow_zero && x == T{0})) config_error(field, "entries must be " + std::string(allow_zero ? "non-negative" : "positive"));
  return v;
}

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig typed(const json& tree) {
  RunConfig c;
  if (tree.at("seed").is_null()) config_error("seed", "is required");
  c.seed = get<std::uint64_t>(tree, "seed");
  c.dataset = get<std::string>(tree, "dataset");
  c.output_dir = get<std::string>(tree, "output_dir");
  if (c.output_dir.empty()) config_error("output_dir", "must not be empty");
  c.checkpoint = get<std::string>(tree, "checkpoint");

  c.radius = get<int>(tree, "fingerprint.radius");
  if (c.radius < 0) config_error("fingerprint.radius", "must be non-negative");
  c.nbits = positive<std::size_t>(tree, "fingerprint.nbits");
  if (c.nbits < 8 || (c.nbits & (c.nbits - 1)) != 0) config_error("fingerprint.nbits", "must be a power of two >= 8");
  c.fingerprint_cache = get<std::string>(tree, "fingerprint.cache");

  c.dtrain_ids = get<std::string>(tree, "split.dtrain_ids");
  c.dtest_ids = get<std::string>(tree, "split.dtest_ids");
  if (!tree["split"]["ftrain"].is_null()) c.split.ftrain = get<std::vector<std::string>>(tree, "split.ftrain");
  if (!tree["split"]["ftest"].is_null()) c.split.ftest = get<std::vector<std::string>>(tree, "split.ftest");
  c.split.n_dtrain = get<std::size_t>(tree, "split.n_dtrain");
  c.split.n_dtest = get<std::size_t>(tree, "split.n_dtest");

  c.architecture.encoder_hidden = positive_list<Index>(tree, "model.encoder_hidden");
  c.architecture.decoder_hidden = positive_list<Index>(tree, "model.decoder_hidden");
  c.architecture.repr_dim = positive<Index>(tree, "model.repr_dim");
  c.architecture.variance_floor = positive<double>(tree, "model.variance_floor");
  c.architecture.nbits = static_cast<Index>(c.nbits);

  c.train.epochs = get<int>(tree, "train.epochs");
  if (c.train.epochs < 0) config_error("train.epochs", "must be non-negative");
  c.train_checkpoints = positive_list<int>(tree, "train.checkpoints");
  c.train.adam.learning_rate = positive<double>(tree, "train.learning_rate");
  c.train.episode.context_min = positive<Index>(tree, "train.context_min");
  c.train.episode.context_max = positive<Index>(tree, "train.context_max");
  c.train.episode.target_min = positive<Index>(tree, "train.target_min");
  c.train.episode.target_max = positive<Index>(tree, "train.target_max");
  if (c.train.episode.context_max < c.train.episode.context_min)
    config_error("train.context_max", "must be >= train.context_min");
  if (c.train.episode.target_max < c.train.episode.target_min)
    config_error("train.target_max", "must be >= train.target_min");

  c.calibration_checkpoints = positive_list<int>(tree, "calibrate.checkpoints", true);
  if (c.calibration_checkpoints.empty()) config_error("calibrate.checkpoints", "must not be empty");
  c.eval_context = positive<Index>(tree, "calibrate.eval_context");

  auto& f = c.fewshot;
  f.context_sizes = positive_list<Index>(tree, "fewshot.context_sizes");
  f.models = get<std::vector<std::string>>(tree, "fewshot.models");
  for (const auto& m : f.models)
    if (m != "cnp" && m != "knn" && m != "fss" && m != "rf" && m != "nn" && m != "finetuned_nn")
      config_error("fewshot.models", "unknown model '" + m + "'");
  f.repeats = positive<std::size_t>(tree, "fewshot.repeats");
  f.knn_k = positive<std::size_t>(tree, "fewshot.knn_k");
  f.forest.n_estimators = positive<std::size_t>(tree, "fewshot.rf_trees");
  f.forest.max_features = positive<double>(tree, "fewshot.rf_max_features");
  if (f.forest.max_features > 1.0) config_error("fewshot.rf_max_features", "must be at most 1");
  f.forest.min_samples_leaf = positive<std::size_t>(tree, "fewshot.rf_min_samples_leaf");
  f.nn.hidden = positive_list<Index>(tree, "fewshot.nn_hidden");
  f.nn.epochs = get<std::size_t>(tree, "fewshot.nn_epochs");
  f.nn.batch_size = get<std::size_t>(tree, "fewshot.nn_batch_size");
  f.nn.adam.learning_rate = positive<double>(tree, "fewshot.nn_learning_rate");
  f.finetune.network = f.nn;
  f.finetune.pretrain_epochs = get<std::size_t>(tree, "fewshot.pretrain_epochs");
  f.finetune.finetune_epochs = get<std::size_t>(tree, "fewshot.finetune_epochs");
  f.finetune.finetune_lr_factor = positive<double>(tree, "fewshot.finetune_lr_factor");
  f.seed = c.seed;

  c.generalize_functions = get<std::vector<std::string>>(tree, "generalize.functions");
  if (c.generalize_functions.empty()) config_error("generalize.functions", "must not be empty");

  auto& b = c.bo;
  b.objective = get<std::string>(tree, "bo.objective");
  b.pool_ids = get<std::string>(tree, "bo.pool_ids");
  b.pool_size = get<std::size_t>(tree, "bo.pool_size");
  b.strategies.clear();
  for (const auto& s : get<std::vector<std::string>>(tree, "bo.strategies")) {
    if (s != "random" && s != "greedy" && s != "lcb") config_error("bo.strategies", "unknown strategy '" + s + "'");
    b.strategies.push_back(strategy_from_string(s));
  }
  if (b.strategies.empty()) config_error("bo.strategies", "must not be empty");
  b.beta = get<double>(tree, "bo.beta");
  if (b.beta < 0.0) config_error("bo.beta", "must be non-negative");
  b.n_init = positive<std::size_t>(tree, "bo.n_init");
  b.n_iterations = get<std::size_t>(tree, "bo.n_iterations");
  b.n_seeds = positive<std::size_t>(tree, "bo.n_seeds");

  auto& s = c.synth;
  s.seed = c.seed;
  s.n_functions = positive<Index>(tree, "synth.n_functions");
  s.n_molecules = positive<Index>(tree, "synth.n_molecules");
  s.nbits = positive<Index>(tree, "synth.nbits");
  s.latent_dim = positive<Index>(tree, "synth.latent_dim");
  s.noise_sd = get<double>(tree, "synth.noise_sd");
  if (s.noise_sd < 0.0) config_error("synth.noise_sd", "must be non-negative");
  s.bit_density = positive<double>(tree, "synth.bit_density");
  if (s.bit_density >= 1.0) config_error("synth.bit_density", "must be below 1");
  s.weight_shared_sd = get<double>(tree, "synth.weight_shared_sd");
  s.weight_spread = get<double>(tree, "synth.weight_spread");
  s.offset_mean = get<double>(tree, "synth.offset_mean");
  s.offset_sd = get<double>(tree, "synth.offset_sd");

  c.canonical = tree.dump();
  c.hash = fnv_hex(c.canonical);
  return c;
}

void require_file(const fs::path& p, const std::string& field) {
  if (p.empty()) config_error(field, "is required");
  if (!fs::is_regular_file(p)) config_error(field, "file '" + p.string() + "' does not exist");
}

bool needs_model(const RunConfig& c, Command cmd) {
  if (cmd == Command::Fewshot) return std::count(c.fewshot.models.begin(), c.fewshot.models.end(), "cnp") > 0;
  if (cmd == Command::Bo)
    return std::any_of(c.bo.strategies.begin(), c.bo.strategies.end(), [](Strategy s) { return s != Strategy::Random; });
  return false;
}

// --- dataset and fingerprints ------------------------------------------------

bool cache_current(const FingerprintCache& cache, const fs::path& cache_path, const RunConfig& c,
                   const data::TaskTable& table) {
  if (cache.radius != c.radius || cache.nbits != c.nbits || cache.hash_id != kFingerprintHashId) return false;
  if (cache.records.size() != table.molecules.size()) return false;
  for (std::size_t i = 0; i < cache.records.size(); ++i)
    if (cache.records[i].molecule_id != table.molecules[i].id) return false;
  return fs::last_write_time(cache_path) >= fs::last_write_time(c.dataset);
}

data::TaskTable load_dataset(const RunConfig& c, std::ostream& log) {
  data::LoadOptions opts{c.radius, c.nbits, false};
  auto table = data::load_task_table(c.dataset, opts);
  const bool complete = std::all_of(table.molecules.begin(), table.molecules.end(),
                                    [](const data::Molecule& m) { return m.fingerprint.has_value(); });
  if (complete) return table;
  const fs::path cache_path = c.fingerprint_cache.empty() ? default_fingerprint_cache(c) : c.fingerprint_cache;
  if (fs::exists(cache_path)) {
    const auto cache = read_fingerprint_cache(cache_path);
    if (cache_current(cache, cache_path, c, table)) {
      for (std::size_t i = 0; i < cache.records.size(); ++i)
        if (!table.molecules[i].fingerprint) table.molecules[i].fingerprint = cache.records[i].fingerprint;
      log << "fingerprints: using cache " << cache_path.string() << "\n";
      return table;
    }
    log << "fingerprints: cache " << cache_path.string() << " is stale, recomputing\n";
  }
  return data::load_task_table(c.dataset, {c.radius, c.nbits, true});
}

data::SplitSpec load_split(const RunConfig& c, const data::TaskTable& table) {
  data::SplitConfig cfg = c.split;
  if (!c.dtrain_ids.empty()) cfg.dtrain = data::read_id_list(c.dtrain_ids);
  if (!c.dtest_ids.empty()) cfg.dtest = data::read_id_list(c.dtest_ids);
  return data::make_splits(table, cfg, c.seed);
}

cnp::Architecture architecture_for(const RunConfig& c, const Workspace& ws) {
  cnp::Architecture a = c.architecture;
  a.nbits = ws.features.rows();
  return a;
}

cnp::CnpModel load_model(const RunConfig& c, const Workspace& ws) {
  auto loaded = cnp::load_checkpoint(c.checkpoint);
  if (loaded.model.architecture().nbits != ws.features.rows())
    config_error("checkpoint", "model expects " + std::to_string(loaded.model.architecture().nbits) +
                                   "-bit fingerprints, dataset has " + std::to_string(ws.features.rows()));
  return std::move(loaded.model);
}

// --- outputs -------------------------------------------------------------------

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
}

void write_reports(const fs::path& dir, const std::string& stem, const std::vector<MetricRecord>& records,
                   std::vector<std::string>& outputs) {
  emit_report(records, dir / (stem + ".csv"), ReportFormat::Csv);
  emit_report(records, dir / (stem + ".json"), ReportFormat::Json);
  outputs.push_back(stem + ".csv");
  outputs.push_back(stem + ".json");
}

void write_manifest(const fs::path& dir, Command cmd, const RunConfig& c, const std::vector<std::string>& outputs) {
  json m;
  m["command"] = std::string(to_string(cmd));
  m["config_hash"] = c.hash;
  m["seed"] = c.seed;
  m["config"] = json::parse(c.canonical);
  m["outputs"] = outputs;
  m["versions"] = {{"molnp", MOLNP_VERSION},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

struct TrainLog {
  std::ostringstream csv;
  TrainLog() { csv << "epoch,split,metric,value\n"; }
  void add(int epoch, const std::string& split, const std::string& metric, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    csv << epoch << ',' << split << ',' << metric << ',' << buf << '\n';
  }
};

// --- commands ------------------------------------------------------------------

void cmd_fingerprint(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const fs::path cache_path = c.fingerprint_cache.empty() ? default_fingerprint_cache(c) : c.fingerprint_cache;
  const auto ids_only = data::load_task_table(c.dataset, {c.radius, c.nbits, false});
  if (fs::exists(cache_path)) {
    const auto cache = read_fingerprint_cache(cache_path);
    if (cache_current(cache, cache_path, c, ids_only)) {
      log << "fingerprints: " << cache_path.string() << " is up to date (" << cache.records.size() << " records)\n";
      outputs.push_back(cache_path.string());
      return;
    }
  }
  const auto table = data::load_task_table(c.dataset, {c.radius, c.nbits, true});
  FingerprintCache cache;
  cache.radius = c.radius;
  cache.nbits = c.nbits;
  for (const auto& m : table.molecules) {
    if (m.fingerprint->nbits() != c.nbits)
      throw Error(ErrorKind::LengthMismatch, "molecule '" + m.id + "' carries a " + std::to_string(m.fingerprint->nbits()) +
                                                 "-bit fingerprint, configured " + std::to_string(c.nbits));
    cache.records.push_back({m.id, *m.fingerprint});
  }
  if (cache_path.has_parent_path()) fs::create_directories(cache_path.parent_path());
  write_fingerprint_cache(cache_path, cache);
  log << "fingerprints: wrote " << cache.records.size() << " records to " << cache_path.string() << "\n";
  outputs.push_back(cache_path.string());
  (void)dir;
}

void cmd_train(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto table = load_dataset(c, log);
  const Workspace ws(table, load_split(c, table));
  Rng init(derive_seed(c.seed, {0}));
  auto model = cnp::CnpModel::create(architecture_for(c, ws), init);
  fs::create_directories(dir / "checkpoints");
  std::vector<int> marks = c.train_checkpoints;
  marks.push_back(c.train.epochs);
  TrainLog train_log;
  auto save = [&](int epoch, const cnp::CnpModel& m) {
    const std::string name = "checkpoints/cnp_epoch" + std::to_string(epoch) + ".ckpt";
    cnp::save_checkpoint(dir / name, m, {c.radius, c.seed, epoch});
    outputs.push_back(name);
  };
  const int every = std::max(1, c.train.epochs / 20);
  train_cnp(model, ws, ws.split.ftrain, c.train, derive_seed(c.seed, {1}),
            [&](int epoch, double loss, const cnp::CnpModel& m) {
              train_log.add(epoch, "train", "loss", loss);
              if (epoch % every == 0 || epoch == c.train.epochs) log << "train: epoch " << epoch << " loss " << loss << "\n";
              if (std::count(marks.begin(), marks.end(), epoch)) save(epoch, m);
            });
  if (c.train.epochs == 0) save(0, model);
  write_text(dir / "train_log.csv", train_log.csv.str());
  outputs.push_back("train_log.csv");
}

void cmd_calibrate(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto table = load_dataset(c, log);
  const Workspace ws(table, load_split(c, table));
  CalibrationConfig cfg;
  cfg.architecture = architecture_for(c, ws);
  cfg.train = c.train;
  cfg.checkpoints = c.calibration_checkpoints;
  cfg.eval_context = c.eval_context;
  cfg.seed = c.seed;
  cfg.checkpoint_dir = dir / "checkpoints";
  fs::create_directories(*cfg.checkpoint_dir);
  const auto res = run_calibration(ws, cfg);
  TrainLog train_log;
  for (std::size_t e = 0; e < res.log.losses.size(); ++e) train_log.add(static_cast<int>(e + 1), "train", "loss", res.log.losses[e]);
  for (const auto& r : res.records)
    if (r.function_id == kAllFunctions) train_log.add(static_cast<int>(r.x), r.tag.substr(r.tag.find('/') + 1), std::string(to_string(r.metric)), r.value);
  write_text(dir / "train_log.csv", train_log.csv.str());
  outputs.push_back("train_log.csv");
  for (int e : c.calibration_checkpoints) outputs.push_back("checkpoints/cnp_epoch" + std::to_string(e) + ".ckpt");
  write_reports(dir, "calibration", res.records, outputs);
  std::vector<MetricRecord> all;
  std::copy_if(res.records.begin(), res.records.end(), std::back_inserter(all),
               [](const MetricRecord& r) { return r.function_id == kAllFunctions; });
  write_svg(all, MetricName::AvgLogProb, dir / "calibration_avg_log_prob.svg", {.title = "avg_log_prob by epoch"});
  write_svg(all, MetricName::R2, dir / "calibration_r2.svg", {.title = "r2 by epoch"});
  outputs.push_back("calibration_avg_log_prob.svg");
  outputs.push_back("calibration_r2.svg");
  log << "calibrate: " << res.records.size() << " records\n";
}

void cmd_fewshot(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto table = load_dataset(c, log);
  const Workspace ws(table, load_split(c, table));
  std::optional<cnp::CnpModel> model;
  if (needs_model(c, Command::Fewshot)) model = load_model(c, ws);
  std::vector<baselines::PredictionRow> predictions;
  const auto recs = run_fewshot(ws, model ? &*model : nullptr, c.fewshot, &predictions);
  write_reports(dir, "fewshot", recs, outputs);
  std::ostringstream pred_csv;
  baselines::write_predictions(pred_csv, predictions);
  write_text(dir / "predictions.csv", pred_csv.str());
  outputs.push_back("predictions.csv");
  std::vector<MetricRecord> all;
  std::copy_if(recs.begin(), recs.end(), std::back_inserter(all),
               [](const MetricRecord& r) { return r.function_id == kAllFunctions; });
  write_svg(all, MetricName::R2, dir / "fewshot_r2.svg", {.title = "r2 by context size"});
  outputs.push_back("fewshot_r2.svg");
  log << "fewshot: " << recs.size() << " records\n";
}

void cmd_generalize(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto table = load_dataset(c, log);
  const auto split = load_split(c, table);
  GeneralizationConfig cfg;
  cfg.architecture = c.architecture;
  cfg.architecture.nbits = static_cast<Index>(table.molecules.front().fingerprint->nbits());
  cfg.train = c.train;
  cfg.functions = c.generalize_functions;
  cfg.eval_context = c.eval_context;
  cfg.seed = c.seed;
  const auto grid = run_generalization(table, split, cfg);
  std::ostringstream text;
  write_grid(text, grid);
  write_text(dir / "grid.txt", text.str());
  outputs.push_back("grid.txt");
  write_reports(dir, "generalization", grid.records, outputs);
  log << text.str();
}

void cmd_bo(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto table = load_dataset(c, log);
  const auto split = load_split(c, table);
  std::vector<std::string> pool;
  if (!c.bo.pool_ids.empty()) {
    pool = data::read_id_list(c.bo.pool_ids);
  } else {
    pool = split.dtest;
    std::sort(pool.begin(), pool.end());
    if (c.bo.pool_size > 0 && c.bo.pool_size < pool.size()) pool.resize(c.bo.pool_size);
  }
  std::optional<cnp::CnpModel> model;
  if (needs_model(c, Command::Bo)) {
    const Workspace ws(table, split);
    model = load_model(c, ws);
  }
  std::vector<std::uint64_t> seeds;
  for (std::size_t k = 0; k < c.bo.n_seeds; ++k) seeds.push_back(derive_seed(c.seed, {k}));
  std::vector<BoTrace> traces;
  for (Strategy s : c.bo.strategies) {
    AcquisitionConfig acq{s, c.bo.beta, c.bo.n_init, c.bo.n_iterations};
    auto t = run_bo(table, pool, c.bo.objective, acq, model ? &*model : nullptr, seeds);
    std::vector<double> draws;
    for (const auto& tr : t) draws.push_back(static_cast<double>(tr.draws_to_minimum));
    log << "bo: " << to_string(s) << " median draws to pool minimum " << median(draws) << "\n";
    traces.insert(traces.end(), t.begin(), t.end());
  }
  std::ostringstream csv;
  write_bo_traces(csv, traces);
  write_text(dir / "bo_traces.csv", csv.str());
  outputs.push_back("bo_traces.csv");
  const auto recs = bo_records(traces, c.bo.objective);
  write_reports(dir, "bo", recs, outputs);
  write_svg(recs, MetricName::BestSoFar, dir / "bo_best_so_far.svg", {.title = "best score found"});
  outputs.push_back("bo_best_so_far.svg");
}

void cmd_synth(const RunConfig& c, const fs::path& dir, std::vector<std::string>& outputs, std::ostream& log) {
  const auto family = data::synthetic_task_family(c.synth);
  data::save_task_table(family.table, dir / "synthetic.tsv");
  outputs.push_back("synthetic.tsv");
  log << "synth: " << family.table.num_molecules() << " molecules x " << family.table.num_functions() << " functions\n";
}

}  // namespace

std::string_view to_string(Command c) {
  switch (c) {
    case Command::Fingerprint: return "fingerprint";
    case Command::Train: return "train";
    case Command::Calibrate: return "calibrate";
    case Command::Fewshot: return "fewshot";
    case Command::Generalize: return "generalize";
    case Command::Bo: return "bo";
    case Command::Synth: return "synth";
  }
  return "?";
}

Command command_from_string(std::string_view s) {
  for (Command c : {Command::Fingerprint, Command::Train, Command::Calibrate, Command::Fewshot, Command::Generalize,
                    Command::Bo, Command::Synth})
    if (to_string(c) == s) return c;
  throw Error(ErrorKind::ConfigError, "unknown command '" + std::string(s) + "'");
}

std::string default_config_json() { return defaults().dump(2); }

RunConfig parse_run_config(const std::string& json_text, const std::vector<std::string>& overrides) {
  json tree = defaults();
  if (!json_text.empty()) {
    json user = json::parse(json_text, nullptr, false);
    if (user.is_discarded()) throw Error(ErrorKind::ConfigError, "config is not valid JSON");
    merge(tree, user, "");
  }
  for (const auto& o : overrides) merge(tree, parse_override(o), "");
  return typed(tree);
}

RunConfig load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides) {
  std::string text;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw Error(ErrorKind::ConfigError, "cannot read config '" + file->string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  try {
    return parse_run_config(text, overrides);
  } catch (const Error& e) {
    if (file && e.kind() == ErrorKind::ConfigError) throw Error(ErrorKind::ConfigError, file->string() + ": " + e.what());
    throw;
  }
}

void validate_for(const RunConfig& c, Command cmd) {
  if (cmd == Command::Synth) return;
  require_file(c.dataset, "dataset");
  if (!c.dtrain_ids.empty()) require_file(c.dtrain_ids, "split.dtrain_ids");
  if (!c.dtest_ids.empty()) require_file(c.dtest_ids, "split.dtest_ids");
  if (cmd == Command::Bo && !c.bo.pool_ids.empty()) require_file(c.bo.pool_ids, "bo.pool_ids");
  if (needs_model(c, cmd)) {
    if (c.checkpoint.empty())
      throw Error(ErrorKind::MissingCheckpoint, "field 'checkpoint': " + std::string(to_string(cmd)) + " needs a trained model");
    if (!fs::is_regular_file(c.checkpoint))
      throw Error(ErrorKind::MissingCheckpoint, "field 'checkpoint': file '" + c.checkpoint.string() + "' does not exist");
  }
}

fs::path output_directory(const RunConfig& c, Command cmd) { return c.output_dir / std::string(to_string(cmd)) / c.hash; }

fs::path default_fingerprint_cache(const RunConfig& c) {
  return c.output_dir / "fingerprints" /
         (c.dataset.stem().string() + "_r" + std::to_string(c.radius) + "_n" + std::to_string(c.nbits) + ".ecfp");
}

fs::path run_command(Command cmd, const RunConfig& c, std::ostream& log) {
  validate_for(c, cmd);
  const fs::path dir = output_directory(c, cmd);
  fs::create_directories(dir);
  std::vector<std::string> outputs;
  switch (cmd) {
    case Command::Fingerprint: cmd_fingerprint(c, dir, outputs, log); break;
    case Command::Train: cmd_train(c, dir, outputs, log); break;
    case Command::Calibrate: cmd_calibrate(c, dir, outputs, log); break;
    case Command::Fewshot: cmd_fewshot(c, dir, outputs, log); break;
    case Command::Generalize: cmd_generalize(c, dir, outputs, log); break;
    case Command::Bo: cmd_bo(c, dir, outputs, log); break;
    case Command::Synth: cmd_synth(c, dir, outputs, log); break;
  }
  write_manifest(dir, cmd, c, outputs);
  return dir;
}

int exit_code(const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  if (!err) return 1;
  switch (err->kind()) {
    case ErrorKind::ConfigError:
    case ErrorKind::MissingCheckpoint:
      return 2;
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::NonPositiveVariance:
    case ErrorKind::ConstantTruth:
      return 4;
    default:
      return 3;
  }
}

}  // namespace molnp::cli
