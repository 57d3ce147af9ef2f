#include "molnp/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "molnp/errors.hpp"
#include "molnp/nn.hpp"

namespace molnp::experiments {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// First k entries of a uniformly shuffled copy (partial Fisher-Yates).
std::vector<Index> draw_subset(const std::vector<Index>& items, std::size_t k, Rng& rng) {
  std::vector<Index> pool = items;
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.uniform_index(pool.size() - i)]);
  pool.resize(k);
  return pool;
}

std::vector<Index> iota_positions(std::size_t n) {
  std::vector<Index> v(n);
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

cnp::FunctionData subset(const cnp::FunctionData& f, std::vector<Index> positions) {
  std::sort(positions.begin(), positions.end());
  cnp::FunctionData out{f.function_id, {}, Vector(static_cast<Index>(positions.size()))};
  for (std::size_t i = 0; i < positions.size(); ++i) {
    out.columns.push_back(f.columns[static_cast<std::size_t>(positions[i])]);
    out.y(static_cast<Index>(i)) = f.y(positions[i]);
  }
  return out;
}

std::vector<Fingerprint> fingerprints_of(const data::TaskTable& table, const std::vector<Index>& rows) {
  std::vector<Fingerprint> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(*table.molecules[static_cast<std::size_t>(r)].fingerprint);
  return out;
}

MetricRecord aggregate_record(std::string tag, std::string model, double x, MetricName metric,
                              const std::vector<double>& values, std::uint64_t seed) {
  return {std::move(tag), std::string(kAllFunctions), std::move(model), x, metric, mean_of(values), sd_of(values), seed};
}

}  // namespace

double mean_of(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double sd_of(const std::vector<double>& values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean_of(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size()));
}

double median(std::vector<double> values) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double r2(const Vector& y_true, const Vector& y_pred) {
  if (y_true.size() != y_pred.size())
    throw Error(ErrorKind::LengthMismatch, "r2 inputs have lengths " + std::to_string(y_true.size()) + " and " +
                                               std::to_string(y_pred.size()));
  if (y_true.size() == 0) throw Error(ErrorKind::LengthMismatch, "r2 needs at least one point");
  const double mean = y_true.mean();
  const double ss_tot = (y_true.array() - mean).square().sum();
  if (ss_tot == 0.0) throw Error(ErrorKind::ConstantTruth, "r2 undefined for constant truth");
  const double ss_res = (y_true - y_pred).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

double avg_log_prob(const cnp::PredictiveDistribution& dist, const Vector& y_true) {
  if (dist.means.size() != y_true.size() || dist.variances.size() != y_true.size())
    throw Error(ErrorKind::LengthMismatch, "predictive distribution and observations differ in length");
  if (y_true.size() == 0) throw Error(ErrorKind::LengthMismatch, "avg_log_prob needs at least one point");
  double total = 0.0;
  for (Index i = 0; i < y_true.size(); ++i) total -= nn::gaussian_nll(dist.means(i), dist.variances(i), y_true(i));
  return total / static_cast<double>(y_true.size());
}

double rmse(const Vector& y_true, const Vector& y_pred) {
  if (y_true.size() != y_pred.size() || y_true.size() == 0)
    throw Error(ErrorKind::LengthMismatch, "rmse inputs must have equal non-zero length");
  return std::sqrt((y_true - y_pred).squaredNorm() / static_cast<double>(y_true.size()));
}

std::string_view to_string(MetricName m) {
  switch (m) {
    case MetricName::R2: return "r2";
    case MetricName::AvgLogProb: return "avg_log_prob";
    case MetricName::Rmse: return "rmse";
    case MetricName::BestSoFar: return "best_so_far";
  }
  return "?";
}

MetricName metric_from_string(std::string_view s) {
  for (auto m : {MetricName::R2, MetricName::AvgLogProb, MetricName::Rmse, MetricName::BestSoFar})
    if (to_string(m) == s) return m;
  throw Error(ErrorKind::ConfigError, "unknown metric '" + std::string(s) + "'");
}

std::vector<MetricRecord> sorted_records(std::vector<MetricRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const MetricRecord& a, const MetricRecord& b) {
    return std::tie(a.tag, a.function_id, a.model, a.x, a.seed, a.metric) <
           std::tie(b.tag, b.function_id, b.model, b.x, b.seed, b.metric);
  });
  return records;
}

void write_report(std::ostream& out, const std::vector<MetricRecord>& records, ReportFormat format) {
  const auto sorted = sorted_records(records);
  if (format == ReportFormat::Csv) {
    out << "tag,function_id,model,x,metric,value,dispersion,seed\n";
    for (const auto& r : sorted) {
      out << r.tag << ',' << r.function_id << ',' << r.model << ',' << fmt(r.x) << ',' << to_string(r.metric) << ','
          << fmt(r.value) << ',' << (r.dispersion ? fmt(*r.dispersion) : std::string()) << ',' << r.seed << '\n';
    }
    return;
  }
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : sorted) {
    nlohmann::ordered_json j;
    j["tag"] = r.tag;
    j["function_id"] = r.function_id;
    j["model"] = r.model;
    j["x"] = r.x;
    j["metric"] = std::string(to_string(r.metric));
    j["value"] = r.divergent() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.value);
    j["divergent"] = r.divergent();
    j["dispersion"] = r.dispersion && std::isfinite(*r.dispersion) ? nlohmann::ordered_json(*r.dispersion)
                                                                     : nlohmann::ordered_json(nullptr);
    j["seed"] = r.seed;
    arr.push_back(std::move(j));
  }
  out << arr.dump(2) << '\n';
}

void emit_report(const std::vector<MetricRecord>& records, const std::filesystem::path& path, ReportFormat format) {
  if (records.empty()) throw Error(ErrorKind::IoFailure, "no records to write to '" + path.string() + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
  write_report(out, records, format);
  if (!out) throw Error(ErrorKind::IoFailure, "write failed for '" + path.string() + "'");
}

std::vector<MetricRecord> parse_json_report(const std::string& text) {
  std::vector<MetricRecord> out;
  try {
    for (const auto& j : nlohmann::json::parse(text)) {
      MetricRecord r;
      r.tag = j.at("tag").get<std::string>();
      r.function_id = j.at("function_id").get<std::string>();
      r.model = j.at("model").get<std::string>();
      r.x = j.at("x").get<double>();
      r.metric = metric_from_string(j.at("metric").get<std::string>());
      r.value = j.at("value").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("value").get<double>();
      if (j.contains("dispersion") && !j.at("dispersion").is_null()) r.dispersion = j.at("dispersion").get<double>();
      r.seed = j.at("seed").get<std::uint64_t>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::IoFailure, std::string("malformed report: ") + e.what());
  }
  return out;
}

std::vector<MetricRecord> read_json_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_json_report(ss.str());
}

void write_svg(const std::vector<MetricRecord>& records, MetricName metric, const std::filesystem::path& path,
               const SvgOptions& options) {
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const auto& r : sorted_records(records)) {
    if (r.metric != metric || !std::isfinite(r.value)) continue;
    series[r.tag + " " + r.function_id + " " + r.model].emplace_back(r.x, r.value);
    xmin = std::min(xmin, r.x);
    xmax = std::max(xmax, r.x);
    ymin = std::min(ymin, r.value);
    ymax = std::max(ymax, r.value);
  }
  if (series.empty()) throw Error(ErrorKind::IoFailure, "no finite '" + std::string(to_string(metric)) + "' values to plot");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) ymax = ymin + 1.0;

  const double left = 60, right = 200, top = 30, bottom = 40;
  const double w = options.width - left - right;
  const double h = options.height - top - bottom;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * w; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * h; };
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path.string() + "'");
  char buf[256];
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << options.width << "\" height=\"" << options.height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!options.title.empty()) out << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << options.title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%.1f %.1f V%.1f H%.1f\" stroke=\"black\" fill=\"none\"/>\n", left, top,
                top + h, left + w);
  out << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\">%.4g</text><text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.4g</text>\n",
                left, top + h + 15, xmin, left + w, top + h + 15, xmax);
  out << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.4g</text><text x=\"%.1f\" y=\"%.1f\" "
                "text-anchor=\"end\">%.4g</text>\n",
                left - 4, top + 4, ymax, left - 4, top + h, ymin);
  out << buf;
  out << "<text x=\"" << left + w / 2 << "\" y=\"" << options.height - 8 << "\">x</text>\n";
  std::size_t k = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[k % 10];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" points=\"";
    for (const auto& [x, y] : pts) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x), py(y));
      out << buf;
    }
    out << "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" fill=\"%s\">", left + w + 8, top + 14.0 * static_cast<double>(k), color);
    out << buf << name << "</text>\n";
    ++k;
  }
  out << "</svg>\n";
}

Workspace::Workspace(const data::TaskTable& t, data::SplitSpec s)
    : table(&t), split(std::move(s)), features(data::fingerprint_features(t)) {
  split.validate(t);
  auto rows_of = [&](const std::vector<std::string>& ids) {
    std::vector<Index> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) rows.push_back(*t.find_molecule(id));
    std::sort(rows.begin(), rows.end(), [&](Index a, Index b) {
      return t.molecules[static_cast<std::size_t>(a)].id < t.molecules[static_cast<std::size_t>(b)].id;
    });
    return rows;
  };
  dtrain_rows = rows_of(split.dtrain);
  dtest_rows = rows_of(split.dtest);
}

cnp::FunctionData Workspace::observations(const std::string& function, std::span<const Index> rows) const {
  const Index col = table->function_index(function);
  cnp::FunctionData out{function, {}, {}};
  std::vector<double> ys;
  for (Index r : rows) {
    if (!table->has_score(r, col)) continue;
    out.columns.push_back(r);
    ys.push_back(table->scores(r, col));
  }
  out.y = Eigen::Map<const Vector>(ys.data(), static_cast<Index>(ys.size()));
  return out;
}

std::vector<cnp::FunctionData> Workspace::training_functions() const {
  std::vector<cnp::FunctionData> out;
  for (const auto& f : split.ftrain) out.push_back(observations(f, dtrain_rows));
  return out;
}

cnp::TrainingLog train_cnp(cnp::CnpModel& model, const Workspace& ws, const std::vector<std::string>& functions,
                           const cnp::TrainConfig& config, std::uint64_t seed, const cnp::EpochCallback& callback) {
  std::vector<cnp::FunctionData> data;
  for (const auto& f : functions) data.push_back(ws.observations(f, ws.dtrain_rows));
  model.set_scaling(cnp::pooled_scaling(data));
  Rng rng(seed);
  return cnp::train(model, ws.features, data, config, rng, callback);
}

std::vector<MetricRecord> evaluate_quadrant(const cnp::CnpModel& model, const Workspace& ws, std::string_view quadrant,
                                            Index eval_context, double x, std::uint64_t seed) {
  const auto q = std::find(kQuadrants.begin(), kQuadrants.end(), quadrant);
  if (q == kQuadrants.end()) throw Error(ErrorKind::ConfigError, "unknown quadrant '" + std::string(quadrant) + "'");
  const auto qi = static_cast<std::uint64_t>(q - kQuadrants.begin());
  const bool test_functions = qi >= 2;
  const bool test_molecules = qi % 2 == 1;
  const auto& functions = test_functions ? ws.split.ftest : ws.split.ftrain;
  const std::string tag = "calibration/" + std::string(quadrant);

  std::vector<MetricRecord> out;
  std::vector<double> r2s, lps;
  for (const auto& f : functions) {
    const auto train = ws.observations(f, ws.dtrain_rows);
    const std::size_t o = train.columns.size();
    Rng rng(derive_seed(seed, {name_hash(f), qi}));
    cnp::FunctionData context, target;
    if (test_molecules) {
      const std::size_t c = std::min<std::size_t>(static_cast<std::size_t>(eval_context), o);
      if (c == 0) continue;
      context = subset(train, draw_subset(iota_positions(o), c, rng));
      target = ws.observations(f, ws.dtest_rows);
    } else {
      if (o < 3) continue;
      const std::size_t c = std::min<std::size_t>(static_cast<std::size_t>(eval_context), o - 2);
      std::vector<Index> order = draw_subset(iota_positions(o), o, rng);
      context = subset(train, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(c)});
      target = subset(train, {order.begin() + static_cast<std::ptrdiff_t>(c), order.end()});
    }
    if (target.columns.size() < 2) continue;
    const auto dist = cnp::predict(model, cnp::gather_columns(ws.features, context.columns), context.y,
                                   cnp::gather_columns(ws.features, target.columns));
    double r = std::numeric_limits<double>::quiet_NaN();
    try {
      r = r2(target.y, dist.means);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ConstantTruth) throw;
      continue;
    }
    const double lp = avg_log_prob(dist, target.y);
    out.push_back({tag, f, "cnp", x, MetricName::R2, r, std::nullopt, seed});
    out.push_back({tag, f, "cnp", x, MetricName::AvgLogProb, lp, std::nullopt, seed});
    r2s.push_back(r);
    lps.push_back(lp);
  }
  if (!r2s.empty()) {
    out.push_back(aggregate_record(tag, "cnp", x, MetricName::R2, r2s, seed));
    out.push_back(aggregate_record(tag, "cnp", x, MetricName::AvgLogProb, lps, seed));
  }
  return out;
}

CalibrationResult run_calibration(const Workspace& ws, const CalibrationConfig& config) {
  std::vector<int> checkpoints = config.checkpoints;
  std::sort(checkpoints.begin(), checkpoints.end());
  checkpoints.erase(std::unique(checkpoints.begin(), checkpoints.end()), checkpoints.end());
  if (checkpoints.empty() || checkpoints.front() < 0)
    throw Error(ErrorKind::ConfigError, "checkpoints must be a non-empty list of non-negative epochs");

  Rng init(derive_seed(config.seed, {0}));
  auto model = cnp::CnpModel::create(config.architecture, init);
  const std::uint64_t eval_seed = derive_seed(config.seed, {2});
  CalibrationResult result;

  auto record = [&](int epoch, const cnp::CnpModel& m) {
    for (auto q : kQuadrants) {
      auto recs = evaluate_quadrant(m, ws, q, config.eval_context, epoch, eval_seed);
      for (auto& r : recs) r.seed = config.seed;
      result.records.insert(result.records.end(), recs.begin(), recs.end());
    }
    if (config.checkpoint_dir) {
      std::filesystem::create_directories(*config.checkpoint_dir);
      cnp::save_checkpoint(*config.checkpoint_dir / ("cnp_epoch" + std::to_string(epoch) + ".ckpt"), m,
                           {3, config.seed, epoch});
    }
  };

  cnp::TrainConfig train = config.train;
  train.epochs = checkpoints.back();
  std::size_t next = 0;
  std::vector<cnp::FunctionData> data = ws.training_functions();
  model.set_scaling(cnp::pooled_scaling(data));
  if (checkpoints[next] == 0) {
    record(0, model);
    ++next;
  }
  Rng rng(derive_seed(config.seed, {1}));
  result.log = cnp::train(model, ws.features, data, train, rng, [&](int epoch, double, const cnp::CnpModel& m) {
    if (next < checkpoints.size() && checkpoints[next] == epoch) {
      record(epoch, m);
      ++next;
    }
  });
  return result;
}

std::vector<MetricRecord> run_fewshot(const Workspace& ws, const cnp::CnpModel* model, const FewshotConfig& config,
                                      std::vector<baselines::PredictionRow>* predictions) {
  const auto wants = [&](std::string_view m) {
    return std::find(config.models.begin(), config.models.end(), m) != config.models.end();
  };
  for (const auto& m : config.models) {
    static const std::vector<std::string> known{"cnp", "knn", "fss", "rf", "nn", "finetuned_nn"};
    if (std::find(known.begin(), known.end(), m) == known.end())
      throw Error(ErrorKind::ConfigError, "unknown few-shot model '" + m + "'");
  }
  if (wants("cnp") && !model) throw Error(ErrorKind::MissingCheckpoint, "few-shot CNP evaluation needs a trained model");
  if (config.repeats == 0) throw Error(ErrorKind::ConfigError, "repeats must be positive");

  std::optional<baselines::MultiOutputNet> pretrained;
  if (wants("finetuned_nn")) {
    const auto train_x = cnp::gather_columns(ws.features, ws.dtrain_rows);
    Eigen::MatrixXd y(static_cast<Index>(ws.dtrain_rows.size()), static_cast<Index>(ws.split.ftrain.size()));
    for (std::size_t f = 0; f < ws.split.ftrain.size(); ++f) {
      const Index col = ws.table->function_index(ws.split.ftrain[f]);
      for (std::size_t i = 0; i < ws.dtrain_rows.size(); ++i)
        y(static_cast<Index>(i), static_cast<Index>(f)) = ws.table->scores(ws.dtrain_rows[i], col);
    }
    pretrained = baselines::pretrain(train_x, y, ws.split.ftrain, config.finetune, derive_seed(config.seed, {7}));
  }

  const std::string tag = "fewshot";
  std::vector<MetricRecord> out;
  std::map<std::pair<std::string, Index>, std::vector<double>> per_function_means;
  for (std::size_t fi = 0; fi < ws.split.ftest.size(); ++fi) {
    const auto& f = ws.split.ftest[fi];
    const auto train = ws.observations(f, ws.dtrain_rows);
    const auto test = ws.observations(f, ws.dtest_rows);
    if (test.columns.size() < 2) throw Error(ErrorKind::InsufficientObservations, "function '" + f + "' has fewer than 2 dtest scores");
    const auto test_x = cnp::gather_columns(ws.features, test.columns);
    const auto test_fps = fingerprints_of(*ws.table, test.columns);
    const std::size_t o = train.columns.size();

    for (Index m : config.context_sizes) {
      if (m < 1 || static_cast<std::size_t>(m) > o)
        throw Error(ErrorKind::InsufficientObservations, "context size " + std::to_string(m) + " unavailable for '" + f +
                                                             "' with " + std::to_string(o) + " dtrain scores");
      Rng rng(derive_seed(config.seed, {fi, static_cast<std::uint64_t>(m)}));
      const bool full = static_cast<std::size_t>(m) == o;
      std::vector<cnp::FunctionData> subsets;
      const std::size_t n_subsets = full ? 1 : config.repeats;
      for (std::size_t r = 0; r < n_subsets; ++r)
        subsets.push_back(subset(train, draw_subset(iota_positions(o), static_cast<std::size_t>(m), rng)));
      const auto& s0 = subsets.front();
      const auto s0_x = cnp::gather_columns(ws.features, s0.columns);
      const auto s0_fps = fingerprints_of(*ws.table, s0.columns);

      auto keep = [&](const std::string& name, const Vector& pred, const Vector* var) {
        if (!predictions) return;
        for (Index i = 0; i < pred.size(); ++i)
          predictions->push_back({f, ws.table->molecules[static_cast<std::size_t>(test.columns[static_cast<std::size_t>(i)])].id,
                                  name, static_cast<std::size_t>(m), pred(i),
                                  var ? std::optional<double>((*var)(i)) : std::nullopt});
      };
      auto score = [&](const Vector& pred) { return r2(test.y, pred); };
      for (const auto& name : config.models) {
        std::vector<double> values;
        if (name == "cnp") {
          for (const auto& s : subsets) {
            const auto dist = cnp::predict(*model, cnp::gather_columns(ws.features, s.columns), s.y, test_x);
            if (&s == &subsets.front()) keep(name, dist.means, &dist.variances);
            values.push_back(score(dist.means));
          }
        } else {
          for (std::size_t r = 0; r < config.repeats; ++r) {
            const std::uint64_t cell_seed = derive_seed(config.seed, {fi, static_cast<std::uint64_t>(m), r, name_hash(name)});
            Vector pred;
            if (name == "knn") {
              pred = baselines::knn_fit_predict(s0_fps, s0.y, test_fps, std::min<std::size_t>(config.knn_k, s0_fps.size()),
                                                baselines::Metric::Hamming);
            } else if (name == "fss") {
              pred = baselines::knn_fit_predict(s0_fps, s0.y, test_fps, 1, baselines::Metric::Tanimoto);
            } else if (name == "rf") {
              pred = baselines::rf_fit(s0_fps, s0.y, config.forest, cell_seed).predict(test_fps);
            } else if (name == "nn") {
              pred = baselines::nn_fit_predict(s0_x, s0.y, test_x, config.nn, cell_seed);
            } else {
              pred = baselines::finetune_predict(*pretrained, s0_x, s0.y, test_x, config.finetune, cell_seed);
            }
            if (r == 0) keep(name, pred, nullptr);
            values.push_back(score(pred));
          }
        }
        out.push_back({tag, f, name, static_cast<double>(m), MetricName::R2, mean_of(values), sd_of(values), config.seed});
        per_function_means[{name, m}].push_back(mean_of(values));
      }
    }
  }
  for (const auto& [key, values] : per_function_means)
    out.push_back(aggregate_record(tag, key.first, static_cast<double>(key.second), MetricName::R2, values, config.seed));
  return sorted_records(std::move(out));
}

GeneralizationGrid run_generalization(const data::TaskTable& table, const data::SplitSpec& split,
                                      const GeneralizationConfig& config) {
  std::vector<std::string> to_derive = split.ftrain;
  for (const auto& f : config.functions) {
    table.function_index(f);
    if (std::find(to_derive.begin(), to_derive.end(), f) == to_derive.end()) to_derive.push_back(f);
  }
  const auto derived = data::derive_modified_functions(table, to_derive);
  const Workspace ws(derived, split);
  const std::string suffix(data::kModifiedSuffix);

  std::vector<std::string> plain = split.ftrain;
  std::vector<std::string> mixed = split.ftrain;
  for (const auto& f : split.ftrain) mixed.push_back(f + suffix);

  std::array<cnp::CnpModel, 2> models = [&] {
    Rng a(derive_seed(config.seed, {0}));
    Rng b(derive_seed(config.seed, {0}));
    return std::array<cnp::CnpModel, 2>{cnp::CnpModel::create(config.architecture, a),
                                         cnp::CnpModel::create(config.architecture, b)};
  }();
  train_cnp(models[0], ws, plain, config.train, derive_seed(config.seed, {1}));
  train_cnp(models[1], ws, mixed, config.train, derive_seed(config.seed, {1}));

  GeneralizationGrid grid;
  static const std::array<std::string, 2> model_names{"trained-plain", "trained-mixed"};
  static const std::array<std::string, 2> column_tags{"generalization/plain-scores", "generalization/qed-modified-scores"};
  for (std::size_t row = 0; row < 2; ++row) {
    for (std::size_t col = 0; col < 2; ++col) {
      std::vector<double> values;
      for (std::size_t fi = 0; fi < config.functions.size(); ++fi) {
        const std::string f = config.functions[fi] + (col ? suffix : std::string());
        const auto train = ws.observations(f, ws.dtrain_rows);
        const auto test = ws.observations(f, ws.dtest_rows);
        Rng rng(derive_seed(config.seed, {3, fi, col}));
        const std::size_t c = std::min<std::size_t>(static_cast<std::size_t>(config.eval_context), train.columns.size());
        if (c == 0) throw Error(ErrorKind::InsufficientObservations, "function '" + f + "' has no dtrain scores");
        const auto ctx = subset(train, draw_subset(iota_positions(train.columns.size()), c, rng));
        const auto dist = cnp::predict(models[row], cnp::gather_columns(ws.features, ctx.columns), ctx.y,
                                       cnp::gather_columns(ws.features, test.columns));
        const double r = r2(test.y, dist.means);
        values.push_back(r);
        grid.records.push_back({column_tags[col], f, model_names[row], 0.0, MetricName::R2, r, std::nullopt, config.seed});
      }
      grid.mean(static_cast<Index>(row), static_cast<Index>(col)) = mean_of(values);
      grid.spread(static_cast<Index>(row), static_cast<Index>(col)) = sd_of(values);
      grid.records.push_back(aggregate_record(column_tags[col], model_names[row], 0.0, MetricName::R2, values, config.seed));
    }
  }
  grid.records = sorted_records(std::move(grid.records));
  return grid;
}

void write_grid(std::ostream& out, const GeneralizationGrid& grid) {
  char buf[96];
  out << "trained_on\\tested_on\t" << grid.columns[0] << '\t' << grid.columns[1] << '\n';
  for (Index r = 0; r < 2; ++r) {
    out << grid.rows[static_cast<std::size_t>(r)];
    for (Index c = 0; c < 2; ++c) {
      std::snprintf(buf, sizeof buf, "\t%.2f ± %.2f", grid.mean(r, c), grid.spread(r, c));
      out << buf;
    }
    out << '\n';
  }
}

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Random: return "random";
    case Strategy::Greedy: return "greedy";
    case Strategy::Lcb: return "lcb";
  }
  return "?";
}

Strategy strategy_from_string(std::string_view s) {
  for (auto v : {Strategy::Random, Strategy::Greedy, Strategy::Lcb})
    if (to_string(v) == s) return v;
  throw Error(ErrorKind::ConfigError, "unknown strategy '" + std::string(s) + "'");
}

CnpSurrogate::CnpSurrogate(const cnp::CnpModel& model, const FeatureMatrix& pool_x)
    : model_(&model), pool_x_(&pool_x), context_(model), candidates_(model, pool_x) {}

void CnpSurrogate::observe(Index pool_index, double y) {
  const Index cols[1] = {pool_index};
  context_.add(cnp::gather_columns(*pool_x_, cols), Vector::Constant(1, y));
}

cnp::PredictiveDistribution CnpSurrogate::predict() { return candidates_.predict(context_.representation()); }

BoTrace run_bo_trace(const std::vector<std::string>& pool_ids, const Vector& pool_scores, Surrogate* surrogate,
                     const AcquisitionConfig& acq, std::uint64_t seed) {
  const std::size_t n = pool_ids.size();
  if (static_cast<Index>(n) != pool_scores.size()) throw Error(ErrorKind::LengthMismatch, "pool ids and scores differ in length");
  if (acq.n_init == 0) throw Error(ErrorKind::ConfigError, "n_init must be positive");
  if (acq.n_init + acq.n_iterations > n)
    throw Error(ErrorKind::PoolExhausted, std::to_string(acq.n_init) + " + " + std::to_string(acq.n_iterations) +
                                              " selections exceed a pool of " + std::to_string(n));
  if (acq.strategy != Strategy::Random && !surrogate)
    throw Error(ErrorKind::MissingCheckpoint, "strategy '" + std::string(to_string(acq.strategy)) + "' needs a model");
  if (!(acq.beta >= 0.0)) throw Error(ErrorKind::ConfigError, "beta must be non-negative");

  BoTrace trace;
  trace.strategy = acq.strategy;
  trace.seed = seed;
  const double pool_min = pool_scores.minCoeff();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<bool> taken(n, false);
  double best = INFINITY;

  auto take = [&](std::size_t idx, std::size_t iteration) {
    taken[idx] = true;
    const double y = pool_scores(static_cast<Index>(idx));
    best = std::min(best, y);
    trace.steps.push_back({iteration, pool_ids[idx], y, best});
    if (trace.draws_to_minimum == 0 && y == pool_min) trace.draws_to_minimum = trace.steps.size();
    if (surrogate && acq.strategy != Strategy::Random) surrogate->observe(static_cast<Index>(idx), y);
  };

  Rng init_rng(derive_seed(seed, {0}));
  for (std::size_t i = 0; i < acq.n_init; ++i) {
    std::swap(order[i], order[i + init_rng.uniform_index(n - i)]);
    take(order[i], 0);
  }
  Rng random_rng(derive_seed(seed, {1}));
  for (std::size_t it = 1; it <= acq.n_iterations; ++it) {
    std::size_t choice = n;
    if (acq.strategy == Strategy::Random) {
      const std::size_t i = acq.n_init + it - 1;
      std::swap(order[i], order[i + random_rng.uniform_index(n - i)]);
      choice = order[i];
    } else {
      const auto dist = surrogate->predict();
      const double beta = acq.strategy == Strategy::Lcb ? acq.beta : 0.0;
      double best_score = INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        if (taken[j]) continue;
        const double a = dist.means(static_cast<Index>(j)) - beta * std::sqrt(dist.variances(static_cast<Index>(j)));
        if (choice == n || a < best_score) {
          best_score = a;
          choice = j;
        }
      }
    }
    take(choice, it);
  }
  return trace;
}

std::vector<BoTrace> run_bo(const data::TaskTable& table, const std::vector<std::string>& pool, const std::string& objective,
                            const AcquisitionConfig& acquisition, const cnp::CnpModel* model,
                            const std::vector<std::uint64_t>& seeds) {
  const auto col = table.find_function(objective);
  if (!col) throw Error(ErrorKind::UnknownFunction, "objective '" + objective + "' is not in the table");
  std::vector<std::string> ids = pool;
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw Error(ErrorKind::InvalidSplit, "pool lists a molecule twice");
  std::vector<Index> rows;
  Vector scores(static_cast<Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto row = table.find_molecule(ids[i]);
    if (!row) throw Error(ErrorKind::InvalidSplit, "pool names unknown molecule '" + ids[i] + "'");
    if (!table.has_score(*row, *col))
      throw Error(ErrorKind::InsufficientObservations, "pool molecule '" + ids[i] + "' has no '" + objective + "' score");
    rows.push_back(*row);
    scores(static_cast<Index>(i)) = table.scores(*row, *col);
  }
  if (acquisition.n_init + acquisition.n_iterations > ids.size())
    throw Error(ErrorKind::PoolExhausted, "schedule of " + std::to_string(acquisition.n_init + acquisition.n_iterations) +
                                              " selections exceeds a pool of " + std::to_string(ids.size()));
  FeatureMatrix pool_x;
  if (acquisition.strategy != Strategy::Random) {
    if (!model) throw Error(ErrorKind::MissingCheckpoint, "strategy '" + std::string(to_string(acquisition.strategy)) + "' needs a model");
    pool_x = cnp::gather_columns(data::fingerprint_features(table), rows);
  }
  std::vector<BoTrace> traces;
  for (auto seed : seeds) {
    std::unique_ptr<CnpSurrogate> surrogate;
    if (acquisition.strategy != Strategy::Random) surrogate = std::make_unique<CnpSurrogate>(*model, pool_x);
    traces.push_back(run_bo_trace(ids, scores, surrogate.get(), acquisition, seed));
  }
  return traces;
}

void write_bo_traces(std::ostream& out, const std::vector<BoTrace>& traces) {
  out << "strategy,seed,iteration,molecule_id,true_score,best_so_far\n";
  for (const auto& t : traces)
    for (const auto& s : t.steps)
      out << to_string(t.strategy) << ',' << t.seed << ',' << s.iteration << ',' << s.molecule_id << ',' << fmt(s.true_score)
          << ',' << fmt(s.best_so_far) << '\n';
}

std::vector<MetricRecord> bo_records(const std::vector<BoTrace>& traces, const std::string& objective) {
  std::map<Strategy, std::vector<const BoTrace*>> by_strategy;
  for (const auto& t : traces) by_strategy[t.strategy].push_back(&t);
  std::vector<MetricRecord> out;
  for (const auto& [strategy, group] : by_strategy) {
    std::size_t len = group.front()->steps.size();
    for (const auto* t : group) len = std::min(len, t->steps.size());
    for (std::size_t k = 0; k < len; ++k) {
      std::vector<double> values;
      for (const auto* t : group) values.push_back(t->steps[k].best_so_far);
      out.push_back({"bo", objective, std::string(to_string(strategy)), static_cast<double>(k + 1), MetricName::BestSoFar,
                     mean_of(values), sd_of(values), 0});
    }
  }
  return out;
}

}  // namespace molnp::experiments
