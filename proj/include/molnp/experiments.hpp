#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "molnp/baselines.hpp"
#include "molnp/cnp.hpp"
#include "molnp/data.hpp"

namespace molnp::experiments {

using Eigen::Index;
using Vector = Eigen::VectorXd;
using cnp::FeatureMatrix;

/// 1 - SS_res / SS_tot. Throws ConstantTruth or LengthMismatch.
double r2(const Vector& y_true, const Vector& y_pred);
/// Mean Gaussian log density of the observations.
double avg_log_prob(const cnp::PredictiveDistribution& dist, const Vector& y_true);
double rmse(const Vector& y_true, const Vector& y_pred);

enum class MetricName { R2, AvgLogProb, Rmse, BestSoFar };
std::string_view to_string(MetricName m);
MetricName metric_from_string(std::string_view s);

struct MetricRecord {
  std::string tag;
  std::string function_id;
  std::string model;
  double x = 0.0;
  MetricName metric = MetricName::R2;
  double value = 0.0;
  std::optional<double> dispersion;
  std::uint64_t seed = 0;

  bool divergent() const { return !std::isfinite(value); }
  bool operator==(const MetricRecord&) const = default;
};

/// Function id used for records aggregated over functions.
inline constexpr std::string_view kAllFunctions = "ALL";

enum class ReportFormat { Csv, Json };

/// Sorted by (tag, function_id, model, x, seed, metric); input order breaks
/// remaining ties.
std::vector<MetricRecord> sorted_records(std::vector<MetricRecord> records);
void write_report(std::ostream& out, const std::vector<MetricRecord>& records, ReportFormat format);
/// Throws IoFailure; also rejects an empty record list.
void emit_report(const std::vector<MetricRecord>& records, const std::filesystem::path& path, ReportFormat format);
std::vector<MetricRecord> read_json_report(const std::filesystem::path& path);
std::vector<MetricRecord> parse_json_report(const std::string& text);

struct SvgOptions {
  int width = 720;
  int height = 420;
  std::string title;
};

/// Line chart of value against x, one series per (tag, function_id, model).
void write_svg(const std::vector<MetricRecord>& records, MetricName metric, const std::filesystem::path& path,
               const SvgOptions& options = {});

/// Table, split and fingerprint features bundled for the runners. Columns of
/// `features` are table rows.
struct Workspace {
  Workspace(const data::TaskTable& table, data::SplitSpec split);

  const data::TaskTable* table;
  data::SplitSpec split;
  FeatureMatrix features;
  std::vector<Index> dtrain_rows;
  std::vector<Index> dtest_rows;

  /// Observed scores of `function` on the given rows, in row order.
  cnp::FunctionData observations(const std::string& function, std::span<const Index> rows) const;
  std::vector<cnp::FunctionData> training_functions() const;
};

/// Pooled scaling over the training functions, then cnp::train.
cnp::TrainingLog train_cnp(cnp::CnpModel& model, const Workspace& ws, const std::vector<std::string>& functions,
                           const cnp::TrainConfig& config, std::uint64_t seed, const cnp::EpochCallback& callback = {});

struct CalibrationConfig {
  cnp::Architecture architecture;
  cnp::TrainConfig train;
  /// Epochs at which metrics are recorded; 0 means before training.
  std::vector<int> checkpoints{0, 100, 250, 500, 1000};
  /// Context points drawn from dtrain for every evaluation.
  Index eval_context = 256;
  std::uint64_t seed = 0;
  /// When set, the model at every checkpoint is saved as cnp_epoch<N>.ckpt.
  std::optional<std::filesystem::path> checkpoint_dir;
};

struct CalibrationResult {
  std::vector<MetricRecord> records;
  cnp::TrainingLog log;
};

inline constexpr std::array<std::string_view, 4> kQuadrants = {"ftrain-dtrain", "ftrain-dtest", "ftest-dtrain",
                                                               "ftest-dtest"};

/// Trains on (ftrain, dtrain) and records r2 and avg_log_prob per function and
/// aggregated (mean, sd across functions) on each quadrant. Records are tagged
/// "calibration/<quadrant>". dtest quadrants condition on eval_context dtrain
/// points; dtrain quadrants on eval_context points with the rest as targets.
CalibrationResult run_calibration(const Workspace& ws, const CalibrationConfig& config);

/// Evaluates one quadrant of a model. Exposed for the CLI and tests.
std::vector<MetricRecord> evaluate_quadrant(const cnp::CnpModel& model, const Workspace& ws, std::string_view quadrant,
                                            Index eval_context, double x, std::uint64_t seed);

struct FewshotConfig {
  std::vector<Index> context_sizes{5, 10, 25, 50, 100, 250, 1000};
  std::vector<std::string> models{"cnp", "knn", "fss", "rf", "nn", "finetuned_nn"};
  /// CNP context resamples and baseline training seeds.
  std::size_t repeats = 10;
  std::size_t knn_k = 5;
  baselines::ForestConfig forest;
  baselines::NnConfig nn;
  baselines::PretrainConfig finetune;
  std::uint64_t seed = 0;
};

/// For each ftest function and context size m: a fixed m-point dtrain subset
/// trains every baseline under `repeats` seeds, and the CNP conditions on
/// `repeats` resampled m-point subsets (the first equal to the baselines').
/// r2 on dtest per function (mean and sd over repeats) and over functions.
/// When `predictions` is given, the first repeat's dtest predictions are appended.
std::vector<MetricRecord> run_fewshot(const Workspace& ws, const cnp::CnpModel* model, const FewshotConfig& config,
                                      std::vector<baselines::PredictionRow>* predictions = nullptr);

struct GeneralizationConfig {
  cnp::Architecture architecture;
  cnp::TrainConfig train;
  std::vector<std::string> functions{"PARP1", "KIT", "F2"};
  Index eval_context = 256;
  std::uint64_t seed = 0;
};

struct GeneralizationGrid {
  std::array<std::string, 2> rows{"Plain scores", "Plain and QED-modified scores"};
  std::array<std::string, 2> columns{"Plain scores", "QED-modified scores"};
  Eigen::Matrix2d mean = Eigen::Matrix2d::Zero();
  Eigen::Matrix2d spread = Eigen::Matrix2d::Zero();
  std::vector<MetricRecord> records;
};

/// Trains one CNP on plain ftrain scores and one on plain plus modified ftrain
/// scores, then scores both on plain and modified versions of `functions`.
GeneralizationGrid run_generalization(const data::TaskTable& table, const data::SplitSpec& split,
                                      const GeneralizationConfig& config);
void write_grid(std::ostream& out, const GeneralizationGrid& grid);

enum class Strategy { Random, Greedy, Lcb };
std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view s);

struct AcquisitionConfig {
  Strategy strategy = Strategy::Lcb;
  double beta = 1.0;
  std::size_t n_init = 5;
  std::size_t n_iterations = 4995;
};

/// Model queried by the acquisition loop: observe selections, predict the pool.
class Surrogate {
 public:
  virtual ~Surrogate() = default;
  virtual void observe(Index pool_index, double y) = 0;
  virtual cnp::PredictiveDistribution predict() = 0;
};

/// CNP re-conditioned on the growing context, never retrained.
class CnpSurrogate : public Surrogate {
 public:
  CnpSurrogate(const cnp::CnpModel& model, const FeatureMatrix& pool_x);
  void observe(Index pool_index, double y) override;
  cnp::PredictiveDistribution predict() override;

 private:
  const cnp::CnpModel* model_;
  const FeatureMatrix* pool_x_;
  cnp::ContextAccumulator context_;
  cnp::CandidatePredictor candidates_;
};

struct BoStep {
  std::size_t iteration = 0;  // 0 for the initial molecules
  std::string molecule_id;
  double true_score = 0.0;
  double best_so_far = 0.0;
};

struct BoTrace {
  Strategy strategy = Strategy::Random;
  std::uint64_t seed = 0;
  std::vector<BoStep> steps;
  /// 1-based position of the pool minimum in the selection order (initial
  /// draws included); 0 if it was never selected.
  std::size_t draws_to_minimum = 0;
};

/// Pool order defines tie-breaking; run_bo passes it sorted by molecule id.
/// The initial molecules depend only on the seed.
BoTrace run_bo_trace(const std::vector<std::string>& pool_ids, const Vector& pool_scores, Surrogate* surrogate,
                     const AcquisitionConfig& acquisition, std::uint64_t seed);

/// One trace per seed over `pool` (molecule ids) for the objective function.
/// Throws UnknownFunction, PoolExhausted.
std::vector<BoTrace> run_bo(const data::TaskTable& table, const std::vector<std::string>& pool,
                            const std::string& objective, const AcquisitionConfig& acquisition,
                            const cnp::CnpModel* model, const std::vector<std::uint64_t>& seeds);

/// Header `strategy,seed,iteration,molecule_id,true_score,best_so_far`.
void write_bo_traces(std::ostream& out, const std::vector<BoTrace>& traces);
/// Mean and sd of best_so_far over seeds at each step, tag "bo".
std::vector<MetricRecord> bo_records(const std::vector<BoTrace>& traces, const std::string& objective);

double median(std::vector<double> values);
double mean_of(const std::vector<double>& values);
/// Population standard deviation.
double sd_of(const std::vector<double>& values);

}  // namespace molnp::experiments
