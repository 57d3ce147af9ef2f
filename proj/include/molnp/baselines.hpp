#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "molnp/chem.hpp"
#include "molnp/data.hpp"
#include "molnp/nn.hpp"
#include "molnp/random.hpp"

namespace molnp::baselines {

using Eigen::Index;
using Vector = Eigen::VectorXd;
using FeatureMatrix = Eigen::SparseMatrix<double>;

enum class Metric { Hamming, Tanimoto };

/// Nearest-neighbour regressor. Ties on distance go to the lower training index.
struct KnnModel {
  std::vector<Fingerprint> x;
  Vector y;
  std::size_t k = 5;
  Metric metric = Metric::Hamming;
};

KnnModel knn_fit(std::span<const Fingerprint> train_x, const Vector& train_y, std::size_t k, Metric metric);
/// Training indices of the k nearest points, nearest first.
std::vector<std::size_t> knn_neighbors(const KnnModel& model, const Fingerprint& query);
Vector knn_predict(const KnnModel& model, std::span<const Fingerprint> query_x);
Vector knn_fit_predict(std::span<const Fingerprint> train_x, const Vector& train_y,
                       std::span<const Fingerprint> query_x, std::size_t k, Metric metric);

struct ForestConfig {
  std::size_t n_estimators = 200;
  /// Fraction of bits examined at each node (at least one).
  double max_features = 1.0 / 3.0;
  std::size_t min_samples_leaf = 2;
  bool bootstrap = true;
};

/// Internal nodes route samples with the bit clear to `left`, set to `right`.
struct TreeNode {
  int feature = -1;
  int left = -1;
  int right = -1;
  double value = 0.0;
  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;
  double predict(const Fingerprint& x) const;
};

struct ForestModel {
  std::vector<RegressionTree> trees;
  std::size_t nbits = 0;
  Vector predict(std::span<const Fingerprint> query_x) const;
};

/// Tree t draws from Rng(derive_seed(seed, {t})): first n bootstrap indices,
/// then for each node in depth-first order (clear branch first) a partial
/// Fisher-Yates selection of candidate bits. A node splits on the candidate
/// maximizing sum_L^2/n_L + sum_R^2/n_R (ties to the lower bit) when both
/// children keep min_samples_leaf samples and the score beats the parent.
ForestModel rf_fit(std::span<const Fingerprint> train_x, const Vector& train_y, const ForestConfig& config,
                   std::uint64_t seed);
Vector rf_predict(const ForestModel& model, std::span<const Fingerprint> query_x);

struct NnConfig {
  /// Hidden widths; five hidden layers give six linear layers.
  std::vector<Index> hidden{256, 256, 256, 256, 256};
  std::size_t epochs = 300;
  /// 0 means full batch.
  std::size_t batch_size = 128;
  nn::AdamConfig adam{};
};

/// Fingerprints as sparse 0/1 columns.
FeatureMatrix to_features(std::span<const Fingerprint> x);

/// Masked mean squared error training. Y is outputs x samples, NaN entries
/// are ignored. Returns the loss of each epoch (mean over its minibatches).
std::vector<double> train_masked_mse(nn::DenseNet<double>& net, const FeatureMatrix& x, const Eigen::MatrixXd& y,
                                     std::size_t epochs, std::size_t batch_size, const nn::AdamConfig& adam, Rng& rng);

/// Feed-forward regressor on standardized labels.
Vector nn_fit_predict(const FeatureMatrix& train_x, const Vector& train_y, const FeatureMatrix& query_x,
                      const NnConfig& config, std::uint64_t seed);

struct PretrainConfig {
  NnConfig network{};
  std::size_t pretrain_epochs = 300;
  std::size_t finetune_epochs = 300;
  double finetune_lr_factor = 0.1;
};

/// Trunk plus one output per pretraining function. Output rows are
/// standardized per function.
struct MultiOutputNet {
  nn::DenseNet<double> net;
  std::vector<std::string> functions;
  Vector mean;
  Vector scale;
};

/// Seeds for one output row depend only on (seed, function name), so a fully
/// masked function leaves the other rows' trajectories unchanged.
std::uint64_t head_seed(std::uint64_t seed, const std::string& function);

/// y is samples x functions with NaN for missing labels; `mask` columns set to
/// false are treated as entirely missing.
MultiOutputNet pretrain(const FeatureMatrix& x, const Eigen::MatrixXd& y, const std::vector<std::string>& functions,
                        const PretrainConfig& config, std::uint64_t seed, const std::vector<bool>& mask = {});

/// Replaces the head with one fresh output and trains every layer on the
/// target data with the learning rate scaled by finetune_lr_factor.
Vector finetune_predict(const MultiOutputNet& pretrained, const FeatureMatrix& train_x, const Vector& train_y,
                        const FeatureMatrix& query_x, const PretrainConfig& config, std::uint64_t seed);

/// Pretrains on dtrain x ftrain, fine-tunes on the target's dtrain
/// observations and predicts every dtest molecule (in split order).
/// Throws UnknownFunction unless target is in ftest.
Vector pretrain_finetune(const data::TaskTable& table, const data::SplitSpec& split, const std::string& target,
                         const PretrainConfig& config, std::uint64_t seed);

/// One row of the shared predictions CSV.
struct PredictionRow {
  std::string function_id;
  std::string molecule_id;
  std::string model;
  std::size_t n_train_or_context = 0;
  double prediction = 0.0;
  std::optional<double> variance;
};

/// Header `function_id,molecule_id,model,n_train_or_context,prediction,variance`;
/// variance is empty when absent.
void write_predictions(std::ostream& out, const std::vector<PredictionRow>& rows);

}  // namespace molnp::baselines
