#pragma once

// Conditional neural process over binary fingerprints: an encoder network
// maps each context pair (x, y) to a representation, representations are
// averaged, and a decoder maps (target x, mean representation) to a Gaussian.

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "molnp/nn.hpp"
#include "molnp/random.hpp"

namespace molnp::cnp {

using Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
/// Fingerprints as 0/1 columns (nbits x n); stored sparse since most bits are zero.
using FeatureMatrix = Eigen::SparseMatrix<double>;
using Net = nn::DenseNet<double>;
using Grads = nn::Gradients<double>;

struct Architecture {
  Index nbits = 1024;
  std::vector<Index> encoder_hidden{256, 256};
  Index repr_dim = 128;
  std::vector<Index> decoder_hidden{256, 256};
  double variance_floor = 1e-6;

  bool operator==(const Architecture&) const = default;
};

/// Affine map between score units and the standardized units the networks see.
struct ScoreScaling {
  double mean = 0.0;
  double scale = 1.0;

  double normalize(double y) const { return (y - mean) / scale; }
  bool operator==(const ScoreScaling&) const = default;
};

class CnpModel {
 public:
  CnpModel(Architecture arch, Net encoder, Net decoder, ScoreScaling scaling = {});

  /// Fresh model with He-uniform weights: encoder (nbits+1) -> hidden -> repr_dim,
  /// decoder (nbits+repr_dim) -> hidden -> 2.
  static CnpModel create(const Architecture& arch, Rng& rng);

  const Architecture& architecture() const { return arch_; }
  const Net& encoder() const { return encoder_; }
  const Net& decoder() const { return decoder_; }
  Net& encoder() { return encoder_; }
  Net& decoder() { return decoder_; }
  const ScoreScaling& scaling() const { return scaling_; }
  void set_scaling(const ScoreScaling& s);

  bool operator==(const CnpModel& other) const {
    return arch_ == other.arch_ && scaling_ == other.scaling_ && encoder_ == other.encoder_ &&
           decoder_ == other.decoder_;
  }

 private:
  Architecture arch_;
  Net encoder_;
  Net decoder_;
  ScoreScaling scaling_;
};

struct Gaussian {
  double mean = 0.0;
  double variance = 1.0;
};

struct PredictiveDistribution {
  Vector means;
  Vector variances;

  Index size() const { return means.size(); }
};

/// One function's observations split into context and target sets
/// (nbits x c and nbits x t inputs).
struct Episode {
  std::string function_id;
  FeatureMatrix context_x;
  Vector context_y;
  FeatureMatrix target_x;
  Vector target_y;

  void validate(Index nbits) const;
};

/// softplus(raw) + floor, the variance head.
double variance_from_raw(double raw, double floor);

/// One representation per context pair (repr_dim x c). y is taken in score
/// units and standardized with the model's scaling before encoding.
Matrix encode(const CnpModel& model, const FeatureMatrix& context_x, const Vector& context_y);

/// Coordinate-wise mean of the representation columns.
Vector aggregate(const Matrix& reps);

/// Mean and variance at one target input given a representation.
Gaussian decode(const CnpModel& model, const Vector& x, const Vector& r);
PredictiveDistribution decode(const CnpModel& model, const FeatureMatrix& target_x, const Vector& r);

/// encode -> aggregate -> decode, reported in score units.
PredictiveDistribution predict(const CnpModel& model, const FeatureMatrix& context_x, const Vector& context_y,
                               const FeatureMatrix& target_x);

/// Mean Gaussian negative log-likelihood of the targets, in score units.
double episode_loss(const CnpModel& model, const Episode& episode);

struct LossGradients {
  double loss = 0.0;
  Grads encoder;
  Grads decoder;
};

/// episode_loss and its exact gradient with respect to every encoder and
/// decoder parameter (decoder -> mean representation -> each encoder call).
LossGradients episode_loss_gradients(const CnpModel& model, const Episode& episode);

/// Finite-difference check of episode_loss_gradients over all parameters,
/// excluding coordinates whose perturbation flips a relu.
nn::GradientCheckResult check_episode_gradients(const CnpModel& model, const Episode& episode,
                                                const nn::GradientCheckOptions& options = {});

/// Selected columns of a feature matrix, in the given order.
FeatureMatrix gather_columns(const FeatureMatrix& features, std::span<const Index> columns);

/// Observations of one function: columns of a shared feature matrix plus scores.
struct FunctionData {
  std::string function_id;
  std::vector<Index> columns;
  Vector y;
};

struct EpisodeConfig {
  Index context_min = 5;
  Index context_max = 256;
  Index target_min = 1;
  Index target_max = 256;
  /// When set, t = min(target_max, o - c); otherwise t is uniform in its range.
  bool fill_targets = true;
};

/// Random context/target partition: c uniform in [context_min, min(context_max, o - target_min)],
/// then c + t distinct observations drawn without replacement.
Episode sample_episode(const FeatureMatrix& features, const FunctionData& function, Rng& rng, const EpisodeConfig& config);

/// Pooled mean and standard deviation over all scores of the given functions.
ScoreScaling pooled_scaling(std::span<const FunctionData> functions);

struct TrainConfig {
  int epochs = 1000;
  EpisodeConfig episode;
  nn::AdamConfig adam;
};

struct TrainingLog {
  std::vector<double> losses;  // one mean episode loss per epoch
};

/// Called after each epoch's optimizer step with the 1-based epoch number.
using EpochCallback = std::function<void(int epoch, double loss, const CnpModel& model)>;

/// Per epoch: one episode per function, losses averaged over functions, one
/// Adam step on all parameters. Throws NonFiniteLoss naming the epoch.
TrainingLog train(CnpModel& model, const FeatureMatrix& features, std::span<const FunctionData> functions,
                  const TrainConfig& config, Rng& rng, const EpochCallback& callback = {});

/// Streaming context for repeated conditioning (Bayesian optimization).
class ContextAccumulator {
 public:
  explicit ContextAccumulator(const CnpModel& model);

  void add(const FeatureMatrix& x, const Vector& y);
  Index size() const { return count_; }
  Vector representation() const;

 private:
  const CnpModel* model_;
  Vector sum_;
  Index count_ = 0;
};

/// Decoder specialized to a fixed candidate set: the first-layer contribution
/// of the candidate fingerprints is computed once.
class CandidatePredictor {
 public:
  CandidatePredictor(const CnpModel& model, const FeatureMatrix& candidates_x);

  /// Predictions for every candidate, in score units.
  PredictiveDistribution predict(const Vector& r) const;

 private:
  const CnpModel* model_;
  Matrix first_layer_x_;  // hidden x n_candidates
};

struct CheckpointManifest {
  int fingerprint_radius = 3;
  std::uint64_t seed = 0;
  int epoch = 0;
};

/// Writes the networks to `path` and architecture, scaling, fingerprint
/// parameters and seed to `path` + ".json".
void save_checkpoint(const std::filesystem::path& path, const CnpModel& model, const CheckpointManifest& manifest);

struct LoadedCheckpoint {
  CnpModel model;
  CheckpointManifest manifest;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace molnp::cnp
