#include "molnp/cnp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <Eigen/SparseCore>

#include "json.hpp"
#include "molnp/errors.hpp"

namespace molnp::cnp {
namespace {


std::vector<Index> widths(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using SparseInner = FeatureMatrix::InnerIterator;

void require_context(const FeatureMatrix& context_x, const Vector& context_y, Index nbits) {
  if (context_x.cols() == 0) throw Error(ErrorKind::EmptyContext, "context set is empty");
  if (context_x.cols() != context_y.size()) {
    throw Error(ErrorKind::DimensionMismatch, "context inputs and scores differ in length");
  }
  if (context_x.rows() != nbits) throw Error(ErrorKind::DimensionMismatch, "context fingerprint length mismatch");
}

// [x ; standardized y] per context pair.
FeatureMatrix encoder_input(const CnpModel& model, const FeatureMatrix& context_x, const Vector& context_y) {
  const Index nbits = model.architecture().nbits;
  require_context(context_x, context_y, nbits);
  const auto& s = model.scaling();
  FeatureMatrix in(nbits + 1, context_x.cols());
  in.reserve(context_x.nonZeros() + context_x.cols());
  for (Index j = 0; j < context_x.cols(); ++j) {
    in.startVec(j);
    for (SparseInner it(context_x, j); it; ++it) in.insertBack(it.row(), j) = it.value();
    in.insertBack(nbits, j) = s.normalize(context_y[j]);
  }
  in.finalize();
  return in;
}

// Decoder layer-0 pre-activation for inputs [x ; r]: the fingerprint part is a
// sparse product, the representation part is shared by every column.
Matrix decoder_preactivation(const CnpModel& model, const FeatureMatrix& target_x, const Vector& r) {
  const auto& arch = model.architecture();
  if (target_x.rows() != arch.nbits) throw Error(ErrorKind::DimensionMismatch, "target fingerprint length mismatch");
  if (r.size() != arch.repr_dim) throw Error(ErrorKind::DimensionMismatch, "representation has wrong dimension");
  const auto& first = model.decoder().layer(0);
  const Vector shift = first.weight.rightCols(arch.repr_dim) * r + first.bias;
  Matrix z = first.weight.leftCols(arch.nbits) * target_x;
  z.colwise() += shift;
  return z;
}

PredictiveDistribution to_distribution(const CnpModel& model, const Matrix& raw) {
  const auto& s = model.scaling();
  const double floor = model.architecture().variance_floor;
  PredictiveDistribution d{Vector(raw.cols()), Vector(raw.cols())};
  for (Index j = 0; j < raw.cols(); ++j) {
    d.means[j] = raw(0, j) * s.scale + s.mean;
    d.variances[j] = variance_from_raw(raw(1, j), floor) * s.scale * s.scale;
  }
  return d;
}

void append_pattern(const Net& net, const std::vector<Matrix>& outputs, std::vector<bool>& out) {
  for (std::size_t k = 0; k < net.depth(); ++k) {
    if (net.layer(k).activation != nn::Activation::Relu) continue;
    const Matrix& a = outputs[k];
    for (Index i = 0; i < a.size(); ++i) out.push_back(a.data()[i] > 0.0);
  }
}

}  // namespace

CnpModel::CnpModel(Architecture arch, Net encoder, Net decoder, ScoreScaling scaling)
    : arch_(std::move(arch)), encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
  if (arch_.nbits <= 0 || arch_.repr_dim <= 0) throw Error(ErrorKind::DimensionMismatch, "nbits and repr_dim must be positive");
  if (!(arch_.variance_floor > 0.0)) throw Error(ErrorKind::NonPositiveVariance, "variance floor must be positive");
  if (encoder_.input_dim() != arch_.nbits + 1 || encoder_.output_dim() != arch_.repr_dim) {
    throw Error(ErrorKind::DimensionMismatch, "encoder must map nbits+1 inputs to repr_dim outputs");
  }
  if (decoder_.input_dim() != arch_.nbits + arch_.repr_dim || decoder_.output_dim() != 2) {
    throw Error(ErrorKind::DimensionMismatch, "decoder must map nbits+repr_dim inputs to 2 outputs");
  }
  set_scaling(scaling);
}

CnpModel CnpModel::create(const Architecture& arch, Rng& rng) {
  const auto enc = widths(arch.nbits + 1, arch.encoder_hidden, arch.repr_dim);
  const auto dec = widths(arch.nbits + arch.repr_dim, arch.decoder_hidden, 2);
  Net encoder = Net::he_uniform(enc, rng);
  Net decoder = Net::he_uniform(dec, rng);
  return CnpModel(arch, std::move(encoder), std::move(decoder));
}

void CnpModel::set_scaling(const ScoreScaling& s) {
  if (!std::isfinite(s.mean) || !(s.scale > 0.0) || !std::isfinite(s.scale)) {
    throw Error(ErrorKind::NonPositiveVariance, "score scale must be positive and finite");
  }
  scaling_ = s;
}

void Episode::validate(Index nbits) const {
  if (context_x.cols() == 0) throw Error(ErrorKind::EmptyContext, "episode has no context points");
  if (target_x.cols() == 0) throw Error(ErrorKind::EmptyContext, "episode has no target points");
  if (context_x.cols() != context_y.size() || target_x.cols() != target_y.size()) {
    throw Error(ErrorKind::DimensionMismatch, "episode inputs and scores differ in length");
  }
  if (context_x.rows() != nbits || target_x.rows() != nbits) {
    throw Error(ErrorKind::DimensionMismatch, "episode fingerprint length mismatch");
  }
}

double variance_from_raw(double raw, double floor) {
  const double softplus = raw > 30.0 ? raw : std::log1p(std::exp(raw));
  return softplus + floor;
}

Matrix encode(const CnpModel& model, const FeatureMatrix& context_x, const Vector& context_y) {
  return nn::forward(model.encoder(), encoder_input(model, context_x, context_y));
}

Vector aggregate(const Matrix& reps) {
  if (reps.cols() == 0) throw Error(ErrorKind::EmptyContext, "no representations to aggregate");
  return reps.rowwise().mean();
}

Gaussian decode(const CnpModel& model, const Vector& x, const Vector& r) {
  const auto d = decode(model, FeatureMatrix(x.sparseView(1.0, 0.0)), r);
  return {d.means[0], d.variances[0]};
}

PredictiveDistribution decode(const CnpModel& model, const FeatureMatrix& target_x, const Vector& r) {
  return to_distribution(model, nn::forward_from_preactivation(model.decoder(), decoder_preactivation(model, target_x, r)).back());
}

PredictiveDistribution predict(const CnpModel& model, const FeatureMatrix& context_x, const Vector& context_y,
                               const FeatureMatrix& target_x) {
  if (target_x.cols() == 0) throw Error(ErrorKind::EmptyContext, "no target points");
  return decode(model, target_x, aggregate(encode(model, context_x, context_y)));
}

double episode_loss(const CnpModel& model, const Episode& episode) {
  episode.validate(model.architecture().nbits);
  const auto d = predict(model, episode.context_x, episode.context_y, episode.target_x);
  double total = 0.0;
  for (Index j = 0; j < d.size(); ++j) total += nn::gaussian_nll(d.means[j], d.variances[j], episode.target_y[j]);
  return total / static_cast<double>(d.size());
}

LossGradients episode_loss_gradients(const CnpModel& model, const Episode& episode) {
  const auto& arch = model.architecture();
  const auto& s = model.scaling();
  episode.validate(arch.nbits);
  const Index c = episode.context_x.cols();
  const Index t = episode.target_x.cols();

  const auto enc_trace = nn::forward_trace(model.encoder(), encoder_input(model, episode.context_x, episode.context_y));
  const Vector r = enc_trace.result().rowwise().mean();
  const auto dec_outputs = nn::forward_from_preactivation(model.decoder(), decoder_preactivation(model, episode.target_x, r));
  const Matrix& out = dec_outputs.back();

  Matrix upstream(2, t);
  double total = 0.0;
  const double inv_t = 1.0 / static_cast<double>(t);
  for (Index j = 0; j < t; ++j) {
    const double mu = out(0, j);
    const double raw = out(1, j);
    const double var = variance_from_raw(raw, arch.variance_floor);
    const double y = s.normalize(episode.target_y[j]);
    const double resid = y - mu;
    total += 0.5 * std::log(2.0 * std::numbers::pi * var) + 0.5 * resid * resid / var;
    upstream(0, j) = -resid / var * inv_t;
    const double dvar = (0.5 / var - 0.5 * resid * resid / (var * var)) * inv_t;
    upstream(1, j) = dvar * sigmoid(raw);
  }

  LossGradients out_grads{total * inv_t + std::log(s.scale), Grads::zeros_like(model.encoder()),
                          Grads::zeros_like(model.decoder())};
  const Matrix delta0 = nn::backward_to_preactivation(model.decoder(), dec_outputs, upstream, out_grads.decoder);
  // Layer-0 weight: fingerprint columns from the sparse targets, representation
  // columns from the broadcast r.
  const Vector delta_sum = delta0.rowwise().sum();
  Matrix& w0 = out_grads.decoder.weight[0];
  w0.leftCols(arch.nbits) += delta0 * episode.target_x.transpose();
  w0.rightCols(arch.repr_dim) += delta_sum * r.transpose();
  const Vector d_r = model.decoder().layer(0).weight.rightCols(arch.repr_dim).transpose() * delta_sum /
                     static_cast<double>(c);
  nn::backward(model.encoder(), enc_trace, d_r.replicate(1, c), out_grads.encoder, arch.nbits + 1);
  return out_grads;
}

nn::GradientCheckResult check_episode_gradients(const CnpModel& model, const Episode& episode,
                                                const nn::GradientCheckOptions& options) {
  const auto analytic = episode_loss_gradients(model, episode);
  CnpModel probe = model;
  auto refs = nn::parameter_refs(probe.encoder());
  const auto dec_refs = nn::parameter_refs(probe.decoder());
  refs.insert(refs.end(), dec_refs.begin(), dec_refs.end());
  auto flat = nn::flatten(analytic.encoder);
  const auto dec_flat = nn::flatten(analytic.decoder);
  flat.insert(flat.end(), dec_flat.begin(), dec_flat.end());

  auto pattern = [&] {
    std::vector<bool> bits;
    const auto enc_trace = nn::forward_trace(probe.encoder(), encoder_input(probe, episode.context_x, episode.context_y));
    const Vector r = enc_trace.result().rowwise().mean();
    const auto dec_outputs = nn::forward_from_preactivation(probe.decoder(), decoder_preactivation(probe, episode.target_x, r));
    append_pattern(probe.encoder(), enc_trace.outputs, bits);
    append_pattern(probe.decoder(), dec_outputs, bits);
    return bits;
  };
  return nn::check_parameter_gradients<double>(std::span<double* const>(refs), std::span<const double>(flat),
                                               [&] { return episode_loss(probe, episode); }, options, pattern);
}

FeatureMatrix gather_columns(const FeatureMatrix& features, std::span<const Index> columns) {
  Index nnz = 0;
  for (Index col : columns) {
    if (col < 0 || col >= features.cols()) throw Error(ErrorKind::DimensionMismatch, "column index out of range");
    nnz += features.col(col).nonZeros();
  }
  FeatureMatrix out(features.rows(), static_cast<Index>(columns.size()));
  out.reserve(nnz);
  for (Index j = 0; j < out.cols(); ++j) {
    out.startVec(j);
    for (SparseInner it(features, columns[static_cast<std::size_t>(j)]); it; ++it) out.insertBack(it.row(), j) = it.value();
  }
  out.finalize();
  return out;
}

Episode sample_episode(const FeatureMatrix& features, const FunctionData& function, Rng& rng, const EpisodeConfig& config) {
  const auto o = static_cast<Index>(function.columns.size());
  if (function.y.size() != o) throw Error(ErrorKind::DimensionMismatch, "function columns and scores differ in length");
  if (config.context_min < 1 || config.target_min < 1 || config.context_max < config.context_min ||
      config.target_max < config.target_min) {
    throw Error(ErrorKind::InsufficientObservations, "invalid episode size ranges");
  }
  const Index c_hi = std::min(config.context_max, o - config.target_min);
  if (c_hi < config.context_min) {
    throw Error(ErrorKind::InsufficientObservations,
                function.function_id + " has " + std::to_string(o) + " observations, need at least " +
                    std::to_string(config.context_min + config.target_min));
  }
  const Index c = rng.uniform_int(config.context_min, c_hi);
  const Index t_cap = std::min(config.target_max, o - c);
  const Index t = config.fill_targets ? t_cap : rng.uniform_int(config.target_min, t_cap);

  std::vector<Index> order(static_cast<std::size_t>(o));
  std::iota(order.begin(), order.end(), Index{0});
  for (Index i = 0; i < c + t; ++i) {
    const auto j = i + static_cast<Index>(rng.uniform_index(static_cast<std::uint64_t>(o - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }

  std::vector<Index> context_cols(static_cast<std::size_t>(c));
  std::vector<Index> target_cols(static_cast<std::size_t>(t));
  Episode ep{function.function_id, {}, Vector(c), {}, Vector(t)};
  for (Index i = 0; i < c; ++i) {
    const Index k = order[static_cast<std::size_t>(i)];
    context_cols[static_cast<std::size_t>(i)] = function.columns[static_cast<std::size_t>(k)];
    ep.context_y[i] = function.y[k];
  }
  for (Index i = 0; i < t; ++i) {
    const Index k = order[static_cast<std::size_t>(c + i)];
    target_cols[static_cast<std::size_t>(i)] = function.columns[static_cast<std::size_t>(k)];
    ep.target_y[i] = function.y[k];
  }
  ep.context_x = gather_columns(features, context_cols);
  ep.target_x = gather_columns(features, target_cols);
  return ep;
}

ScoreScaling pooled_scaling(std::span<const FunctionData> functions) {
  double sum = 0.0;
  double n = 0.0;
  for (const auto& f : functions) {
    sum += f.y.sum();
    n += static_cast<double>(f.y.size());
  }
  if (n == 0.0) return {};
  const double mean = sum / n;
  double ss = 0.0;
  for (const auto& f : functions) ss += (f.y.array() - mean).square().sum();
  const double sd = std::sqrt(ss / n);
  return {mean, sd > 0.0 ? sd : 1.0};
}

TrainingLog train(CnpModel& model, const FeatureMatrix& features, std::span<const FunctionData> functions,
                  const TrainConfig& config, Rng& rng, const EpochCallback& callback) {
  TrainingLog log;
  if (config.epochs <= 0) return log;
  if (functions.empty()) throw Error(ErrorKind::InsufficientObservations, "no training functions");
  if (features.rows() != model.architecture().nbits) {
    throw Error(ErrorKind::DimensionMismatch, "feature matrix rows must equal nbits");
  }
  auto enc_state = nn::AdamState<double>::for_net(model.encoder(), config.adam);
  auto dec_state = nn::AdamState<double>::for_net(model.decoder(), config.adam);
  Grads enc_total = Grads::zeros_like(model.encoder());
  Grads dec_total = Grads::zeros_like(model.decoder());
  const double inv_n = 1.0 / static_cast<double>(functions.size());

  log.losses.reserve(static_cast<std::size_t>(config.epochs));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    enc_total.set_zero();
    dec_total.set_zero();
    double total = 0.0;
    for (const auto& f : functions) {
      const Episode ep = sample_episode(features, f, rng, config.episode);
      const auto lg = episode_loss_gradients(model, ep);
      total += lg.loss;
      enc_total += lg.encoder;
      dec_total += lg.decoder;
    }
    const double loss = total * inv_n;
    if (!std::isfinite(loss)) {
      throw Error(ErrorKind::NonFiniteLoss, "training loss became non-finite at epoch " + std::to_string(epoch));
    }
    enc_total *= inv_n;
    dec_total *= inv_n;
    nn::adam_step(model.encoder(), enc_total, enc_state);
    nn::adam_step(model.decoder(), dec_total, dec_state);
    log.losses.push_back(loss);
    if (callback) callback(epoch, loss, model);
  }
  return log;
}

ContextAccumulator::ContextAccumulator(const CnpModel& model)
    : model_(&model), sum_(Vector::Zero(model.architecture().repr_dim)) {}

void ContextAccumulator::add(const FeatureMatrix& x, const Vector& y) {
  sum_ += encode(*model_, x, y).rowwise().sum();
  count_ += x.cols();
}

Vector ContextAccumulator::representation() const {
  if (count_ == 0) throw Error(ErrorKind::EmptyContext, "no context points added");
  return sum_ / static_cast<double>(count_);
}

CandidatePredictor::CandidatePredictor(const CnpModel& model, const FeatureMatrix& candidates_x) : model_(&model) {
  const Index nbits = model.architecture().nbits;
  if (candidates_x.rows() != nbits) throw Error(ErrorKind::DimensionMismatch, "candidate fingerprint length mismatch");
  first_layer_x_ = model.decoder().layer(0).weight.leftCols(nbits) * candidates_x;
}

PredictiveDistribution CandidatePredictor::predict(const Vector& r) const {
  const auto& arch = model_->architecture();
  if (r.size() != arch.repr_dim) throw Error(ErrorKind::DimensionMismatch, "representation has wrong dimension");
  const Net& dec = model_->decoder();
  const auto& first = dec.layer(0);
  const Vector shift = first.weight.rightCols(arch.repr_dim) * r + first.bias;
  Matrix a = first_layer_x_.colwise() + shift;
  if (first.activation == nn::Activation::Relu) a = a.cwiseMax(0.0);
  for (std::size_t k = 1; k < dec.depth(); ++k) {
    const auto& l = dec.layer(k);
    Matrix z = l.weight * a;
    z.colwise() += l.bias;
    if (l.activation == nn::Activation::Relu) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return to_distribution(*model_, a);
}

namespace {
constexpr std::string_view kCheckpointFormat = "cnp-checkpoint v1";
}

void save_checkpoint(const std::filesystem::path& path, const CnpModel& model, const CheckpointManifest& manifest) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
    out << kCheckpointFormat << "\nencoder\n";
    nn::save_dense_net(out, model.encoder());
    out << "decoder\n";
    nn::save_dense_net(out, model.decoder());
    if (!out) throw Error(ErrorKind::IoFailure, "failed writing " + path.string());
  }
  const auto& arch = model.architecture();
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["architecture"] = {{"nbits", arch.nbits},
                       {"encoder_hidden", arch.encoder_hidden},
                       {"repr_dim", arch.repr_dim},
                       {"decoder_hidden", arch.decoder_hidden},
                       {"variance_floor", arch.variance_floor}};
  j["scaling"] = {{"mean", model.scaling().mean}, {"scale", model.scaling().scale}};
  j["fingerprint"] = {{"radius", manifest.fingerprint_radius}, {"nbits", arch.nbits}};
  j["seed"] = manifest.seed;
  j["epoch"] = manifest.epoch;
  std::ofstream out(path.string() + ".json", std::ios::binary);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write manifest for " + path.string());
  out << j.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream manifest_in(path.string() + ".json", std::ios::binary);
  std::ifstream in(path, std::ios::binary);
  if (!in || !manifest_in) throw Error(ErrorKind::MissingCheckpoint, "no checkpoint at " + path.string());
  try {
    const auto j = nlohmann::json::parse(manifest_in);
    Architecture arch;
    const auto& a = j.at("architecture");
    arch.nbits = a.at("nbits").get<Index>();
    arch.encoder_hidden = a.at("encoder_hidden").get<std::vector<Index>>();
    arch.repr_dim = a.at("repr_dim").get<Index>();
    arch.decoder_hidden = a.at("decoder_hidden").get<std::vector<Index>>();
    arch.variance_floor = a.at("variance_floor").get<double>();
    const ScoreScaling scaling{j.at("scaling").at("mean").get<double>(), j.at("scaling").at("scale").get<double>()};
    CheckpointManifest manifest{j.at("fingerprint").at("radius").get<int>(), j.at("seed").get<std::uint64_t>(),
                                j.at("epoch").get<int>()};

    std::string line;
    std::getline(in, line);
    if (line != kCheckpointFormat) throw Error(ErrorKind::IoFailure, "unsupported checkpoint format '" + line + "'");
    std::getline(in, line);
    if (line != "encoder") throw Error(ErrorKind::IoFailure, "checkpoint: expected encoder section");
    Net encoder = nn::load_dense_net<double>(in);
    std::string word;
    in >> word;
    if (word != "decoder") throw Error(ErrorKind::IoFailure, "checkpoint: expected decoder section");
    Net decoder = nn::load_dense_net<double>(in);
    return {CnpModel(arch, std::move(encoder), std::move(decoder), scaling), manifest};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::IoFailure, "checkpoint manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace molnp::cnp
