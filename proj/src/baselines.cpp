#include "molnp/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "molnp/errors.hpp"

namespace molnp::baselines {

namespace {

// Closeness key: Hamming distance, or Tanimoto similarity as an exact fraction.
struct Closeness {
  std::size_t num = 0;
  std::size_t den = 1;
};

Closeness closeness(Metric metric, const Fingerprint& a, const Fingerprint& b) {
  if (metric == Metric::Hamming) return {hamming_distance(a, b), 1};
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t k = 0; k < a.words().size(); ++k) {
    inter += static_cast<std::size_t>(std::popcount(a.words()[k] & b.words()[k]));
    uni += static_cast<std::size_t>(std::popcount(a.words()[k] | b.words()[k]));
  }
  if (uni == 0) return {1, 1};
  return {inter, uni};
}

// True when a is strictly nearer than b.
bool nearer(Metric metric, const Closeness& a, const Closeness& b) {
  if (metric == Metric::Hamming) return a.num < b.num;
  return a.num * b.den > b.num * a.den;
}

void check_lengths(std::span<const Fingerprint> x, std::size_t nbits) {
  for (const auto& fp : x) {
    if (fp.nbits() != nbits)
      throw Error(ErrorKind::LengthMismatch, "fingerprint has " + std::to_string(fp.nbits()) + " bits, expected " +
                                                 std::to_string(nbits));
  }
}

}  // namespace

KnnModel knn_fit(std::span<const Fingerprint> train_x, const Vector& train_y, std::size_t k, Metric metric) {
  if (train_x.empty()) throw Error(ErrorKind::EmptyTrainingSet, "knn needs at least one training point");
  if (static_cast<Index>(train_x.size()) != train_y.size())
    throw Error(ErrorKind::LengthMismatch, "knn training inputs and labels differ in length");
  if (k == 0) throw Error(ErrorKind::KTooLarge, "k must be at least 1");
  if (k > train_x.size())
    throw Error(ErrorKind::KTooLarge, "k = " + std::to_string(k) + " exceeds " + std::to_string(train_x.size()) +
                                          " training points");
  check_lengths(train_x, train_x.front().nbits());
  return {std::vector<Fingerprint>(train_x.begin(), train_x.end()), train_y, k, metric};
}

std::vector<std::size_t> knn_neighbors(const KnnModel& model, const Fingerprint& query) {
  const std::size_t n = model.x.size();
  std::vector<Closeness> keys(n);
  for (std::size_t i = 0; i < n; ++i) keys[i] = closeness(model.metric, query, model.x[i]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(model.k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (nearer(model.metric, keys[a], keys[b])) return true;
                      if (nearer(model.metric, keys[b], keys[a])) return false;
                      return a < b;
                    });
  order.resize(model.k);
  return order;
}

Vector knn_predict(const KnnModel& model, std::span<const Fingerprint> query_x) {
  check_lengths(query_x, model.x.front().nbits());
  Vector out(static_cast<Index>(query_x.size()));
  for (std::size_t q = 0; q < query_x.size(); ++q) {
    double sum = 0.0;
    for (std::size_t i : knn_neighbors(model, query_x[q])) sum += model.y(static_cast<Index>(i));
    out(static_cast<Index>(q)) = sum / static_cast<double>(model.k);
  }
  return out;
}

Vector knn_fit_predict(std::span<const Fingerprint> train_x, const Vector& train_y, std::span<const Fingerprint> query_x,
                       std::size_t k, Metric metric) {
  return knn_predict(knn_fit(train_x, train_y, k, metric), query_x);
}

double RegressionTree::predict(const Fingerprint& x) const {
  std::size_t node = 0;
  while (!nodes[node].is_leaf()) {
    const auto& n = nodes[node];
    node = static_cast<std::size_t>(x.test(static_cast<std::size_t>(n.feature)) ? n.right : n.left);
  }
  return nodes[node].value;
}

Vector ForestModel::predict(std::span<const Fingerprint> query_x) const {
  check_lengths(query_x, nbits);
  Vector out(static_cast<Index>(query_x.size()));
  for (std::size_t q = 0; q < query_x.size(); ++q) {
    double sum = 0.0;
    for (const auto& tree : trees) sum += tree.predict(query_x[q]);
    out(static_cast<Index>(q)) = sum / static_cast<double>(trees.size());
  }
  return out;
}

Vector rf_predict(const ForestModel& model, std::span<const Fingerprint> query_x) { return model.predict(query_x); }

namespace {

class TreeBuilder {
 public:
  TreeBuilder(std::span<const Fingerprint> x, const Vector& y, const ForestConfig& config, Rng& rng)
      : x_(x), y_(y), config_(config), rng_(rng), nbits_(x.front().nbits()) {
    const double wanted = std::floor(config.max_features * static_cast<double>(nbits_));
    mtry_ = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(wanted, 1.0)), 1, nbits_);
    features_.resize(nbits_);
  }

  RegressionTree build(std::vector<std::size_t> samples) {
    samples_ = std::move(samples);
    scratch_.resize(samples_.size());
    grow(0, samples_.size());
    return std::move(tree_);
  }

 private:
  int grow(std::size_t begin, std::size_t end) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    const std::size_t n = end - begin;
    double sum = 0.0;
    bool constant = true;
    const double first = y_(static_cast<Index>(samples_[begin]));
    for (std::size_t i = begin; i < end; ++i) {
      const double v = y_(static_cast<Index>(samples_[i]));
      sum += v;
      constant = constant && v == first;
    }
    tree_.nodes[static_cast<std::size_t>(id)].value = sum / static_cast<double>(n);
    if (constant || n < 2 * config_.min_samples_leaf) return id;

    std::iota(features_.begin(), features_.end(), std::size_t{0});
    for (std::size_t i = 0; i < mtry_; ++i) std::swap(features_[i], features_[i + rng_.uniform_index(nbits_ - i)]);

    const double parent_score = sum * sum / static_cast<double>(n);
    double best_score = parent_score;
    std::size_t best_feature = nbits_;
    for (std::size_t c = 0; c < mtry_; ++c) {
      const std::size_t b = features_[c];
      double sum_left = 0.0, sum_right = 0.0;
      std::size_t n_right = 0;
      for (std::size_t i = begin; i < end; ++i) {
        const double v = y_(static_cast<Index>(samples_[i]));
        if (x_[samples_[i]].test(b)) {
          sum_right += v;
          ++n_right;
        } else {
          sum_left += v;
        }
      }
      const std::size_t n_left = n - n_right;
      if (n_left < config_.min_samples_leaf || n_right < config_.min_samples_leaf) continue;
      const double score = sum_left * sum_left / static_cast<double>(n_left) + sum_right * sum_right / static_cast<double>(n_right);
      if (score > best_score || (score == best_score && best_feature < nbits_ && b < best_feature)) {
        best_score = score;
        best_feature = b;
      }
    }
    if (best_feature == nbits_) return id;

    std::size_t write = begin;
    std::size_t spill = 0;
    for (std::size_t i = begin; i < end; ++i) {
      if (x_[samples_[i]].test(best_feature)) scratch_[spill++] = samples_[i];
      else samples_[write++] = samples_[i];
    }
    std::copy(scratch_.begin(), scratch_.begin() + static_cast<std::ptrdiff_t>(spill), samples_.begin() + static_cast<std::ptrdiff_t>(write));

    const int left = grow(begin, write);
    const int right = grow(write, end);
    auto& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = static_cast<int>(best_feature);
    node.left = left;
    node.right = right;
    return id;
  }

  std::span<const Fingerprint> x_;
  const Vector& y_;
  const ForestConfig& config_;
  Rng& rng_;
  std::size_t nbits_;
  std::size_t mtry_ = 1;
  std::vector<std::size_t> features_;
  std::vector<std::size_t> samples_;
  std::vector<std::size_t> scratch_;
  RegressionTree tree_;
};

}  // namespace

ForestModel rf_fit(std::span<const Fingerprint> train_x, const Vector& train_y, const ForestConfig& config,
                   std::uint64_t seed) {
  if (train_x.empty()) throw Error(ErrorKind::EmptyTrainingSet, "random forest needs at least one training point");
  if (static_cast<Index>(train_x.size()) != train_y.size())
    throw Error(ErrorKind::LengthMismatch, "forest training inputs and labels differ in length");
  if (config.n_estimators == 0) throw Error(ErrorKind::ConfigError, "n_estimators must be positive");
  check_lengths(train_x, train_x.front().nbits());
  ForestConfig cfg = config;
  cfg.min_samples_leaf = std::max<std::size_t>(cfg.min_samples_leaf, 1);

  ForestModel model;
  model.nbits = train_x.front().nbits();
  model.trees.reserve(cfg.n_estimators);
  const std::size_t n = train_x.size();
  for (std::size_t t = 0; t < cfg.n_estimators; ++t) {
    Rng rng(derive_seed(seed, {t}));
    std::vector<std::size_t> samples(n);
    if (cfg.bootstrap) {
      for (auto& s : samples) s = rng.uniform_index(n);
    } else {
      std::iota(samples.begin(), samples.end(), std::size_t{0});
    }
    model.trees.push_back(TreeBuilder(train_x, train_y, cfg, rng).build(std::move(samples)));
  }
  return model;
}

FeatureMatrix to_features(std::span<const Fingerprint> x) {
  const std::size_t nbits = x.empty() ? 0 : x.front().nbits();
  check_lengths(x, nbits);
  FeatureMatrix m(static_cast<Index>(nbits), static_cast<Index>(x.size()));
  std::size_t nnz = 0;
  for (const auto& fp : x) nnz += fp.popcount();
  m.reserve(static_cast<Index>(nnz));
  for (std::size_t j = 0; j < x.size(); ++j) {
    m.startVec(static_cast<Index>(j));
    for (std::size_t b = 0; b < nbits; ++b)
      if (x[j].test(b)) m.insertBack(static_cast<Index>(b), static_cast<Index>(j)) = 1.0;
  }
  m.finalize();
  return m;
}

namespace {

FeatureMatrix select_columns(const FeatureMatrix& x, std::span<const std::size_t> cols) {
  FeatureMatrix out(x.rows(), static_cast<Index>(cols.size()));
  Index nnz = 0;
  for (std::size_t c : cols) nnz += x.outerIndexPtr()[c + 1] - x.outerIndexPtr()[c];
  out.reserve(nnz);
  for (std::size_t j = 0; j < cols.size(); ++j) {
    out.startVec(static_cast<Index>(j));
    for (FeatureMatrix::InnerIterator it(x, static_cast<Index>(cols[j])); it; ++it)
      out.insertBack(it.row(), static_cast<Index>(j)) = it.value();
  }
  out.finalize();
  return out;
}

struct Standardizer {
  double mean = 0.0;
  double scale = 1.0;
};

Standardizer standardizer(const Vector& y) {
  Standardizer s;
  const std::size_t n = static_cast<std::size_t>(y.size());
  if (n == 0) return s;
  s.mean = y.mean();
  const double var = (y.array() - s.mean).square().sum() / static_cast<double>(n);
  s.scale = var > 0.0 ? std::sqrt(var) : 1.0;
  return s;
}

nn::DenseNet<double> make_regressor(Index nbits, const std::vector<Index>& hidden, Index outputs, std::uint64_t seed) {
  std::vector<Index> widths{nbits};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(outputs);
  Rng rng(seed);
  return nn::DenseNet<double>::he_uniform(widths, rng);
}

void check_training_set(const FeatureMatrix& x, const Vector& y) {
  if (x.cols() == 0) throw Error(ErrorKind::EmptyTrainingSet, "regressor needs at least one training point");
  if (x.cols() != y.size()) throw Error(ErrorKind::LengthMismatch, "training inputs and labels differ in length");
}

}  // namespace

std::vector<double> train_masked_mse(nn::DenseNet<double>& net, const FeatureMatrix& x, const Eigen::MatrixXd& y,
                                     std::size_t epochs, std::size_t batch_size, const nn::AdamConfig& adam, Rng& rng) {
  if (x.rows() != net.input_dim() || y.rows() != net.output_dim() || x.cols() != y.cols())
    throw Error(ErrorKind::DimensionMismatch, "training data does not match network shape");
  const std::size_t n = static_cast<std::size_t>(x.cols());
  const std::size_t batch = batch_size == 0 || batch_size >= n ? n : batch_size;
  auto state = nn::AdamState<double>::for_net(net, adam);
  auto grads = nn::Gradients<double>::zeros_like(net);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> losses;
  losses.reserve(epochs);

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    if (batch < n)
      for (std::size_t i = 0; i + 1 < n; ++i) std::swap(order[i], order[i + rng.uniform_index(n - i)]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::span<const std::size_t> cols(order.data() + start, std::min(batch, n - start));
      const FeatureMatrix xb = batch == n ? x : select_columns(x, cols);
      Eigen::MatrixXd yb(y.rows(), static_cast<Index>(cols.size()));
      for (std::size_t j = 0; j < cols.size(); ++j) yb.col(static_cast<Index>(j)) = y.col(static_cast<Index>(cols[j]));

      const auto trace = nn::forward_trace(net, xb);
      Eigen::MatrixXd diff = trace.result() - yb;
      const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> observed = yb.array() == yb.array();
      const auto count = observed.count();
      if (count == 0) continue;
      diff = observed.select(diff, 0.0);
      const double loss = diff.squaredNorm() / static_cast<double>(count);
      if (!std::isfinite(loss))
        throw Error(ErrorKind::NonFiniteLoss, "regressor loss became non-finite at epoch " + std::to_string(epoch + 1));
      grads.set_zero();
      nn::backward(net, trace, (2.0 / static_cast<double>(count)) * diff, grads, net.input_dim());
      nn::adam_step(net, grads, state);
      epoch_loss += loss;
      ++batches;
    }
    losses.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
  }
  return losses;
}

Vector nn_fit_predict(const FeatureMatrix& train_x, const Vector& train_y, const FeatureMatrix& query_x,
                      const NnConfig& config, std::uint64_t seed) {
  check_training_set(train_x, train_y);
  if (query_x.rows() != train_x.rows()) throw Error(ErrorKind::DimensionMismatch, "query and training bit lengths differ");
  auto net = make_regressor(train_x.rows(), config.hidden, 1, derive_seed(seed, {0}));
  const Standardizer s = standardizer(train_y);
  const Eigen::MatrixXd target = ((train_y.array() - s.mean) / s.scale).matrix().transpose();
  Rng rng(derive_seed(seed, {1}));
  train_masked_mse(net, train_x, target, config.epochs, config.batch_size, config.adam, rng);
  return (nn::forward(net, query_x).row(0).transpose().array() * s.scale + s.mean).matrix();
}

std::uint64_t head_seed(std::uint64_t seed, const std::string& function) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : function) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return derive_seed(seed, {1, h});
}

MultiOutputNet pretrain(const FeatureMatrix& x, const Eigen::MatrixXd& y, const std::vector<std::string>& functions,
                        const PretrainConfig& config, std::uint64_t seed, const std::vector<bool>& mask) {
  const Index nf = static_cast<Index>(functions.size());
  if (x.cols() == 0) throw Error(ErrorKind::EmptyTrainingSet, "pretraining needs at least one molecule");
  if (y.rows() != x.cols() || y.cols() != nf) throw Error(ErrorKind::DimensionMismatch, "label matrix does not match inputs");
  if (nf == 0) throw Error(ErrorKind::EmptyTrainingSet, "pretraining needs at least one function");
  if (!mask.empty() && mask.size() != functions.size()) throw Error(ErrorKind::LengthMismatch, "mask length differs from functions");
  if (config.network.hidden.empty()) throw Error(ErrorKind::ConfigError, "pretraining needs at least one hidden layer");

  MultiOutputNet out;
  out.functions = functions;
  out.mean = Vector::Zero(nf);
  out.scale = Vector::Ones(nf);
  Eigen::MatrixXd target(nf, y.rows());
  for (Index f = 0; f < nf; ++f) {
    const bool used = mask.empty() || mask[static_cast<std::size_t>(f)];
    std::vector<double> seen;
    for (Index i = 0; i < y.rows(); ++i)
      if (used && !std::isnan(y(i, f))) seen.push_back(y(i, f));
    const Standardizer s = standardizer(Eigen::Map<const Vector>(seen.data(), static_cast<Index>(seen.size())));
    out.mean(f) = s.mean;
    out.scale(f) = s.scale;
    for (Index i = 0; i < y.rows(); ++i)
      target(f, i) = used ? (y(i, f) - s.mean) / s.scale : std::numeric_limits<double>::quiet_NaN();
  }

  std::vector<nn::DenseLayer<double>> layers;
  Rng trunk_rng(derive_seed(seed, {0}));
  Index in = x.rows();
  for (Index width : config.network.hidden) {
    layers.push_back(nn::DenseNet<double>::he_uniform_layer(in, width, nn::Activation::Relu, trunk_rng));
    in = width;
  }
  nn::DenseLayer<double> head{Eigen::MatrixXd(nf, in), Vector::Zero(nf), nn::Activation::Identity};
  for (Index f = 0; f < nf; ++f) {
    Rng row_rng(head_seed(seed, functions[static_cast<std::size_t>(f)]));
    head.weight.row(f) = nn::DenseNet<double>::he_uniform_layer(in, 1, nn::Activation::Identity, row_rng).weight;
  }
  layers.push_back(std::move(head));
  out.net = nn::DenseNet<double>(std::move(layers));

  Rng rng(derive_seed(seed, {2}));
  train_masked_mse(out.net, x, target, config.pretrain_epochs, config.network.batch_size, config.network.adam, rng);
  return out;
}

Vector finetune_predict(const MultiOutputNet& pretrained, const FeatureMatrix& train_x, const Vector& train_y,
                        const FeatureMatrix& query_x, const PretrainConfig& config, std::uint64_t seed) {
  check_training_set(train_x, train_y);
  auto net = pretrained.net;
  if (train_x.rows() != net.input_dim() || query_x.rows() != net.input_dim())
    throw Error(ErrorKind::DimensionMismatch, "fine-tuning data does not match the pretrained network");
  Rng head_rng(derive_seed(seed, {3}));
  net.replace_output_layer(nn::DenseNet<double>::he_uniform_layer(net.layers().back().in_dim(), 1, nn::Activation::Identity, head_rng));

  const Standardizer s = standardizer(train_y);
  const Eigen::MatrixXd target = ((train_y.array() - s.mean) / s.scale).matrix().transpose();
  nn::AdamConfig adam = config.network.adam;
  adam.learning_rate *= config.finetune_lr_factor;
  Rng rng(derive_seed(seed, {4}));
  train_masked_mse(net, train_x, target, config.finetune_epochs, config.network.batch_size, adam, rng);
  return (nn::forward(net, query_x).row(0).transpose().array() * s.scale + s.mean).matrix();
}

Vector pretrain_finetune(const data::TaskTable& table, const data::SplitSpec& split, const std::string& target,
                         const PretrainConfig& config, std::uint64_t seed) {
  if (std::find(split.ftest.begin(), split.ftest.end(), target) == split.ftest.end())
    throw Error(ErrorKind::UnknownFunction, "'" + target + "' is not a test function");
  split.validate(table);
  const FeatureMatrix features = data::fingerprint_features(table);
  auto rows_of = [&](const std::vector<std::string>& ids) {
    std::vector<std::size_t> rows;
    for (const auto& id : ids) rows.push_back(static_cast<std::size_t>(*table.find_molecule(id)));
    return rows;
  };
  const auto train_rows = rows_of(split.dtrain);
  const auto test_rows = rows_of(split.dtest);
  const FeatureMatrix train_x = select_columns(features, train_rows);

  Eigen::MatrixXd y(static_cast<Index>(train_rows.size()), static_cast<Index>(split.ftrain.size()));
  for (std::size_t f = 0; f < split.ftrain.size(); ++f) {
    const Index col = table.function_index(split.ftrain[f]);
    for (std::size_t i = 0; i < train_rows.size(); ++i) y(static_cast<Index>(i), static_cast<Index>(f)) = table.scores(static_cast<Index>(train_rows[i]), col);
  }
  const auto pretrained = pretrain(train_x, y, split.ftrain, config, seed);

  const Index target_col = table.function_index(target);
  std::vector<std::size_t> observed;
  std::vector<double> labels;
  for (std::size_t r : train_rows) {
    if (table.has_score(static_cast<Index>(r), target_col)) {
      observed.push_back(r);
      labels.push_back(table.scores(static_cast<Index>(r), target_col));
    }
  }
  const Vector target_y = Eigen::Map<const Vector>(labels.data(), static_cast<Index>(labels.size()));
  return finetune_predict(pretrained, select_columns(features, observed), target_y, select_columns(features, test_rows),
                          config, derive_seed(seed, {5}));
}

void write_predictions(std::ostream& out, const std::vector<PredictionRow>& rows) {
  out << "function_id,molecule_id,model,n_train_or_context,prediction,variance\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.prediction);
    out << r.function_id << ',' << r.molecule_id << ',' << r.model << ',' << r.n_train_or_context << ',' << buf << ',';
    if (r.variance) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.variance);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace molnp::baselines
