#pragma once

// Small dense feed-forward networks with exact reverse-mode gradients.
// Samples are stored column-wise: an input batch is (input_dim x n).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <istream>
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "molnp/errors.hpp"
#include "molnp/random.hpp"

namespace molnp::nn {

using Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class Activation { Relu, Identity };

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weight;  // out x in
  Vector<Scalar> bias;    // out
  Activation activation = Activation::Identity;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

template <typename Scalar>
class DenseNet {
 public:
  using Layer = DenseLayer<Scalar>;

  DenseNet() = default;

  explicit DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  /// `widths` lists input, hidden and output sizes. Hidden layers use relu,
  /// the output layer is linear. Weights are U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero.
  static DenseNet he_uniform(std::span<const Index> widths, Rng& rng) {
    if (widths.size() < 2) throw Error(ErrorKind::DimensionMismatch, "need at least input and output widths");
    std::vector<Layer> layers;
    for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
      const bool last = k + 2 == widths.size();
      layers.push_back(he_uniform_layer(widths[k], widths[k + 1],
                                        last ? Activation::Identity : Activation::Relu, rng));
    }
    return DenseNet(std::move(layers));
  }

  static Layer he_uniform_layer(Index in, Index out, Activation activation, Rng& rng) {
    if (in <= 0 || out <= 0) throw Error(ErrorKind::DimensionMismatch, "layer widths must be positive");
    Layer layer{Matrix<Scalar>(out, in), Vector<Scalar>::Zero(out), activation};
    const double limit = std::sqrt(6.0 / static_cast<double>(in));
    for (Index r = 0; r < out; ++r) {
      for (Index c = 0; c < in; ++c) layer.weight(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
    }
    return layer;
  }

  Index input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  Index output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  std::size_t depth() const { return layers_.size(); }

  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(std::size_t k) const { return layers_[k]; }
  /// Parameter values may change; shapes must not.
  Layer& layer(std::size_t k) { return layers_[k]; }

  void replace_output_layer(Layer layer) {
    layers_.back() = std::move(layer);
    validate();
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  bool all_finite() const {
    for (const auto& l : layers_) {
      if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
    }
    return true;
  }

  bool operator==(const DenseNet& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& a = layers_[k];
      const auto& b = other.layers_[k];
      if (a.activation != b.activation || a.weight.rows() != b.weight.rows() ||
          a.weight.cols() != b.weight.cols() || a.weight != b.weight || a.bias != b.bias) {
        return false;
      }
    }
    return true;
  }

 private:
  void validate() const {
    if (layers_.empty()) throw Error(ErrorKind::DimensionMismatch, "network has no layers");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const auto& l = layers_[k];
      if (l.weight.rows() <= 0 || l.weight.cols() <= 0 || l.bias.size() != l.weight.rows()) {
        throw Error(ErrorKind::DimensionMismatch, "layer " + std::to_string(k) + " has inconsistent shape");
      }
      if (k > 0 && l.in_dim() != layers_[k - 1].out_dim()) {
        throw Error(ErrorKind::DimensionMismatch, "layer " + std::to_string(k) + " does not chain");
      }
    }
  }

  std::vector<Layer> layers_;
};

/// Parameter-shaped accumulator, one entry per weight matrix and bias vector.
template <typename Scalar>
struct Gradients {
  std::vector<Matrix<Scalar>> weight;
  std::vector<Vector<Scalar>> bias;

  static Gradients zeros_like(const DenseNet<Scalar>& net) {
    Gradients g;
    for (const auto& l : net.layers()) {
      g.weight.push_back(Matrix<Scalar>::Zero(l.weight.rows(), l.weight.cols()));
      g.bias.push_back(Vector<Scalar>::Zero(l.bias.size()));
    }
    return g;
  }

  bool congruent(const DenseNet<Scalar>& net) const {
    if (weight.size() != net.depth() || bias.size() != net.depth()) return false;
    for (std::size_t k = 0; k < net.depth(); ++k) {
      const auto& l = net.layer(k);
      if (weight[k].rows() != l.weight.rows() || weight[k].cols() != l.weight.cols() ||
          bias[k].size() != l.bias.size()) {
        return false;
      }
    }
    return true;
  }

  void set_zero() {
    for (auto& w : weight) w.setZero();
    for (auto& b : bias) b.setZero();
  }

  Gradients& operator+=(const Gradients& other) {
    if (other.weight.size() != weight.size()) throw Error(ErrorKind::ShapeMismatch, "gradient depth differs");
    for (std::size_t k = 0; k < weight.size(); ++k) {
      weight[k] += other.weight[k];
      bias[k] += other.bias[k];
    }
    return *this;
  }

  Gradients& operator*=(Scalar s) {
    for (auto& w : weight) w *= s;
    for (auto& b : bias) b *= s;
    return *this;
  }

  bool all_finite() const {
    for (std::size_t k = 0; k < weight.size(); ++k) {
      if (!weight[k].allFinite() || !bias[k].allFinite()) return false;
    }
    return true;
  }

  bool all_zero() const {
    for (std::size_t k = 0; k < weight.size(); ++k) {
      if (!weight[k].isZero(0) || !bias[k].isZero(0)) return false;
    }
    return true;
  }
};

/// Activations of every layer for one batch. The input may be dense or an
/// Eigen::SparseMatrix (binary fingerprints are mostly zeros).
template <typename Scalar, typename Input = Matrix<Scalar>>
struct ForwardTrace {
  Input input;
  std::vector<Matrix<Scalar>> outputs;  // outputs[k] is the activation of layer k

  const Matrix<Scalar>& result() const { return outputs.back(); }
};

namespace detail {

template <typename Scalar>
void apply_activation(Activation act, Matrix<Scalar>& z) {
  if (act == Activation::Relu) z = z.cwiseMax(Scalar(0));
}

template <typename Scalar, typename Derived>
void check_input(const DenseNet<Scalar>& net, const Eigen::EigenBase<Derived>& inputs) {
  if (inputs.rows() != net.input_dim()) {
    throw Error(ErrorKind::DimensionMismatch, "input has " + std::to_string(inputs.rows()) +
                                                  " rows, network expects " + std::to_string(net.input_dim()));
  }
}

}  // namespace detail

template <typename Scalar, typename Derived>
auto forward_trace(const DenseNet<Scalar>& net, const Eigen::EigenBase<Derived>& inputs) {
  using Input = typename Derived::PlainObject;
  detail::check_input(net, inputs);
  ForwardTrace<Scalar, Input> trace{inputs.derived(), {}};
  trace.outputs.reserve(net.depth());
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const auto& l = net.layer(k);
    Matrix<Scalar> z = k == 0 ? Matrix<Scalar>(l.weight * trace.input) : Matrix<Scalar>(l.weight * trace.outputs.back());
    z.colwise() += l.bias;
    detail::apply_activation(l.activation, z);
    trace.outputs.push_back(std::move(z));
  }
  return trace;
}

/// Final-layer activations for a batch (or a single column vector).
template <typename Scalar, typename Derived>
Matrix<Scalar> forward(const DenseNet<Scalar>& net, const Eigen::EigenBase<Derived>& inputs) {
  detail::check_input(net, inputs);
  Matrix<Scalar> a;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const auto& l = net.layer(k);
    Matrix<Scalar> z = k == 0 ? Matrix<Scalar>(l.weight * inputs.derived()) : Matrix<Scalar>(l.weight * a);
    z.colwise() += l.bias;
    detail::apply_activation(l.activation, z);
    a = std::move(z);
  }
  return a;
}

/// Continues a forward pass from a layer-0 pre-activation computed by the
/// caller (for inputs with structure the caller can exploit). Returns the
/// activations of every layer, as in ForwardTrace::outputs.
template <typename Scalar>
std::vector<Matrix<Scalar>> forward_from_preactivation(const DenseNet<Scalar>& net, Matrix<Scalar> z0) {
  if (z0.rows() != net.layer(0).out_dim()) throw Error(ErrorKind::DimensionMismatch, "pre-activation has wrong height");
  std::vector<Matrix<Scalar>> outputs;
  outputs.reserve(net.depth());
  detail::apply_activation(net.layer(0).activation, z0);
  outputs.push_back(std::move(z0));
  for (std::size_t k = 1; k < net.depth(); ++k) {
    const auto& l = net.layer(k);
    Matrix<Scalar> z = l.weight * outputs.back();
    z.colwise() += l.bias;
    detail::apply_activation(l.activation, z);
    outputs.push_back(std::move(z));
  }
  return outputs;
}

/// Reverse pass down to the layer-0 pre-activation. Adds gradients for every
/// layer except layer 0's weight, and returns the pre-activation gradient.
template <typename Scalar, typename Derived>
Matrix<Scalar> backward_to_preactivation(const DenseNet<Scalar>& net, const std::vector<Matrix<Scalar>>& outputs,
                                         const Eigen::MatrixBase<Derived>& upstream, Gradients<Scalar>& grads) {
  if (outputs.size() != net.depth() || upstream.rows() != net.output_dim() ||
      upstream.cols() != outputs.back().cols()) {
    throw Error(ErrorKind::DimensionMismatch, "upstream gradient shape does not match network output");
  }
  if (!grads.congruent(net)) throw Error(ErrorKind::ShapeMismatch, "gradient buffer not congruent with network");
  Matrix<Scalar> delta = upstream;
  for (std::size_t k = net.depth(); k-- > 0;) {
    const auto& l = net.layer(k);
    if (l.activation == Activation::Relu) delta = (outputs[k].array() > Scalar(0)).select(delta, Scalar(0));
    grads.bias[k] += delta.rowwise().sum();
    if (k == 0) break;
    grads.weight[k].noalias() += delta * outputs[k - 1].transpose();
    delta = l.weight.transpose() * delta;
  }
  return delta;
}

/// Reverse pass for the scalar sum over the batch of <upstream, output>.
/// Parameter gradients are added into `grads`. Returns the gradient with
/// respect to input rows [input_grad_from, input_dim); pass input_dim to skip it.
template <typename Scalar, typename Input, typename Derived>
Matrix<Scalar> backward(const DenseNet<Scalar>& net, const ForwardTrace<Scalar, Input>& trace,
                        const Eigen::MatrixBase<Derived>& upstream, Gradients<Scalar>& grads,
                        Index input_grad_from = 0) {
  const Matrix<Scalar> delta = backward_to_preactivation(net, trace.outputs, upstream, grads);
  grads.weight[0] += delta * trace.input.transpose();
  const Index keep = net.input_dim() - input_grad_from;
  if (keep <= 0) return {};
  return net.layer(0).weight.rightCols(keep).transpose() * delta;
}

template <typename Scalar>
struct BackwardResult {
  Gradients<Scalar> grads;
  Vector<Scalar> input_grad;
};

/// Single-sample convenience form of backward.
template <typename Scalar>
BackwardResult<Scalar> backward(const DenseNet<Scalar>& net, const Vector<Scalar>& x, const Vector<Scalar>& upstream) {
  const auto trace = forward_trace(net, Matrix<Scalar>(x));
  BackwardResult<Scalar> out{Gradients<Scalar>::zeros_like(net), {}};
  out.input_grad = backward(net, trace, upstream, out.grads);
  return out;
}

/// Negative log density of y under N(mu, var).
template <typename Scalar>
Scalar gaussian_nll(Scalar mu, Scalar var, Scalar y) {
  if (!(var > Scalar(0))) throw Error(ErrorKind::NonPositiveVariance, "variance must be positive");
  const Scalar r = y - mu;
  return Scalar(0.5) * std::log(Scalar(2) * std::numbers::pi_v<Scalar> * var) + r * r / (Scalar(2) * var);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamState {
  Gradients<Scalar> first_moment;
  Gradients<Scalar> second_moment;
  long step = 0;
  AdamConfig config;

  static AdamState for_net(const DenseNet<Scalar>& net, AdamConfig config = {}) {
    return {Gradients<Scalar>::zeros_like(net), Gradients<Scalar>::zeros_like(net), 0, config};
  }
};

/// One bias-corrected Adam update, in place.
template <typename Scalar>
void adam_step(DenseNet<Scalar>& net, const Gradients<Scalar>& grads, AdamState<Scalar>& state) {
  if (!grads.congruent(net) || !state.first_moment.congruent(net) || !state.second_moment.congruent(net)) {
    throw Error(ErrorKind::ShapeMismatch, "gradients or optimizer state not congruent with network");
  }
  if (!grads.all_finite()) throw Error(ErrorKind::NonFiniteLoss, "non-finite gradient");
  ++state.step;
  const auto& cfg = state.config;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.beta2, static_cast<double>(state.step)));
  const Scalar lr = static_cast<Scalar>(cfg.learning_rate);
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);

  auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t k = 0; k < net.depth(); ++k) {
    auto& l = net.layer(k);
    update(l.weight, grads.weight[k], state.first_moment.weight[k], state.second_moment.weight[k]);
    update(l.bias, grads.bias[k], state.first_moment.bias[k], state.second_moment.bias[k]);
  }
}

/// Views every scalar parameter of a network, weights (column-major) before
/// biases, layer by layer. Gradients flatten in the same order.
template <typename Scalar>
std::vector<Scalar*> parameter_refs(DenseNet<Scalar>& net) {
  std::vector<Scalar*> out;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    auto& l = net.layer(k);
    for (Index i = 0; i < l.weight.size(); ++i) out.push_back(l.weight.data() + i);
    for (Index i = 0; i < l.bias.size(); ++i) out.push_back(l.bias.data() + i);
  }
  return out;
}

template <typename Scalar>
std::vector<Scalar> flatten(const Gradients<Scalar>& g) {
  std::vector<Scalar> out;
  for (std::size_t k = 0; k < g.weight.size(); ++k) {
    out.insert(out.end(), g.weight[k].data(), g.weight[k].data() + g.weight[k].size());
    out.insert(out.end(), g.bias[k].data(), g.bias[k].data() + g.bias[k].size());
  }
  return out;
}

struct GradientCheckOptions {
  double step = 1e-5;
  /// Relative error uses max(|analytic|, |numeric|, floor) as denominator.
  double floor = 1e-6;
  double tolerance = 1e-4;
};

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t over_tolerance = 0;
  /// Coordinates skipped because a +/- step changed the relu activation pattern.
  std::vector<std::size_t> kink_excluded;
};

/// Central-difference check of `analytic` against `loss()` over the given
/// parameters. Each parameter is perturbed in place and restored.
/// `activation_pattern`, when set, returns the relu on/off pattern at the
/// current parameters; coordinates whose perturbation changes it are excluded.
template <typename Scalar, typename Loss>
GradientCheckResult check_parameter_gradients(
    std::span<Scalar* const> params, std::span<const Scalar> analytic, Loss&& loss,
    const GradientCheckOptions& options = {},
    const std::function<std::vector<bool>()>& activation_pattern = {}) {
  if (params.size() != analytic.size()) throw Error(ErrorKind::ShapeMismatch, "analytic gradient size mismatch");
  const Scalar base_loss = loss();
  if (!std::isfinite(static_cast<double>(base_loss))) throw Error(ErrorKind::NonFiniteLoss, "loss not finite");
  std::vector<bool> base_pattern;
  if (activation_pattern) base_pattern = activation_pattern();

  GradientCheckResult result;
  const Scalar h = static_cast<Scalar>(options.step);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Scalar& p = *params[i];
    const Scalar saved = p;
    p = saved + h;
    const Scalar plus = loss();
    const bool kink_plus = activation_pattern && activation_pattern() != base_pattern;
    p = saved - h;
    const Scalar minus = loss();
    const bool kink_minus = activation_pattern && activation_pattern() != base_pattern;
    p = saved;
    if (!std::isfinite(static_cast<double>(plus)) || !std::isfinite(static_cast<double>(minus))) {
      throw Error(ErrorKind::NonFiniteLoss, "loss not finite under perturbation");
    }
    if (kink_plus || kink_minus) {
      result.kink_excluded.push_back(i);
      continue;
    }
    const double numeric = static_cast<double>(plus - minus) / (2.0 * options.step);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    const double err = std::abs(a - numeric) / denom;
    result.max_relative_error = std::max(result.max_relative_error, err);
    ++result.checked;
    if (err > options.tolerance) ++result.over_tolerance;
  }
  return result;
}

/// Finite-difference check of a network's analytic gradients for a scalar
/// loss `loss(const DenseNet&)`.
template <typename Scalar, typename Loss>
GradientCheckResult gradient_check(const DenseNet<Scalar>& net, Loss&& loss, const Gradients<Scalar>& analytic,
                                   const GradientCheckOptions& options = {}) {
  if (!analytic.congruent(net)) throw Error(ErrorKind::ShapeMismatch, "gradients not congruent with network");
  DenseNet<Scalar> probe = net;
  const auto refs = parameter_refs(probe);
  const auto flat = flatten(analytic);
  return check_parameter_gradients<Scalar>(std::span<Scalar* const>(refs), std::span<const Scalar>(flat),
                                           [&] { return loss(std::as_const(probe)); }, options);
}

// Text checkpoint: shortest round-trip decimal for every value, so
// save/load reproduces the parameters bit for bit.

inline constexpr std::string_view kDenseNetFormat = "densenet v1";

namespace detail {

template <typename Scalar>
void write_values(std::ostream& out, const Scalar* data, Index n) {
  char buf[64];
  for (Index i = 0; i < n; ++i) {
    const auto res = std::to_chars(buf, buf + sizeof(buf), data[i]);
    out << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
  }
  out << '\n';
}

template <typename Scalar>
void read_values(std::istream& in, std::string_view tag, Scalar* data, Index n) {
  std::string word;
  if (!(in >> word) || word != tag) throw Error(ErrorKind::IoFailure, "checkpoint: expected '" + std::string(tag) + "'");
  for (Index i = 0; i < n; ++i) {
    if (!(in >> word)) throw Error(ErrorKind::IoFailure, "checkpoint: truncated values");
    const auto res = std::from_chars(word.data(), word.data() + word.size(), data[i]);
    if (res.ec != std::errc() || res.ptr != word.data() + word.size()) {
      throw Error(ErrorKind::IoFailure, "checkpoint: bad value '" + word + "'");
    }
  }
}

}  // namespace detail

template <typename Scalar>
void save_dense_net(std::ostream& out, const DenseNet<Scalar>& net) {
  out << kDenseNetFormat << '\n' << "layers " << net.depth() << '\n';
  for (const auto& l : net.layers()) {
    out << "layer " << l.out_dim() << ' ' << l.in_dim() << ' '
        << (l.activation == Activation::Relu ? "relu" : "identity") << '\n';
    Matrix<Scalar> row_major = l.weight;  // written row by row
    out << 'w';
    detail::write_values(out, Matrix<Scalar>(row_major.transpose()).data(), row_major.size());
    out << 'b';
    detail::write_values(out, l.bias.data(), l.bias.size());
  }
}

template <typename Scalar>
DenseNet<Scalar> load_dense_net(std::istream& in) {
  std::string line;
  while (line.empty() && std::getline(in, line)) {
  }
  if (line != kDenseNetFormat) throw Error(ErrorKind::IoFailure, "checkpoint: unsupported format '" + line + "'");
  std::string word;
  std::size_t depth = 0;
  if (!(in >> word >> depth) || word != "layers" || depth == 0) {
    throw Error(ErrorKind::IoFailure, "checkpoint: bad layer count");
  }
  std::vector<DenseLayer<Scalar>> layers;
  for (std::size_t k = 0; k < depth; ++k) {
    Index out_dim = 0, in_dim = 0;
    std::string act;
    if (!(in >> word >> out_dim >> in_dim >> act) || word != "layer" || out_dim <= 0 || in_dim <= 0 ||
        (act != "relu" && act != "identity")) {
      throw Error(ErrorKind::IoFailure, "checkpoint: bad layer header");
    }
    Matrix<Scalar> transposed(in_dim, out_dim);
    detail::read_values(in, "w", transposed.data(), transposed.size());
    DenseLayer<Scalar> layer{transposed.transpose(), Vector<Scalar>(out_dim),
                             act == "relu" ? Activation::Relu : Activation::Identity};
    detail::read_values(in, "b", layer.bias.data(), layer.bias.size());
    layers.push_back(std::move(layer));
  }
  return DenseNet<Scalar>(std::move(layers));
}

}  // namespace molnp::nn
