#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "molnp/nn.hpp"

namespace molnp::nn {
namespace {

using Net = DenseNet<double>;
using Vec = Vector<double>;
using Mat = Matrix<double>;

Net random_net(std::vector<Index> widths, std::uint64_t seed) {
  Rng rng(seed);
  Net net = Net::he_uniform(widths, rng);
  for (std::size_t k = 0; k < net.depth(); ++k) {
    for (Index i = 0; i < net.layer(k).bias.size(); ++i) net.layer(k).bias[i] = rng.uniform(-0.1, 0.1);
  }
  return net;
}

Vec random_vec(Index n, Rng& rng) {
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

TEST(Forward, ZeroNetworkGivesZero) {
  Net net({{Mat::Zero(3, 4), Vec::Zero(3), Activation::Relu}, {Mat::Zero(2, 3), Vec::Zero(2), Activation::Identity}});
  const Vec out = forward(net, Vec::Constant(4, 7.0));
  EXPECT_TRUE(out.isZero(0));
}

TEST(Forward, IdentityLayer) {
  Net net({{Mat::Identity(3, 3), Vec::Zero(3), Activation::Identity}});
  const Vec x(Vec::LinSpaced(3, -1.0, 2.0));
  EXPECT_EQ(Vec(forward(net, x)), x);
}

TEST(Forward, ReluClipsNegativePreactivation) {
  Net net({{Mat::Constant(1, 1, 2.0), Vec::Constant(1, 1.0), Activation::Relu}});
  EXPECT_EQ(forward(net, Vec::Constant(1, -3.0))(0, 0), 0.0);
  EXPECT_EQ(forward(net, Vec::Constant(1, 3.0))(0, 0), 7.0);
}

TEST(Forward, DimensionChecks) {
  Net net = random_net({4, 3, 2}, 1);
  EXPECT_THROW(forward(net, Vec::Zero(5)), Error);
  EXPECT_THROW(Net({{Mat::Zero(3, 4), Vec::Zero(3), Activation::Relu}, {Mat::Zero(2, 2), Vec::Zero(2), Activation::Identity}}),
               Error);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  Net net = random_net({5, 4, 3}, 2);
  Rng rng(5);
  const auto res = backward(net, random_vec(5, rng), Vec(Vec::Zero(3)));
  EXPECT_TRUE(res.grads.all_zero());
  EXPECT_TRUE(res.input_grad.isZero(0));
}

TEST(Backward, SingleLinearLayerClosedForm) {
  Rng rng(7);
  Net net({{Mat::Random(3, 4), Vec::Random(3), Activation::Identity}});
  const Vec x = random_vec(4, rng);
  const Vec u = random_vec(3, rng);
  const auto res = backward(net, x, u);
  EXPECT_TRUE(res.grads.weight[0].isApprox(u * x.transpose(), 1e-15));
  EXPECT_TRUE(res.grads.bias[0].isApprox(u, 1e-15));
  EXPECT_TRUE(res.input_grad.isApprox(net.layer(0).weight.transpose() * u, 1e-15));
}

TEST(Backward, MatchesFiniteDifferencesOnRandomReluNets) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    Net net = random_net({6, 8, 8, 3}, seed);
    const Vec x = random_vec(6, rng);
    const Vec u = random_vec(3, rng);
    const auto res = backward(net, x, u);
    auto loss = [&](const Net& n) { return u.dot(Vec(forward(n, x))); };
    GradientCheckOptions opts;
    opts.step = 1e-4;
    const auto check = gradient_check(net, loss, res.grads, opts);
    // Piecewise-linear in each parameter away from kinks: only kinks can fail.
    EXPECT_GE(check.checked, static_cast<std::size_t>(net.parameter_count()) - 5);
    EXPECT_LE(check.over_tolerance, 2U) << "seed " << seed << " max err " << check.max_relative_error;

    // Input gradient against central differences.
    for (Index i = 0; i < x.size(); ++i) {
      Vec xp = x, xm = x;
      xp[i] += 1e-6;
      xm[i] -= 1e-6;
      const double numeric = (u.dot(Vec(forward(net, xp))) - u.dot(Vec(forward(net, xm)))) / 2e-6;
      EXPECT_NEAR(res.input_grad[i], numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
    }
  }
}

TEST(Backward, BatchedEqualsSumOfSingles) {
  Net net = random_net({4, 6, 2}, 9);
  Rng rng(12);
  const Mat x = Mat::Random(4, 5);
  const Mat u = Mat::Random(2, 5);
  auto batched = Gradients<double>::zeros_like(net);
  const auto trace = forward_trace(net, x);
  backward(net, trace, u, batched);
  auto summed = Gradients<double>::zeros_like(net);
  for (Index j = 0; j < 5; ++j) summed += backward(net, Vec(x.col(j)), Vec(u.col(j))).grads;
  for (std::size_t k = 0; k < net.depth(); ++k) {
    EXPECT_TRUE(batched.weight[k].isApprox(summed.weight[k], 1e-12));
    EXPECT_TRUE(batched.bias[k].isApprox(summed.bias[k], 1e-12));
  }
}

TEST(GaussianNll, ClosedForms) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(gaussian_nll(1.5, 1.0, 1.5), 0.918938533204672, 1e-14);
  EXPECT_NEAR(gaussian_nll(0.0, 1.0, 2.0), 2.918938533204672, 1e-14);
  EXPECT_NEAR(gaussian_nll(-3.0, 0.25, -3.0), half_log_2pi + 0.5 * std::log(0.25), 1e-14);
  EXPECT_THROW(gaussian_nll(0.0, 0.0, 1.0), Error);
  EXPECT_THROW(gaussian_nll(0.0, -1.0, 1.0), Error);
}

TEST(GaussianNll, ShapeInMeanAndVariance) {
  const double y = 0.7, mu = -0.4;
  const double r2 = (y - mu) * (y - mu);
  for (double d : {0.01, 0.1, 1.0}) {
    EXPECT_LT(gaussian_nll(y, 0.5, y), gaussian_nll(y + d, 0.5, y));
    EXPECT_LT(gaussian_nll(y, 0.5, y), gaussian_nll(y - d, 0.5, y));
  }
  // Decreasing on (0, r^2), increasing beyond: minimum at var = r^2.
  double prev = gaussian_nll(mu, 1e-3, y);
  for (double v = 2e-3; v < r2; v += 1e-3) {
    const double cur = gaussian_nll(mu, v, y);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
  prev = gaussian_nll(mu, r2, y);
  for (double v = r2 + 1e-3; v < 5.0; v += 1e-2) {
    const double cur = gaussian_nll(mu, v, y);
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  Net net = random_net({3, 4, 2}, 4);
  const Net before = net;
  auto state = AdamState<double>::for_net(net);
  adam_step(net, Gradients<double>::zeros_like(net), state);
  EXPECT_EQ(net, before);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, FirstStepScalarClosedForm) {
  for (double g : {0.3, -2.0, 1e-3}) {
    Net net({{Mat::Constant(1, 1, 0.5), Vec::Zero(1), Activation::Identity}});
    auto grads = Gradients<double>::zeros_like(net);
    grads.weight[0](0, 0) = g;
    auto state = AdamState<double>::for_net(net);
    adam_step(net, grads, state);
    const double expected = 0.5 - 1e-3 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(net.layer(0).weight(0, 0), expected, 1e-15);
  }
}

TEST(Adam, DeterministicAndShapeChecked) {
  Net a = random_net({3, 5, 2}, 8);
  Net b = random_net({3, 5, 2}, 8);
  auto sa = AdamState<double>::for_net(a);
  auto sb = AdamState<double>::for_net(b);
  Rng rng(1);
  for (int step = 0; step < 20; ++step) {
    const Vec x = random_vec(3, rng);
    const Vec u = random_vec(2, rng);
    adam_step(a, backward(a, x, u).grads, sa);
    adam_step(b, backward(b, x, u).grads, sb);
  }
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a.all_finite());
  Net other = random_net({3, 4, 2}, 8);
  EXPECT_THROW(adam_step(other, Gradients<double>::zeros_like(a), sa), Error);
}

TEST(GradientCheck, LinearNetQuadraticLoss) {
  Net net = random_net({4, 3}, 21);
  const Vec x = Vec::LinSpaced(4, -1.0, 1.0);
  const Vec target = Vec::Constant(3, 0.25);
  auto loss = [&](const Net& n) { return 0.5 * (Vec(forward(n, x)) - target).squaredNorm(); };
  const Vec residual = Vec(forward(net, x)) - target;
  const auto grads = backward(net, x, residual).grads;
  EXPECT_LT(gradient_check(net, loss, grads).max_relative_error, 1e-8);
}

TEST(GradientCheck, ReluNetAwayFromKinks) {
  Net net = random_net({5, 6, 1}, 22);
  Rng rng(3);
  Vec x = random_vec(5, rng);
  const auto trace = forward_trace(net, Mat(x));
  Mat pre = net.layer(0).weight * x + net.layer(0).bias;
  ASSERT_GT(pre.cwiseAbs().minCoeff(), 1e-6);
  auto loss = [&](const Net& n) { return std::pow(forward(n, x)(0, 0), 2); };
  const double out = forward(net, x)(0, 0);
  const auto grads = backward(net, x, Vec(Vec::Constant(1, 2.0 * out))).grads;
  EXPECT_LT(gradient_check(net, loss, grads).max_relative_error, 1e-4);
}

TEST(GradientCheck, ConstantLoss) {
  Net net = random_net({3, 2}, 23);
  const auto res = gradient_check(net, [](const Net&) { return 4.0; }, Gradients<double>::zeros_like(net));
  EXPECT_EQ(res.max_relative_error, 0.0);
  EXPECT_THROW(gradient_check(net, [](const Net&) { return std::nan(""); }, Gradients<double>::zeros_like(net)),
               Error);
}

TEST(Checkpoint, RoundTripsBitExactly) {
  Net net = random_net({7, 5, 3, 2}, 31);
  net.layer(0).weight(0, 0) = 1.0 / 3.0;
  net.layer(1).bias(0) = -5e-300;
  std::stringstream buffer;
  save_dense_net(buffer, net);
  const Net back = load_dense_net<double>(buffer);
  EXPECT_EQ(back, net);
  std::stringstream bad("densenet v9\n");
  EXPECT_THROW(load_dense_net<double>(bad), Error);
}

TEST(Templated, FloatNetworksWork) {
  Rng rng(1);
  const std::vector<Index> widths{3, 4, 2};
  auto net = DenseNet<float>::he_uniform(widths, rng);
  const Vector<float> x = Vector<float>::Ones(3);
  const auto out = forward(net, x);
  EXPECT_EQ(out.rows(), 2);
  std::stringstream buffer;
  save_dense_net(buffer, net);
  EXPECT_EQ(load_dense_net<float>(buffer), net);
}

}  // namespace
}  // namespace molnp::nn
