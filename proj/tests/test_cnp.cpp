#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "molnp/cnp.hpp"

namespace molnp::cnp {
namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Architecture tiny_arch() {
  Architecture a;
  a.nbits = 8;
  a.encoder_hidden = {6, 6};
  a.repr_dim = 4;
  a.decoder_hidden = {6, 6};
  return a;
}

FeatureMatrix random_bits(Index nbits, Index n, Rng& rng, double density = 0.4) {
  Matrix d(nbits, n);
  for (Index i = 0; i < d.size(); ++i) d.data()[i] = rng.uniform() < density ? 1.0 : 0.0;
  return d.sparseView(1.0, 0.0);
}

Vector random_vector(Index n, Rng& rng) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

FeatureMatrix permute_columns(const FeatureMatrix& x, const std::vector<Index>& perm) {
  return gather_columns(x, perm);
}

// Decoder that ignores its input and predicts (mean, variance) everywhere.
CnpModel constant_model(double mean, double variance) {
  Rng rng(1);
  CnpModel model = CnpModel::create(tiny_arch(), rng);
  Net& dec = model.decoder();
  for (std::size_t k = 0; k < dec.depth(); ++k) {
    dec.layer(k).weight.setZero();
    dec.layer(k).bias.setZero();
  }
  const double floor = model.architecture().variance_floor;
  dec.layer(dec.depth() - 1).bias << mean, std::log(std::expm1(variance - floor));
  return model;
}

TEST(Encode, OneRepresentationPerPair) {
  Rng rng(2);
  const auto model = CnpModel::create(tiny_arch(), rng);
  const auto x = random_bits(8, 1, rng);
  const Matrix reps = encode(model, x, Vector::Constant(1, 0.5));
  EXPECT_EQ(reps.rows(), 4);
  EXPECT_EQ(reps.cols(), 1);

  std::vector<Index> twice{0, 0};
  const Matrix dup = encode(model, permute_columns(x, twice), Vector::Constant(2, 0.5));
  EXPECT_EQ(dup.col(0), dup.col(1));

  EXPECT_THROW(encode(model, FeatureMatrix(8, 0), Vector()), Error);
  EXPECT_THROW(encode(model, x, Vector::Zero(2)), Error);
}

TEST(Encode, ZeroWeightEncoderEmitsBiasPath) {
  Rng rng(3);
  CnpModel model = CnpModel::create(tiny_arch(), rng);
  Net& enc = model.encoder();
  for (std::size_t k = 0; k < enc.depth(); ++k) enc.layer(k).weight.setZero();
  enc.layer(0).bias.setConstant(0.5);
  enc.layer(2).bias << 1, -2, 3, -4;
  const Matrix reps = encode(model, random_bits(8, 5, rng), random_vector(5, rng));
  for (Index j = 0; j < 5; ++j) EXPECT_EQ(Vector(reps.col(j)), enc.layer(2).bias);
}

TEST(Aggregate, MeanProperties) {
  Rng rng(4);
  const Vector v = random_vector(4, rng);
  EXPECT_EQ(aggregate(Matrix(v)), v);
  Matrix pm(4, 2);
  pm << v, -v;
  EXPECT_TRUE(aggregate(pm).isZero(0));
  Matrix reps(4, 5);
  for (Index j = 0; j < 5; ++j) reps.col(j) = random_vector(4, rng);
  Matrix shuffled(4, 5);
  shuffled << reps.col(3), reps.col(0), reps.col(4), reps.col(2), reps.col(1);
  EXPECT_TRUE(aggregate(reps).isApprox(aggregate(shuffled), 1e-15));
  EXPECT_THROW(aggregate(Matrix(4, 0)), Error);
}

TEST(Decode, VarianceHead) {
  const double floor = 1e-6;
  EXPECT_EQ(variance_from_raw(-1e4, floor), floor);
  EXPECT_NEAR(variance_from_raw(0.0, floor), std::log(2.0) + floor, 1e-15);
  EXPECT_NEAR(variance_from_raw(50.0, floor), 50.0 + floor, 1e-12);

  Rng rng(5);
  const auto model = CnpModel::create(tiny_arch(), rng);
  const Vector x = Vector(random_bits(8, 1, rng).toDense().col(0));
  const Vector r = random_vector(4, rng);
  const auto a = decode(model, x, r);
  const auto b = decode(model, x, r);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
  EXPECT_GE(a.variance, floor);
  EXPECT_THROW(decode(model, x, Vector::Zero(3)), Error);
}

TEST(Predict, InvariantToContextPermutationAndReplication) {
  Rng rng(6);
  const auto model = CnpModel::create(tiny_arch(), rng);
  const auto cx = random_bits(8, 7, rng);
  const Vector cy = random_vector(7, rng);
  const auto tx = random_bits(8, 4, rng);
  const auto base = predict(model, cx, cy, tx);

  std::vector<Index> perm{6, 2, 0, 5, 1, 3, 4};
  Vector py(7);
  for (Index j = 0; j < 7; ++j) py[j] = cy[perm[static_cast<std::size_t>(j)]];
  const auto permuted = predict(model, permute_columns(cx, perm), py, tx);
  EXPECT_LE((permuted.means - base.means).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LE((permuted.variances - base.variances).cwiseAbs().maxCoeff(), 1e-9);

  std::vector<Index> rep;
  for (int k = 0; k < 3; ++k) for (Index j = 0; j < 7; ++j) rep.push_back(j);
  const auto replicated = predict(model, permute_columns(cx, rep), cy.replicate(3, 1), tx);
  EXPECT_LE((replicated.means - base.means).cwiseAbs().maxCoeff(), 1e-9);

  std::vector<Index> tperm{3, 1, 0, 2};
  const auto tpermuted = predict(model, cx, cy, permute_columns(tx, tperm));
  for (Index j = 0; j < 4; ++j) {
    EXPECT_EQ(tpermuted.means[j], base.means[tperm[static_cast<std::size_t>(j)]]);
    EXPECT_EQ(tpermuted.variances[j], base.variances[tperm[static_cast<std::size_t>(j)]]);
  }
}

TEST(Predict, ScalingAppliesInScoreUnits) {
  Rng rng(7);
  auto model = CnpModel::create(tiny_arch(), rng);
  const auto cx = random_bits(8, 3, rng);
  const Vector cy = random_vector(3, rng);
  const auto tx = random_bits(8, 2, rng);
  const auto unit = predict(model, cx, cy, tx);
  model.set_scaling({10.0, 2.0});
  const auto scaled = predict(model, cx, Vector((cy.array() * 2.0 + 10.0).matrix()), tx);
  EXPECT_TRUE(scaled.means.isApprox(Vector((unit.means.array() * 2.0 + 10.0).matrix()), 1e-12));
  EXPECT_TRUE(scaled.variances.isApprox(Vector(unit.variances * 4.0), 1e-12));
}

TEST(EpisodeLoss, ClosedFormFixture) {
  const CnpModel model = constant_model(1.25, 1.0);
  Rng rng(8);
  Episode ep{"f", random_bits(8, 2, rng), random_vector(2, rng), random_bits(8, 3, rng), Vector::Constant(3, 1.25)};
  EXPECT_NEAR(episode_loss(model, ep), kHalfLog2Pi, 1e-12);

  // Mixed residuals at var = 1: mean of 0.5 log 2pi + r^2 / 2.
  ep.target_y << 1.25, 3.25, -0.75;
  EXPECT_NEAR(episode_loss(model, ep), kHalfLog2Pi + (0.0 + 2.0 + 2.0) / 3.0, 1e-12);

  ep.target_y.setConstant(1.25);
  const CnpModel doubled = constant_model(1.25, 2.0);
  EXPECT_NEAR(episode_loss(doubled, ep) - episode_loss(model, ep), 0.5 * std::log(2.0), 1e-12);
}

TEST(EpisodeLoss, PermutationInvariantAndBoundedBelow) {
  Rng rng(9);
  const auto model = CnpModel::create(tiny_arch(), rng);
  Episode ep{"f", random_bits(8, 5, rng), random_vector(5, rng), random_bits(8, 4, rng), random_vector(4, rng)};
  Episode perm = ep;
  perm.context_x = permute_columns(ep.context_x, {4, 3, 2, 1, 0});
  perm.context_y = ep.context_y.reverse();
  EXPECT_NEAR(episode_loss(model, ep), episode_loss(model, perm), 1e-12);
  EXPECT_GE(episode_loss(model, ep), 0.5 * std::log(2.0 * std::numbers::pi * model.architecture().variance_floor));
}

TEST(EpisodeLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(50 + seed);
    Architecture arch = tiny_arch();
    const auto model = CnpModel::create(arch, rng);
    Episode ep{"f", random_bits(8, 2, rng), random_vector(2, rng), random_bits(8, 2, rng), random_vector(2, rng)};
    nn::GradientCheckOptions opts;
    opts.step = 1e-5;
    const auto res = check_episode_gradients(model, ep, opts);
    const auto total = static_cast<double>(res.checked + res.kink_excluded.size());
    EXPECT_EQ(total, static_cast<double>(model.encoder().parameter_count() + model.decoder().parameter_count()));
    EXPECT_GE(static_cast<double>(res.checked - res.over_tolerance), 0.99 * total)
        << "max err " << res.max_relative_error;
  }
}

TEST(EpisodeLoss, GradientIndependentOfScaling) {
  Rng rng(10);
  auto model = CnpModel::create(tiny_arch(), rng);
  Episode ep{"f", random_bits(8, 3, rng), random_vector(3, rng), random_bits(8, 2, rng), random_vector(2, rng)};
  model.set_scaling({0.5, 3.0});
  const auto res = check_episode_gradients(model, ep);
  EXPECT_EQ(res.over_tolerance, 0U) << res.max_relative_error;
}

FunctionData make_function(Index o, Rng& rng) {
  FunctionData f{"f", {}, random_vector(o, rng)};
  for (Index i = 0; i < o; ++i) f.columns.push_back(i);
  return f;
}

TEST(SampleEpisode, TwoObservationsYieldBothPartitions) {
  Rng data_rng(11);
  const auto features = random_bits(8, 2, data_rng, 0.5);
  FunctionData f{"f", {0, 1}, Vector(2)};
  f.y << 10.0, 20.0;
  EpisodeConfig cfg{1, 1, 1, 1, true};
  std::set<double> first_context;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const auto ep = sample_episode(features, f, rng, cfg);
    ASSERT_EQ(ep.context_y.size(), 1);
    ASSERT_EQ(ep.target_y.size(), 1);
    EXPECT_NE(ep.context_y[0], ep.target_y[0]);
    first_context.insert(ep.context_y[0]);
  }
  EXPECT_EQ(first_context.size(), 2U);
  f.columns.pop_back();
  f.y.conservativeResize(1);
  Rng rng(0);
  EXPECT_THROW(sample_episode(features, f, rng, cfg), Error);
}

TEST(SampleEpisode, SeedDeterministicAndDisjoint) {
  Rng data_rng(12);
  const Index o = 40;
  const auto features = random_bits(8, o, data_rng);
  FunctionData f = make_function(o, data_rng);
  EpisodeConfig cfg{2, 20, 1, 15, false};
  Rng a(99), b(99);
  const auto ea = sample_episode(features, f, a, cfg);
  const auto eb = sample_episode(features, f, b, cfg);
  EXPECT_EQ(ea.context_y, eb.context_y);
  EXPECT_EQ(ea.target_y, eb.target_y);

  // Scores are distinct, so disjoint index sets <=> disjoint score sets.
  Rng rng(13);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto ep = sample_episode(features, f, rng, cfg);
    ASSERT_GE(ep.context_y.size(), 2);
    ASSERT_LE(ep.context_y.size(), 20);
    ASSERT_GE(ep.target_y.size(), 1);
    ASSERT_LE(ep.context_y.size() + ep.target_y.size(), o);
    std::set<double> ctx(ep.context_y.begin(), ep.context_y.end());
    ASSERT_EQ(ctx.size(), static_cast<std::size_t>(ep.context_y.size()));
    for (double y : ep.target_y) ASSERT_EQ(ctx.count(y), 0U);
  }
}

std::vector<FunctionData> linear_family(const FeatureMatrix& features, int n_functions, Rng& rng) {
  const Matrix dense = features.toDense();
  const Vector shared = random_vector(features.rows(), rng);
  std::vector<FunctionData> out;
  for (int i = 0; i < n_functions; ++i) {
    FunctionData f{"f" + std::to_string(i), {}, {}};
    const Vector w = shared + 0.3 * random_vector(features.rows(), rng);
    f.y = dense.transpose() * w;
    for (Index j = 0; j < features.cols(); ++j) f.columns.push_back(j);
    out.push_back(std::move(f));
  }
  return out;
}

TEST(Train, ZeroEpochsLeavesModelUnchanged) {
  Rng rng(14);
  auto model = CnpModel::create(tiny_arch(), rng);
  const auto before = model;
  const auto features = random_bits(8, 30, rng);
  const auto fns = linear_family(features, 3, rng);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto log = train(model, features, fns, cfg, rng);
  EXPECT_TRUE(log.losses.empty());
  EXPECT_EQ(model, before);
}

TEST(Train, ReducesLossAndIsDeterministic) {
  Rng data_rng(15);
  const auto features = random_bits(8, 60, data_rng);
  const auto fns = linear_family(features, 6, data_rng);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.episode = {3, 10, 5, 20, true};
  cfg.adam.learning_rate = 3e-3;

  auto run = [&] {
    Rng rng(77);
    auto model = CnpModel::create(tiny_arch(), rng);
    model.set_scaling(pooled_scaling(fns));
    std::vector<int> seen;
    auto log = train(model, features, fns, cfg, rng, [&](int epoch, double, const CnpModel&) { seen.push_back(epoch); });
    EXPECT_EQ(seen.size(), 300U);
    EXPECT_EQ(seen.back(), 300);
    return std::make_pair(model, log);
  };
  const auto [m1, log1] = run();
  const auto [m2, log2] = run();
  EXPECT_EQ(m1, m2);
  EXPECT_EQ(log1.losses, log2.losses);
  auto mean_of = [](const std::vector<double>& v, std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += v[i];
    return s / static_cast<double>(to - from);
  };
  EXPECT_LT(mean_of(log1.losses, 250, 300), mean_of(log1.losses, 0, 20));
  EXPECT_TRUE(m1.encoder().all_finite());
  EXPECT_TRUE(m1.decoder().all_finite());
}

TEST(Train, NonFiniteLossAborts) {
  Rng rng(16);
  auto model = CnpModel::create(tiny_arch(), rng);
  const auto features = random_bits(8, 20, rng);
  auto fns = linear_family(features, 2, rng);
  fns[1].y.setConstant(std::numeric_limits<double>::infinity());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.episode = {2, 5, 1, 5, true};
  try {
    train(model, features, fns, cfg, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFiniteLoss);
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos);
  }
}

TEST(Conditioning, AccumulatorAndCandidatePredictorMatchPredict) {
  Rng rng(17);
  auto model = CnpModel::create(tiny_arch(), rng);
  model.set_scaling({-3.0, 1.5});
  const auto cx = random_bits(8, 6, rng);
  const Vector cy = random_vector(6, rng);
  const auto tx = random_bits(8, 9, rng);

  ContextAccumulator acc(model);
  acc.add(gather_columns(cx, std::vector<Index>{0, 1, 2}), cy.head(3));
  acc.add(gather_columns(cx, std::vector<Index>{3, 4, 5}), cy.tail(3));
  EXPECT_EQ(acc.size(), 6);
  EXPECT_TRUE(acc.representation().isApprox(aggregate(encode(model, cx, cy)), 1e-12));

  const CandidatePredictor pool(model, tx);
  const auto fast = pool.predict(acc.representation());
  const auto slow = predict(model, cx, cy, tx);
  EXPECT_LE((fast.means - slow.means).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((fast.variances - slow.variances).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Checkpoint, RoundTripWithManifest) {
  Rng rng(18);
  auto model = CnpModel::create(tiny_arch(), rng);
  model.set_scaling({-7.25, 1.0 / 3.0});
  const auto dir = std::filesystem::temp_directory_path() / "molnp_test_cnp";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", model, {3, 42, 1000});
  const auto loaded = load_checkpoint(dir / "model.ckpt");
  EXPECT_EQ(loaded.model, model);
  EXPECT_EQ(loaded.manifest.seed, 42U);
  EXPECT_EQ(loaded.manifest.epoch, 1000);
  EXPECT_EQ(loaded.manifest.fingerprint_radius, 3);
  try {
    load_checkpoint(dir / "missing.ckpt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingCheckpoint);
  }
}

}  // namespace
}  // namespace molnp::cnp
