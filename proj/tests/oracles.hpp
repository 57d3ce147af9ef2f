#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "molnp/baselines.hpp"

namespace oracle {

using molnp::Fingerprint;
using molnp::Rng;
using molnp::baselines::ForestConfig;
using molnp::baselines::Metric;
using Eigen::Index;
using Vector = Eigen::VectorXd;

// Exhaustive neighbour search: stable sort of every training index by distance.
inline Vector knn_reference(const std::vector<Fingerprint>& train, const Vector& y, const std::vector<Fingerprint>& queries,
                     std::size_t k, Metric metric) {
  Vector out(static_cast<Index>(queries.size()));
  for (std::size_t q = 0; q < queries.size(); ++q) {
    std::vector<double> dist(train.size());
    for (std::size_t i = 0; i < train.size(); ++i)
      dist[i] = metric == Metric::Hamming ? static_cast<double>(molnp::hamming_distance(queries[q], train[i]))
                                          : 1.0 - molnp::tanimoto(queries[q], train[i]);
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += y(static_cast<Index>(idx[j]));
    out(static_cast<Index>(q)) = sum / static_cast<double>(k);
  }
  return out;
}

// Straightforward recursive forest following the documented growth protocol.
struct RefNode {
  int bit = -1;
  double value = 0.0;
  std::unique_ptr<RefNode> off, on;
};

inline std::unique_ptr<RefNode> ref_grow(const std::vector<Fingerprint>& x, const Vector& y, std::vector<std::size_t> samples,
                                  const ForestConfig& cfg, std::size_t mtry, Rng& rng) {
  auto node = std::make_unique<RefNode>();
  double sum = 0.0;
  for (auto s : samples) sum += y(static_cast<Index>(s));
  node->value = sum / static_cast<double>(samples.size());
  bool constant = true;
  for (auto s : samples) constant = constant && y(static_cast<Index>(s)) == y(static_cast<Index>(samples[0]));
  if (constant || samples.size() < 2 * cfg.min_samples_leaf) return node;

  const std::size_t nbits = x[0].nbits();
  std::vector<std::size_t> feats(nbits);
  std::iota(feats.begin(), feats.end(), std::size_t{0});
  for (std::size_t i = 0; i < mtry; ++i) std::swap(feats[i], feats[i + rng.uniform_index(nbits - i)]);

  const double parent = sum * sum / static_cast<double>(samples.size());
  double best = parent;
  int best_bit = -1;
  std::vector<std::size_t> best_off, best_on;
  for (std::size_t c = 0; c < mtry; ++c) {
    std::vector<std::size_t> off, on;
    for (auto s : samples) (x[s].test(feats[c]) ? on : off).push_back(s);
    if (off.size() < cfg.min_samples_leaf || on.size() < cfg.min_samples_leaf) continue;
    double so = 0.0, sn = 0.0;
    for (auto s : off) so += y(static_cast<Index>(s));
    for (auto s : on) sn += y(static_cast<Index>(s));
    const double score = so * so / static_cast<double>(off.size()) + sn * sn / static_cast<double>(on.size());
    const bool better = score > best || (score == best && best_bit >= 0 && static_cast<int>(feats[c]) < best_bit);
    if (better) {
      best = score;
      best_bit = static_cast<int>(feats[c]);
      best_off = off;
      best_on = on;
    }
  }
  if (best_bit < 0) return node;
  node->bit = best_bit;
  node->off = ref_grow(x, y, best_off, cfg, mtry, rng);
  node->on = ref_grow(x, y, best_on, cfg, mtry, rng);
  return node;
}

inline double ref_eval(const RefNode& n, const Fingerprint& q) {
  if (n.bit < 0) return n.value;
  return ref_eval(q.test(static_cast<std::size_t>(n.bit)) ? *n.on : *n.off, q);
}

inline Vector forest_reference(const std::vector<Fingerprint>& x, const Vector& y, const std::vector<Fingerprint>& queries,
                        const ForestConfig& cfg, std::uint64_t seed) {
  const std::size_t nbits = x[0].nbits();
  const std::size_t mtry = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::max(std::floor(cfg.max_features * static_cast<double>(nbits)), 1.0)), 1, nbits);
  std::vector<std::unique_ptr<RefNode>> trees;
  for (std::size_t t = 0; t < cfg.n_estimators; ++t) {
    Rng rng(molnp::derive_seed(seed, {t}));
    std::vector<std::size_t> samples(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) samples[i] = cfg.bootstrap ? rng.uniform_index(x.size()) : i;
    trees.push_back(ref_grow(x, y, samples, cfg, mtry, rng));
  }
  Vector out(static_cast<Index>(queries.size()));
  for (std::size_t q = 0; q < queries.size(); ++q) {
    double sum = 0.0;
    for (const auto& t : trees) sum += ref_eval(*t, queries[q]);
    out(static_cast<Index>(q)) = sum / static_cast<double>(trees.size());
  }
  return out;
}

}  // namespace oracle
