#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dsdm/common.hpp"
#include "dsdm/predictors.hpp"
#include "dsdm/selection.hpp"

namespace dsdm {

using Doc = std::vector<Token>;
/// (bucket, count) pairs sorted by bucket, no repeats.
using SparseCounts = std::vector<std::pair<std::size_t, double>>;

struct HashedNgramFeaturizer {
  std::size_t n_max = 2;
  std::size_t buckets = 4096;
  std::uint64_t hash_seed = 0;

  void validate() const;
  std::size_t bucket(std::span<const Token> ngram) const;
  /// Counts every n-gram of order 1..n_max.
  SparseCounts featurize(std::span<const Token> tokens) const;
};

struct NgramDistribution {
  Eigen::VectorXd gamma;
  double smoothing_alpha = 0.0;
};

/// gamma proportional to aggregate bucket counts + smoothing_alpha.
NgramDistribution fit_ngram_distribution(std::span<const Doc> docs,
                                         const HashedNgramFeaturizer& f,
                                         double smoothing_alpha = 0.01);

/// Bag-of-words log-likelihood ratio log p(c) - log q(c) per pool document.
Eigen::VectorXd dsir_log_weights(std::span<const Doc> pool, const NgramDistribution& p_hat,
                                 const NgramDistribution& q_hat, const HashedNgramFeaturizer& f);

/// Gumbel-top-k: the k largest log_weights[i] + G_i with G_i i.i.d. Gumbel(0, 1).
SelectionResult sample_without_replacement(const Eigen::VectorXd& log_weights, std::size_t k,
                                           std::uint64_t seed);

/// Fits the target distribution on `target_docs` and the raw distribution on
/// the pool, then samples k pool documents by importance weight.
SelectionResult dsir_select(std::span<const Doc> pool, std::span<const Doc> target_docs,
                            std::size_t k, const HashedNgramFeaturizer& f,
                            double smoothing_alpha, std::uint64_t seed);

/// Lomax(alpha, scale 1): P(eps > t) = (1 + t)^-alpha for t >= 0.
class LomaxSampler {
 public:
  LomaxSampler(double alpha, std::uint64_t seed, double scale = 1.0);
  double operator()();
  double alpha() const { return alpha_; }

 private:
  double alpha_;
  double scale_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

/// Maximum-likelihood shape for scale-1 Lomax residuals r_i = 1 - s_i:
/// alpha = n / sum log(1 + r_i).
double fit_lomax_alpha(std::span<const double> scores);
double fit_lomax_alpha_residuals(std::span<const double> residuals);

/// Unit-norm hashed n-gram counts with a trailing constant feature.
Eigen::VectorXd classifier_features(std::span<const Token> tokens, const HashedNgramFeaturizer& f);

struct ClassifierConfig {
  double alpha = 12.0;
  std::optional<std::size_t> k_cap;
  /// Further acceptance rounds over not-yet-accepted examples while fewer than
  /// k_cap are accepted.
  std::size_t max_rounds = 1000;
  TrainConfig train;
};

struct ClassifierScores {
  Eigen::VectorXd scores;  ///< sigma(f) per pool document
  ModelParams params;
};

ClassifierScores classifier_scores(std::span<const Doc> pool, std::span<const Doc> pool_holdout,
                                   std::span<const Doc> target_docs,
                                   const HashedNgramFeaturizer& f, const TrainConfig& train);

/// Keeps document i when eps > 1 - score_i with eps ~ Lomax(alpha).
SelectionResult classifier_select(std::span<const Doc> pool, std::span<const Doc> pool_holdout,
                                  std::span<const Doc> target_docs, const HashedNgramFeaturizer& f,
                                  const ClassifierConfig& cfg, std::uint64_t seed);

/// Acceptance step of classifier_select on precomputed scores.
SelectionResult lomax_accept(const Eigen::VectorXd& scores, const ClassifierConfig& cfg,
                             std::uint64_t seed);

/// Seeded k-means++ initialization followed by `iterations` Lloyd steps on the
/// unit-normalized rows. Returns cluster assignments and centroids.
struct KMeansResult {
  std::vector<std::size_t> assignment;
  Eigen::MatrixXd centroids;
};
KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t n_clusters, std::uint64_t seed,
                    std::size_t iterations = 25);

/// Per cluster, keeps the round(keep_fraction * size) members least similar
/// (cosine) to the centroid; ties go to the lower index.
SelectionResult semdedup_select(const Eigen::MatrixXd& embeddings, std::size_t n_clusters,
                                double keep_fraction, std::uint64_t seed);

SelectionResult random_select(std::size_t pool_size, std::size_t k, std::uint64_t seed);

// u64 n, u64 e, then n*e f32 row-major, little-endian.
void save_embeddings(const Eigen::MatrixXd& m, const std::filesystem::path& path);
Eigen::MatrixXd load_embeddings(const std::filesystem::path& path);

}  // namespace dsdm
