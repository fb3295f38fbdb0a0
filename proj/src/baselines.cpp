#include "dsdm/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "dsdm/io.hpp"

namespace dsdm {

namespace {

SelectionResult finish_selection(std::vector<std::size_t> chosen, const Eigen::VectorXd& scores,
                                 const std::string& method) {
  std::sort(chosen.begin(), chosen.end());
  SelectionResult r;
  r.method = method;
  r.k = chosen.size();
  r.indices = std::move(chosen);
  for (std::size_t i : r.indices) r.scores.push_back(scores[static_cast<Eigen::Index>(i)]);
  return r;
}

// Indices of the k largest keys; equal keys keep ascending index order.
std::vector<std::size_t> top_k(const Eigen::VectorXd& keys, std::size_t k) {
  std::vector<std::size_t> order(static_cast<std::size_t>(keys.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return keys[static_cast<Eigen::Index>(a)] > keys[static_cast<Eigen::Index>(b)];
  });
  order.resize(k);
  return order;
}

}  // namespace

void HashedNgramFeaturizer::validate() const {
  if (n_max < 1) throw ConfigError("n_max must be >= 1");
  if (buckets < 2) throw ConfigError("buckets must be >= 2");
}

std::size_t HashedNgramFeaturizer::bucket(std::span<const Token> ngram) const {
  std::uint64_t h = mix64(hash_seed ^ (ngram.size() * 0x9e3779b97f4a7c15ULL));
  for (Token t : ngram) h = mix64(h ^ static_cast<std::uint32_t>(t));
  return static_cast<std::size_t>(h % buckets);
}

SparseCounts HashedNgramFeaturizer::featurize(std::span<const Token> tokens) const {
  std::map<std::size_t, double> counts;
  for (std::size_t n = 1; n <= n_max; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) counts[bucket(tokens.subspan(i, n))] += 1.0;
  }
  return {counts.begin(), counts.end()};
}

NgramDistribution fit_ngram_distribution(std::span<const Doc> docs,
                                         const HashedNgramFeaturizer& f, double smoothing_alpha) {
  f.validate();
  if (docs.empty()) throw Error("no documents to fit an n-gram distribution");
  if (!(smoothing_alpha >= 0.0)) throw ConfigError("smoothing_alpha must be non-negative");
  Eigen::VectorXd counts = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(f.buckets),
                                                     smoothing_alpha);
  for (const auto& d : docs) {
    for (const auto& [b, c] : f.featurize(d)) counts[static_cast<Eigen::Index>(b)] += c;
  }
  const double total = counts.sum();
  if (!(total > 0.0)) throw Error("n-gram distribution has no mass");
  return {counts / total, smoothing_alpha};
}

Eigen::VectorXd dsir_log_weights(std::span<const Doc> pool, const NgramDistribution& p_hat,
                                 const NgramDistribution& q_hat, const HashedNgramFeaturizer& f) {
  if (p_hat.gamma.size() != q_hat.gamma.size() ||
      p_hat.gamma.size() != static_cast<Eigen::Index>(f.buckets)) {
    throw Error("n-gram distributions disagree in bucket count");
  }
  Eigen::VectorXd out(static_cast<Eigen::Index>(pool.size()));
  parallel_for(pool.size(), [&](std::size_t i) {
    double lw = 0.0;
    for (const auto& [b, c] : f.featurize(pool[i])) {
      const double p = p_hat.gamma[static_cast<Eigen::Index>(b)];
      const double q = q_hat.gamma[static_cast<Eigen::Index>(b)];
      if (p <= 0.0 || q <= 0.0) throw Error("unsmoothed zero; set smoothing_alpha > 0");
      lw += c * (std::log(p) - std::log(q));
    }
    out[static_cast<Eigen::Index>(i)] = lw;
  });
  return out;
}

SelectionResult sample_without_replacement(const Eigen::VectorXd& log_weights, std::size_t k,
                                           std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(log_weights.size());
  if (k < 1 || k > n) throw Error("k outside [1, pool size]");
  std::mt19937_64 rng(derive_seed(seed, "gumbel-top-k"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::VectorXd keys(log_weights.size());
  for (Eigen::Index i = 0; i < keys.size(); ++i) {
    double u = 0.0;
    while (u == 0.0) u = unif(rng);
    keys[i] = log_weights[i] - std::log(-std::log(u));
  }
  return finish_selection(top_k(keys, k), log_weights, "gumbel_topk");
}

SelectionResult dsir_select(std::span<const Doc> pool, std::span<const Doc> target_docs,
                            std::size_t k, const HashedNgramFeaturizer& f, double smoothing_alpha,
                            std::uint64_t seed) {
  const auto p_hat = fit_ngram_distribution(target_docs, f, smoothing_alpha);
  const auto q_hat = fit_ngram_distribution(pool, f, smoothing_alpha);
  auto r = sample_without_replacement(dsir_log_weights(pool, p_hat, q_hat, f), k, seed);
  r.method = "dsir";
  return r;
}

LomaxSampler::LomaxSampler(double alpha, std::uint64_t seed, double scale)
    : alpha_(alpha), scale_(scale), rng_(seed) {
  if (!(alpha > 0.0)) throw ConfigError("Lomax alpha must be positive");
  if (!(scale > 0.0)) throw ConfigError("Lomax scale must be positive");
}

double LomaxSampler::operator()() {
  // Inverse CDF with u in (0, 1].
  const double u = 1.0 - unif_(rng_);
  return scale_ * (std::pow(u, -1.0 / alpha_) - 1.0);
}

double fit_lomax_alpha_residuals(std::span<const double> residuals) {
  if (residuals.size() < 10) throw Error("need at least 10 samples to fit a Lomax shape");
  double total = 0.0;
  for (double r : residuals) {
    if (!(r >= 0.0)) throw Error("Lomax residuals must be non-negative");
    total += std::log1p(r);
  }
  if (total == 0.0) throw Error("degenerate: zero residuals");
  return static_cast<double>(residuals.size()) / total;
}

double fit_lomax_alpha(std::span<const double> scores) {
  std::vector<double> residuals;
  residuals.reserve(scores.size());
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw Error("scores must lie in [0, 1]");
    residuals.push_back(1.0 - s);
  }
  return fit_lomax_alpha_residuals(residuals);
}

Eigen::VectorXd classifier_features(std::span<const Token> tokens,
                                    const HashedNgramFeaturizer& f) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(f.buckets + 1));
  for (const auto& [b, c] : f.featurize(tokens)) x[static_cast<Eigen::Index>(b)] = c;
  const double norm = x.norm();
  if (norm > 0.0) x /= norm;
  x[static_cast<Eigen::Index>(f.buckets)] = 1.0;
  return x;
}

ClassifierScores classifier_scores(std::span<const Doc> pool, std::span<const Doc> pool_holdout,
                                   std::span<const Doc> target_docs,
                                   const HashedNgramFeaturizer& f, const TrainConfig& train_cfg) {
  f.validate();
  if (pool_holdout.empty() || target_docs.empty()) {
    throw Error("classifier needs target and pool-holdout documents");
  }
  std::vector<Sample> data;
  for (const auto& d : target_docs) data.push_back(FeatureSample{classifier_features(d, f), 0.0, 1});
  for (const auto& d : pool_holdout) {
    data.push_back(FeatureSample{classifier_features(d, f), 0.0, -1});
  }
  LogisticPredictor clf(LogisticSpec{f.buckets + 1});
  ClassifierScores out;
  out.params = train(clf, data, SubsetMask::full(data.size()), train_cfg);
  out.scores.resize(static_cast<Eigen::Index>(pool.size()));
  parallel_for(pool.size(), [&](std::size_t i) {
    const double logit = classifier_features(pool[i], f).dot(out.params.theta);
    out.scores[static_cast<Eigen::Index>(i)] = 1.0 / (1.0 + std::exp(-logit));
  });
  return out;
}

SelectionResult lomax_accept(const Eigen::VectorXd& scores, const ClassifierConfig& cfg,
                             std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(scores.size());
  if (cfg.k_cap && (*cfg.k_cap < 1 || *cfg.k_cap > n)) throw Error("k_cap outside [1, pool size]");
  LomaxSampler eps(cfg.alpha, derive_seed(seed, "lomax-accept"));
  std::vector<std::uint8_t> accepted(n, 0);
  std::size_t count = 0;
  const std::size_t rounds = cfg.k_cap ? std::max<std::size_t>(cfg.max_rounds, 1) : 1;
  for (std::size_t round = 0; round < rounds; ++round) {
    for (std::size_t i = 0; i < n; ++i) {
      if (accepted[i]) continue;
      if (eps() > 1.0 - scores[static_cast<Eigen::Index>(i)]) {
        accepted[i] = 1;
        ++count;
      }
    }
    if (!cfg.k_cap || count >= *cfg.k_cap) break;
  }

  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < n; ++i) {
    if (accepted[i]) chosen.push_back(i);
  }
  if (cfg.k_cap && chosen.size() > *cfg.k_cap) {
    std::stable_sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
      return scores[static_cast<Eigen::Index>(a)] > scores[static_cast<Eigen::Index>(b)];
    });
    chosen.resize(*cfg.k_cap);
  }
  return finish_selection(std::move(chosen), scores, "classifier");
}

SelectionResult classifier_select(std::span<const Doc> pool, std::span<const Doc> pool_holdout,
                                  std::span<const Doc> target_docs, const HashedNgramFeaturizer& f,
                                  const ClassifierConfig& cfg, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, "classifier-train");
  const auto scored = classifier_scores(pool, pool_holdout, target_docs, f, tc);
  return lomax_accept(scored.scores, cfg, seed);
}

KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t n_clusters, std::uint64_t seed,
                    std::size_t iterations) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (n_clusters < 1 || n_clusters > n) throw Error("n_clusters outside [1, pool size]");
  std::mt19937_64 rng(derive_seed(seed, "kmeans"));
  const auto kc = static_cast<Eigen::Index>(n_clusters);
  Eigen::MatrixXd centroids(kc, points.cols());

  // k-means++ seeding.
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centroids.row(0) = points.row(static_cast<Eigen::Index>(first(rng)));
  Eigen::VectorXd dist2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
  for (Eigen::Index c = 1; c < kc; ++c) {
    std::size_t pick;
    if (dist2.sum() > 0.0) {
      std::discrete_distribution<std::size_t> d2(dist2.data(), dist2.data() + dist2.size());
      pick = d2(rng);
    } else {
      pick = first(rng);
    }
    centroids.row(c) = points.row(static_cast<Eigen::Index>(pick));
    dist2 = dist2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
  }

  KMeansResult out;
  out.assignment.assign(n, 0);
  for (std::size_t it = 0; it <= iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centroids.rowwise() - points.row(static_cast<Eigen::Index>(i))).rowwise().squaredNorm().minCoeff(&best);
      out.assignment[i] = static_cast<std::size_t>(best);
    }
    if (it == iterations) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(kc, points.cols());
    std::vector<std::size_t> sizes(n_clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(out.assignment[i])) += points.row(static_cast<Eigen::Index>(i));
      ++sizes[out.assignment[i]];
    }
    for (std::size_t c = 0; c < n_clusters; ++c) {
      if (sizes[c] > 0) {
        centroids.row(static_cast<Eigen::Index>(c)) =
            sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(sizes[c]);
      }
    }
  }
  out.centroids = std::move(centroids);
  return out;
}

SelectionResult semdedup_select(const Eigen::MatrixXd& embeddings, std::size_t n_clusters,
                                double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError("keep_fraction must be in (0, 1]");
  }
  const auto n = static_cast<std::size_t>(embeddings.rows());
  Eigen::MatrixXd unit = embeddings;
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = embeddings.row(static_cast<Eigen::Index>(i)).norm();
    if (!(norm > 0.0)) throw Error("zero-norm embedding for example " + std::to_string(i));
    unit.row(static_cast<Eigen::Index>(i)) /= norm;
  }
  const auto km = kmeans(unit, n_clusters, seed);

  Eigen::VectorXd similarity(static_cast<Eigen::Index>(n));
  std::vector<std::vector<std::size_t>> members(n_clusters);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<Eigen::Index>(km.assignment[i]);
    const double cn = km.centroids.row(c).norm();
    similarity[static_cast<Eigen::Index>(i)] =
        cn > 0.0 ? unit.row(static_cast<Eigen::Index>(i)).dot(km.centroids.row(c)) / cn : 0.0;
    members[km.assignment[i]].push_back(i);
  }

  std::vector<std::size_t> kept;
  for (auto& group : members) {
    std::stable_sort(group.begin(), group.end(), [&](std::size_t a, std::size_t b) {
      return similarity[static_cast<Eigen::Index>(a)] < similarity[static_cast<Eigen::Index>(b)];
    });
    const auto keep = static_cast<std::size_t>(
        std::llround(keep_fraction * static_cast<double>(group.size())));
    kept.insert(kept.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return finish_selection(std::move(kept), similarity, "semdedup");
}

SelectionResult random_select(std::size_t pool_size, std::size_t k, std::uint64_t seed) {
  if (k < 1 || k > pool_size) throw Error("k outside [1, pool size]");
  std::mt19937_64 rng(derive_seed(seed, "random-select"));
  std::vector<std::size_t> perm(pool_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
    std::swap(perm[i], perm[pick(rng)]);
  }
  perm.resize(k);
  return finish_selection(std::move(perm), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pool_size)),
                          "random");
}

void save_embeddings(const Eigen::MatrixXd& m, const std::filesystem::path& path) {
  auto out = io::open_out(path, true);
  io::write_u64(out, static_cast<std::uint64_t>(m.rows()));
  io::write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) io::write_f32(out, static_cast<float>(m(i, j)));
  }
  if (!out) throw Error("failed writing " + path.string());
}

Eigen::MatrixXd load_embeddings(const std::filesystem::path& path) {
  auto in = io::open_in(path, true);
  const auto n = static_cast<Eigen::Index>(io::read_u64(in));
  const auto e = static_cast<Eigen::Index>(io::read_u64(in));
  Eigen::MatrixXd m(n, e);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < e; ++j) m(i, j) = io::read_f32(in);
  }
  if (!in) throw Error(path.string() + ": truncated embedding file");
  return m;
}

}  // namespace dsdm
