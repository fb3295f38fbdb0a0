#include "dsdm/trak.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "dsdm/io.hpp"

namespace dsdm {

namespace {

constexpr std::uint32_t kStoreVersion = 1;
constexpr char kStoreMagic[4] = {'T', 'R', 'K', 'G'};

double clamped_sigmoid(double t) {
  const double p = t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  return std::clamp(p, kProbFloor, 1.0 - kProbFloor);
}

const FeatureSample& as_features(const Sample& z) {
  const auto* f = std::get_if<FeatureSample>(&z);
  if (!f) throw Error("influence_logistic needs feature samples");
  return *f;
}

// (Phi^T Phi + lambda I)^{-1} Phi^T, d x n.
Eigen::MatrixXd pseudo_regression_factor(const Eigen::MatrixXd& phi, double lambda) {
  const auto d = phi.cols();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d, d);
  gram.selfadjointView<Eigen::Lower>().rankUpdate(phi.transpose());
  gram = gram.selfadjointView<Eigen::Lower>();
  gram.diagonal().array() += lambda;
  if (lambda == 0.0) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
    if (lu.rank() < d) throw Error("add ridge");
  }
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw Error("add ridge");
  return llt.solve(phi.transpose());
}

}  // namespace

void TrakConfig::validate() const {
  if (m < 1) throw ConfigError("trak.m must be >= 1");
  if (d < 1) throw ConfigError("trak.d must be >= 1");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
    throw ConfigError("trak.subset_fraction must be in (0, 1]");
  }
  if (ridge && !(*ridge >= 0.0)) throw ConfigError("trak.ridge must be non-negative");
  train.validate();
}

void save_gradient_store(const GradientStore& store, const std::filesystem::path& path) {
  if (store.identity) throw Error("identity-projection stores cannot be persisted");
  auto out = io::open_out(path, true);
  out.write(kStoreMagic, 4);
  io::write_u32(out, kStoreVersion);
  io::write_u64(out, store.size());
  io::write_u64(out, store.d);
  io::write_u64(out, store.projection_seed);
  for (Eigen::Index i = 0; i < store.phi.rows(); ++i) {
    for (Eigen::Index j = 0; j < store.phi.cols(); ++j) {
      io::write_f32(out, static_cast<float>(store.phi(i, j)));
    }
  }
  for (double q : store.q_diag) io::write_f32(out, static_cast<float>(q));
  if (!out) throw Error("failed writing " + path.string());
}

GradientStore load_gradient_store(const std::filesystem::path& path, std::size_t model_index) {
  auto in = io::open_in(path, true);
  char magic[4];
  in.read(magic, 4);
  if (!in || !std::equal(magic, magic + 4, kStoreMagic)) {
    throw Error(path.string() + ": not a gradient store");
  }
  if (io::read_u32(in) != kStoreVersion) throw Error(path.string() + ": unsupported version");
  GradientStore store;
  store.model_index = model_index;
  const auto n = static_cast<Eigen::Index>(io::read_u64(in));
  store.d = io::read_u64(in);
  store.projection_seed = io::read_u64(in);
  store.phi.resize(n, static_cast<Eigen::Index>(store.d));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < store.phi.cols(); ++j) store.phi(i, j) = io::read_f32(in);
  }
  store.q_diag.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) store.q_diag[i] = io::read_f32(in);
  if (!in) throw Error(path.string() + ": truncated gradient store");
  return store;
}

Eigen::MatrixXd projection_matrix(std::size_t num_params, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd p(static_cast<Eigen::Index>(num_params), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = normal(rng);
  }
  return p;
}

SubsetMask reference_subset(std::size_t pool_size, const TrakConfig& cfg, std::size_t k) {
  if (cfg.subset_fraction >= 1.0) return SubsetMask::full(pool_size);
  const auto seed = derive_seed(derive_seed(cfg.seed, "reference-subset"), k);
  return sample_subsets(pool_size, 1, cfg.subset_fraction, seed).front();
}

std::uint64_t reference_train_seed(const TrakConfig& cfg, std::size_t k) {
  return derive_seed(derive_seed(cfg.seed, "reference-train"), k);
}

std::uint64_t reference_projection_seed(const TrakConfig& cfg, std::size_t k) {
  return derive_seed(derive_seed(cfg.seed, "projection"), k);
}

std::vector<ModelParams> train_reference_models(const Predictor& predictor,
                                                std::span<const Sample> pool,
                                                const TrakConfig& cfg) {
  cfg.validate();
  std::vector<ModelParams> models(cfg.m);
  parallel_for(cfg.m, [&](std::size_t k) {
    TrainConfig tc = cfg.train;
    tc.seed = reference_train_seed(cfg, k);
    models[k] = train(predictor, pool, reference_subset(pool.size(), cfg, k), tc);
  });
  return models;
}

Eigen::VectorXd margin_gradient(const Predictor& predictor, const Eigen::VectorXd& theta,
                                const Sample& z) {
  return predictor.margin_sign(z) * predictor.grad_output(theta, z);
}

GradientStore project_gradients(const Predictor& predictor, const ModelParams& params,
                                std::span<const Sample> pool, std::size_t d,
                                std::uint64_t projection_seed, std::size_t model_index,
                                bool identity) {
  if (d < 1) throw ConfigError("projection dimension must be >= 1");
  const auto num_params = predictor.num_params();
  if (identity && d != num_params) {
    throw ConfigError("identity projection needs d equal to the parameter count");
  }
  Eigen::MatrixXd proj;
  if (!identity) proj = projection_matrix(num_params, d, projection_seed);

  GradientStore store;
  store.model_index = model_index;
  store.d = d;
  store.projection_seed = projection_seed;
  store.identity = identity;
  store.phi.resize(static_cast<Eigen::Index>(pool.size()), static_cast<Eigen::Index>(d));
  store.q_diag.resize(static_cast<Eigen::Index>(pool.size()));
  parallel_for(pool.size(), [&](std::size_t i) {
    const Eigen::VectorXd g = margin_gradient(predictor, params.theta, pool[i]);
    if (!g.allFinite()) throw Error("non-finite gradient for example " + std::to_string(i));
    const auto row = static_cast<Eigen::Index>(i);
    if (identity) {
      store.phi.row(row) = g.transpose();
    } else {
      store.phi.row(row).noalias() = g.transpose() * proj;
    }
    store.q_diag[row] = 1.0 - predictor.correctness(params.theta, pool[i]).mean;
  });
  return store;
}

TrakScorer::TrakScorer(const Predictor& predictor, std::vector<ModelParams> params,
                       std::vector<GradientStore> stores, std::optional<double> ridge)
    : predictor_(predictor), params_(std::move(params)), stores_(std::move(stores)) {
  if (stores_.empty()) throw Error("no gradient stores");
  if (params_.size() != stores_.size()) throw Error("one parameter vector per gradient store");
  pool_size_ = stores_.front().size();
  const std::size_t d = stores_.front().d;
  for (const auto& s : stores_) {
    if (s.size() != pool_size_ || s.d != d) throw Error("gradient stores disagree in shape");
  }

  const auto m = stores_.size();
  factors_.resize(m);
  projections_.resize(m);
  ridges_.resize(m);
  for (std::size_t k = 0; k < m; ++k) {
    const auto& phi = stores_[k].phi;
    // trace(Phi^T Phi) is the squared Frobenius norm of Phi.
    ridges_[k] = ridge ? *ridge : 1e-4 * phi.squaredNorm() / static_cast<double>(d);
    factors_[k] = pseudo_regression_factor(phi, ridges_[k]);
    if (!stores_[k].identity) {
      projections_[k] = projection_matrix(predictor_.num_params(), d, stores_[k].projection_seed);
    }
  }

  q_bar_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pool_size_));
  for (const auto& s : stores_) q_bar_ += s.q_diag;
  q_bar_ /= static_cast<double>(m);
}

Eigen::VectorXd TrakScorer::target_features(std::size_t k, const Sample& target) const {
  const Eigen::VectorXd g = margin_gradient(predictor_, params_[k].theta, target);
  if (!g.allFinite()) throw Error("non-finite target gradient");
  if (stores_[k].identity) return g;
  return projections_[k].transpose() * g;
}

Eigen::VectorXd TrakScorer::margin_scores(const Sample& target) const {
  Eigen::VectorXd a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(pool_size_));
  for (std::size_t k = 0; k < stores_.size(); ++k) {
    a.noalias() += factors_[k].transpose() * target_features(k, target);
  }
  a /= static_cast<double>(stores_.size());
  return a.cwiseProduct(q_bar_);
}

Datamodel TrakScorer::datamodel(const Sample& target, const std::string& target_id) const {
  Datamodel dm;
  dm.weights = -margin_scores(target);
  dm.bias = 0.0;
  dm.target_id = target_id;
  dm.estimator = Estimator::Trak;
  return dm;
}

TrakScorer fit_trak(const Predictor& predictor, std::span<const Sample> pool,
                    const TrakConfig& cfg) {
  auto params = train_reference_models(predictor, pool, cfg);
  std::vector<GradientStore> stores;
  stores.reserve(cfg.m);
  const std::size_t d = cfg.identity_projection ? predictor.num_params() : cfg.d;
  for (std::size_t k = 0; k < cfg.m; ++k) {
    stores.push_back(project_gradients(predictor, params[k], pool, d,
                                       reference_projection_seed(cfg, k), k,
                                       cfg.identity_projection));
  }
  return TrakScorer(predictor, std::move(params), std::move(stores), cfg.ridge);
}

Datamodel trak_scores(const Sample& target, const std::vector<GradientStore>& stores,
                      const Predictor& predictor, const std::vector<ModelParams>& params,
                      std::optional<double> ridge) {
  return TrakScorer(predictor, params, stores, ridge).datamodel(target);
}

Eigen::VectorXd influence_logistic(const Sample& target, std::span<const Sample> pool,
                                   const Eigen::VectorXd& theta, double l2) {
  if (pool.empty()) throw Error("empty pool");
  if (!(l2 >= 0.0)) throw Error("l2 must be non-negative");
  const auto dim = theta.size();
  const auto& tz = as_features(target);
  if (tz.x.size() != dim) throw Error("target dimension does not match parameters");

  std::vector<double> p(pool.size());
  Eigen::MatrixXd hessian = Eigen::MatrixXd::Zero(dim, dim);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& f = as_features(pool[i]);
    if (f.x.size() != dim) throw Error("pool dimension does not match parameters");
    p[i] = clamped_sigmoid(f.label * (f.x.dot(theta) + f.bias));
    hessian.selfadjointView<Eigen::Lower>().rankUpdate(f.x, p[i] * (1.0 - p[i]));
  }
  hessian = hessian.selfadjointView<Eigen::Lower>();
  hessian.diagonal().array() += l2;

  Eigen::FullPivLU<Eigen::MatrixXd> lu(hessian);
  if (lu.rank() < dim) throw Error("degenerate design; add ℓ2 regularization to training");
  Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian);
  const Eigen::VectorXd h_inv_target = ldlt.solve(tz.x);

  Eigen::VectorXd influence(static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto& f = as_features(pool[i]);
    const double r = p[i] * (1.0 - p[i]);
    const double leverage = f.x.dot(ldlt.solve(f.x));
    influence[static_cast<Eigen::Index>(i)] =
        f.label * (1.0 - p[i]) * h_inv_target.dot(f.x) / (1.0 - r * leverage);
  }
  return influence;
}

Datamodel loo_datamodel_from_influence(const Eigen::VectorXd& influence, double f_full,
                                       const std::string& target_id) {
  Datamodel dm;
  dm.weights = influence;
  dm.bias = f_full - influence.sum();
  dm.target_id = target_id;
  dm.estimator = Estimator::InfluenceExact;
  return dm;
}

}  // namespace dsdm
