#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dsdm/datamodel.hpp"
#include "dsdm/predictors.hpp"

namespace dsdm {

struct TrakConfig {
  std::size_t m = 4;                ///< reference models
  std::size_t d = 512;              ///< projection dimension
  double subset_fraction = 0.38;    ///< pool fraction each reference model trains on
  std::optional<double> ridge;      ///< unset: 1e-4 * trace(Phi^T Phi) / d
  std::uint64_t seed = 0;
  bool identity_projection = false; ///< test hook: phi rows are raw gradients
  TrainConfig train;

  void validate() const;
};

/// Projected, label-signed output gradients of one reference model over the
/// pool, plus the diagonal of Q.
struct GradientStore {
  std::size_t model_index = 0;
  Eigen::MatrixXd phi;     ///< n x d
  Eigen::VectorXd q_diag;  ///< 1 - (mean clamped correct-class probability)
  std::size_t d = 0;
  std::uint64_t projection_seed = 0;
  bool identity = false;

  std::size_t size() const { return static_cast<std::size_t>(phi.rows()); }
};

// "TRKG", u32 version, u64 n, u64 d, u64 projection_seed, then n*d f32
// row-major phi and n f32 q_diag. Little-endian.
void save_gradient_store(const GradientStore& store, const std::filesystem::path& path);
GradientStore load_gradient_store(const std::filesystem::path& path, std::size_t model_index = 0);

/// num_params x d matrix of i.i.d. N(0, 1) entries, a pure function of seed.
Eigen::MatrixXd projection_matrix(std::size_t num_params, std::size_t d, std::uint64_t seed);

/// Training subset of reference model k.
SubsetMask reference_subset(std::size_t pool_size, const TrakConfig& cfg, std::size_t k);
std::uint64_t reference_train_seed(const TrakConfig& cfg, std::size_t k);
std::uint64_t reference_projection_seed(const TrakConfig& cfg, std::size_t k);

std::vector<ModelParams> train_reference_models(const Predictor& predictor,
                                                std::span<const Sample> pool,
                                                const TrakConfig& cfg);

/// Gradient of the correctness margin: margin_sign(z) * grad_output(z).
Eigen::VectorXd margin_gradient(const Predictor& predictor, const Eigen::VectorXd& theta,
                                const Sample& z);

GradientStore project_gradients(const Predictor& predictor, const ModelParams& params,
                                std::span<const Sample> pool, std::size_t d,
                                std::uint64_t projection_seed, std::size_t model_index = 0,
                                bool identity = false);

/// Scores targets against fixed gradient stores. The per-store factor
/// (Phi^T Phi + lambda I)^{-1} Phi^T is computed once at construction.
class TrakScorer {
 public:
  TrakScorer(const Predictor& predictor, std::vector<ModelParams> params,
             std::vector<GradientStore> stores, std::optional<double> ridge = std::nullopt);

  std::size_t pool_size() const { return pool_size_; }
  std::size_t num_models() const { return stores_.size(); }
  const GradientStore& store(std::size_t k) const { return stores_.at(k); }
  double ridge(std::size_t k) const { return ridges_.at(k); }

  /// A (averaged pseudo-regression row) times Q-bar, elementwise: the
  /// estimated effect of including each pool example on the target margin.
  Eigen::VectorXd margin_scores(const Sample& target) const;

  /// Loss-direction datamodel: weights = -margin_scores, bias 0. Lower weight
  /// means inclusion lowers the target loss more.
  Datamodel datamodel(const Sample& target, const std::string& target_id = {}) const;

 private:
  Eigen::VectorXd target_features(std::size_t k, const Sample& target) const;

  const Predictor& predictor_;
  std::vector<ModelParams> params_;
  std::vector<GradientStore> stores_;
  std::vector<Eigen::MatrixXd> factors_;      // d x n
  std::vector<Eigen::MatrixXd> projections_;  // regenerated from seed, empty for identity
  std::vector<double> ridges_;
  Eigen::VectorXd q_bar_;
  std::size_t pool_size_ = 0;
};

/// Trains reference models, collects gradient stores and builds a scorer.
TrakScorer fit_trak(const Predictor& predictor, std::span<const Sample> pool,
                    const TrakConfig& cfg);

/// One-shot form of TrakScorer::datamodel without factor caching.
Datamodel trak_scores(const Sample& target, const std::vector<GradientStore>& stores,
                      const Predictor& predictor, const std::vector<ModelParams>& params,
                      std::optional<double> ridge = std::nullopt);

/// Leave-one-out influence of every pool example on the target output for a
/// logistic model trained with the Newton solver and weight decay `l2`:
///   IF_i = y_i (1 - p_i) x^T H^{-1} x_i / (1 - R_i x_i^T H^{-1} x_i),
///   H = X^T R X + l2 I,  R_i = p_i (1 - p_i),
/// approximating f(z; full) - f(z; pool without i).
Eigen::VectorXd influence_logistic(const Sample& target, std::span<const Sample> pool,
                                   const Eigen::VectorXd& theta, double l2 = 0.0);

/// weights = influence, bias = f_full - sum(influence).
Datamodel loo_datamodel_from_influence(const Eigen::VectorXd& influence, double f_full,
                                       const std::string& target_id = {});

}  // namespace dsdm
