#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dsdm/mask.hpp"
#include "dsdm/predictors.hpp"

namespace dsdm {

enum class Estimator { Regression, Trak, InfluenceExact };

std::string to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);

/// Linear datamodel tau(1_S) = bias + weights^T 1_S for one target example.
struct Datamodel {
  Eigen::VectorXd weights;
  double bias = 0.0;
  std::string target_id;
  Estimator estimator = Estimator::Regression;

  double evaluate(const SubsetMask& mask) const;
};

void save_datamodels(const std::vector<Datamodel>& dms, const std::filesystem::path& path);
std::vector<Datamodel> load_datamodels(const std::filesystem::path& path);

struct RegressionRecord {
  SubsetMask mask;
  double loss = 0.0;  ///< realized target quantity for one training on `mask`
};

/// `count` masks over a pool of `pool_size`, each with exactly
/// round(fraction * pool_size) uniformly placed ones.
std::vector<SubsetMask> sample_subsets(std::size_t pool_size, std::size_t count, double fraction,
                                       std::uint64_t seed);

/// Which quantity is recorded for each target after training.
enum class RecordQuantity { Loss, Output };

struct RegressionData {
  std::vector<std::vector<RegressionRecord>> per_target;
  std::size_t trainings = 0;
};

/// Trains once per (mask, seed replicate) and records the target quantity for
/// every target. Replicate r trains with seed derive_seed(cfg.seed, r) and the
/// recorded value is the mean over replicates; with one replicate the seed is
/// cfg.seed itself. Trainings run in parallel; records are ordered by mask.
RegressionData collect_regression_data(const Predictor& predictor, std::span<const Sample> pool,
                                       std::span<const Sample> targets,
                                       const std::vector<SubsetMask>& masks,
                                       const TrainConfig& cfg,
                                       RecordQuantity quantity = RecordQuantity::Loss,
                                       std::size_t seeds_per_mask = 1);

/// Least squares on raw 0/1 masks with an intercept:
///   min sum_i (bias + w^T 1_{S_i} - loss_i)^2 + ridge ||w||^2
/// solved through the normal equations. The intercept is not penalized.
Datamodel fit_linear_datamodel(std::span<const RegressionRecord> records, double ridge = 1e-6);

// {"mask_popcount", "mask_indices", "target_id", "loss"} per line.
void save_regression_records(const std::vector<std::vector<RegressionRecord>>& per_target,
                             const std::vector<std::string>& target_ids,
                             const std::filesystem::path& path);
/// Groups records by target_id in first-seen order.
std::vector<std::pair<std::string, std::vector<RegressionRecord>>> load_regression_records(
    const std::filesystem::path& path, std::size_t pool_size);

}  // namespace dsdm
