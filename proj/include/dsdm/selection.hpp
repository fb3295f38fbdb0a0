#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dsdm/datamodel.hpp"
#include "dsdm/mask.hpp"
#include "dsdm/predictors.hpp"

namespace dsdm {

struct SelectionResult {
  std::vector<std::size_t> indices;  ///< ascending pool positions
  std::vector<double> scores;        ///< per selected example, aligned with indices
  std::string method;
  std::string target;
  std::size_t k = 0;

  SubsetMask mask(std::size_t pool_size) const;
};

nlohmann::json selection_to_json(const SelectionResult& r);
SelectionResult selection_from_json(const nlohmann::json& j);
void save_selection(const SelectionResult& r, const std::filesystem::path& path);
SelectionResult load_selection(const std::filesystem::path& path);

struct MeanDatamodel {
  Eigen::VectorXd weights;
  std::size_t n_targets = 0;
  std::vector<double> task_weights;  ///< normalized; empty for a single flat average
};

/// Plain mean of the weight vectors.
MeanDatamodel average_datamodels(std::span<const Datamodel> dms);

/// Two-level mixture: mean within each task, then the task means combined
/// with the normalized task weights.
MeanDatamodel average_datamodels(const std::vector<std::vector<Datamodel>>& per_task,
                                 std::vector<double> task_weights);

/// 1_S^T weights; the bias is dropped because it is constant at fixed k.
double estimate_target_loss(const SubsetMask& mask, const MeanDatamodel& mean_dm);

/// The k examples with the smallest weights; ties go to the lower index.
SelectionResult dsdm_select(const MeanDatamodel& mean_dm, std::size_t k,
                            const std::string& target = {});

/// C(n, k), saturating at `cap + 1`.
std::size_t binomial_capped(std::size_t n, std::size_t k, std::size_t cap);

/// Calls fn(indices) for every size-k subset of [0, n) in lexicographic order.
void for_each_combination(std::size_t n, std::size_t k,
                          const std::function<void(const std::vector<std::size_t>&)>& fn);

struct BruteForceResult {
  SubsetMask best;
  double best_loss = 0.0;
  std::vector<SubsetMask> subsets;  ///< lexicographic order
  std::vector<double> losses;       ///< mean target loss per subset
};

/// Trains on every size-k subset and returns the minimizer of the mean target
/// loss; ties go to the lexicographically smallest index set.
BruteForceResult brute_force_optimal(const Predictor& predictor, std::span<const Sample> pool,
                                     std::span<const Sample> targets, std::size_t k,
                                     const TrainConfig& cfg, std::size_t cap = 20000);

}  // namespace dsdm
