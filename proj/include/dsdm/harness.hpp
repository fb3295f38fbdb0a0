#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dsdm/corpus.hpp"
#include "dsdm/eval.hpp"
#include "dsdm/predictors.hpp"

namespace dsdm {

/// Planted-subpopulation corpus. Subpopulation s follows the template
/// next = (prev + step_s) mod V with per-token noise; noise examples are
/// uniform tokens.
struct SyntheticPoolSpec {
  std::size_t n_subpopulations = 2;
  std::size_t examples_per_subpopulation = 50;
  std::vector<std::size_t> target_subpopulations{0};
  std::size_t noise_examples = 100;
  std::size_t vocab_size = 32;
  std::size_t chunk_len = 16;
  std::size_t target_samples = 20;   ///< per target subpopulation, used for selection
  std::size_t holdout_samples = 20;  ///< per target subpopulation, used for evaluation
  std::size_t context_tokens = 8;    ///< context length of target samples
  double noise_prob = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const SyntheticPoolSpec& s);
SyntheticPoolSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticPool {
  CandidatePool pool;
  std::vector<TargetTask> targets;   ///< one per target subpopulation
  std::vector<TargetTask> holdouts;  ///< disjoint from targets
  std::vector<int> labels;           ///< subpopulation per pool example, -1 for noise
  std::vector<std::size_t> steps;    ///< template step per subpopulation
};

SyntheticPool make_synthetic_pool(const SyntheticPoolSpec& spec);

struct MethodConfig {
  std::string name;  ///< dsdm | random | dsir | classifier | semdedup
  std::string label; ///< row label; defaults to name
  std::size_t repeats = 1;
  nlohmann::json settings = nlohmann::json::object();
};

struct TaskFiles {
  std::string name;
  std::string path;
  std::string holdout_path;
  double weight = 1.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "dsdm_run";

  std::string pool_source = "synthetic";  ///< synthetic | file
  SyntheticPoolSpec synthetic;
  std::string pool_path;
  std::vector<TaskFiles> tasks;
  std::vector<double> task_weights;  ///< synthetic source: per target subpopulation

  std::vector<MethodConfig> methods;
  std::vector<std::size_t> ks;

  TinyLmSpec proxy{0, 4, 8, 16, 0.5};
  TinyLmSpec deployment{0, 4, 8, 16, 0.5};
  TrainConfig proxy_train;
  TrainConfig deploy_train;
  std::optional<double> epochs;              ///< unset: equal total tokens
  std::optional<std::size_t> token_budget;   ///< unset: 2 * pool tokens
  std::vector<Metric> metrics{Metric::MeanLogProb};

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

/// Applies "a.b.0.c=value" to a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::vector<std::string>& overrides = {});

/// Deployment epochs for a selection of `selected` examples.
std::size_t deployment_epochs(const ExperimentConfig& cfg, std::size_t selected,
                              std::size_t pool_size, std::size_t chunk_len);

struct ResultRow {
  std::string method;
  std::size_t k = 0;
  std::size_t repeat = 0;
  std::string task;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::size_t selected = 0;
  std::size_t train_tokens = 0;
  std::string status = "ok";
  std::string error;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::size_t failed_cells = 0;
  std::size_t cells = 0;
  /// Mean datamodel weights per dsdm method label.
  std::vector<std::pair<std::string, Eigen::VectorXd>> dsdm_weights;
  std::vector<int> labels;  ///< synthetic subpopulation labels, empty for file pools
};

/// Runs every (method, k, repeat) cell and writes results.csv, results.json,
/// manifest.json and per-cell selections under cfg.output_dir. Stage errors
/// are recorded per cell; other cells proceed.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

/// Gradient-store cache directory from DSDMKIT_CACHE_DIR, if set.
std::optional<std::filesystem::path> cache_dir();

/// Stable 64-bit FNV-1a digest, hex encoded.
std::string content_hash(const std::string& bytes);

}  // namespace dsdm
