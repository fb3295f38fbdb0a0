#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dsdm/corpus.hpp"
#include "dsdm/datamodel.hpp"
#include "dsdm/predictors.hpp"
#include "dsdm/selection.hpp"

namespace dsdm {

enum class Metric { MeanLogProb, ExactMatch, MultipleChoice, SpearmanLDS };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct MetricReport {
  Metric metric = Metric::MeanLogProb;
  double value = 0.0;
  std::size_t n = 0;
  std::optional<std::vector<double>> per_sample;
  bool degenerate = false;  ///< Spearman with constant ranks; value is 0
};

nlohmann::json metric_report_to_json(const MetricReport& r, bool include_per_sample = false);

/// Sum of log correct-token probabilities over the continuation.
double continuation_log_prob(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                             std::span<const Token> context, std::span<const Token> continuation);

/// Mean over samples of the summed continuation log-probability.
MetricReport mean_log_probability(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                  const TargetTask& task);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax_lowest(const Eigen::VectorXd& v);

/// Greedy decoding of len(continuation) tokens, exact token equality.
MetricReport exact_match_accuracy(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                  const TargetTask& task);

struct MultipleChoiceSample {
  std::vector<Token> context;
  std::vector<std::vector<Token>> choices;
  std::size_t gold = 0;
};

// {"context": [...], "choices": [[...], ...], "gold": int} per line.
std::vector<MultipleChoiceSample> load_choice_task(const std::filesystem::path& path);

/// Picks the choice with the highest total log-probability; ties go to the
/// lowest choice index.
MetricReport multiple_choice_accuracy(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                      std::span<const MultipleChoiceSample> samples);

/// Ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);
double pearson_correlation(std::span<const double> a, std::span<const double> b);
/// Pearson correlation of average ranks. Returns nullopt when either side is
/// constant.
std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b);

/// Spearman correlation between predicted (bias + weights^T mask) and realized
/// losses on fresh records.
MetricReport lds_spearman(const Eigen::VectorXd& weights, double bias,
                          std::span<const RegressionRecord> fresh);
MetricReport lds_spearman(const Datamodel& dm, std::span<const RegressionRecord> fresh);
MetricReport lds_spearman(const MeanDatamodel& dm, std::span<const RegressionRecord> fresh);

}  // namespace dsdm
