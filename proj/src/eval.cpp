#include "dsdm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dsdm/io.hpp"

namespace dsdm {

using nlohmann::json;

std::string to_string(Metric m) {
  switch (m) {
    case Metric::MeanLogProb: return "mean_log_prob";
    case Metric::ExactMatch: return "exact_match";
    case Metric::MultipleChoice: return "multiple_choice";
    case Metric::SpearmanLDS: return "spearman_lds";
  }
  return "unknown";
}

Metric metric_from_string(const std::string& s) {
  for (Metric m : {Metric::MeanLogProb, Metric::ExactMatch, Metric::MultipleChoice,
                   Metric::SpearmanLDS}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown metric '" + s + "'");
}

json metric_report_to_json(const MetricReport& r, bool include_per_sample) {
  json j{{"metric", to_string(r.metric)}, {"value", r.value}, {"n", r.n}};
  if (r.degenerate) j["degenerate"] = "degenerate ranks";
  if (include_per_sample && r.per_sample) j["per_sample"] = *r.per_sample;
  return j;
}

double continuation_log_prob(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                             std::span<const Token> context, std::span<const Token> continuation) {
  std::vector<Token> seq(context.begin(), context.end());
  double total = 0.0;
  for (Token y : continuation) {
    const auto probs = lm.next_token_probs(theta, seq);
    if (y < 0 || y >= probs.size()) throw Error("continuation token outside vocabulary");
    total += std::log(std::clamp(probs[y], kProbFloor, 1.0 - kProbFloor));
    seq.push_back(y);
  }
  return total;
}

namespace {

MetricReport mean_report(Metric metric, std::vector<double> per_sample) {
  MetricReport r;
  r.metric = metric;
  r.n = per_sample.size();
  r.value = std::accumulate(per_sample.begin(), per_sample.end(), 0.0) /
            static_cast<double>(per_sample.size());
  r.per_sample = std::move(per_sample);
  return r;
}

}  // namespace

MetricReport mean_log_probability(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                  const TargetTask& task) {
  if (task.samples.empty()) throw Error("no samples");
  std::vector<double> per(task.samples.size());
  parallel_for(per.size(), [&](std::size_t i) {
    const auto& s = task.samples[i];
    per[i] = continuation_log_prob(lm, theta, s.context, s.continuation);
  });
  return mean_report(Metric::MeanLogProb, std::move(per));
}

std::size_t argmax_lowest(const Eigen::VectorXd& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  }
  return best;
}

MetricReport exact_match_accuracy(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                  const TargetTask& task) {
  if (task.samples.empty()) throw Error("no samples");
  std::vector<double> per(task.samples.size());
  parallel_for(per.size(), [&](std::size_t i) {
    const auto& s = task.samples[i];
    std::vector<Token> seq = s.context;
    bool match = true;
    for (Token y : s.continuation) {
      const auto next = static_cast<Token>(argmax_lowest(lm.next_token_probs(theta, seq)));
      if (next != y) {
        match = false;
        break;
      }
      seq.push_back(next);
    }
    per[i] = match ? 1.0 : 0.0;
  });
  return mean_report(Metric::ExactMatch, std::move(per));
}

std::vector<MultipleChoiceSample> load_choice_task(const std::filesystem::path& path) {
  std::vector<MultipleChoiceSample> out;
  for (const auto& j : io::read_jsonl(path)) {
    MultipleChoiceSample s;
    try {
      s.context = j.at("context").get<std::vector<Token>>();
      s.choices = j.at("choices").get<std::vector<std::vector<Token>>>();
      s.gold = j.at("gold").get<std::size_t>();
    } catch (const json::exception& e) {
      throw Error(path.string() + ": malformed choice sample: " + e.what());
    }
    if (s.choices.size() < 2 || s.gold >= s.choices.size()) {
      throw Error(path.string() + ": need at least two choices and a valid gold index");
    }
    out.push_back(std::move(s));
  }
  return out;
}

MetricReport multiple_choice_accuracy(const TinySoftmaxLm& lm, const Eigen::VectorXd& theta,
                                      std::span<const MultipleChoiceSample> samples) {
  if (samples.empty()) throw Error("no samples");
  std::vector<double> per(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto& s = samples[i];
    if (s.choices.empty() || s.gold >= s.choices.size()) throw Error("invalid choice sample");
    Eigen::VectorXd scores(static_cast<Eigen::Index>(s.choices.size()));
    for (std::size_t c = 0; c < s.choices.size(); ++c) {
      scores[static_cast<Eigen::Index>(c)] = continuation_log_prob(lm, theta, s.context, s.choices[c]);
    }
    per[i] = argmax_lowest(scores) == s.gold ? 1.0 : 0.0;
  });
  return mean_report(Metric::MultipleChoice, std::move(per));
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + j) / 2.0) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw Error("correlation needs two equal-length series");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b) {
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const auto constant = [](const std::vector<double>& r) {
    return std::all_of(r.begin(), r.end(), [&](double v) { return v == r.front(); });
  };
  if (constant(ra) || constant(rb)) return std::nullopt;
  return std::clamp(pearson_correlation(ra, rb), -1.0, 1.0);
}

MetricReport lds_spearman(const Eigen::VectorXd& weights, double bias,
                          std::span<const RegressionRecord> fresh) {
  if (fresh.size() < 5) throw Error("LDS needs at least 5 fresh records");
  std::vector<double> predicted, realized;
  for (const auto& rec : fresh) {
    if (rec.mask.size() != static_cast<std::size_t>(weights.size())) {
      throw Error("mask length does not match datamodel length");
    }
    predicted.push_back(bias + rec.mask.as_vector().dot(weights));
    realized.push_back(rec.loss);
  }
  MetricReport r;
  r.metric = Metric::SpearmanLDS;
  r.n = fresh.size();
  const auto rho = spearman_correlation(predicted, realized);
  r.degenerate = !rho.has_value();
  r.value = rho.value_or(0.0);
  return r;
}

MetricReport lds_spearman(const Datamodel& dm, std::span<const RegressionRecord> fresh) {
  return lds_spearman(dm.weights, dm.bias, fresh);
}

MetricReport lds_spearman(const MeanDatamodel& dm, std::span<const RegressionRecord> fresh) {
  return lds_spearman(dm.weights, 0.0, fresh);
}

}  // namespace dsdm
