#include "dsdm/selection.hpp"

#include <algorithm>
#include <numeric>

#include "dsdm/io.hpp"

namespace dsdm {

using nlohmann::json;

SubsetMask SelectionResult::mask(std::size_t pool_size) const {
  return SubsetMask::from_indices(pool_size, indices);
}

json selection_to_json(const SelectionResult& r) {
  return {{"method", r.method},
          {"target", r.target},
          {"k", r.k},
          {"indices", r.indices},
          {"scores", r.scores}};
}

SelectionResult selection_from_json(const json& j) {
  SelectionResult r;
  try {
    r.method = j.at("method").get<std::string>();
    r.target = j.at("target").get<std::string>();
    r.k = j.at("k").get<std::size_t>();
    r.indices = j.at("indices").get<std::vector<std::size_t>>();
    r.scores = j.at("scores").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed selection: ") + e.what());
  }
  if (r.indices.size() != r.k || r.scores.size() != r.k) {
    throw Error("selection size does not match k");
  }
  return r;
}

void save_selection(const SelectionResult& r, const std::filesystem::path& path) {
  io::write_json(path, selection_to_json(r));
}

SelectionResult load_selection(const std::filesystem::path& path) {
  return selection_from_json(io::read_json(path));
}

MeanDatamodel average_datamodels(std::span<const Datamodel> dms) {
  if (dms.empty()) throw Error("no datamodels to average");
  MeanDatamodel mean;
  mean.weights = Eigen::VectorXd::Zero(dms.front().weights.size());
  for (const auto& dm : dms) {
    if (dm.weights.size() != mean.weights.size()) throw Error("datamodel lengths differ");
    mean.weights += dm.weights;
  }
  mean.weights /= static_cast<double>(dms.size());
  mean.n_targets = dms.size();
  return mean;
}

MeanDatamodel average_datamodels(const std::vector<std::vector<Datamodel>>& per_task,
                                 std::vector<double> task_weights) {
  if (per_task.empty()) throw Error("no tasks to average");
  if (task_weights.empty()) task_weights.assign(per_task.size(), 1.0);
  if (task_weights.size() != per_task.size()) throw Error("one weight per task");
  double total = 0.0;
  for (double w : task_weights) {
    if (!(w > 0.0)) throw Error("task weights must be positive");
    total += w;
  }

  MeanDatamodel mix;
  for (std::size_t t = 0; t < per_task.size(); ++t) {
    const auto inner = average_datamodels(per_task[t]);
    task_weights[t] /= total;
    if (t == 0) {
      mix.weights = Eigen::VectorXd::Zero(inner.weights.size());
    } else if (inner.weights.size() != mix.weights.size()) {
      throw Error("datamodel lengths differ");
    }
    mix.weights += task_weights[t] * inner.weights;
    mix.n_targets += inner.n_targets;
  }
  mix.task_weights = std::move(task_weights);
  return mix;
}

double estimate_target_loss(const SubsetMask& mask, const MeanDatamodel& mean_dm) {
  if (mask.size() != static_cast<std::size_t>(mean_dm.weights.size())) {
    throw Error("mask length does not match datamodel length");
  }
  double total = 0.0;
  for (std::size_t i : mask.indices()) total += mean_dm.weights[static_cast<Eigen::Index>(i)];
  return total;
}

SelectionResult dsdm_select(const MeanDatamodel& mean_dm, std::size_t k,
                            const std::string& target) {
  const auto n = static_cast<std::size_t>(mean_dm.weights.size());
  if (k < 1 || k > n) {
    throw Error("k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& w = mean_dm.weights;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return w[static_cast<Eigen::Index>(a)] < w[static_cast<Eigen::Index>(b)];
  });
  order.resize(k);
  std::sort(order.begin(), order.end());

  SelectionResult r;
  r.method = "dsdm";
  r.target = target;
  r.k = k;
  r.indices = order;
  for (std::size_t i : order) r.scores.push_back(w[static_cast<Eigen::Index>(i)]);
  return r;
}

std::size_t binomial_capped(std::size_t n, std::size_t k, std::size_t cap) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  // Exact at every step: c * (n - k + i) / i is C(n - k + i, i).
  unsigned __int128 c = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
    if (c > cap) return cap + 1;
  }
  return static_cast<std::size_t>(c);
}

void for_each_combination(std::size_t n, std::size_t k,
                          const std::function<void(const std::vector<std::size_t>&)>& fn) {
  if (k > n) return;
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  while (true) {
    fn(idx);
    std::size_t i = k;
    while (i > 0 && idx[i - 1] == n - k + (i - 1)) --i;
    if (i == 0) return;
    ++idx[i - 1];
    for (std::size_t j = i; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

BruteForceResult brute_force_optimal(const Predictor& predictor, std::span<const Sample> pool,
                                     std::span<const Sample> targets, std::size_t k,
                                     const TrainConfig& cfg, std::size_t cap) {
  const std::size_t n = pool.size();
  if (k < 1 || k > n) throw Error("k outside [1, pool size]");
  if (targets.empty()) throw Error("no target samples");
  if (binomial_capped(n, k, cap) > cap) throw Error("instance too large for exhaustive oracle");

  BruteForceResult out;
  for_each_combination(n, k, [&](const std::vector<std::size_t>& idx) {
    out.subsets.push_back(SubsetMask::from_indices(n, idx));
  });
  out.losses.assign(out.subsets.size(), 0.0);
  parallel_for(out.subsets.size(), [&](std::size_t s) {
    const auto params = train(predictor, pool, out.subsets[s], cfg);
    double total = 0.0;
    for (const auto& z : targets) total += predictor.loss(params.theta, z);
    out.losses[s] = total / static_cast<double>(targets.size());
  });

  // First minimum in lexicographic order.
  const auto best = std::min_element(out.losses.begin(), out.losses.end()) - out.losses.begin();
  out.best = out.subsets[static_cast<std::size_t>(best)];
  out.best_loss = out.losses[static_cast<std::size_t>(best)];
  return out;
}

}  // namespace dsdm
