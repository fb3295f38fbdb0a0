#include "dsdm/datamodel.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "dsdm/io.hpp"

namespace dsdm {

using nlohmann::json;

std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::Regression: return "regression";
    case Estimator::Trak: return "trak";
    case Estimator::InfluenceExact: return "influence";
  }
  return "unknown";
}

Estimator estimator_from_string(const std::string& s) {
  if (s == "regression") return Estimator::Regression;
  if (s == "trak") return Estimator::Trak;
  if (s == "influence") return Estimator::InfluenceExact;
  throw Error("unknown estimator '" + s + "'");
}

double Datamodel::evaluate(const SubsetMask& mask) const {
  if (mask.size() != static_cast<std::size_t>(weights.size())) {
    throw Error("mask length does not match datamodel length");
  }
  double total = bias;
  for (std::size_t i : mask.indices()) total += weights[static_cast<Eigen::Index>(i)];
  return total;
}

void save_datamodels(const std::vector<Datamodel>& dms, const std::filesystem::path& path) {
  json arr = json::array();
  for (const auto& dm : dms) {
    arr.push_back({{"target_id", dm.target_id},
                   {"estimator", to_string(dm.estimator)},
                   {"bias", dm.bias},
                   {"weights", std::vector<double>(dm.weights.begin(), dm.weights.end())}});
  }
  io::write_json(path, {{"datamodels", arr}});
}

std::vector<Datamodel> load_datamodels(const std::filesystem::path& path) {
  const json doc = io::read_json(path);
  std::vector<Datamodel> out;
  try {
    for (const auto& j : doc.at("datamodels")) {
      Datamodel dm;
      dm.target_id = j.at("target_id").get<std::string>();
      dm.estimator = estimator_from_string(j.at("estimator").get<std::string>());
      dm.bias = j.at("bias").get<double>();
      const auto w = j.at("weights").get<std::vector<double>>();
      dm.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
      out.push_back(std::move(dm));
    }
  } catch (const json::exception& e) {
    throw Error(path.string() + ": malformed datamodel file: " + e.what());
  }
  return out;
}

std::vector<SubsetMask> sample_subsets(std::size_t pool_size, std::size_t count, double fraction,
                                       std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error("subset fraction must be in (0, 1)");
  if (count < 1) throw Error("need at least one subset");
  const auto size = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pool_size)));
  if (size == 0) throw Error("empty subset size");

  std::mt19937_64 rng(derive_seed(seed, "sample-subsets"));
  std::vector<std::size_t> perm(pool_size);
  std::vector<SubsetMask> masks;
  masks.reserve(count);
  for (std::size_t m = 0; m < count; ++m) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `size` slots are a uniform draw.
    for (std::size_t i = 0; i < size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool_size - 1);
      std::swap(perm[i], perm[pick(rng)]);
    }
    masks.push_back(SubsetMask::from_indices(pool_size, std::span(perm.data(), size)));
  }
  return masks;
}

RegressionData collect_regression_data(const Predictor& predictor, std::span<const Sample> pool,
                                       std::span<const Sample> targets,
                                       const std::vector<SubsetMask>& masks,
                                       const TrainConfig& cfg, RecordQuantity quantity,
                                       std::size_t seeds_per_mask) {
  if (masks.empty()) throw Error("no masks to collect regression data for");
  if (seeds_per_mask < 1) throw ConfigError("seeds_per_mask must be >= 1");

  Eigen::MatrixXd values = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(masks.size()),
                                                 static_cast<Eigen::Index>(targets.size()));
  parallel_for(masks.size(), [&](std::size_t m) {
    for (std::size_t r = 0; r < seeds_per_mask; ++r) {
      TrainConfig run = cfg;
      if (seeds_per_mask > 1) run.seed = derive_seed(cfg.seed, r);
      ModelParams params;
      try {
        params = train(predictor, pool, masks[m], run);
      } catch (const Error& e) {
        throw Error("mask " + std::to_string(m) + ": " + e.what());
      }
      for (std::size_t t = 0; t < targets.size(); ++t) {
        const double v = quantity == RecordQuantity::Loss ? predictor.loss(params.theta, targets[t])
                                                          : predictor.output(params.theta, targets[t]);
        values(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t)) +=
            v / static_cast<double>(seeds_per_mask);
      }
    }
  });

  RegressionData data;
  data.trainings = masks.size() * seeds_per_mask;
  data.per_target.resize(targets.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    data.per_target[t].reserve(masks.size());
    for (std::size_t m = 0; m < masks.size(); ++m) {
      const double v = values(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(t));
      if (!std::isfinite(v)) throw Error("non-finite record for mask " + std::to_string(m));
      data.per_target[t].push_back({masks[m], v});
    }
  }
  return data;
}

Datamodel fit_linear_datamodel(std::span<const RegressionRecord> records, double ridge) {
  if (records.size() < 2) throw Error("need at least two regression records");
  if (!(ridge >= 0.0)) throw Error("ridge must be non-negative");
  const std::size_t n = records.front().mask.size();
  const auto cols = static_cast<Eigen::Index>(n + 1);

  // Normal equations with the intercept in column 0.
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(cols, cols);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(cols);
  Eigen::VectorXd row(cols);
  for (const auto& rec : records) {
    if (rec.mask.size() != n) throw Error("regression masks have inconsistent lengths");
    row[0] = 1.0;
    row.tail(cols - 1) = rec.mask.as_vector();
    gram.selfadjointView<Eigen::Lower>().rankUpdate(row);
    rhs += rec.loss * row;
  }
  gram.diagonal().tail(cols - 1).array() += ridge;
  const Eigen::MatrixXd full = gram.selfadjointView<Eigen::Lower>();

  if (ridge == 0.0) {
    Eigen::FullPivLU<Eigen::MatrixXd> lu(full);
    lu.setThreshold(1e-10);
    if (lu.rank() < cols) throw Error("rank-deficient regression; increase samples or ridge");
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(full);
  if (ldlt.info() != Eigen::Success) {
    throw Error("rank-deficient regression; increase samples or ridge");
  }
  const Eigen::VectorXd sol = ldlt.solve(rhs);

  Datamodel dm;
  dm.bias = sol[0];
  dm.weights = sol.tail(cols - 1);
  dm.estimator = Estimator::Regression;
  return dm;
}

void save_regression_records(const std::vector<std::vector<RegressionRecord>>& per_target,
                             const std::vector<std::string>& target_ids,
                             const std::filesystem::path& path) {
  if (per_target.size() != target_ids.size()) throw Error("one target id per record list");
  std::vector<json> lines;
  for (std::size_t t = 0; t < per_target.size(); ++t) {
    for (const auto& rec : per_target[t]) {
      lines.push_back({{"mask_popcount", rec.mask.popcount()},
                       {"mask_indices", rec.mask.indices()},
                       {"target_id", target_ids[t]},
                       {"loss", rec.loss}});
    }
  }
  io::write_jsonl(path, lines);
}

std::vector<std::pair<std::string, std::vector<RegressionRecord>>> load_regression_records(
    const std::filesystem::path& path, std::size_t pool_size) {
  std::vector<std::pair<std::string, std::vector<RegressionRecord>>> groups;
  std::map<std::string, std::size_t> slot;
  for (const auto& j : io::read_jsonl(path)) {
    try {
      const auto id = j.at("target_id").get<std::string>();
      const auto idx = j.at("mask_indices").get<std::vector<std::size_t>>();
      if (idx.size() != j.at("mask_popcount").get<std::size_t>()) {
        throw Error(path.string() + ": mask_popcount disagrees with mask_indices");
      }
      auto [it, inserted] = slot.try_emplace(id, groups.size());
      if (inserted) groups.emplace_back(id, std::vector<RegressionRecord>{});
      groups[it->second].second.push_back(
          {SubsetMask::from_indices(pool_size, idx), j.at("loss").get<double>()});
    } catch (const json::exception& e) {
      throw Error(path.string() + ": malformed regression record: " + e.what());
    }
  }
  return groups;
}

}  // namespace dsdm
