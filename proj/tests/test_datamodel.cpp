#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dsdm/datamodel.hpp"

using namespace dsdm;

namespace {

Sample feat(double a, double b, int y) { return FeatureSample{Eigen::Vector2d(a, b), 0.0, y}; }

// Fixed-size masks make the intercept collinear with the mask columns, so the
// planted-model checks draw each bit independently instead.
std::vector<SubsetMask> bernoulli_masks(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<SubsetMask> out;
  for (std::size_t c = 0; c < count; ++c) {
    SubsetMask m(n);
    for (std::size_t i = 0; i < n; ++i) m.set(i, coin(rng));
    out.push_back(m);
  }
  return out;
}

std::vector<Sample> small_logistic_pool() {
  return {feat(1, 0.2, 1), feat(-0.5, 1, -1), feat(0.3, -0.7, 1), feat(-1, -0.1, -1),
          feat(0.8, 0.9, 1), feat(-0.2, 0.4, -1)};
}

}  // namespace

TEST_CASE("sample_subsets cardinality, determinism and errors") {
  const auto one = sample_subsets(4, 1, 0.5, 3);
  REQUIRE(one.size() == 1);
  CHECK(one[0].popcount() == 2);
  CHECK(sample_subsets(50, 20, 0.3, 9) == sample_subsets(50, 20, 0.3, 9));
  CHECK(sample_subsets(50, 20, 0.3, 9) != sample_subsets(50, 20, 0.3, 10));
  for (const auto& m : sample_subsets(37, 30, 0.38, 1)) CHECK(m.popcount() == 14);
  CHECK_THROWS_WITH(sample_subsets(3, 1, 0.1, 0), "empty subset size");
  CHECK_THROWS(sample_subsets(10, 1, 1.0, 0));
}

TEST_CASE("sample_subsets marginal inclusion frequency is the fraction") {
  const std::size_t n = 20, draws = 10000;
  std::vector<std::size_t> hits(n, 0);
  for (const auto& m : sample_subsets(n, draws, 0.5, 77)) {
    for (std::size_t i : m.indices()) ++hits[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(std::abs(static_cast<double>(hits[i]) / draws - 0.5) < 0.02);
  }
}

TEST_CASE("collect_regression_data trains once per mask") {
  LogisticPredictor p(LogisticSpec{2});
  const auto pool = small_logistic_pool();
  const std::vector<Sample> targets{feat(0.5, 0.5, 1), feat(-0.5, 0.1, -1)};
  const auto masks = sample_subsets(pool.size(), 3, 0.5, 4);
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 4;
  cfg.seed = 2;
  const auto data = collect_regression_data(p, pool, targets, masks, cfg);
  CHECK(data.trainings == 3);
  REQUIRE(data.per_target.size() == 2);
  CHECK(data.per_target[0].size() == 3);
  CHECK(data.per_target[1].size() == 3);
  CHECK(data.per_target[1][2].mask == masks[2]);

  const auto again = collect_regression_data(p, pool, targets, masks, cfg);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t m = 0; m < 3; ++m) {
      CHECK(again.per_target[t][m].loss == data.per_target[t][m].loss);
    }
  }

  // A training replicate equals a direct call to train().
  const auto direct = train(p, pool, masks[1], cfg);
  CHECK(data.per_target[0][1].loss == p.loss(direct.theta, targets[0]));

  const auto multi = collect_regression_data(p, pool, targets, masks, cfg, RecordQuantity::Output, 3);
  CHECK(multi.trainings == 9);
}

TEST_CASE("collect_regression_data with the LM records finite non-negative losses") {
  TinySoftmaxLm lm(TinyLmSpec{5, 2, 3, 4});
  std::vector<Sample> pool;
  std::mt19937 rng(1);
  for (int i = 0; i < 8; ++i) {
    std::vector<Token> t(6);
    for (auto& x : t) x = static_cast<Token>(rng() % 5);
    pool.push_back(TokenSample{t, 1});
  }
  const std::vector<Sample> targets{TokenSample{{0, 1, 2, 3}, 2}};
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 2;
  const auto data = collect_regression_data(lm, pool, targets, sample_subsets(8, 4, 0.5, 0), cfg);
  for (const auto& rec : data.per_target[0]) {
    CHECK(std::isfinite(rec.loss));
    CHECK(rec.loss >= 0.0);
  }
}

TEST_CASE("collect_regression_data attaches the mask index to training errors") {
  TinySoftmaxLm lm(TinyLmSpec{5, 2, 3, 4});
  std::vector<Sample> pool{TokenSample{{0, 1, 2, 3}, 1}, TokenSample{{4, 3, 2, 1}, 1}};
  std::vector<SubsetMask> masks{SubsetMask::full(2), SubsetMask(2)};
  TrainConfig cfg;
  cfg.steps = 5;
  CHECK_THROWS_WITH(collect_regression_data(lm, pool, pool, masks, cfg),
                    doctest::Contains("mask 1"));
}

TEST_CASE("fit_linear_datamodel recovers an exactly linear function") {
  std::vector<RegressionRecord> records;
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      SubsetMask m(2);
      m.set(0, a);
      m.set(1, b);
      records.push_back({m, 2.0 * a + 3.0 * b + 1.0});
    }
  }
  const auto dm = fit_linear_datamodel(records, 0.0);
  CHECK(std::abs(dm.weights[0] - 2.0) < 1e-8);
  CHECK(std::abs(dm.weights[1] - 3.0) < 1e-8);
  CHECK(std::abs(dm.bias - 1.0) < 1e-8);
  CHECK(dm.evaluate(SubsetMask::full(2)) == doctest::Approx(6.0));
}

TEST_CASE("fit_linear_datamodel exact recovery on a larger full-rank design") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  const std::size_t n = 12;
  Eigen::VectorXd truth(n);
  for (auto& w : truth) w = normal(rng);
  std::vector<RegressionRecord> records;
  for (const auto& m : bernoulli_masks(n, 200, 5)) {
    records.push_back({m, -0.7 + truth.dot(m.as_vector())});
  }
  const auto dm = fit_linear_datamodel(records, 0.0);
  CHECK((dm.weights - truth).lpNorm<Eigen::Infinity>() < 1e-8);
  CHECK(std::abs(dm.bias + 0.7) < 1e-8);
}

TEST_CASE("fit_linear_datamodel constant losses") {
  std::vector<RegressionRecord> records;
  for (const auto& m : sample_subsets(6, 30, 0.5, 1)) records.push_back({m, 2.5});
  const auto dm = fit_linear_datamodel(records, 1e-3);
  CHECK(dm.weights.lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK(dm.bias == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("fit_linear_datamodel planted noisy linear model") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal;
  const std::size_t n = 20;
  Eigen::VectorXd truth(n);
  for (auto& w : truth) w = normal(rng);
  const double bias = 0.4;
  std::vector<RegressionRecord> records;
  double ss_tot = 0.0, mean = 0.0;
  for (const auto& m : bernoulli_masks(n, 500, 12)) {
    records.push_back({m, bias + truth.dot(m.as_vector()) + 0.01 * normal(rng)});
    mean += records.back().loss / 500.0;
  }
  const auto dm = fit_linear_datamodel(records);
  CHECK((dm.weights - truth).lpNorm<Eigen::Infinity>() < 0.05);

  double ss_res = 0.0;
  for (const auto& r : records) {
    ss_res += std::pow(dm.evaluate(r.mask) - r.loss, 2);
    ss_tot += std::pow(r.loss - mean, 2);
  }
  CHECK(1.0 - ss_res / ss_tot > 0.999);
}

TEST_CASE("fit_linear_datamodel rank deficiency without ridge") {
  SubsetMask m(3);
  m.set(0);
  std::vector<RegressionRecord> records{{m, 1.0}, {m, 2.0}, {m, 3.0}};
  CHECK_THROWS_WITH(fit_linear_datamodel(records, 0.0),
                    "rank-deficient regression; increase samples or ridge");
  CHECK_NOTHROW(fit_linear_datamodel(records, 1e-6));
}

TEST_CASE("fit_linear_datamodel is equivariant under pool permutation") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal;
  const std::size_t n = 8;
  const std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  std::vector<RegressionRecord> records, permuted;
  for (const auto& m : sample_subsets(n, 60, 0.5, 2)) {
    const double loss = normal(rng);
    records.push_back({m, loss});
    SubsetMask pm(n);
    for (std::size_t i : m.indices()) pm.set(perm[i]);
    permuted.push_back({pm, loss});
  }
  const auto a = fit_linear_datamodel(records);
  const auto b = fit_linear_datamodel(permuted);
  CHECK(b.bias == doctest::Approx(a.bias).epsilon(1e-7));
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(b.weights[static_cast<Eigen::Index>(perm[i])] ==
          doctest::Approx(a.weights[static_cast<Eigen::Index>(i)]).epsilon(1e-9));
  }
}

TEST_CASE("regression records and datamodels persist") {
  const auto dir = std::filesystem::temp_directory_path() / "dsdm_test_datamodel";
  const auto masks = sample_subsets(5, 3, 0.4, 0);
  std::vector<std::vector<RegressionRecord>> per_target(2);
  for (std::size_t i = 0; i < 3; ++i) {
    per_target[0].push_back({masks[i], 0.5 * static_cast<double>(i)});
    per_target[1].push_back({masks[i], 1.25});
  }
  save_regression_records(per_target, {"a", "b"}, dir / "records.jsonl");
  const auto loaded = load_regression_records(dir / "records.jsonl", 5);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].first == "a");
  CHECK(loaded[0].second[2].mask == masks[2]);
  CHECK(loaded[0].second[2].loss == 1.0);
  CHECK(loaded[1].second.size() == 3);

  Datamodel dm{Eigen::Vector3d(0.1, -0.2, 0.3), 1.5, "x0", Estimator::Trak};
  save_datamodels({dm}, dir / "dm.json");
  const auto back = load_datamodels(dir / "dm.json");
  REQUIRE(back.size() == 1);
  CHECK(back[0].weights == dm.weights);
  CHECK(back[0].estimator == Estimator::Trak);
  CHECK(back[0].target_id == "x0");
}
