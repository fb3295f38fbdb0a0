#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "dsdm/predictors.hpp"
#include "fd_oracle.hpp"

using namespace dsdm;

namespace {

Sample feat(std::vector<double> x, double b, int y) {
  Eigen::VectorXd v = Eigen::Map<Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  return FeatureSample{v, b, y};
}

Sample toks(std::vector<Token> t, std::size_t score_begin) {
  return TokenSample{std::move(t), score_begin};
}

}  // namespace

TEST_CASE("logistic output, gradient and loss") {
  LogisticPredictor p(LogisticSpec{2});
  const Eigen::Vector2d theta(1, 2);
  const auto z = feat({3, 4}, 0.5, 1);
  CHECK(p.output(theta, z) == doctest::Approx(11.5));
  CHECK(p.grad_output(theta, z) == Eigen::Vector2d(3, 4));

  const auto z0 = feat({0, 0}, 0.0, 1);
  CHECK(p.loss(theta, z0) == doctest::Approx(std::log(2.0)));
  CHECK(p.correctness(theta, z0).mean == doctest::Approx(0.5));

  const auto big = feat({1e4, 0}, 0.0, 1);
  CHECK(p.correctness(theta, big).mean == 1.0 - kProbFloor);
}

TEST_CASE("logistic loss is monotone decreasing in output for y=+1") {
  LogisticPredictor p(LogisticSpec{1});
  const Eigen::VectorXd theta = Eigen::VectorXd::Ones(1);
  double prev = std::numeric_limits<double>::infinity();
  for (double f = -30; f <= 30; f += 0.5) {
    const double l = p.loss(theta, feat({f}, 0.0, 1));
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("logistic loss-output consistency and Q consistency") {
  LogisticPredictor p(LogisticSpec{3});
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd theta(3);
    for (int i = 0; i < 3; ++i) theta[i] = normal(rng);
    const int y = trial % 2 ? 1 : -1;
    const Sample z = feat({normal(rng), normal(rng), normal(rng)}, normal(rng), y);
    const double f = p.output(theta, z);
    CHECK(p.loss(theta, z) == doctest::Approx(std::log(1.0 + std::exp(-y * f))).epsilon(1e-14));

    // d loss / d f by central differences through the bias term.
    auto shifted = [&](double h) {
      auto zz = std::get<FeatureSample>(z);
      zz.bias += h;
      return p.loss(theta, zz);
    };
    const double dl_df = (shifted(1e-6) - shifted(-1e-6)) / 2e-6;
    const double pstar = p.correctness(theta, z).mean;
    CHECK(dl_df == doctest::Approx(-y * (1.0 - pstar)).epsilon(1e-6));
  }
}

TEST_CASE("tiny LM uniform model values") {
  TinySoftmaxLm lm(TinyLmSpec{4, 2, 3, 5});
  const Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lm.num_params()));
  const auto z = toks({1, 2, 3}, 2);
  CHECK(lm.output(theta, z) == doctest::Approx(-std::log(3.0)));
  CHECK(lm.loss(theta, z) == doctest::Approx(std::log(4.0)));
  const auto c = lm.correctness(theta, toks({1, 2, 3}, 1));
  CHECK(c.per_position.size() == 2);
  CHECK(c.per_position[0] == doctest::Approx(0.25));
  CHECK(c.mean == doctest::Approx(0.25));

  TinySoftmaxLm binary(TinyLmSpec{2, 1, 2, 2});
  const Eigen::VectorXd zero2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(binary.num_params()));
  CHECK(binary.output(zero2, toks({0, 1, 0}, 1)) == doctest::Approx(0.0));
}

TEST_CASE("tiny LM margin gradient at p = 1/2 is nonzero and finite") {
  TinySoftmaxLm lm(TinyLmSpec{2, 1, 2, 3});
  Eigen::VectorXd theta = lm.initial_params(3);
  const auto g = lm.grad_output(theta, toks({0, 1}, 1));
  CHECK(g.allFinite());
  CHECK(g.norm() > 0.0);
  testing::check_gradient(lm, theta, toks({0, 1}, 1), 1e-4);
}

TEST_CASE("finite-difference gradient checks for every predictor variant") {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal;

  LogisticPredictor logistic(LogisticSpec{6});
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd theta(6), x(6);
    for (int i = 0; i < 6; ++i) {
      theta[i] = normal(rng);
      x[i] = normal(rng);
    }
    CHECK(testing::gradient_relative_error(logistic, theta,
                                           FeatureSample{x, normal(rng), trial % 2 ? 1 : -1}) <
          1e-4);
  }

  TinySoftmaxLm lm(TinyLmSpec{7, 3, 4, 6, 1.0});
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd theta = lm.initial_params(static_cast<std::uint64_t>(trial));
    std::vector<Token> seq(5 + trial % 4);
    for (auto& t : seq) t = static_cast<Token>(rng() % 7);
    CHECK(testing::gradient_relative_error(lm, theta, TokenSample{seq, static_cast<std::size_t>(1 + trial % 3)}) < 1e-4);
  }
}

TEST_CASE("train: descent, determinism and errors") {
  LogisticPredictor p(LogisticSpec{2});
  std::vector<Sample> pool{feat({1, 0.5}, 0, 1), feat({-1, -0.3}, 0, -1)};
  const auto mask = SubsetMask::full(2);
  TrainConfig cfg;
  cfg.steps = 500;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.1;
  cfg.seed = 7;
  const auto a = train(p, pool, mask, cfg);
  const auto b = train(p, pool, mask, cfg);
  CHECK(a.theta == b.theta);
  CHECK(subset_loss(p, a.theta, pool, mask) < subset_loss(p, p.initial_params(7), pool, mask));

  CHECK_THROWS_WITH(train(p, pool, SubsetMask(2), cfg), "empty training set");
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train(p, pool, mask, cfg), ConfigError);
}

TEST_CASE("train: tiny LM on one example decreases its loss") {
  TinySoftmaxLm lm(TinyLmSpec{5, 2, 3, 4});
  std::vector<Sample> pool{toks({0, 1, 2, 3, 4, 0}, 1), toks({4, 3, 2, 1, 0, 4}, 1)};
  SubsetMask mask(2);
  mask.set(0);
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 1;
  cfg.learning_rate = 0.5;
  cfg.seed = 1;
  const auto params = train(lm, pool, mask, cfg);
  CHECK(lm.loss(params.theta, pool[0]) < lm.loss(lm.initial_params(1), pool[0]));
}

TEST_CASE("train: divergence reports the step") {
  TinySoftmaxLm lm(TinyLmSpec{5, 2, 3, 4});
  std::vector<Sample> pool{toks({0, 1, 2, 3, 4, 0}, 1)};
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.learning_rate = 1e300;
  try {
    train(lm, pool, SubsetMask::full(1), cfg);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() < 50);
  }
}

TEST_CASE("newton solver reaches a stationary point") {
  LogisticPredictor p(LogisticSpec{3});
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  std::vector<Sample> pool;
  for (int i = 0; i < 40; ++i) {
    pool.push_back(feat({normal(rng), normal(rng), 1.0}, 0.0, normal(rng) > 0 ? 1 : -1));
  }
  TrainConfig cfg;
  cfg.solver = Solver::Newton;
  cfg.weight_decay = 0.1;
  cfg.steps = 100;
  const auto params = train(p, pool, SubsetMask::full(pool.size()), cfg);
  Eigen::VectorXd grad = cfg.weight_decay * params.theta;
  for (const auto& z : pool) p.accumulate_loss_grad(params.theta, z, 1.0, grad);
  CHECK(grad.norm() < 1e-9);

  TinySoftmaxLm lm(TinyLmSpec{3, 1, 2, 2});
  std::vector<Sample> lm_pool{toks({0, 1, 2}, 1)};
  CHECK_THROWS_AS(train(lm, lm_pool, SubsetMask::full(1), cfg), ConfigError);
}

TEST_CASE("model params persist as float32 with a sidecar") {
  ModelParams params{Eigen::Vector3d(1.5, -2.25, 0.1), "logistic(d=3)", 42};
  const auto path = std::filesystem::temp_directory_path() / "dsdm_params.bin";
  save_params(params, path);
  CHECK(std::filesystem::file_size(path) == 8 + 3 * 4);
  const auto loaded = load_params(path);
  CHECK(loaded.predictor_id == "logistic(d=3)");
  CHECK(loaded.seed == 42);
  CHECK(loaded.theta[0] == 1.5);
  CHECK(loaded.theta[2] == doctest::Approx(0.1).epsilon(1e-7));
}

TEST_CASE("predictor spec JSON round trip") {
  const PredictorSpec spec = TinyLmSpec{32, 4, 8, 16, 0.5};
  const auto back = predictor_spec_from_json(predictor_spec_to_json(spec));
  CHECK(std::get<TinyLmSpec>(back).hidden_dim == 16);
  CHECK_THROWS_AS(predictor_spec_from_json({{"type", "gpt"}}), ConfigError);
}
