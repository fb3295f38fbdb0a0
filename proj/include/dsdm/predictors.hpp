#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dsdm/common.hpp"
#include "dsdm/corpus.hpp"
#include "dsdm/mask.hpp"

namespace dsdm {

/// Probabilities are clamped to [kProbFloor, 1 - kProbFloor] before any log or
/// log-odds is taken.
inline constexpr double kProbFloor = 1e-6;

/// Logistic-regression triplet (x, b, y) with y in {-1, +1}.
struct FeatureSample {
  Eigen::VectorXd x;
  double bias = 0.0;
  int label = 1;
};

/// Token sequence whose positions [score_begin, size) are scored. Pool
/// examples score every position from 1; target samples score only the
/// continuation.
struct TokenSample {
  std::vector<Token> tokens;
  std::size_t score_begin = 1;
};

using Sample = std::variant<FeatureSample, TokenSample>;

std::vector<Sample> pool_samples(const CandidatePool& pool);
Sample target_sample(const TargetSample& sample);
std::vector<Sample> task_samples(const TargetTask& task);

struct ModelParams {
  Eigen::VectorXd theta;
  std::string predictor_id;
  std::uint64_t seed = 0;
};

/// Writes an 8-byte little-endian length followed by float32 parameters, plus a
/// JSON sidecar at `<path>.json` carrying predictor_id and seed.
void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);

enum class Solver {
  Sgd,     ///< seeded mini-batch SGD on the mean subset loss
  Newton,  ///< exact convex solve; logistic predictor only
};

struct TrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double learning_rate = 0.1;
  /// SGD: coefficient of (wd/2)||theta||^2 added to the mean loss.
  /// Newton: coefficient of (wd/2)||theta||^2 added to the summed loss, so the
  /// regularizer does not change when one example is removed.
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  double subset_fraction = 1.0;
  Solver solver = Solver::Sgd;

  void validate() const;
};

struct LogisticSpec {
  std::size_t input_dim = 0;
};

/// embedding -> tanh hidden layer -> softmax over the vocabulary. Position j
/// sees the previous `context_len` tokens (zero vectors before the start).
struct TinyLmSpec {
  std::size_t vocab_size = 0;
  std::size_t context_len = 0;
  std::size_t embed_dim = 8;
  std::size_t hidden_dim = 16;
  double init_scale = 0.5;
};

using PredictorSpec = std::variant<LogisticSpec, TinyLmSpec>;

nlohmann::json predictor_spec_to_json(const PredictorSpec& spec);
PredictorSpec predictor_spec_from_json(const nlohmann::json& j);

struct Correctness {
  std::vector<double> per_position;  ///< clamped correct-class probabilities
  double mean = 0.0;
};

/// Model-output and loss interface used by the datamodel estimators.
class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual std::string id() const = 0;
  virtual std::size_t num_params() const = 0;
  virtual Eigen::VectorXd initial_params(std::uint64_t seed) const = 0;

  /// f(z; theta).
  virtual double output(const Eigen::VectorXd& theta, const Sample& z) const = 0;
  /// Exact gradient of output() in the flattened parameter order.
  virtual Eigen::VectorXd grad_output(const Eigen::VectorXd& theta, const Sample& z) const = 0;
  virtual double loss(const Eigen::VectorXd& theta, const Sample& z) const = 0;
  /// Adds scale * grad loss(z) into `grad` and returns loss(z).
  virtual double accumulate_loss_grad(const Eigen::VectorXd& theta, const Sample& z, double scale,
                                      Eigen::VectorXd& grad) const = 0;
  virtual Correctness correctness(const Eigen::VectorXd& theta, const Sample& z) const = 0;

  /// Sign turning output() into a correctness margin: the label for the
  /// logistic model, +1 for outputs that already are margins.
  virtual double margin_sign(const Sample& z) const = 0;
};

class LogisticPredictor final : public Predictor {
 public:
  explicit LogisticPredictor(LogisticSpec spec);

  std::string id() const override;
  std::size_t num_params() const override { return spec_.input_dim; }
  Eigen::VectorXd initial_params(std::uint64_t seed) const override;
  double output(const Eigen::VectorXd& theta, const Sample& z) const override;
  Eigen::VectorXd grad_output(const Eigen::VectorXd& theta, const Sample& z) const override;
  double loss(const Eigen::VectorXd& theta, const Sample& z) const override;
  double accumulate_loss_grad(const Eigen::VectorXd& theta, const Sample& z, double scale,
                              Eigen::VectorXd& grad) const override;
  Correctness correctness(const Eigen::VectorXd& theta, const Sample& z) const override;
  double margin_sign(const Sample& z) const override;

  /// Minimizes sum_i log(1 + exp(-y_i f_i)) + (l2/2)||theta||^2 over the
  /// masked samples with damped Newton iterations starting from zero.
  Eigen::VectorXd solve_newton(std::span<const Sample> pool, const SubsetMask& subset, double l2,
                               std::size_t max_iters) const;

 private:
  const FeatureSample& features(const Sample& z) const;
  LogisticSpec spec_;
};

/// Parameter layout (layer-major, row-major inside each layer):
///   embedding [V x E], W1 [H x C*E], b1 [H], W2 [V x H], b2 [V].
class TinySoftmaxLm final : public Predictor {
 public:
  explicit TinySoftmaxLm(TinyLmSpec spec);

  const TinyLmSpec& spec() const { return spec_; }

  std::string id() const override;
  std::size_t num_params() const override;
  Eigen::VectorXd initial_params(std::uint64_t seed) const override;
  /// Sum over scored positions of log(p / (1 - p)) for the correct token.
  double output(const Eigen::VectorXd& theta, const Sample& z) const override;
  Eigen::VectorXd grad_output(const Eigen::VectorXd& theta, const Sample& z) const override;
  /// Mean token cross-entropy over scored positions.
  double loss(const Eigen::VectorXd& theta, const Sample& z) const override;
  double accumulate_loss_grad(const Eigen::VectorXd& theta, const Sample& z, double scale,
                              Eigen::VectorXd& grad) const override;
  Correctness correctness(const Eigen::VectorXd& theta, const Sample& z) const override;
  double margin_sign(const Sample&) const override { return 1.0; }

  /// Next-token distribution after `prefix` (the model sees its last
  /// context_len tokens).
  Eigen::VectorXd next_token_probs(const Eigen::VectorXd& theta,
                                   std::span<const Token> prefix) const;
  /// Hidden activation after reading the whole sequence; used as an embedding.
  Eigen::VectorXd embed(const Eigen::VectorXd& theta, std::span<const Token> tokens) const;

 private:
  struct Forward {
    Eigen::VectorXd input;   // concatenated context embeddings
    Eigen::VectorXd hidden;  // tanh activations
    Eigen::VectorXd probs;   // softmax output
  };
  const TokenSample& tokens(const Sample& z) const;
  Forward forward(const Eigen::VectorXd& theta, std::span<const Token> seq, std::size_t pos) const;
  void backward(const Eigen::VectorXd& theta, std::span<const Token> seq, std::size_t pos,
                const Forward& fw, const Eigen::VectorXd& dlogits, double scale,
                Eigen::VectorXd& grad) const;

  TinyLmSpec spec_;
  std::size_t off_w1_, off_b1_, off_w2_, off_b2_, total_;
};

std::unique_ptr<Predictor> make_predictor(const PredictorSpec& spec);

/// Mean training loss over the masked samples.
double subset_loss(const Predictor& predictor, const Eigen::VectorXd& theta,
                   std::span<const Sample> pool, const SubsetMask& subset);

/// The learning algorithm: trains on the masked samples only. Deterministic
/// in (predictor, subset, pool, cfg).
ModelParams train(const Predictor& predictor, std::span<const Sample> pool,
                  const SubsetMask& subset, const TrainConfig& cfg);

}  // namespace dsdm
