#include "dsdm/predictors.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <Eigen/Cholesky>

#include "dsdm/io.hpp"

namespace dsdm {

using nlohmann::json;
using RowMatrixMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

// log(1 + exp(-m)) without overflow.
double softplus_neg(double m) {
  return m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace

std::vector<Sample> pool_samples(const CandidatePool& pool) {
  std::vector<Sample> out;
  out.reserve(pool.size());
  for (const auto& ex : pool.examples) out.emplace_back(TokenSample{ex.tokens, 1});
  return out;
}

Sample target_sample(const TargetSample& sample) {
  TokenSample t;
  t.tokens = sample.context;
  t.tokens.insert(t.tokens.end(), sample.continuation.begin(), sample.continuation.end());
  t.score_begin = sample.context.size();
  return t;
}

std::vector<Sample> task_samples(const TargetTask& task) {
  std::vector<Sample> out;
  out.reserve(task.samples.size());
  for (const auto& s : task.samples) out.push_back(target_sample(s));
  return out;
}

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  {
    auto out = io::open_out(path, true);
    io::write_u64(out, static_cast<std::uint64_t>(params.theta.size()));
    for (Eigen::Index i = 0; i < params.theta.size(); ++i) {
      io::write_f32(out, static_cast<float>(params.theta[i]));
    }
  }
  io::write_json(path.string() + ".json",
                 {{"predictor_id", params.predictor_id},
                  {"seed", params.seed},
                  {"num_params", params.theta.size()}});
}

ModelParams load_params(const std::filesystem::path& path) {
  ModelParams params;
  auto in = io::open_in(path, true);
  const std::uint64_t n = io::read_u64(in);
  params.theta.resize(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) params.theta[static_cast<Eigen::Index>(i)] = io::read_f32(in);
  const std::filesystem::path sidecar = path.string() + ".json";
  if (std::filesystem::exists(sidecar)) {
    const json meta = io::read_json(sidecar);
    params.predictor_id = meta.value("predictor_id", "");
    params.seed = meta.value("seed", std::uint64_t{0});
  }
  return params;
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train steps must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) {
    throw ConfigError("subset_fraction must be in (0, 1]");
  }
}

json predictor_spec_to_json(const PredictorSpec& spec) {
  return std::visit(
      [](const auto& s) -> json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, LogisticSpec>) {
          return {{"type", "logistic"}, {"input_dim", s.input_dim}};
        } else {
          return {{"type", "tiny_lm"},       {"vocab_size", s.vocab_size},
                  {"context_len", s.context_len}, {"embed_dim", s.embed_dim},
                  {"hidden_dim", s.hidden_dim},   {"init_scale", s.init_scale}};
        }
      },
      spec);
}

PredictorSpec predictor_spec_from_json(const json& j) {
  const std::string type = j.value("type", "");
  try {
    if (type == "logistic") return LogisticSpec{j.at("input_dim").get<std::size_t>()};
    if (type == "tiny_lm") {
      TinyLmSpec s;
      s.vocab_size = j.at("vocab_size").get<std::size_t>();
      s.context_len = j.at("context_len").get<std::size_t>();
      s.embed_dim = j.value("embed_dim", s.embed_dim);
      s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
      s.init_scale = j.value("init_scale", s.init_scale);
      return s;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad predictor spec: ") + e.what());
  }
  throw ConfigError("unknown predictor type '" + type + "'");
}

// ---------------------------------------------------------------------------
// Logistic

LogisticPredictor::LogisticPredictor(LogisticSpec spec) : spec_(spec) {
  if (spec_.input_dim == 0) throw ConfigError("logistic input_dim must be positive");
}

std::string LogisticPredictor::id() const {
  return "logistic(d=" + std::to_string(spec_.input_dim) + ")";
}

const FeatureSample& LogisticPredictor::features(const Sample& z) const {
  const auto* f = std::get_if<FeatureSample>(&z);
  if (f == nullptr) throw Error("logistic predictor needs feature samples");
  if (static_cast<std::size_t>(f->x.size()) != spec_.input_dim) {
    throw Error("feature dimension " + std::to_string(f->x.size()) + " != input_dim " +
                std::to_string(spec_.input_dim));
  }
  return *f;
}

Eigen::VectorXd LogisticPredictor::initial_params(std::uint64_t seed) const {
  std::mt19937_64 rng(derive_seed(seed, "logistic-init"));
  std::normal_distribution<double> normal(0.0, 0.01);
  Eigen::VectorXd theta(static_cast<Eigen::Index>(spec_.input_dim));
  for (Eigen::Index i = 0; i < theta.size(); ++i) theta[i] = normal(rng);
  return theta;
}

double LogisticPredictor::output(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& f = features(z);
  return f.x.dot(theta) + f.bias;
}

Eigen::VectorXd LogisticPredictor::grad_output(const Eigen::VectorXd&, const Sample& z) const {
  return features(z).x;
}

double LogisticPredictor::loss(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& f = features(z);
  return softplus_neg(f.label * output(theta, z));
}

double LogisticPredictor::accumulate_loss_grad(const Eigen::VectorXd& theta, const Sample& z,
                                               double scale, Eigen::VectorXd& grad) const {
  const auto& f = features(z);
  const double margin = f.label * output(theta, z);
  grad.noalias() += (-scale * f.label * (1.0 - sigmoid(margin))) * f.x;
  return softplus_neg(margin);
}

Correctness LogisticPredictor::correctness(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& f = features(z);
  const double p = clamp_prob(sigmoid(f.label * output(theta, z)));
  return {{p}, p};
}

double LogisticPredictor::margin_sign(const Sample& z) const { return features(z).label; }

Eigen::VectorXd LogisticPredictor::solve_newton(std::span<const Sample> pool,
                                                const SubsetMask& subset, double l2,
                                                std::size_t max_iters) const {
  const auto idx = subset.indices();
  const auto dim = static_cast<Eigen::Index>(spec_.input_dim);
  auto objective = [&](const Eigen::VectorXd& theta) {
    double total = 0.5 * l2 * theta.squaredNorm();
    for (std::size_t i : idx) total += loss(theta, pool[i]);
    return total;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  double current = objective(theta);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    Eigen::VectorXd grad = l2 * theta;
    Eigen::MatrixXd hess = l2 * Eigen::MatrixXd::Identity(dim, dim);
    for (std::size_t i : idx) {
      const auto& f = features(pool[i]);
      const double p = sigmoid(f.label * (f.x.dot(theta) + f.bias));
      grad.noalias() += (-f.label * (1.0 - p)) * f.x;
      hess.selfadjointView<Eigen::Lower>().rankUpdate(f.x, p * (1.0 - p));
    }
    if (!grad.allFinite()) throw DivergenceError(iter, "non-finite gradient in Newton solve");
    if (grad.lpNorm<Eigen::Infinity>() < 1e-12) break;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hess.selfadjointView<Eigen::Lower>());
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
      throw Error("singular Hessian in Newton solve; add weight_decay");
    }
    const Eigen::VectorXd step = ldlt.solve(grad);
    // Backtracking line search (Armijo) keeps the iteration monotone.
    const double slope = grad.dot(step);
    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double next_obj = objective(next);
    while (!(next_obj <= current - 1e-4 * t * slope) && t > 1e-10) {
      t *= 0.5;
      next = theta - t * step;
      next_obj = objective(next);
    }
    if (!(next_obj <= current - 1e-4 * t * slope)) break;  // converged to roundoff
    theta = std::move(next);
    current = next_obj;
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Tiny softmax LM

TinySoftmaxLm::TinySoftmaxLm(TinyLmSpec spec) : spec_(spec) {
  if (spec_.vocab_size < 2) throw ConfigError("tiny_lm vocab_size must be >= 2");
  if (spec_.context_len < 1) throw ConfigError("tiny_lm context_len must be >= 1");
  if (spec_.embed_dim < 1 || spec_.hidden_dim < 1) {
    throw ConfigError("tiny_lm embed_dim and hidden_dim must be >= 1");
  }
  const std::size_t v = spec_.vocab_size, e = spec_.embed_dim, h = spec_.hidden_dim;
  off_w1_ = v * e;
  off_b1_ = off_w1_ + h * spec_.context_len * e;
  off_w2_ = off_b1_ + h;
  off_b2_ = off_w2_ + v * h;
  total_ = off_b2_ + v;
}

std::string TinySoftmaxLm::id() const {
  return "tiny_lm(V=" + std::to_string(spec_.vocab_size) +
         ",C=" + std::to_string(spec_.context_len) + ",E=" + std::to_string(spec_.embed_dim) +
         ",H=" + std::to_string(spec_.hidden_dim) + ")";
}

std::size_t TinySoftmaxLm::num_params() const { return total_; }

Eigen::VectorXd TinySoftmaxLm::initial_params(std::uint64_t seed) const {
  std::mt19937_64 rng(derive_seed(seed, "tiny-lm-init"));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total_));
  const double s = spec_.init_scale;
  const double fan_in = static_cast<double>(spec_.context_len * spec_.embed_dim);
  auto fill = [&](std::size_t begin, std::size_t end, double stddev) {
    for (std::size_t i = begin; i < end; ++i) theta[static_cast<Eigen::Index>(i)] = stddev * normal(rng);
  };
  fill(0, off_w1_, s);
  fill(off_w1_, off_b1_, s / std::sqrt(fan_in));
  fill(off_w2_, off_b2_, s / std::sqrt(static_cast<double>(spec_.hidden_dim)));
  return theta;
}

const TokenSample& TinySoftmaxLm::tokens(const Sample& z) const {
  const auto* t = std::get_if<TokenSample>(&z);
  if (t == nullptr) throw Error("tiny_lm predictor needs token samples");
  for (Token tok : t->tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= spec_.vocab_size) {
      throw Error("token " + std::to_string(tok) + " outside vocabulary");
    }
  }
  if (t->score_begin >= t->tokens.size()) throw Error("token sample has no scored positions");
  return *t;
}

TinySoftmaxLm::Forward TinySoftmaxLm::forward(const Eigen::VectorXd& theta,
                                              std::span<const Token> seq, std::size_t pos) const {
  const auto V = static_cast<Eigen::Index>(spec_.vocab_size);
  const auto E = static_cast<Eigen::Index>(spec_.embed_dim);
  const auto H = static_cast<Eigen::Index>(spec_.hidden_dim);
  const auto C = static_cast<Eigen::Index>(spec_.context_len);

  Forward fw;
  fw.input = Eigen::VectorXd::Zero(C * E);
  for (Eigen::Index s = 0; s < C; ++s) {
    if (static_cast<std::size_t>(s) + 1 > pos) break;
    const Token t = seq[pos - 1 - static_cast<std::size_t>(s)];
    fw.input.segment(s * E, E) = theta.segment(t * E, E);
  }
  RowMatrixMap w1(theta.data() + off_w1_, H, C * E);
  RowMatrixMap w2(theta.data() + off_w2_, V, H);
  fw.hidden = (w1 * fw.input + theta.segment(static_cast<Eigen::Index>(off_b1_), H)).array().tanh();
  Eigen::VectorXd logits = w2 * fw.hidden + theta.segment(static_cast<Eigen::Index>(off_b2_), V);
  logits.array() -= logits.maxCoeff();
  fw.probs = logits.array().exp();
  fw.probs /= fw.probs.sum();
  return fw;
}

void TinySoftmaxLm::backward(const Eigen::VectorXd& theta, std::span<const Token> seq,
                             std::size_t pos, const Forward& fw, const Eigen::VectorXd& dlogits,
                             double scale, Eigen::VectorXd& grad) const {
  const auto V = static_cast<Eigen::Index>(spec_.vocab_size);
  const auto E = static_cast<Eigen::Index>(spec_.embed_dim);
  const auto H = static_cast<Eigen::Index>(spec_.hidden_dim);
  const auto C = static_cast<Eigen::Index>(spec_.context_len);
  using RowMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  const Eigen::VectorXd g = scale * dlogits;
  RowMut(grad.data() + off_w2_, V, H).noalias() += g * fw.hidden.transpose();
  grad.segment(static_cast<Eigen::Index>(off_b2_), V) += g;

  RowMatrixMap w2(theta.data() + off_w2_, V, H);
  const Eigen::VectorXd da =
      ((w2.transpose() * g).array() * (1.0 - fw.hidden.array().square())).matrix();
  RowMut(grad.data() + off_w1_, H, C * E).noalias() += da * fw.input.transpose();
  grad.segment(static_cast<Eigen::Index>(off_b1_), H) += da;

  RowMatrixMap w1(theta.data() + off_w1_, H, C * E);
  const Eigen::VectorXd du = w1.transpose() * da;
  for (Eigen::Index s = 0; s < C; ++s) {
    if (static_cast<std::size_t>(s) + 1 > pos) break;
    const Token t = seq[pos - 1 - static_cast<std::size_t>(s)];
    grad.segment(t * E, E) += du.segment(s * E, E);
  }
}

double TinySoftmaxLm::output(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& ts = tokens(z);
  double total = 0.0;
  for (std::size_t pos = ts.score_begin; pos < ts.tokens.size(); ++pos) {
    const double p = clamp_prob(forward(theta, ts.tokens, pos).probs[ts.tokens[pos]]);
    total += std::log(p / (1.0 - p));
  }
  return total;
}

Eigen::VectorXd TinySoftmaxLm::grad_output(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& ts = tokens(z);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(total_));
  for (std::size_t pos = ts.score_begin; pos < ts.tokens.size(); ++pos) {
    const Forward fw = forward(theta, ts.tokens, pos);
    const Token y = ts.tokens[pos];
    const double p = fw.probs[y];
    // Inside the clamp, d log(p/(1-p)) / d logits = (e_y - probs) / (1 - p).
    if (p <= kProbFloor || p >= 1.0 - kProbFloor) continue;
    Eigen::VectorXd dlogits = -fw.probs;
    dlogits[y] += 1.0;
    backward(theta, ts.tokens, pos, fw, dlogits, 1.0 / (1.0 - p), grad);
  }
  return grad;
}

double TinySoftmaxLm::loss(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& ts = tokens(z);
  double total = 0.0;
  for (std::size_t pos = ts.score_begin; pos < ts.tokens.size(); ++pos) {
    total -= std::log(clamp_prob(forward(theta, ts.tokens, pos).probs[ts.tokens[pos]]));
  }
  return total / static_cast<double>(ts.tokens.size() - ts.score_begin);
}

double TinySoftmaxLm::accumulate_loss_grad(const Eigen::VectorXd& theta, const Sample& z,
                                           double scale, Eigen::VectorXd& grad) const {
  const auto& ts = tokens(z);
  const double count = static_cast<double>(ts.tokens.size() - ts.score_begin);
  double total = 0.0;
  for (std::size_t pos = ts.score_begin; pos < ts.tokens.size(); ++pos) {
    const Forward fw = forward(theta, ts.tokens, pos);
    const Token y = ts.tokens[pos];
    total -= std::log(clamp_prob(fw.probs[y]));
    // Training uses the unclamped softmax cross-entropy gradient.
    Eigen::VectorXd dlogits = fw.probs;
    dlogits[y] -= 1.0;
    backward(theta, ts.tokens, pos, fw, dlogits, scale / count, grad);
  }
  return total / count;
}

Correctness TinySoftmaxLm::correctness(const Eigen::VectorXd& theta, const Sample& z) const {
  const auto& ts = tokens(z);
  Correctness c;
  for (std::size_t pos = ts.score_begin; pos < ts.tokens.size(); ++pos) {
    c.per_position.push_back(clamp_prob(forward(theta, ts.tokens, pos).probs[ts.tokens[pos]]));
  }
  c.mean = std::accumulate(c.per_position.begin(), c.per_position.end(), 0.0) /
           static_cast<double>(c.per_position.size());
  return c;
}

Eigen::VectorXd TinySoftmaxLm::next_token_probs(const Eigen::VectorXd& theta,
                                                std::span<const Token> prefix) const {
  return forward(theta, prefix, prefix.size()).probs;
}

Eigen::VectorXd TinySoftmaxLm::embed(const Eigen::VectorXd& theta,
                                     std::span<const Token> seq) const {
  return forward(theta, seq, seq.size()).hidden;
}

std::unique_ptr<Predictor> make_predictor(const PredictorSpec& spec) {
  return std::visit(
      [](const auto& s) -> std::unique_ptr<Predictor> {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, LogisticSpec>) {
          return std::make_unique<LogisticPredictor>(s);
        } else {
          return std::make_unique<TinySoftmaxLm>(s);
        }
      },
      spec);
}

// ---------------------------------------------------------------------------
// Training

double subset_loss(const Predictor& predictor, const Eigen::VectorXd& theta,
                   std::span<const Sample> pool, const SubsetMask& subset) {
  const auto idx = subset.indices();
  if (idx.empty()) throw Error("empty training set");
  double total = 0.0;
  for (std::size_t i : idx) total += predictor.loss(theta, pool[i]);
  return total / static_cast<double>(idx.size());
}

ModelParams train(const Predictor& predictor, std::span<const Sample> pool,
                  const SubsetMask& subset, const TrainConfig& cfg) {
  cfg.validate();
  if (subset.size() != pool.size()) throw Error("subset mask length does not match pool size");
  std::vector<std::size_t> order = subset.indices();
  if (order.empty()) throw Error("empty training set");

  ModelParams out;
  out.predictor_id = predictor.id();
  out.seed = cfg.seed;

  if (cfg.solver == Solver::Newton) {
    const auto* logistic = dynamic_cast<const LogisticPredictor*>(&predictor);
    if (logistic == nullptr) throw ConfigError("newton solver requires the logistic predictor");
    out.theta = logistic->solve_newton(pool, subset, cfg.weight_decay, cfg.steps);
    return out;
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, "sgd-order"));
  Eigen::VectorXd theta = predictor.initial_params(cfg.seed);
  Eigen::VectorXd grad(theta.size());
  const std::size_t batch = std::min(cfg.batch_size, order.size());
  std::size_t cursor = order.size();  // forces a shuffle before the first batch
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (batch == order.size()) {
      cursor = 0;
    } else if (cursor + batch > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    grad = cfg.weight_decay * theta;
    double batch_loss = 0.0;
    const double scale = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      batch_loss += predictor.accumulate_loss_grad(theta, pool[order[cursor + b]], scale, grad);
    }
    cursor += batch;
    if (!std::isfinite(batch_loss) || !grad.allFinite()) {
      throw DivergenceError(step, "non-finite training loss");
    }
    theta.noalias() -= cfg.learning_rate * grad;
  }
  if (!theta.allFinite()) throw DivergenceError(cfg.steps, "non-finite parameters");
  out.theta = std::move(theta);
  return out;
}

}  // namespace dsdm
