#include "dsdm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dsdm/baselines.hpp"
#include "dsdm/datamodel.hpp"
#include "dsdm/io.hpp"
#include "dsdm/selection.hpp"
#include "dsdm/trak.hpp"

namespace dsdm {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Synthetic pool

void SyntheticPoolSpec::validate() const {
  if (n_subpopulations < 1) throw ConfigError("n_subpopulations must be positive");
  if (examples_per_subpopulation < 1) throw ConfigError("examples_per_subpopulation must be positive");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (n_subpopulations >= vocab_size) {
    throw ConfigError("n_subpopulations must be smaller than vocab_size");
  }
  if (chunk_len < 2) throw ConfigError("chunk_len must be >= 2");
  if (context_tokens < 1 || context_tokens >= chunk_len) {
    throw ConfigError("context_tokens must be in [1, chunk_len)");
  }
  if (target_subpopulations.empty()) throw ConfigError("no target subpopulations");
  for (auto s : target_subpopulations) {
    if (s >= n_subpopulations) throw ConfigError("target subpopulation id out of range");
  }
  if (target_samples < 1 || holdout_samples < 1) {
    throw ConfigError("target_samples and holdout_samples must be positive");
  }
  if (!(noise_prob >= 0.0 && noise_prob <= 1.0)) throw ConfigError("noise_prob must be in [0, 1]");
}

json to_json(const SyntheticPoolSpec& s) {
  return {{"n_subpopulations", s.n_subpopulations},
          {"examples_per_subpopulation", s.examples_per_subpopulation},
          {"target_subpopulations", s.target_subpopulations},
          {"noise_examples", s.noise_examples},
          {"vocab_size", s.vocab_size},
          {"chunk_len", s.chunk_len},
          {"target_samples", s.target_samples},
          {"holdout_samples", s.holdout_samples},
          {"context_tokens", s.context_tokens},
          {"noise_prob", s.noise_prob},
          {"seed", s.seed}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : j.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return item.key() == k; }) ==
        keys.end()) {
      throw ConfigError("unknown field '" + item.key() + "' in " + where);
    }
  }
}

}  // namespace

SyntheticPoolSpec synthetic_spec_from_json(const json& j) {
  reject_unknown(j,
                 {"n_subpopulations", "examples_per_subpopulation", "target_subpopulations",
                  "noise_examples", "vocab_size", "chunk_len", "target_samples", "holdout_samples",
                  "context_tokens", "noise_prob", "seed"},
                 "synthetic pool spec");
  SyntheticPoolSpec s;
  try {
    s.n_subpopulations = j.value("n_subpopulations", s.n_subpopulations);
    s.examples_per_subpopulation = j.value("examples_per_subpopulation", s.examples_per_subpopulation);
    s.target_subpopulations = j.value("target_subpopulations", s.target_subpopulations);
    s.noise_examples = j.value("noise_examples", s.noise_examples);
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.chunk_len = j.value("chunk_len", s.chunk_len);
    s.target_samples = j.value("target_samples", s.target_samples);
    s.holdout_samples = j.value("holdout_samples", s.holdout_samples);
    s.context_tokens = j.value("context_tokens", s.context_tokens);
    s.noise_prob = j.value("noise_prob", s.noise_prob);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad synthetic pool spec: ") + e.what());
  }
  return s;
}

SyntheticPool make_synthetic_pool(const SyntheticPoolSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, "synthetic-pool"));
  const auto vocab = static_cast<Token>(spec.vocab_size);
  std::uniform_int_distribution<Token> uniform_token(0, vocab - 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  SyntheticPool out;
  std::vector<std::size_t> candidates(spec.vocab_size - 1);
  std::iota(candidates.begin(), candidates.end(), std::size_t{1});
  std::shuffle(candidates.begin(), candidates.end(), rng);
  out.steps.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(spec.n_subpopulations));

  const auto templated = [&](std::size_t step) {
    std::vector<Token> seq(spec.chunk_len);
    seq[0] = uniform_token(rng);
    for (std::size_t j = 1; j < seq.size(); ++j) {
      seq[j] = unif(rng) < spec.noise_prob
                   ? uniform_token(rng)
                   : static_cast<Token>((static_cast<std::size_t>(seq[j - 1]) + step) % spec.vocab_size);
    }
    return seq;
  };

  std::vector<std::pair<int, std::vector<Token>>> rows;
  for (std::size_t s = 0; s < spec.n_subpopulations; ++s) {
    for (std::size_t i = 0; i < spec.examples_per_subpopulation; ++i) {
      rows.emplace_back(static_cast<int>(s), templated(out.steps[s]));
    }
  }
  for (std::size_t i = 0; i < spec.noise_examples; ++i) {
    std::vector<Token> seq(spec.chunk_len);
    for (auto& t : seq) t = uniform_token(rng);
    rows.emplace_back(-1, std::move(seq));
  }
  std::shuffle(rows.begin(), rows.end(), rng);

  out.pool.chunk_len = spec.chunk_len;
  out.pool.vocab_size = spec.vocab_size;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.labels.push_back(rows[i].first);
    out.pool.examples.push_back(Example{i, std::move(rows[i].second), std::nullopt});
  }

  const auto split = [&](const std::vector<Token>& seq) {
    TargetSample t;
    t.context.assign(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(spec.context_tokens));
    t.continuation.assign(seq.begin() + static_cast<std::ptrdiff_t>(spec.context_tokens), seq.end());
    return t;
  };
  for (auto s : spec.target_subpopulations) {
    TargetTask target{"subpop" + std::to_string(s), 1.0, {}};
    TargetTask holdout{"subpop" + std::to_string(s) + "_holdout", 1.0, {}};
    std::set<std::vector<Token>> seen;
    const std::size_t wanted = spec.target_samples + spec.holdout_samples;
    const std::size_t max_attempts = 1000 * wanted;
    for (std::size_t attempt = 0; seen.size() < wanted; ++attempt) {
      if (attempt >= max_attempts) {
        throw ConfigError("cannot draw disjoint target and holdout samples; raise vocab_size, "
                          "chunk_len or noise_prob");
      }
      auto seq = templated(out.steps[s]);
      if (!seen.insert(seq).second) continue;
      (seen.size() <= spec.target_samples ? target : holdout).samples.push_back(split(seq));
    }
    out.targets.push_back(std::move(target));
    out.holdouts.push_back(std::move(holdout));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config

namespace {

json lm_to_json(const TinyLmSpec& s) {
  return {{"vocab_size", s.vocab_size}, {"context_len", s.context_len}, {"embed_dim", s.embed_dim},
          {"hidden_dim", s.hidden_dim}, {"init_scale", s.init_scale}};
}

TinyLmSpec lm_from_json(const json& j, TinyLmSpec s, const std::string& where) {
  reject_unknown(j, {"type", "vocab_size", "context_len", "embed_dim", "hidden_dim", "init_scale"}, where);
  if (j.contains("type") && j["type"] != "tiny_lm") throw ConfigError(where + " must be a tiny_lm");
  s.vocab_size = j.value("vocab_size", s.vocab_size);
  s.context_len = j.value("context_len", s.context_len);
  s.embed_dim = j.value("embed_dim", s.embed_dim);
  s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
  s.init_scale = j.value("init_scale", s.init_scale);
  return s;
}

json train_to_json(const TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay}};
}

TrainConfig train_from_json(const json& j, TrainConfig t, const std::string& where) {
  reject_unknown(j, {"steps", "batch_size", "learning_rate", "weight_decay"}, where);
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  return t;
}

const std::vector<std::string> kMethods{"dsdm", "random", "dsir", "classifier", "semdedup"};

}  // namespace

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("at least one method is required");
  if (ks.empty()) throw ConfigError("at least one k is required");
  for (auto k : ks) {
    if (k < 1) throw ConfigError("every k must be positive");
  }
  std::set<std::string> labels;
  for (const auto& m : methods) {
    if (std::find(kMethods.begin(), kMethods.end(), m.name) == kMethods.end()) {
      throw ConfigError("unknown method '" + m.name + "'");
    }
    if (m.repeats < 1) throw ConfigError("method repeats must be positive");
    if (!labels.insert(m.label.empty() ? m.name : m.label).second) {
      throw ConfigError("duplicate method label '" + (m.label.empty() ? m.name : m.label) + "'");
    }
  }
  if (pool_source == "synthetic") {
    synthetic.validate();
    if (!task_weights.empty() && task_weights.size() != synthetic.target_subpopulations.size()) {
      throw ConfigError("task_weights must have one entry per target subpopulation");
    }
  } else if (pool_source == "file") {
    if (pool_path.empty()) throw ConfigError("file pool source needs pool.path");
    if (tasks.empty()) throw ConfigError("file pool source needs at least one task");
    for (const auto& t : tasks) {
      if (t.path.empty() || t.holdout_path.empty()) {
        throw ConfigError("every task needs path and holdout_path");
      }
      if (t.path == t.holdout_path) throw ConfigError("task and holdout files must differ");
      if (!(t.weight >= 0.0)) throw ConfigError("task weights must be non-negative");
    }
  } else {
    throw ConfigError("pool.source must be 'synthetic' or 'file'");
  }
  for (double w : task_weights) {
    if (!(w >= 0.0)) throw ConfigError("task weights must be non-negative");
  }
  proxy_train.validate();
  deploy_train.validate();
  if (epochs && !(*epochs > 0.0)) throw ConfigError("epochs must be positive");
  if (token_budget && *token_budget < 1) throw ConfigError("token_budget must be positive");
  if (metrics.empty()) throw ConfigError("at least one metric is required");
  for (auto m : metrics) {
    if (m != Metric::MeanLogProb && m != Metric::ExactMatch) {
      throw ConfigError("experiment metrics are mean_log_prob and exact_match");
    }
  }
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (const auto& m : c.methods) {
    methods.push_back({{"name", m.name},
                       {"label", m.label.empty() ? m.name : m.label},
                       {"repeats", m.repeats},
                       {"settings", m.settings}});
  }
  json tasks = json::array();
  for (const auto& t : c.tasks) {
    tasks.push_back({{"name", t.name}, {"path", t.path}, {"holdout_path", t.holdout_path},
                     {"weight", t.weight}});
  }
  json metrics = json::array();
  for (auto m : c.metrics) metrics.push_back(to_string(m));
  return {{"seed", c.seed},
          {"output_dir", c.output_dir},
          {"pool",
           {{"source", c.pool_source},
            {"synthetic", to_json(c.synthetic)},
            {"path", c.pool_path},
            {"tasks", tasks},
            {"task_weights", c.task_weights}}},
          {"methods", methods},
          {"ks", c.ks},
          {"proxy", lm_to_json(c.proxy)},
          {"deployment", lm_to_json(c.deployment)},
          {"proxy_train", train_to_json(c.proxy_train)},
          {"deploy_train", train_to_json(c.deploy_train)},
          {"epochs", c.epochs ? json(*c.epochs) : json("equal_total_tokens")},
          {"token_budget", c.token_budget ? json(*c.token_budget) : json(nullptr)},
          {"metrics", metrics}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown(j,
                 {"seed", "output_dir", "pool", "methods", "ks", "proxy", "deployment", "proxy_train",
                  "deploy_train", "epochs", "token_budget", "metrics"},
                 "experiment config");
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("pool")) {
      const auto& p = j["pool"];
      reject_unknown(p, {"source", "synthetic", "path", "tasks", "task_weights"}, "pool");
      c.pool_source = p.value("source", c.pool_source);
      if (p.contains("synthetic")) c.synthetic = synthetic_spec_from_json(p["synthetic"]);
      c.pool_path = p.value("path", c.pool_path);
      for (const auto& t : p.value("tasks", json::array())) {
        reject_unknown(t, {"name", "path", "holdout_path", "weight"}, "task");
        TaskFiles tf;
        tf.path = t.at("path").get<std::string>();
        tf.holdout_path = t.at("holdout_path").get<std::string>();
        tf.name = t.value("name", fs::path(tf.path).stem().string());
        tf.weight = t.value("weight", 1.0);
        c.tasks.push_back(std::move(tf));
      }
      c.task_weights = p.value("task_weights", c.task_weights);
    }
    for (const auto& m : j.value("methods", json::array())) {
      MethodConfig mc;
      if (m.is_string()) {
        mc.name = m.get<std::string>();
      } else {
        reject_unknown(m, {"name", "label", "repeats", "settings"}, "method");
        mc.name = m.at("name").get<std::string>();
        mc.label = m.value("label", std::string{});
        mc.repeats = m.value("repeats", mc.repeats);
        mc.settings = m.value("settings", json::object());
      }
      if (mc.label.empty()) mc.label = mc.name;
      c.methods.push_back(std::move(mc));
    }
    c.ks = j.value("ks", c.ks);
    if (j.contains("proxy")) c.proxy = lm_from_json(j["proxy"], c.proxy, "proxy");
    if (j.contains("deployment")) c.deployment = lm_from_json(j["deployment"], c.deployment, "deployment");
    if (j.contains("proxy_train")) c.proxy_train = train_from_json(j["proxy_train"], c.proxy_train, "proxy_train");
    if (j.contains("deploy_train")) {
      c.deploy_train = train_from_json(j["deploy_train"], c.deploy_train, "deploy_train");
    }
    if (j.contains("epochs")) {
      const auto& e = j["epochs"];
      if (e.is_string()) {
        if (e != "equal_total_tokens") throw ConfigError("epochs must be a number or 'equal_total_tokens'");
      } else {
        c.epochs = e.get<double>();
      }
    }
    if (j.contains("token_budget") && !j["token_budget"].is_null()) {
      c.token_budget = j["token_budget"].get<std::size_t>();
    }
    if (j.contains("metrics")) {
      c.metrics.clear();
      for (const auto& m : j["metrics"]) c.metrics.push_back(metric_from_string(m.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  std::vector<std::string> parts;
  std::stringstream ss(path);
  for (std::string part; std::getline(ss, part, '.');) {
    if (part.empty()) throw ConfigError("empty segment in override path '" + path + "'");
    parts.push_back(part);
  }
  json* node = &doc;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& part = parts[i];
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(part, &used);
        if (used != part.size()) throw std::invalid_argument(part);
      } catch (const std::exception&) {
        throw ConfigError("override path '" + path + "': '" + part + "' is not an array index");
      }
      if (idx > node->size()) throw ConfigError("override path '" + path + "': index out of range");
      if (idx == node->size()) node->push_back(nullptr);
      node = &(*node)[idx];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError("override path '" + path + "' crosses a scalar");
      node = &(*node)[part];
    }
    if (last) *node = value;
  }
}

ExperimentConfig load_experiment_config(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json doc;
  try {
    doc = io::read_json(path);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return experiment_config_from_json(doc);
}

std::size_t deployment_epochs(const ExperimentConfig& cfg, std::size_t selected, std::size_t pool_size,
                              std::size_t chunk_len) {
  if (selected == 0) throw Error("empty selection");
  if (cfg.epochs) return static_cast<std::size_t>(std::ceil(*cfg.epochs));
  const std::size_t budget = cfg.token_budget.value_or(2 * pool_size * chunk_len);
  const std::size_t per_epoch = selected * chunk_len;
  return std::max<std::size_t>(1, (budget + per_epoch - 1) / per_epoch);
}

// ---------------------------------------------------------------------------
// Runner

std::optional<fs::path> cache_dir() {
  const char* v = std::getenv("DSDMKIT_CACHE_DIR");
  if (v == nullptr || *v == '\0') return std::nullopt;
  return fs::path(v);
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

struct Inputs {
  CandidatePool pool;
  std::vector<TargetTask> targets;
  std::vector<TargetTask> holdouts;
  std::vector<double> task_weights;
  std::vector<int> labels;
  std::vector<std::size_t> steps;
};

Inputs load_inputs(const ExperimentConfig& cfg) {
  Inputs in;
  if (cfg.pool_source == "synthetic") {
    auto syn = make_synthetic_pool(cfg.synthetic);
    in.pool = std::move(syn.pool);
    in.targets = std::move(syn.targets);
    in.holdouts = std::move(syn.holdouts);
    in.labels = std::move(syn.labels);
    in.steps = std::move(syn.steps);
    in.task_weights = cfg.task_weights.empty() ? std::vector<double>(in.targets.size(), 1.0)
                                               : cfg.task_weights;
  } else {
    in.pool = load_pool(cfg.pool_path);
    for (const auto& t : cfg.tasks) {
      in.targets.push_back(load_task(t.path, t.name));
      in.holdouts.push_back(load_task(t.holdout_path, t.name + "_holdout"));
      in.task_weights.push_back(t.weight);
    }
  }
  in.pool.validate();
  for (auto& t : in.targets) t.validate();
  for (auto& t : in.holdouts) t.validate();
  return in;
}

std::string pool_digest(const CandidatePool& pool) {
  std::string bytes;
  bytes.reserve(pool.size() * pool.chunk_len * 4 + 16);
  bytes += std::to_string(pool.vocab_size) + "/" + std::to_string(pool.chunk_len) + "/";
  for (const auto& e : pool.examples) {
    for (Token t : e.tokens) bytes.append(reinterpret_cast<const char*>(&t), sizeof t);
  }
  return content_hash(bytes);
}

std::vector<Doc> target_docs(const std::vector<TargetTask>& tasks) {
  std::vector<Doc> docs;
  for (const auto& t : tasks) {
    for (const auto& s : t.samples) {
      Doc d = s.context;
      d.insert(d.end(), s.continuation.begin(), s.continuation.end());
      docs.push_back(std::move(d));
    }
  }
  return docs;
}

HashedNgramFeaturizer featurizer_from(const json& s) {
  HashedNgramFeaturizer f;
  f.n_max = s.value("n_max", f.n_max);
  f.buckets = s.value("buckets", f.buckets);
  f.hash_seed = s.value("hash_seed", f.hash_seed);
  f.validate();
  return f;
}

/// Loads reference models and gradient stores from the cache or computes and
/// stores them.
std::pair<std::vector<ModelParams>, std::vector<GradientStore>> trak_stores(
    const Predictor& proxy, std::span<const Sample> samples, const TrakConfig& tc,
    const std::string& key_material) {
  const auto dir = cache_dir();
  const std::string key = content_hash(key_material);
  std::vector<ModelParams> params(tc.m);
  std::vector<GradientStore> stores(tc.m);
  std::vector<bool> have(tc.m, false);
  if (dir && !tc.identity_projection) {
    for (std::size_t k = 0; k < tc.m; ++k) {
      const auto base = *dir / ("trak_" + key + "_" + std::to_string(k));
      if (fs::exists(base.string() + ".trkg") && fs::exists(base.string() + ".params")) {
        stores[k] = load_gradient_store(base.string() + ".trkg", k);
        params[k] = load_params(base.string() + ".params");
        have[k] = stores[k].size() == samples.size() &&
                  static_cast<std::size_t>(params[k].theta.size()) == proxy.num_params();
      }
    }
  }
  const auto missing = static_cast<std::size_t>(std::count(have.begin(), have.end(), false));
  if (missing == 0) return {std::move(params), std::move(stores)};

  auto trained = train_reference_models(proxy, samples, tc);
  for (std::size_t k = 0; k < tc.m; ++k) {
    if (have[k]) continue;
    params[k] = std::move(trained[k]);
    const std::size_t d = tc.identity_projection ? proxy.num_params() : tc.d;
    stores[k] = project_gradients(proxy, params[k], samples, d, reference_projection_seed(tc, k), k,
                                  tc.identity_projection);
    // Cached artifacts are float32; rounding here makes hits and misses agree.
    params[k].theta = params[k].theta.cast<float>().cast<double>();
    stores[k].phi = stores[k].phi.cast<float>().cast<double>();
    stores[k].q_diag = stores[k].q_diag.cast<float>().cast<double>();
    if (dir && !tc.identity_projection) {
      fs::create_directories(*dir);
      const auto base = *dir / ("trak_" + key + "_" + std::to_string(k));
      save_gradient_store(stores[k], base.string() + ".trkg");
      save_params(params[k], base.string() + ".params");
    }
  }
  return {std::move(params), std::move(stores)};
}

MeanDatamodel dsdm_weights(const MethodConfig& mc, std::uint64_t method_seed, const Inputs& in,
                           const ExperimentConfig& cfg, const TinyLmSpec& proxy_spec,
                           const std::string& pool_hash) {
  const auto& s = mc.settings;
  const std::string estimator = s.value("estimator", std::string("trak"));
  const TinySoftmaxLm proxy(proxy_spec);
  const auto samples = pool_samples(in.pool);
  std::vector<std::vector<Datamodel>> per_task(in.targets.size());

  if (estimator == "trak") {
    TrakConfig tc;
    tc.m = s.value("m", tc.m);
    tc.d = s.value("d", tc.d);
    tc.subset_fraction = s.value("subset_fraction", tc.subset_fraction);
    if (s.contains("ridge") && !s["ridge"].is_null()) tc.ridge = s["ridge"].get<double>();
    tc.seed = derive_seed(method_seed, "trak");
    tc.train = cfg.proxy_train;
    tc.validate();
    const json key{{"pool", pool_hash},
                   {"proxy", lm_to_json(proxy_spec)},
                   {"train", train_to_json(tc.train)},
                   {"m", tc.m},
                   {"d", tc.d},
                   {"subset_fraction", tc.subset_fraction},
                   {"seed", tc.seed}};
    auto [params, stores] = trak_stores(proxy, samples, tc, key.dump());
    const TrakScorer scorer(proxy, std::move(params), std::move(stores), tc.ridge);
    for (std::size_t t = 0; t < in.targets.size(); ++t) {
      const auto targets = task_samples(in.targets[t]);
      per_task[t].resize(targets.size());
      parallel_for(targets.size(), [&](std::size_t i) {
        per_task[t][i] = scorer.datamodel(targets[i], in.targets[t].name + "/" + std::to_string(i));
      });
    }
  } else if (estimator == "regression") {
    const std::size_t n_masks = s.value("masks", std::size_t{200});
    const double fraction = s.value("fraction", 0.5);
    const double ridge = s.value("ridge", 1e-6);
    TrainConfig tc = cfg.proxy_train;
    tc.seed = derive_seed(method_seed, "regression-train");
    const auto masks = sample_subsets(in.pool.size(), n_masks, fraction,
                                      derive_seed(method_seed, "regression-masks"));
    for (std::size_t t = 0; t < in.targets.size(); ++t) {
      const auto targets = task_samples(in.targets[t]);
      const auto data = collect_regression_data(proxy, samples, targets, masks, tc);
      for (const auto& records : data.per_target) per_task[t].push_back(fit_linear_datamodel(records, ridge));
    }
  } else {
    throw ConfigError("dsdm estimator must be 'trak' or 'regression'");
  }
  return average_datamodels(per_task, in.task_weights);
}

using Selector = std::function<SelectionResult(std::size_t k, std::size_t repeat)>;

struct PreparedMethod {
  std::uint64_t seed = 0;
  Selector select;
  std::string error;
  std::optional<MeanDatamodel> mean;
};

PreparedMethod prepare_method(const MethodConfig& mc, const Inputs& in, const ExperimentConfig& cfg,
                              const TinyLmSpec& proxy_spec, const std::string& pool_hash) {
  PreparedMethod pm;
  pm.seed = derive_seed(cfg.seed, "method:" + mc.label);
  const std::uint64_t seed = pm.seed;
  const std::size_t n = in.pool.size();
  const std::string target_name = in.targets.size() == 1 ? in.targets[0].name : "mixture";
  try {
    const auto& s = mc.settings;
    if (mc.name == "random") {
      pm.select = [=](std::size_t k, std::size_t r) { return random_select(n, k, derive_seed(seed, r)); };
    } else if (mc.name == "dsdm") {
      pm.mean = dsdm_weights(mc, seed, in, cfg, proxy_spec, pool_hash);
      const MeanDatamodel mean = *pm.mean;
      pm.select = [=](std::size_t k, std::size_t) { return dsdm_select(mean, k, target_name); };
    } else if (mc.name == "dsir") {
      const auto f = featurizer_from(s);
      const double alpha = s.value("smoothing_alpha", 0.01);
      auto pool_docs = std::make_shared<std::vector<Doc>>();
      for (const auto& e : in.pool.examples) pool_docs->push_back(e.tokens);
      auto docs = std::make_shared<std::vector<Doc>>(target_docs(in.targets));
      pm.select = [=](std::size_t k, std::size_t r) {
        auto sel = dsir_select(*pool_docs, *docs, k, f, alpha, derive_seed(seed, r));
        sel.target = target_name;
        return sel;
      };
    } else if (mc.name == "classifier") {
      const auto f = featurizer_from(s);
      std::vector<Doc> pool_docs;
      for (const auto& e : in.pool.examples) pool_docs.push_back(e.tokens);
      const std::size_t n_neg = std::min(n, s.value("negatives", std::size_t{100}));
      const auto neg_idx = random_select(n, n_neg, derive_seed(seed, "classifier-negatives")).indices;
      std::vector<Doc> negatives;
      for (auto i : neg_idx) negatives.push_back(pool_docs[i]);
      TrainConfig tc;
      tc.steps = s.value("steps", std::size_t{300});
      tc.batch_size = s.value("batch_size", std::size_t{32});
      tc.learning_rate = s.value("learning_rate", 0.5);
      tc.weight_decay = s.value("weight_decay", 1e-4);
      tc.seed = derive_seed(seed, "classifier-train");
      const auto scored = classifier_scores(pool_docs, negatives, target_docs(in.targets), f, tc);
      ClassifierConfig cc;
      cc.alpha = s.value("alpha", cc.alpha);
      cc.max_rounds = s.value("max_rounds", cc.max_rounds);
      const Eigen::VectorXd scores = scored.scores;
      pm.select = [=](std::size_t k, std::size_t r) {
        ClassifierConfig c = cc;
        c.k_cap = k;
        auto sel = lomax_accept(scores, c, derive_seed(seed, r));
        sel.target = target_name;
        return sel;
      };
    } else if (mc.name == "semdedup") {
      const std::size_t clusters = s.value("n_clusters", std::size_t{10});
      const TinySoftmaxLm proxy(proxy_spec);
      const auto samples = pool_samples(in.pool);
      TrainConfig tc = cfg.proxy_train;
      tc.seed = derive_seed(seed, "semdedup-embed");
      const auto params = train(proxy, samples, SubsetMask::full(n), tc);
      Eigen::MatrixXd emb(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(proxy_spec.hidden_dim));
      for (std::size_t i = 0; i < n; ++i) {
        emb.row(static_cast<Eigen::Index>(i)) = proxy.embed(params.theta, in.pool.examples[i].tokens).transpose();
      }
      pm.select = [=](std::size_t k, std::size_t r) {
        auto sel = semdedup_select(emb, clusters, static_cast<double>(k) / static_cast<double>(n),
                                   derive_seed(seed, r));
        sel.k = k;
        return sel;
      };
    }
  } catch (const std::exception& e) {
    pm.error = e.what();
  }
  return pm;
}

struct Cell {
  std::size_t method = 0;
  std::size_t k = 0;
  std::size_t repeat = 0;
  std::string dir;
  std::size_t selected = 0;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t train_tokens = 0;
  std::vector<MetricReport> reports;  // task-major, metric-minor
  std::string error;
};

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const Inputs in = load_inputs(cfg);
  TinyLmSpec proxy_spec = cfg.proxy;
  TinyLmSpec deploy_spec = cfg.deployment;
  if (proxy_spec.vocab_size == 0) proxy_spec.vocab_size = in.pool.vocab_size;
  if (deploy_spec.vocab_size == 0) deploy_spec.vocab_size = in.pool.vocab_size;
  if (proxy_spec.vocab_size != in.pool.vocab_size || deploy_spec.vocab_size != in.pool.vocab_size) {
    throw ConfigError("predictor vocab_size does not match the pool");
  }
  for (auto k : cfg.ks) {
    if (k > in.pool.size()) throw ConfigError("k = " + std::to_string(k) + " exceeds the pool size");
  }
  const TinySoftmaxLm deploy_lm(deploy_spec);
  (void)TinySoftmaxLm(proxy_spec);

  const fs::path out_dir = cfg.output_dir;
  fs::create_directories(out_dir / "cells");
  const std::string pool_hash = pool_digest(in.pool);

  // Selection stages see the pool and the target split only.
  std::vector<PreparedMethod> prepared;
  for (const auto& mc : cfg.methods) {
    std::cerr << "[dsdmkit] preparing " << mc.label << "\n";
    prepared.push_back(prepare_method(mc, in, cfg, proxy_spec, pool_hash));
  }

  std::vector<Cell> cells;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    for (auto k : cfg.ks) {
      for (std::size_t r = 0; r < cfg.methods[m].repeats; ++r) {
        Cell c;
        c.method = m;
        c.k = k;
        c.repeat = r;
        c.dir = cfg.methods[m].label + "_k" + std::to_string(k) + "_r" + std::to_string(r);
        cells.push_back(std::move(c));
      }
    }
  }

  const auto samples = pool_samples(in.pool);
  const std::uint64_t deploy_seed = derive_seed(cfg.seed, "deploy-train");
  parallel_for(cells.size(), [&](std::size_t ci) {
    Cell& c = cells[ci];
    const auto& pm = prepared[c.method];
    const fs::path cell_dir = out_dir / "cells" / c.dir;
    try {
      if (!pm.error.empty()) throw Error(pm.error);
      fs::create_directories(cell_dir);
      const auto sel = pm.select(c.k, c.repeat);
      save_selection(sel, cell_dir / "selection.json");
      c.selected = sel.indices.size();
      c.epochs = deployment_epochs(cfg, c.selected, in.pool.size(), in.pool.chunk_len);
      TrainConfig tc = cfg.deploy_train;
      const std::size_t batch = std::min(tc.batch_size, c.selected);
      tc.steps = std::max<std::size_t>(1, (c.epochs * c.selected + batch - 1) / batch);
      tc.seed = deploy_seed;
      c.steps = tc.steps;
      c.train_tokens = tc.steps * batch * in.pool.chunk_len;
      const auto params = train(deploy_lm, samples, sel.mask(in.pool.size()), tc);
      save_params(params, cell_dir / "deployment.params");
      json metrics = json::array();
      for (const auto& task : in.holdouts) {
        for (auto metric : cfg.metrics) {
          auto report = metric == Metric::ExactMatch ? exact_match_accuracy(deploy_lm, params.theta, task)
                                                     : mean_log_probability(deploy_lm, params.theta, task);
          auto j = metric_report_to_json(report);
          j["task"] = task.name;
          metrics.push_back(j);
          c.reports.push_back(std::move(report));
        }
      }
      io::write_json(cell_dir / "metrics.json", metrics);
    } catch (const std::exception& e) {
      c.error = e.what();
      c.reports.clear();
      std::cerr << "[dsdmkit] cell " << c.dir << " failed: " << c.error << "\n";
    }
  });

  ExperimentResult result;
  result.cells = cells.size();
  result.labels = in.labels;
  for (const auto& c : cells) {
    if (!c.error.empty()) ++result.failed_cells;
    std::size_t idx = 0;
    for (const auto& task : in.holdouts) {
      for (auto metric : cfg.metrics) {
        ResultRow row;
        row.method = cfg.methods[c.method].label;
        row.k = c.k;
        row.repeat = c.repeat;
        row.task = task.name;
        row.metric = to_string(metric);
        row.selected = c.selected;
        row.train_tokens = c.train_tokens;
        if (c.error.empty()) {
          row.value = c.reports[idx].value;
          row.n = c.reports[idx].n;
        } else {
          row.value = std::nan("");
          row.status = "error";
          row.error = c.error;
        }
        ++idx;
        result.rows.push_back(std::move(row));
      }
    }
  }

  {
    auto csv = io::open_out(out_dir / "results.csv");
    csv << "method,k,repeat,task,metric,value,n,selected,train_tokens,status,error\n";
    for (const auto& r : result.rows) {
      csv << csv_field(r.method) << ',' << r.k << ',' << r.repeat << ',' << csv_field(r.task) << ','
          << r.metric << ',' << (r.status == "ok" ? fmt_double(r.value) : "") << ',' << r.n << ','
          << r.selected << ',' << r.train_tokens << ',' << r.status << ',' << csv_field(r.error)
          << '\n';
    }
  }
  json rows = json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"method", r.method},
                    {"k", r.k},
                    {"repeat", r.repeat},
                    {"task", r.task},
                    {"metric", r.metric},
                    {"value", r.status == "ok" ? json(r.value) : json(nullptr)},
                    {"n", r.n},
                    {"selected", r.selected},
                    {"train_tokens", r.train_tokens},
                    {"status", r.status},
                    {"error", r.error}});
  }
  io::write_json(out_dir / "results.json", json{{"rows", rows}});

  json method_seeds = json::object();
  json audit = json::object();
  for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
    const auto& label = cfg.methods[m].label;
    method_seeds[label] = prepared[m].seed;
    if (!prepared[m].mean) continue;
    const auto& w = prepared[m].mean->weights;
    result.dsdm_weights.emplace_back(label, w);
    io::write_json(out_dir / (label + "_weights.json"),
                   json{{"weights", std::vector<double>(w.data(), w.data() + w.size())},
                        {"n_targets", prepared[m].mean->n_targets},
                        {"task_weights", prepared[m].mean->task_weights}});
    if (!in.labels.empty()) {
      std::map<int, std::pair<double, std::size_t>> acc;
      for (std::size_t i = 0; i < in.labels.size(); ++i) {
        acc[in.labels[i]].first += w[static_cast<Eigen::Index>(i)];
        acc[in.labels[i]].second += 1;
      }
      json means = json::object();
      for (const auto& [lab, sum] : acc) {
        means[lab < 0 ? "noise" : "subpop" + std::to_string(lab)] = sum.first / static_cast<double>(sum.second);
      }
      audit[label] = means;
    }
  }
  json cell_list = json::array();
  for (const auto& c : cells) {
    cell_list.push_back({{"dir", "cells/" + c.dir},
                         {"method", cfg.methods[c.method].label},
                         {"k", c.k},
                         {"repeat", c.repeat},
                         {"selection_seed", derive_seed(prepared[c.method].seed, c.repeat)},
                         {"train_seed", deploy_seed},
                         {"epochs", c.epochs},
                         {"steps", c.steps},
                         {"status", c.error.empty() ? "ok" : "error"},
                         {"error", c.error}});
  }
  const json config = to_json(cfg);
  json manifest{{"config", config},
                {"config_hash", content_hash(config.dump())},
                {"pool_hash", pool_hash},
                {"pool_size", in.pool.size()},
                {"seeds", {{"global", cfg.seed}, {"methods", method_seeds}, {"deploy_train", deploy_seed}}},
                {"proxy", lm_to_json(proxy_spec)},
                {"deployment", lm_to_json(deploy_spec)},
                {"data_flow",
                 {{"selection", {"pool", "targets"}},
                  {"training", {"pool", "selection"}},
                  {"evaluation", {"deployment_params", "holdouts"}}}},
                {"tasks", json::array()},
                {"cells", cell_list},
                {"dsdm_weight_audit", audit}};
  for (std::size_t t = 0; t < in.targets.size(); ++t) {
    manifest["tasks"].push_back({{"target", in.targets[t].name},
                                 {"holdout", in.holdouts[t].name},
                                 {"weight", in.task_weights[t]},
                                 {"target_samples", in.targets[t].samples.size()},
                                 {"holdout_samples", in.holdouts[t].samples.size()}});
  }
  if (cfg.pool_source == "synthetic") {
    manifest["synthetic"] = {{"target_subpopulations", cfg.synthetic.target_subpopulations},
                             {"steps", in.steps},
                             {"labels", in.labels}};
  }
  io::write_json(out_dir / "manifest.json", manifest);
  return result;
}

}  // namespace dsdm
