#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "dsdm/harness.hpp"
#include "dsdm/io.hpp"

using namespace dsdm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dsdm_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

ExperimentConfig small_config(const fs::path& out) {
  ExperimentConfig c;
  c.output_dir = out.string();
  c.synthetic.examples_per_subpopulation = 20;
  c.synthetic.noise_examples = 40;
  c.synthetic.target_samples = 8;
  c.synthetic.holdout_samples = 8;
  c.proxy_train.steps = 150;
  c.proxy_train.batch_size = 16;
  c.proxy_train.learning_rate = 0.5;
  c.deploy_train.batch_size = 16;
  c.deploy_train.learning_rate = 0.5;
  MethodConfig random{"random", "random", 1, json::object()};
  MethodConfig dsdm{"dsdm", "dsdm", 1, json{{"m", 2}, {"d", 64}}};
  c.methods = {random, dsdm};
  c.ks = {20};
  return c;
}

}  // namespace

TEST_CASE("synthetic pool sizes, labels and templates") {
  SyntheticPoolSpec spec;
  const auto syn = make_synthetic_pool(spec);
  CHECK(syn.pool.size() == 200);
  syn.pool.validate();
  std::map<int, std::size_t> counts;
  for (int l : syn.labels) ++counts[l];
  CHECK(counts[0] == 50);
  CHECK(counts[1] == 50);
  CHECK(counts[-1] == 100);
  REQUIRE(syn.steps.size() == 2);
  CHECK(syn.steps[0] != syn.steps[1]);

  // Template transitions dominate inside each subpopulation.
  for (int s = 0; s < 2; ++s) {
    std::size_t follow = 0, total = 0;
    for (std::size_t i = 0; i < syn.pool.size(); ++i) {
      if (syn.labels[i] != s) continue;
      const auto& t = syn.pool.examples[i].tokens;
      for (std::size_t j = 1; j < t.size(); ++j) {
        ++total;
        if (static_cast<std::size_t>(t[j]) == (static_cast<std::size_t>(t[j - 1]) + syn.steps[s]) % 32) ++follow;
      }
    }
    CHECK(static_cast<double>(follow) / static_cast<double>(total) > 0.9);
  }

  REQUIRE(syn.targets.size() == 1);
  CHECK(syn.targets[0].samples.size() == 20);
  CHECK(syn.holdouts[0].samples.size() == 20);
  std::set<std::vector<Token>> target_seqs;
  for (const auto& s : syn.targets[0].samples) {
    CHECK(s.context.size() == 8);
    CHECK(s.continuation.size() == 8);
    auto seq = s.context;
    seq.insert(seq.end(), s.continuation.begin(), s.continuation.end());
    target_seqs.insert(seq);
  }
  for (const auto& s : syn.holdouts[0].samples) {
    auto seq = s.context;
    seq.insert(seq.end(), s.continuation.begin(), s.continuation.end());
    CHECK(target_seqs.count(seq) == 0);
  }
}

TEST_CASE("synthetic pool is seeded") {
  SyntheticPoolSpec spec;
  const auto a = make_synthetic_pool(spec);
  const auto b = make_synthetic_pool(spec);
  for (std::size_t i = 0; i < a.pool.size(); ++i) CHECK(a.pool.examples[i].tokens == b.pool.examples[i].tokens);
  CHECK(a.labels == b.labels);
  spec.seed = 1;
  const auto c = make_synthetic_pool(spec);
  bool differs = false;
  for (std::size_t i = 0; i < a.pool.size(); ++i) differs |= a.pool.examples[i].tokens != c.pool.examples[i].tokens;
  CHECK(differs);
}

TEST_CASE("synthetic spec validation") {
  SyntheticPoolSpec spec;
  spec.examples_per_subpopulation = 0;
  CHECK_THROWS_AS(make_synthetic_pool(spec), ConfigError);
  spec = {};
  spec.target_subpopulations = {2};
  CHECK_THROWS_AS(make_synthetic_pool(spec), ConfigError);
  spec = {};
  spec.context_tokens = spec.chunk_len;
  CHECK_THROWS_AS(make_synthetic_pool(spec), ConfigError);
  CHECK_THROWS_AS(synthetic_spec_from_json(json{{"n_subpops", 3}}), ConfigError);
}

TEST_CASE("overrides reach nested objects and arrays") {
  json doc{{"a", {{"b", 1}}}, {"list", {json{{"x", 1}}, json{{"x", 2}}}}};
  apply_override(doc, "a.b=5");
  CHECK(doc["a"]["b"] == 5);
  apply_override(doc, "list.1.x=3.5");
  CHECK(doc["list"][1]["x"] == 3.5);
  apply_override(doc, "a.c.d=hello");
  CHECK(doc["a"]["c"]["d"] == "hello");
  apply_override(doc, "a.e=[1,2]");
  CHECK(doc["a"]["e"] == json::array({1, 2}));
  CHECK_THROWS_AS(apply_override(doc, "noequals"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "list.z=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "list.5=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "a.b.c=1"), ConfigError);
}

TEST_CASE("experiment config round trip and validation") {
  auto cfg = small_config("x");
  cfg.epochs = 3.0;
  cfg.metrics = {Metric::MeanLogProb, Metric::ExactMatch};
  const auto back = experiment_config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));

  auto j = to_json(cfg);
  j["bogus"] = 1;
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["methods"] = json::array();
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["ks"] = json::array();
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["methods"][0]["name"] = "oracle";
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);
  j = to_json(cfg);
  j["metrics"] = {"spearman_lds"};
  CHECK_THROWS_AS(experiment_config_from_json(j), ConfigError);

  const auto dir = scratch("config");
  fs::create_directories(dir);
  io::write_json(dir / "cfg.json", to_json(cfg));
  const auto loaded = load_experiment_config(dir / "cfg.json", {"ks=[5,10]", "proxy.hidden_dim=4", "epochs=equal_total_tokens"});
  CHECK(loaded.ks == std::vector<std::size_t>{5, 10});
  CHECK(loaded.proxy.hidden_dim == 4);
  CHECK_FALSE(loaded.epochs.has_value());
}

TEST_CASE("equal-total-tokens epochs") {
  ExperimentConfig cfg;
  // Default budget 2 * 200 * 16 = 6400 tokens.
  CHECK(deployment_epochs(cfg, 50, 200, 16) == 8);
  CHECK(deployment_epochs(cfg, 30, 200, 16) == 14);  // ceil(6400 / 480)
  CHECK(deployment_epochs(cfg, 200, 200, 16) == 2);
  cfg.token_budget = 1000;
  CHECK(deployment_epochs(cfg, 50, 200, 16) == 2);  // ceil(1000 / 800)
  cfg.epochs = 2.5;
  CHECK(deployment_epochs(cfg, 50, 200, 16) == 3);
}

TEST_CASE("two methods and one k give two trained models and two rows") {
  const auto out = scratch("two_rows");
  const auto cfg = small_config(out);
  const auto result = run_experiment(cfg);
  CHECK(result.cells == 2);
  CHECK(result.failed_cells == 0);
  REQUIRE(result.rows.size() == 2);
  CHECK(result.rows[0].method == "random");
  CHECK(result.rows[1].method == "dsdm");
  CHECK(result.rows[0].train_tokens == result.rows[1].train_tokens);
  CHECK(fs::exists(out / "cells" / "random_k20_r0" / "deployment.params"));
  CHECK(fs::exists(out / "cells" / "dsdm_k20_r0" / "deployment.params"));

  std::ifstream csv(out / "results.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  CHECK(lines == 3);
  const auto results = io::read_json(out / "results.json");
  CHECK(results["rows"].size() == 2);

  const auto manifest = io::read_json(out / "manifest.json");
  CHECK(manifest["synthetic"]["target_subpopulations"] == json::array({0}));
  CHECK(manifest["synthetic"]["labels"].size() == 80);
  CHECK(manifest["data_flow"]["selection"] == json::array({"pool", "targets"}));
  CHECK(manifest["config_hash"].get<std::string>().size() == 16);
  CHECK(manifest["cells"].size() == 2);

  // The manifest's config regenerates the run.
  const auto again = experiment_config_from_json(manifest["config"]);
  CHECK(to_json(again) == to_json(cfg));
}

TEST_CASE("rerun with identical config is byte-identical") {
  const auto a = scratch("rerun_a");
  const auto b = scratch("rerun_b");
  auto cfg = small_config(a);
  cfg.methods.push_back({"dsir", "dsir", 1, json::object()});
  run_experiment(cfg);
  cfg.output_dir = b.string();
  run_experiment(cfg);
  CHECK(slurp(a / "results.csv") == slurp(b / "results.csv"));
  CHECK(slurp(a / "results.json") == slurp(b / "results.json"));
  CHECK(slurp(a / "cells" / "dsdm_k20_r0" / "selection.json") ==
        slurp(b / "cells" / "dsdm_k20_r0" / "selection.json"));
  CHECK(slurp(a / "cells" / "dsir_k20_r0" / "deployment.params") ==
        slurp(b / "cells" / "dsir_k20_r0" / "deployment.params"));
}

TEST_CASE("stage errors are recorded per cell") {
  const auto out = scratch("errors");
  auto cfg = small_config(out);
  cfg.methods[1].settings = json{{"estimator", "bogus"}};
  const auto result = run_experiment(cfg);
  CHECK(result.failed_cells == 1);
  REQUIRE(result.rows.size() == 2);
  CHECK(result.rows[0].status == "ok");
  CHECK(result.rows[1].status == "error");
  CHECK(result.rows[1].error.find("estimator") != std::string::npos);
  const auto csv = slurp(out / "results.csv");
  CHECK(csv.find("dsdm,20,0,subpop0_holdout,mean_log_prob,,0,0,0,error,") != std::string::npos);
}

TEST_CASE("gradient-store cache gives identical results") {
  const auto cache = scratch("cache");
  const auto a = scratch("cache_a");
  const auto b = scratch("cache_b");
  const auto c = scratch("cache_c");
  auto cfg = small_config(a);
  run_experiment(cfg);
  ::setenv("DSDMKIT_CACHE_DIR", cache.c_str(), 1);
  cfg.output_dir = b.string();
  run_experiment(cfg);
  CHECK(fs::exists(cache));
  CHECK(std::distance(fs::directory_iterator(cache), fs::directory_iterator{}) > 0);
  cfg.output_dir = c.string();
  run_experiment(cfg);
  ::unsetenv("DSDMKIT_CACHE_DIR");
  CHECK(slurp(a / "results.csv") == slurp(b / "results.csv"));
  CHECK(slurp(b / "results.csv") == slurp(c / "results.csv"));
}

TEST_CASE("target-aligned examples get lower mean dsdm weight than noise") {
  const auto out = scratch("audit");
  auto cfg = small_config(out);
  cfg.synthetic = SyntheticPoolSpec{};
  cfg.methods = {{"dsdm", "dsdm", 1, json::object()}};
  cfg.ks = {50};
  const auto result = run_experiment(cfg);
  REQUIRE(result.dsdm_weights.size() == 1);
  const auto& w = result.dsdm_weights[0].second;
  double target = 0.0, noise = 0.0;
  std::size_t nt = 0, nn = 0;
  for (std::size_t i = 0; i < result.labels.size(); ++i) {
    if (result.labels[i] == 0) {
      target += w[static_cast<Eigen::Index>(i)];
      ++nt;
    } else if (result.labels[i] == -1) {
      noise += w[static_cast<Eigen::Index>(i)];
      ++nn;
    }
  }
  CHECK(target / static_cast<double>(nt) < noise / static_cast<double>(nn));
  const auto manifest = io::read_json(out / "manifest.json");
  CHECK(manifest["dsdm_weight_audit"]["dsdm"]["subpop0"].get<double>() <
        manifest["dsdm_weight_audit"]["dsdm"]["noise"].get<double>());
}
