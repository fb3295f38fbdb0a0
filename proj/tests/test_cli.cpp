#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>

#include "dsdm/harness.hpp"
#include "dsdm/io.hpp"
#include "dsdm/selection.hpp"

using namespace dsdm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kDir = fs::temp_directory_path() / "dsdm_test_cli";

int run(const std::string& args) {
  const std::string cmd = std::string(DSDMKIT_CLI) + " " + args + " > " + (kDir / "stdout.txt").string() +
                          " 2> " + (kDir / "stderr.txt").string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string p(const std::string& name) { return (kDir / name).string(); }

}  // namespace

TEST_CASE("pool, datamodel, select, eval, leakage and lds pipeline") {
  fs::remove_all(kDir);
  fs::create_directories(kDir);
  REQUIRE(run("pool synth --out-dir " + p("synth") +
              " --set examples_per_subpopulation=10 --set noise_examples=10 --set target_samples=4"
              " --set holdout_samples=4") == 0);
  CHECK(fs::exists(kDir / "synth" / "pool.jsonl"));
  CHECK(fs::exists(kDir / "synth" / "subpop0.jsonl"));
  CHECK(fs::exists(kDir / "synth" / "subpop0_holdout.jsonl"));

  io::write_json(p("lm.json"), json{{"type", "tiny_lm"}, {"context_len", 2}, {"embed_dim", 4}, {"hidden_dim", 6}});
  const std::string common = " --pool " + p("synth/pool.jsonl") + " --task " + p("synth/subpop0.jsonl");
  REQUIRE(run("datamodel trak" + common + " --predictor " + p("lm.json") +
              " --m 2 --d 32 --steps 40 --lr 0.5 --out " + p("trak.json")) == 0);
  REQUIRE(run("datamodel regress" + common + " --predictor " + p("lm.json") +
              " --masks 12 --steps 20 --lr 0.5 --out " + p("reg.json") + " --records " + p("records.jsonl")) == 0);
  REQUIRE(run("lds --datamodels " + p("reg.json") + " --records " + p("records.jsonl") +
              " --pool-size 30 --out " + p("lds.json")) == 0);
  CHECK(io::read_json(p("lds.json"))["targets"].size() == 4);

  REQUIRE(run("select dsdm --datamodels " + p("trak.json") + " --k 10 --out " + p("sel.json")) == 0);
  const auto sel = load_selection(p("sel.json"));
  CHECK(sel.indices.size() == 10);
  CHECK(sel.method == "dsdm");
  CHECK(run("select dsir" + common + " --k 10 --seed 1 --out " + p("dsir.json")) == 0);
  CHECK(run("select classifier" + common + " --k 10 --seed 1 --steps 50 --out " + p("cls.json")) == 0);
  CHECK(load_selection(p("cls.json")).indices.size() == 10);
  CHECK(run("select semdedup --pool " + p("synth/pool.jsonl") + " --predictor " + p("lm.json") +
            " --clusters 3 --k 15 --steps 20 --out " + p("sem.json")) == 0);
  CHECK(run("select random --n 30 --k 5 --seed 2 --out " + p("rnd.json")) == 0);
  CHECK(load_selection(p("rnd.json")).indices.size() == 5);

  REQUIRE(run("eval --task " + p("synth/subpop0_holdout.jsonl") + " --predictor " + p("lm.json") + " --pool " +
              p("synth/pool.jsonl") + " --selection " + p("sel.json") +
              " --steps 30 --per-sample --out " + p("eval.json")) == 0);
  const auto report = io::read_json(p("eval.json"));
  CHECK(report["metric"] == "mean_log_prob");
  CHECK(report["per_sample"].size() == 4);
  CHECK(report["value"].get<double>() < 0.0);

  REQUIRE(run("leakage check" + common + " --mode tokens --out " + p("leak.json")) == 0);
  CHECK(io::read_json(p("leak.json")).contains("count"));
}

TEST_CASE("influence datamodels from feature files") {
  fs::create_directories(kDir);
  std::vector<json> data;
  for (int i = 0; i < 12; ++i) {
    data.push_back({{"x", {0.1 * i - 0.5, (i % 3) - 1.0}}, {"label", i % 2 ? 1 : -1}});
  }
  io::write_jsonl(p("feat.jsonl"), data);
  io::write_jsonl(p("feat_targets.jsonl"), {json{{"x", {0.3, 0.2}}, {"label", 1}}});
  REQUIRE(run("datamodel influence --data " + p("feat.jsonl") + " --targets " + p("feat_targets.jsonl") +
              " --l2 0.1 --out " + p("inf.json")) == 0);
  const auto dms = io::read_json(p("inf.json"))["datamodels"];
  REQUIRE(dms.size() == 1);
  CHECK(dms[0]["weights"].size() == 12);
  CHECK(dms[0]["estimator"] == "influence");
}

TEST_CASE("exit codes: config error 2, stage failure 3") {
  fs::create_directories(kDir);
  CHECK(run("select random --n 10") == 2);
  CHECK(run("no-such-command") == 2);

  ExperimentConfig cfg;
  cfg.output_dir = p("exp");
  cfg.synthetic.examples_per_subpopulation = 10;
  cfg.synthetic.noise_examples = 10;
  cfg.synthetic.target_samples = 4;
  cfg.synthetic.holdout_samples = 4;
  cfg.methods = {{"random", "random", 1, json::object()}, {"dsdm", "dsdm", 1, json{{"estimator", "bogus"}}}};
  cfg.ks = {10};
  io::write_json(p("exp.json"), to_json(cfg));
  CHECK(run("experiment run --config " + p("exp.json")) == 3);
  CHECK(fs::exists(kDir / "exp" / "results.csv"));
  CHECK(run("experiment run --config " + p("exp.json") + " --set methods.1.settings.estimator=trak"
            " --set methods.1.settings.m=2 --set methods.1.settings.d=32 --set proxy_train.steps=30") == 0);
  CHECK(run("experiment run --config " + p("exp.json") + " --set ks=[]") == 2);
  CHECK(run("experiment run --config " + p("exp.json") + " --set nonsense=1") == 2);
  CHECK(run("experiment run --config " + p("missing.json")) == 2);
}
