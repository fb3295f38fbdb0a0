#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsdm/baselines.hpp"
#include "dsdm/corpus.hpp"
#include "dsdm/datamodel.hpp"
#include "dsdm/eval.hpp"
#include "dsdm/harness.hpp"
#include "dsdm/io.hpp"
#include "dsdm/predictors.hpp"
#include "dsdm/selection.hpp"
#include "dsdm/trak.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dsdm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct TrainFlags {
  std::size_t steps = 300;
  std::size_t batch = 32;
  double lr = 0.1;
  double wd = 0.0;
  std::string solver = "sgd";

  void add(CLI::App* app) {
    app->add_option("--steps", steps, "training steps (Newton: max iterations)");
    app->add_option("--batch-size", batch, "SGD batch size");
    app->add_option("--lr", lr, "SGD learning rate");
    app->add_option("--weight-decay", wd, "l2 coefficient");
    app->add_option("--solver", solver, "sgd or newton")->check(CLI::IsMember({"sgd", "newton"}));
  }
  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.steps = steps;
    c.batch_size = batch;
    c.learning_rate = lr;
    c.weight_decay = wd;
    c.seed = seed;
    c.solver = solver == "newton" ? Solver::Newton : Solver::Sgd;
    return c;
  }
};

PredictorSpec read_predictor(const std::string& path, const CandidatePool* pool) {
  json j;
  try {
    j = io::read_json(path);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  if (pool != nullptr && j.value("type", "") == "tiny_lm" && !j.contains("vocab_size")) {
    j["vocab_size"] = pool->vocab_size;
  }
  return predictor_spec_from_json(j);
}

// {"x": [...], "label": +1|-1, "bias": optional} per line.
std::vector<Sample> load_feature_samples(const std::string& path) {
  std::vector<Sample> out;
  for (const auto& r : io::read_jsonl(path)) {
    FeatureSample s;
    try {
      const auto x = r.at("x").get<std::vector<double>>();
      s.x = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
      s.label = r.at("label").get<int>();
      s.bias = r.value("bias", 0.0);
    } catch (const json::exception& e) {
      throw Error(path + ": malformed feature record: " + e.what());
    }
    if (s.label != 1 && s.label != -1) throw Error(path + ": labels must be +1 or -1");
    out.emplace_back(std::move(s));
  }
  if (out.empty()) throw Error(path + ": no samples");
  return out;
}

std::vector<Doc> pool_docs(const CandidatePool& pool) {
  std::vector<Doc> docs;
  for (const auto& e : pool.examples) docs.push_back(e.tokens);
  return docs;
}

std::vector<Doc> task_docs(const TargetTask& task) {
  std::vector<Doc> docs;
  for (const auto& s : task.samples) {
    Doc d = s.context;
    d.insert(d.end(), s.continuation.begin(), s.continuation.end());
    docs.push_back(std::move(d));
  }
  return docs;
}

void emit(const json& doc, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << doc.dump(2) << "\n";
  } else {
    io::write_json(out, doc);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dsdmkit: dataset selection with datamodels"};
  app.require_subcommand(1);
  int status = 0;

  // pool ------------------------------------------------------------------
  auto* pool_cmd = app.add_subcommand("pool", "build candidate pools")->require_subcommand(1);

  std::string docs_path, pool_out;
  std::size_t chunk_len = 0, vocab = 0;
  Token eot = 0;
  auto* pool_build = pool_cmd->add_subcommand("build", "chunk token documents into a pool");
  pool_build->add_option("--docs", docs_path, "JSONL of {\"tokens\": [...]}")->required();
  pool_build->add_option("--chunk-len", chunk_len)->required();
  pool_build->add_option("--eot", eot, "end-of-text token id")->required();
  pool_build->add_option("--vocab", vocab, "vocabulary size (0: infer)");
  pool_build->add_option("--out", pool_out)->required();
  pool_build->callback([&] {
    std::vector<std::vector<Token>> docs;
    for (const auto& r : io::read_jsonl(docs_path)) docs.push_back(r.at("tokens").get<std::vector<Token>>());
    const auto chunked = tokenize_and_chunk(docs, chunk_len, eot, vocab);
    for (const auto& w : chunked.warnings) std::cerr << "warning: " << w << "\n";
    save_pool(chunked.pool, pool_out);
    std::cout << json{{"examples", chunked.pool.size()}, {"dropped_tokens", chunked.dropped_tokens}}.dump()
              << "\n";
  });

  std::string synth_spec, synth_out;
  std::vector<std::string> synth_sets;
  auto* pool_synth = pool_cmd->add_subcommand("synth", "generate a planted-subpopulation pool");
  pool_synth->add_option("--spec", synth_spec, "JSON synthetic pool spec");
  pool_synth->add_option("--set", synth_sets, "override field=value");
  pool_synth->add_option("--out-dir", synth_out)->required();
  pool_synth->callback([&] {
    json j = synth_spec.empty() ? json::object() : io::read_json(synth_spec);
    for (const auto& s : synth_sets) apply_override(j, s);
    const auto syn = make_synthetic_pool(synthetic_spec_from_json(j));
    fs::create_directories(synth_out);
    save_pool(syn.pool, fs::path(synth_out) / "pool.jsonl");
    for (std::size_t t = 0; t < syn.targets.size(); ++t) {
      save_task(syn.targets[t], fs::path(synth_out) / (syn.targets[t].name + ".jsonl"));
      save_task(syn.holdouts[t], fs::path(synth_out) / (syn.holdouts[t].name + ".jsonl"));
    }
    io::write_json(fs::path(synth_out) / "labels.json", json{{"labels", syn.labels}, {"steps", syn.steps}});
    std::cout << json{{"examples", syn.pool.size()}, {"tasks", syn.targets.size()}}.dump() << "\n";
  });

  // datamodel -------------------------------------------------------------
  auto* dm_cmd = app.add_subcommand("datamodel", "estimate datamodels")->require_subcommand(1);

  std::string dm_pool, dm_task, dm_predictor, dm_out, dm_records;
  std::size_t dm_masks = 200, dm_seeds = 1;
  double dm_fraction = 0.5, dm_ridge = 1e-6;
  std::uint64_t dm_seed = 0;
  TrainFlags dm_train;
  auto* dm_regress = dm_cmd->add_subcommand("regress", "fit linear datamodels from retrained subsets");
  dm_regress->add_option("--pool", dm_pool)->required();
  dm_regress->add_option("--task", dm_task)->required();
  dm_regress->add_option("--predictor", dm_predictor, "JSON predictor spec")->required();
  dm_regress->add_option("--masks", dm_masks);
  dm_regress->add_option("--fraction", dm_fraction);
  dm_regress->add_option("--seeds-per-mask", dm_seeds);
  dm_regress->add_option("--ridge", dm_ridge);
  dm_regress->add_option("--seed", dm_seed);
  dm_regress->add_option("--records", dm_records, "also write the regression records here");
  dm_regress->add_option("--out", dm_out)->required();
  dm_train.add(dm_regress);
  dm_regress->callback([&] {
    const auto pool = load_pool(dm_pool);
    const auto task = load_task(dm_task);
    const auto predictor = make_predictor(read_predictor(dm_predictor, &pool));
    const auto masks = sample_subsets(pool.size(), dm_masks, dm_fraction, dm_seed);
    const auto data = collect_regression_data(*predictor, pool_samples(pool), task_samples(task), masks,
                                              dm_train.config(dm_seed), RecordQuantity::Loss, dm_seeds);
    std::vector<Datamodel> dms;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < data.per_target.size(); ++i) {
      auto dm = fit_linear_datamodel(data.per_target[i], dm_ridge);
      dm.target_id = task.name + "/" + std::to_string(i);
      ids.push_back(dm.target_id);
      dms.push_back(std::move(dm));
    }
    save_datamodels(dms, dm_out);
    if (!dm_records.empty()) save_regression_records(data.per_target, ids, dm_records);
    std::cerr << "trained " << data.trainings << " models\n";
  });

  std::size_t trak_m = 4, trak_d = 512;
  double trak_fraction = 0.38;
  std::optional<double> trak_ridge;
  auto* dm_trak = dm_cmd->add_subcommand("trak", "estimate datamodels with projected gradients");
  dm_trak->add_option("--pool", dm_pool)->required();
  dm_trak->add_option("--task", dm_task)->required();
  dm_trak->add_option("--predictor", dm_predictor, "JSON predictor spec")->required();
  dm_trak->add_option("--m", trak_m, "reference models");
  dm_trak->add_option("--d", trak_d, "projection dimension");
  dm_trak->add_option("--fraction", trak_fraction, "reference subset fraction");
  dm_trak->add_option("--ridge", trak_ridge, "lambda (default: scaled trace)");
  dm_trak->add_option("--seed", dm_seed);
  dm_trak->add_option("--out", dm_out)->required();
  dm_train.add(dm_trak);
  dm_trak->callback([&] {
    const auto pool = load_pool(dm_pool);
    const auto task = load_task(dm_task);
    const auto predictor = make_predictor(read_predictor(dm_predictor, &pool));
    TrakConfig tc;
    tc.m = trak_m;
    tc.d = trak_d;
    tc.subset_fraction = trak_fraction;
    tc.ridge = trak_ridge;
    tc.seed = dm_seed;
    tc.train = dm_train.config(dm_seed);
    const auto samples = pool_samples(pool);
    const auto scorer = fit_trak(*predictor, samples, tc);
    const auto targets = task_samples(task);
    std::vector<Datamodel> dms(targets.size());
    parallel_for(targets.size(), [&](std::size_t i) {
      dms[i] = scorer.datamodel(targets[i], task.name + "/" + std::to_string(i));
    });
    save_datamodels(dms, dm_out);
  });

  std::string inf_data, inf_targets;
  double inf_l2 = 1e-3;
  std::size_t inf_iters = 100;
  auto* dm_inf = dm_cmd->add_subcommand("influence", "leave-one-out datamodels for logistic regression");
  dm_inf->add_option("--data", inf_data, "JSONL of {\"x\", \"label\"} training points")->required();
  dm_inf->add_option("--targets", inf_targets, "JSONL of {\"x\", \"label\"} targets")->required();
  dm_inf->add_option("--l2", inf_l2, "Newton weight decay");
  dm_inf->add_option("--max-iters", inf_iters);
  dm_inf->add_option("--out", dm_out)->required();
  dm_inf->callback([&] {
    const auto data = load_feature_samples(inf_data);
    const auto targets = load_feature_samples(inf_targets);
    const auto dim = static_cast<std::size_t>(std::get<FeatureSample>(data[0]).x.size());
    const LogisticPredictor model(LogisticSpec{dim});
    const Eigen::VectorXd theta = model.solve_newton(data, SubsetMask::full(data.size()), inf_l2, inf_iters);
    std::vector<Datamodel> dms;
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const auto influence = influence_logistic(targets[t], data, theta, inf_l2);
      dms.push_back(loo_datamodel_from_influence(influence, model.output(theta, targets[t]),
                                                 "target/" + std::to_string(t)));
    }
    save_datamodels(dms, dm_out);
  });

  // select ----------------------------------------------------------------
  auto* sel_cmd = app.add_subcommand("select", "select a size-k subset")->require_subcommand(1);
  std::string sel_pool, sel_task, sel_out;
  std::size_t sel_k = 0;
  std::uint64_t sel_seed = 0;

  std::vector<std::string> sel_dms;
  std::vector<double> sel_weights;
  auto* sel_dsdm = sel_cmd->add_subcommand("dsdm", "bottom-k of averaged datamodel weights");
  sel_dsdm->add_option("--datamodels", sel_dms, "one datamodel file per task")->required();
  sel_dsdm->add_option("--task-weights", sel_weights, "mixture weight per datamodel file");
  sel_dsdm->add_option("--k", sel_k)->required();
  sel_dsdm->add_option("--out", sel_out);
  sel_dsdm->callback([&] {
    std::vector<std::vector<Datamodel>> per_task;
    for (const auto& p : sel_dms) per_task.push_back(load_datamodels(p));
    if (sel_weights.empty()) sel_weights.assign(per_task.size(), 1.0);
    if (sel_weights.size() != per_task.size()) throw ConfigError("one task weight per datamodel file");
    const auto mean = average_datamodels(per_task, sel_weights);
    emit(selection_to_json(dsdm_select(mean, sel_k, per_task.size() == 1 ? sel_dms[0] : "mixture")), sel_out);
  });

  std::size_t ng_n = 2, ng_buckets = 4096;
  double dsir_alpha = 0.01;
  auto add_ngram = [&](CLI::App* c) {
    c->add_option("--n-max", ng_n, "largest n-gram order");
    c->add_option("--buckets", ng_buckets, "hash buckets");
  };
  auto* sel_dsir = sel_cmd->add_subcommand("dsir", "importance resampling on hashed n-grams");
  sel_dsir->add_option("--pool", sel_pool)->required();
  sel_dsir->add_option("--task", sel_task)->required();
  sel_dsir->add_option("--k", sel_k)->required();
  sel_dsir->add_option("--seed", sel_seed);
  sel_dsir->add_option("--smoothing", dsir_alpha);
  sel_dsir->add_option("--out", sel_out);
  add_ngram(sel_dsir);
  sel_dsir->callback([&] {
    const auto pool = load_pool(sel_pool);
    const auto task = load_task(sel_task);
    const HashedNgramFeaturizer f{ng_n, ng_buckets, 0};
    auto sel = dsir_select(pool_docs(pool), task_docs(task), sel_k, f, dsir_alpha, sel_seed);
    sel.target = task.name;
    emit(selection_to_json(sel), sel_out);
  });

  double cls_alpha = 12.0;
  std::size_t cls_negatives = 100;
  TrainFlags cls_train;
  cls_train.lr = 0.5;
  auto* sel_cls = sel_cmd->add_subcommand("classifier", "target-vs-pool classifier with Lomax acceptance");
  sel_cls->add_option("--pool", sel_pool)->required();
  sel_cls->add_option("--task", sel_task)->required();
  sel_cls->add_option("--k", sel_k, "acceptance cap (0: single round, no cap)");
  sel_cls->add_option("--seed", sel_seed);
  sel_cls->add_option("--alpha", cls_alpha, "Lomax shape");
  sel_cls->add_option("--negatives", cls_negatives, "pool documents used as negatives");
  sel_cls->add_option("--out", sel_out);
  add_ngram(sel_cls);
  cls_train.add(sel_cls);
  sel_cls->callback([&] {
    const auto pool = load_pool(sel_pool);
    const auto task = load_task(sel_task);
    const auto docs = pool_docs(pool);
    const auto neg = random_select(docs.size(), std::min(cls_negatives, docs.size()),
                                   derive_seed(sel_seed, "classifier-negatives"));
    std::vector<Doc> negatives;
    for (auto i : neg.indices) negatives.push_back(docs[i]);
    ClassifierConfig cc;
    cc.alpha = cls_alpha;
    if (sel_k > 0) cc.k_cap = sel_k;
    cc.train = cls_train.config(0);
    auto sel = classifier_select(docs, negatives, task_docs(task), HashedNgramFeaturizer{ng_n, ng_buckets, 0},
                                 cc, sel_seed);
    sel.target = task.name;
    emit(selection_to_json(sel), sel_out);
  });

  std::string emb_path, emb_predictor;
  std::size_t clusters = 10;
  double keep = 0.0;
  TrainFlags emb_train;
  auto* sel_sem = sel_cmd->add_subcommand("semdedup", "cluster embeddings and drop near-centroid examples");
  sel_sem->add_option("--embeddings", emb_path, "binary embedding matrix");
  sel_sem->add_option("--pool", sel_pool, "pool to embed with a trained --predictor");
  sel_sem->add_option("--predictor", emb_predictor, "tiny_lm spec used for embeddings");
  sel_sem->add_option("--clusters", clusters);
  sel_sem->add_option("--keep-fraction", keep, "fraction kept per cluster");
  sel_sem->add_option("--k", sel_k, "target size; sets keep-fraction to k / n");
  sel_sem->add_option("--seed", sel_seed);
  sel_sem->add_option("--out", sel_out);
  emb_train.add(sel_sem);
  sel_sem->callback([&] {
    Eigen::MatrixXd emb;
    if (!emb_path.empty()) {
      emb = load_embeddings(emb_path);
    } else {
      if (sel_pool.empty() || emb_predictor.empty()) {
        throw ConfigError("semdedup needs --embeddings or --pool with --predictor");
      }
      const auto pool = load_pool(sel_pool);
      const auto spec = read_predictor(emb_predictor, &pool);
      if (!std::holds_alternative<TinyLmSpec>(spec)) throw ConfigError("embeddings need a tiny_lm predictor");
      const TinySoftmaxLm lm(std::get<TinyLmSpec>(spec));
      const auto params = train(lm, pool_samples(pool), SubsetMask::full(pool.size()),
                                emb_train.config(derive_seed(sel_seed, "semdedup-embed")));
      emb.resize(static_cast<Eigen::Index>(pool.size()), static_cast<Eigen::Index>(lm.spec().hidden_dim));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        emb.row(static_cast<Eigen::Index>(i)) = lm.embed(params.theta, pool.examples[i].tokens).transpose();
      }
    }
    double fraction = keep;
    if (sel_k > 0) fraction = static_cast<double>(sel_k) / static_cast<double>(emb.rows());
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("set --k or --keep-fraction in (0, 1]");
    emit(selection_to_json(semdedup_select(emb, clusters, fraction, sel_seed)), sel_out);
  });

  std::size_t rnd_n = 0;
  auto* sel_rnd = sel_cmd->add_subcommand("random", "uniform size-k subset");
  sel_rnd->add_option("--pool", sel_pool, "pool file (or --n)");
  sel_rnd->add_option("--n", rnd_n, "pool size");
  sel_rnd->add_option("--k", sel_k)->required();
  sel_rnd->add_option("--seed", sel_seed);
  sel_rnd->add_option("--out", sel_out);
  sel_rnd->callback([&] {
    const std::size_t n = sel_pool.empty() ? rnd_n : load_pool(sel_pool).size();
    if (n == 0) throw ConfigError("set --pool or --n");
    emit(selection_to_json(random_select(n, sel_k, sel_seed)), sel_out);
  });

  // eval ------------------------------------------------------------------
  std::string ev_pool, ev_task, ev_predictor, ev_params, ev_selection, ev_metric = "mean_log_prob", ev_out;
  bool per_sample = false;
  std::uint64_t ev_seed = 0;
  TrainFlags ev_train;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a language model on a target task");
  eval_cmd->add_option("--task", ev_task, "task JSONL (choice JSONL for multiple_choice)")->required();
  eval_cmd->add_option("--predictor", ev_predictor, "tiny_lm spec")->required();
  eval_cmd->add_option("--params", ev_params, "trained parameters");
  eval_cmd->add_option("--pool", ev_pool, "pool; with --selection trains first");
  eval_cmd->add_option("--selection", ev_selection, "selection JSON to train on");
  eval_cmd->add_option("--metric", ev_metric)
      ->check(CLI::IsMember({"mean_log_prob", "exact_match", "multiple_choice"}));
  eval_cmd->add_option("--seed", ev_seed);
  eval_cmd->add_flag("--per-sample", per_sample, "include per-sample values");
  eval_cmd->add_option("--out", ev_out);
  ev_train.add(eval_cmd);
  eval_cmd->callback([&] {
    std::optional<CandidatePool> pool;
    if (!ev_pool.empty()) pool = load_pool(ev_pool);
    const auto spec = read_predictor(ev_predictor, pool ? &*pool : nullptr);
    if (!std::holds_alternative<TinyLmSpec>(spec)) throw ConfigError("eval needs a tiny_lm predictor");
    const TinySoftmaxLm lm(std::get<TinyLmSpec>(spec));
    Eigen::VectorXd theta;
    if (!ev_params.empty()) {
      theta = load_params(ev_params).theta;
    } else {
      if (!pool || ev_selection.empty()) throw ConfigError("eval needs --params or --pool with --selection");
      const auto sel = load_selection(ev_selection);
      const auto params = train(lm, pool_samples(*pool), sel.mask(pool->size()), ev_train.config(ev_seed));
      theta = params.theta;
    }
    if (static_cast<std::size_t>(theta.size()) != lm.num_params()) {
      throw ConfigError("parameter count does not match the predictor spec");
    }
    MetricReport report;
    const Metric metric = metric_from_string(ev_metric);
    if (metric == Metric::MultipleChoice) {
      report = multiple_choice_accuracy(lm, theta, load_choice_task(ev_task));
    } else if (metric == Metric::ExactMatch) {
      report = exact_match_accuracy(lm, theta, load_task(ev_task));
    } else {
      report = mean_log_probability(lm, theta, load_task(ev_task));
    }
    emit(metric_report_to_json(report, per_sample), ev_out);
  });

  // experiment ------------------------------------------------------------
  auto* exp_cmd = app.add_subcommand("experiment", "end-to-end comparisons")->require_subcommand(1);
  std::string exp_config, exp_outdir;
  std::vector<std::string> exp_sets;
  auto* exp_run = exp_cmd->add_subcommand("run", "run every (method, k) cell of a config");
  exp_run->add_option("--config", exp_config, "ExperimentConfig JSON")->required();
  exp_run->add_option("--set", exp_sets, "override path=value");
  exp_run->add_option("--output-dir", exp_outdir, "overrides output_dir");
  exp_run->callback([&] {
    if (!exp_outdir.empty()) exp_sets.push_back("output_dir=" + json(exp_outdir).dump());
    const auto cfg = load_experiment_config(exp_config, exp_sets);
    const auto result = run_experiment(cfg);
    std::cout << json{{"cells", result.cells}, {"failed", result.failed_cells}, {"output_dir", cfg.output_dir}}.dump()
              << "\n";
    if (result.failed_cells > 0) status = kExitStage;
  });

  // leakage ---------------------------------------------------------------
  auto* leak_cmd = app.add_subcommand("leakage", "train/test overlap")->require_subcommand(1);
  std::string lk_pool, lk_task, lk_mode = "tokens", lk_out;
  auto* leak_check = leak_cmd->add_subcommand("check", "report target samples contained in pool examples");
  leak_check->add_option("--pool", lk_pool)->required();
  leak_check->add_option("--task", lk_task)->required();
  leak_check->add_option("--mode", lk_mode)->check(CLI::IsMember({"text", "tokens"}));
  leak_check->add_option("--out", lk_out);
  leak_check->callback([&] {
    const auto leaks = leakage_check(load_task(lk_task), load_pool(lk_pool),
                                     lk_mode == "text" ? LeakageMode::Text : LeakageMode::Tokens);
    json arr = json::array();
    for (const auto& l : leaks) arr.push_back({{"sample", l.sample_index}, {"example", l.example_id}});
    emit(json{{"leaks", arr}, {"count", leaks.size()}}, lk_out);
  });

  // lds -------------------------------------------------------------------
  std::string lds_dms, lds_records, lds_out;
  std::size_t lds_pool_size = 0;
  auto* lds_cmd = app.add_subcommand("lds", "rank correlation of predicted and realized losses");
  lds_cmd->add_option("--datamodels", lds_dms)->required();
  lds_cmd->add_option("--records", lds_records, "fresh regression records")->required();
  lds_cmd->add_option("--pool-size", lds_pool_size)->required();
  lds_cmd->add_option("--out", lds_out);
  lds_cmd->callback([&] {
    const auto dms = load_datamodels(lds_dms);
    const auto records = load_regression_records(lds_records, lds_pool_size);
    json rows = json::array();
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& dm : dms) {
      const auto it = std::find_if(records.begin(), records.end(),
                                   [&](const auto& r) { return r.first == dm.target_id; });
      if (it == records.end()) throw Error("no records for target '" + dm.target_id + "'");
      const auto report = lds_spearman(dm, it->second);
      auto j = metric_report_to_json(report);
      j["target_id"] = dm.target_id;
      rows.push_back(j);
      total += report.value;
      ++count;
    }
    emit(json{{"targets", rows}, {"mean", count ? total / static_cast<double>(count) : 0.0}}, lds_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitStage;
  }
  return status;
}
