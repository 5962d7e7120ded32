#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "popgraph/checkpoint.hpp"
#include "popgraph/synthetic.hpp"
#include "popgraph/train.hpp"

using namespace popgraph;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig mc;
  mc.graphormer_layers = 1;
  mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
  mc.heads = 2;
  mc.temporal_layers = 1;
  mc.dropout = 0.0;
  return mc;
}

struct Workbench {
  Dataset dataset;
  std::vector<PopulationGraph> graphs;
  std::vector<FoldPlan> plans;
  RunData run;

  static Workbench make(std::size_t patients, std::uint64_t seed,
                        const std::vector<double>& ratios = {1.0}, int folds = 3) {
    Workbench w;
    SyntheticConfig cfg;
    cfg.patients = patients;
    cfg.timesteps = 4;
    cfg.measurements = 2;
    cfg.coded = 1;
    cfg.treatments = 1;
    cfg.missing_rate = 0.2;
    w.dataset = generate_synthetic(cfg, seed);
    interpolate_dataset(w.dataset);
    w.graphs = build_population_graphs(w.dataset, 3, patients, seed);
    w.plans = make_folds(w.dataset, "risk", folds, ratios, seed);
    w.run.dataset = &w.dataset;
    w.run.graphs = &w.graphs;
    w.run.model_config = tiny_model_config();
    return w;
  }

  const FoldPlan& plan(int fold, double ratio) const {
    for (const auto& p : plans) {
      if (p.fold == fold && p.label_ratio == ratio) return p;
    }
    throw std::runtime_error("no plan");
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("auc is 1 for perfect ranking and 0.5 for ties") {
  CHECK(*binary_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
  CHECK(*binary_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == doctest::Approx(0.5));
  CHECK(*binary_auc({0.1, 0.9, 0.2, 0.8}, {0, 1, 0, 1}) == doctest::Approx(1.0));
  CHECK(!binary_auc({0.5, 0.4}, {1, 1}).has_value());
}

TEST_CASE("evaluate matches a hand-computed three-class confusion") {
  // rows: predictions via argmax; labels chosen to give a known confusion
  //   true 0: predicted 0, 0        -> class 0: tp=2 fp=1 fn=0
  //   true 1: predicted 1, 0        -> class 1: tp=1 fp=0 fn=1
  //   true 2: predicted 2, 2        -> class 2: tp=2 fp=0 fn=0
  std::vector<double> scores = {
      0.8, 0.1, 0.1,  // -> 0 (true 0)
      0.7, 0.2, 0.1,  // -> 0 (true 0)
      0.2, 0.7, 0.1,  // -> 1 (true 1)
      0.6, 0.3, 0.1,  // -> 0 (true 1)
      0.1, 0.2, 0.7,  // -> 2 (true 2)
      0.2, 0.2, 0.6,  // -> 2 (true 2)
  };
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  TaskSpec task{"toy", 3};
  EvalMetrics m = evaluate(scores, labels, task);
  CHECK(m.accuracy == doctest::Approx(5.0 / 6.0));
  // per-class F1: c0: 2*2/(4+1+0)=0.8; c1: 2*1/(2+0+1)=2/3; c2: 1.0
  CHECK(m.macro_f1 == doctest::Approx((0.8 + 2.0 / 3.0 + 1.0) / 3.0));
  CHECK(m.auc.has_value());
}

TEST_CASE("single-class label sets report no auc with a warning") {
  std::vector<double> scores = {0.9, 0.1, 0.8, 0.2};
  std::vector<int> labels = {0, 0};
  TaskSpec task{"toy", 2};
  EvalMetrics m = evaluate(scores, labels, task);
  CHECK(!m.auc.has_value());
  CHECK(!m.warnings.empty());
}

TEST_CASE("adding correctly-classified samples never lowers accuracy") {
  TaskSpec task{"toy", 2};
  std::vector<double> scores = {0.9, 0.1, 0.3, 0.7};
  std::vector<int> labels = {0, 1};
  EvalMetrics before = evaluate(scores, labels, task);
  for (int extra = 0; extra < 4; ++extra) {
    scores.push_back(0.1);
    scores.push_back(0.9);
    labels.push_back(1);  // correctly classified
    EvalMetrics after = evaluate(scores, labels, task);
    CHECK(after.accuracy >= before.accuracy);
    before = after;
  }
}

TEST_CASE("aggregation uses the population standard deviation") {
  Aggregate agg = aggregate(std::vector<double>{70.0, 72.0, 74.0});
  CHECK(agg.mean == doctest::Approx(72.0));
  CHECK(agg.stddev == doctest::Approx(1.632993).epsilon(1e-5));
  CHECK(agg.count == 3);
}

TEST_CASE("checkpoints round-trip bit-exactly and byte-stably") {
  Workbench w = Workbench::make(12, 5);
  Model model(w.run.model_config, w.dataset.schema);
  ParamStore params = model.init_params(7);
  CheckpointMeta meta;
  meta.model_config = w.run.model_config;
  meta.phase = "pretrain";
  meta.task = "tfm";
  meta.steps = 42;
  meta.schema_fingerprint = schema_fingerprint(w.dataset.schema);

  const std::string a = "/tmp/popgraph_ckpt_a.bin";
  const std::string b = "/tmp/popgraph_ckpt_b.bin";
  save_checkpoint(a, meta, params);
  auto [loaded_meta, loaded_params] = load_checkpoint(a);
  CHECK(loaded_meta.task == "tfm");
  CHECK(loaded_meta.steps == 42);
  CHECK(loaded_meta.schema_fingerprint == meta.schema_fingerprint);
  for (const auto& [name, tensor] : params) {
    REQUIRE(loaded_params.contains(name));
    const auto& other = loaded_params.at(name);
    REQUIRE(other.shape() == tensor.shape());
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      CHECK(other.values()[i] == tensor.values()[i]);  // bit-exact
    }
  }
  save_checkpoint(b, loaded_meta, loaded_params);
  CHECK(read_file(a) == read_file(b));
  std::remove(a.c_str());
  std::remove(b.c_str());
}

TEST_CASE("pretraining never reads labels") {
  Workbench w = Workbench::make(24, 9);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.eval_every = 1;
  cfg.seed = 3;
  PretrainResult base = pretrain(w.run, w.plan(0, 1.0), PretrainTask::kTFM, cfg);

  // permute every label and rerun
  Workbench shuffled = Workbench::make(24, 9);
  for (auto& r : shuffled.dataset.records) {
    for (auto& [task, value] : r.labels) value = (value + 1) % 2;
  }
  PretrainResult permuted = pretrain(shuffled.run, shuffled.plan(0, 1.0), PretrainTask::kTFM, cfg);
  REQUIRE(base.history.size() == permuted.history.size());
  for (std::size_t i = 0; i < base.history.size(); ++i) {
    CHECK(base.history[i].train_loss == permuted.history[i].train_loss);
    CHECK(base.history[i].val_metric == permuted.history[i].val_metric);
  }
}

TEST_CASE("pretraining is deterministic in the seed") {
  Workbench w = Workbench::make(20, 11);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.eval_every = 1;
  cfg.seed = 17;
  PretrainResult a = pretrain(w.run, w.plan(1, 1.0), PretrainTask::kBM, cfg);
  PretrainResult b = pretrain(w.run, w.plan(1, 1.0), PretrainTask::kBM, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
  }
  for (const auto& [name, tensor] : a.params) {
    const auto& other = b.params.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      CHECK(tensor.values()[i] == other.values()[i]);
    }
  }
}

TEST_CASE("static-only cohorts support sfm but not tfm") {
  SyntheticConfig cfg = synthetic_static_preset(24);
  Dataset ds = generate_synthetic(cfg, 13);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 3, 24, 13);
  auto plans = make_folds(ds, "risk", 3, {1.0}, 13);
  RunData run{&ds, &graphs, tiny_model_config()};

  TrainConfig tc;
  tc.epochs = 2;
  tc.eval_every = 1;
  tc.seed = 5;
  CHECK_NOTHROW(pretrain(run, plans[0], PretrainTask::kSFM, tc));
  CHECK_THROWS_AS(pretrain(run, plans[0], PretrainTask::kTFM, tc), std::invalid_argument);
  CHECK_THROWS_AS(pretrain(run, plans[0], PretrainTask::kPM, tc), std::invalid_argument);
}

TEST_CASE("multi-task pretraining updates every head") {
  Workbench w = Workbench::make(20, 15);
  TrainConfig cfg;
  cfg.epochs = 100;  // one graph -> 100 batches
  cfg.eval_every = 50;
  cfg.patience = 1000;
  cfg.seed = 23;
  PretrainResult result = pretrain(w.run, w.plan(0, 1.0), PretrainTask::kMT, cfg);
  REQUIRE(result.head_updates.size() == 4);
  std::size_t total = 0;
  for (std::size_t updates : result.head_updates) {
    CHECK(updates >= 10);
    total += updates;
  }
  CHECK(total == 100);
}

TEST_CASE("finetune initialization copies the encoder and redraws the decoder") {
  Workbench w = Workbench::make(20, 19);
  Model model(w.run.model_config, w.dataset.schema);
  TrainConfig pc;
  pc.epochs = 2;
  pc.eval_every = 1;
  pc.seed = 29;
  PretrainResult pre = pretrain(w.run, w.plan(0, 1.0), PretrainTask::kTFM, pc);

  ParamStore ft = assemble_finetune_params(model, "risk", 2, &pre.params, 31);
  for (const auto& [name, tensor] : ft) {
    if (name.rfind("decoder.", 0) == 0) continue;
    const auto& src = pre.params.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      CHECK(tensor.values()[i] == src.values()[i]);
    }
  }
  // the freshly drawn decoder differs from any pretraining decoder
  CHECK(ft.contains("decoder.task.risk.w"));
  bool any_nonzero = false;
  for (double v : ft.at("decoder.task.risk.w").values()) any_nonzero |= v != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("mismatched schemas are routed to the transfer path") {
  Workbench w = Workbench::make(20, 21);
  TrainConfig pc;
  pc.epochs = 2;
  pc.eval_every = 1;
  pc.seed = 3;
  PretrainResult pre = pretrain(w.run, w.plan(0, 1.0), PretrainTask::kTFM, pc);

  // same widths but one more continuous measurement feature
  SyntheticConfig cfg;
  cfg.patients = 20;
  cfg.timesteps = 4;
  cfg.measurements = 3;
  cfg.coded = 1;
  cfg.treatments = 1;
  Dataset other = generate_synthetic(cfg, 22);
  interpolate_dataset(other);
  Model target(w.run.model_config, other.schema);

  CHECK_THROWS_WITH_AS(
      assemble_finetune_params(target, "risk", 2, &pre.params, 5),
      doctest::Contains("transfer"), std::invalid_argument);

  ParamStore transferred = transfer_init(pre.params, target, 5);
  // backbone parameters byte-equal to the checkpoint
  for (const auto& [name, tensor] : transferred) {
    if (!Model::is_backbone_param(name)) continue;
    const auto& src = pre.params.at(name);
    REQUIRE(src.shape() == tensor.shape());
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      CHECK(tensor.values()[i] == src.values()[i]);
    }
  }
  // the continuous input encoder is reinitialized (different shape entirely)
  CHECK(transferred.at("embed.tc.in.w").shape() !=
        pre.params.at("embed.tc.in.w").shape());

  // identical schemas: transfer equals the checkpoint on backbone parameters
  Model same(w.run.model_config, w.dataset.schema);
  ParamStore same_transfer = transfer_init(pre.params, same, 7);
  for (const auto& [name, tensor] : same_transfer) {
    if (!Model::is_backbone_param(name)) continue;
    const auto& src = pre.params.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      CHECK(tensor.values()[i] == src.values()[i]);
    }
  }
}

TEST_CASE("transfer rejects mismatched backbone widths") {
  Workbench w = Workbench::make(16, 23);
  TrainConfig pc;
  pc.epochs = 1;
  pc.eval_every = 1;
  pc.seed = 3;
  PretrainResult pre = pretrain(w.run, w.plan(0, 1.0), PretrainTask::kTFM, pc);

  ModelConfig wider = w.run.model_config;
  wider.sc_hidden = 16;  // changes the node width
  Model target(wider, w.dataset.schema);
  CHECK_THROWS_WITH_AS(transfer_init(pre.params, target, 5), doctest::Contains("width"),
                       std::invalid_argument);
}

TEST_CASE("finetune ignores labels outside the labeled train set") {
  Workbench w = Workbench::make(24, 25, {1.0}, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.eval_every = 3;  // keep validation out of the compared prefix
  cfg.seed = 41;
  FinetuneResult base = finetune(w.run, w.plan(0, 1.0), "risk", cfg, nullptr);

  Workbench tampered = Workbench::make(24, 25, {1.0}, 3);
  const FoldPlan& plan = tampered.plan(0, 1.0);
  std::set<std::string> labeled(plan.labeled_train_ids.begin(), plan.labeled_train_ids.end());
  for (auto& r : tampered.dataset.records) {
    if (!labeled.count(r.id)) r.labels["risk"] = 1 - r.labels["risk"];
  }
  FinetuneResult flipped = finetune(tampered.run, plan, "risk", cfg, nullptr);
  REQUIRE(base.history.size() == flipped.history.size());
  for (std::size_t i = 0; i < base.history.size(); ++i) {
    CHECK(base.history[i].train_loss == flipped.history[i].train_loss);
  }
}

TEST_CASE("the grid produces one cell per combination and is deterministic") {
  Workbench w = Workbench::make(30, 27, {0.5, 1.0}, 3);
  GridConfig gc;
  gc.task = "risk";
  gc.inits = {"scratch", "tfm"};
  gc.ratios = {0.5, 1.0};
  gc.folds = 3;
  gc.seeds = {7};
  gc.pretrain_config.epochs = 2;
  gc.pretrain_config.eval_every = 1;
  gc.finetune_config.epochs = 2;
  gc.finetune_config.eval_every = 1;
  gc.jobs = 2;

  GridResult a = run_experiment_grid(w.run, w.plans, gc, "");
  CHECK(a.cells.size() == 12);  // 2 inits x 2 ratios x 3 folds
  for (const auto& cell : a.cells) {
    INFO(cell.init << " fold " << cell.fold << ": " << cell.error);
    CHECK(cell.ok);
  }
  GridResult b = run_experiment_grid(w.run, w.plans, gc, "");
  REQUIRE(b.cells.size() == a.cells.size());
  auto key = [](const GridCell& c) {
    return c.init + "/" + std::to_string(c.ratio) + "/" + std::to_string(c.fold);
  };
  std::map<std::string, const GridCell*> index;
  for (const auto& cell : b.cells) index[key(cell)] = &cell;
  for (const auto& cell : a.cells) {
    const GridCell* other = index.at(key(cell));
    CHECK(cell.accuracy == other->accuracy);
    CHECK(cell.auc.value_or(-1) == other->auc.value_or(-1));
    CHECK(cell.macro_f1 == other->macro_f1);
  }
}

TEST_CASE("grid metrics files round-trip and reports render") {
  Workbench w = Workbench::make(24, 29, {1.0}, 2);
  GridConfig gc;
  gc.task = "risk";
  gc.inits = {"scratch"};
  gc.ratios = {1.0};
  gc.folds = 2;
  gc.seeds = {3};
  gc.finetune_config.epochs = 2;
  gc.finetune_config.eval_every = 1;

  const std::string outdir = "/tmp/popgraph_grid_test";
  fs::remove_all(outdir);
  GridResult result = run_experiment_grid(w.run, w.plans, gc, outdir);
  CHECK(fs::exists(fs::path(outdir) / "manifest.json"));
  CHECK(fs::exists(fs::path(outdir) / "metrics.json"));
  CHECK(fs::exists(fs::path(outdir) / "report.txt"));

  GridResult loaded = load_grid_metrics((fs::path(outdir) / "metrics.json").string());
  CHECK(loaded.cells.size() == result.cells.size());
  const std::string report = render_grid_report(loaded);
  CHECK(report.find("scratch") != std::string::npos);
  CHECK(report.find("100%") != std::string::npos);
  fs::remove_all(outdir);
}

TEST_CASE("embedding export writes one line per node") {
  Workbench w = Workbench::make(14, 31, {1.0}, 2);
  Model model(w.run.model_config, w.dataset.schema);
  ParamStore params = model.init_params(3);
  const std::string path = "/tmp/popgraph_embed_test.tsv";
  export_embeddings(w.run, w.plan(0, 1.0), params, path);
  std::ifstream in(path);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    CHECK(line.find('\t') != std::string::npos);
  }
  CHECK(lines == 14);
  std::remove(path.c_str());
}
