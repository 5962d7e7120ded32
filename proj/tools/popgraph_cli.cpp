// Command-line front end: synthetic data generation, graph construction,
// masking previews, pre-training, fine-tuning, transfer, the experiment grid,
// evaluation, embedding export and the gradient checker.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <json.hpp>

#include "popgraph/checkpoint.hpp"
#include "popgraph/dataset.hpp"
#include "popgraph/folds.hpp"
#include "popgraph/gradcheck.hpp"
#include "popgraph/graph.hpp"
#include "popgraph/masking.hpp"
#include "popgraph/model.hpp"
#include "popgraph/synthetic.hpp"
#include "popgraph/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace popgraph;

namespace {

struct GlobalOptions {
  std::uint64_t seed = 1;
  std::string config_path;
  json config;  // loaded file, empty object when absent
};

void ensure_output_dir(const std::string& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw std::runtime_error("output directory '" + dir +
                             "' is not empty; pass --force to reuse it");
  }
  fs::create_directories(dir);
}

json config_section(const GlobalOptions& g, const std::string& name) {
  return g.config.contains(name) ? g.config.at(name) : json::object();
}

// precedence: explicit CLI flag > config file > built-in default
template <typename T>
void overlay(T& value, const json& section, const std::string& key, const CLI::Option* flag) {
  if (flag && flag->count() > 0) return;  // CLI flag wins
  if (section.contains(key)) value = section.at(key).get<T>();
}

ModelConfig resolve_model_config(const GlobalOptions& g) {
  ModelConfig mc;
  const json section = config_section(g, "model");
  if (!section.empty()) {
    mc.graphormer_layers = section.value("graphormer_layers", mc.graphormer_layers);
    mc.d_hidden = section.value("d_hidden", mc.d_hidden);
    mc.c_hidden = section.value("c_hidden", mc.c_hidden);
    mc.sd_hidden = section.value("sd_hidden", mc.sd_hidden);
    mc.sc_hidden = section.value("sc_hidden", mc.sc_hidden);
    mc.heads = section.value("heads", mc.heads);
    mc.temporal_layers = section.value("temporal_layers", mc.temporal_layers);
    mc.ffn_multiplier = section.value("ffn_multiplier", mc.ffn_multiplier);
    mc.dropout = section.value("dropout", mc.dropout);
    if (section.contains("backbone")) {
      mc.backbone = backbone_from_string(section.at("backbone").get<std::string>());
    }
    mc.max_spd = section.value("max_spd", mc.max_spd);
    mc.spatial_locality = section.value("spatial_locality", mc.spatial_locality);
    mc.degree_cap = section.value("degree_cap", mc.degree_cap);
  }
  return mc;
}

void apply_train_section(TrainConfig& cfg, const json& section) {
  cfg.epochs = section.value("epochs", cfg.epochs);
  cfg.eval_every = section.value("eval_every", cfg.eval_every);
  cfg.patience = section.value("patience", cfg.patience);
  cfg.lr = section.value("lr", cfg.lr);
  if (section.contains("lr_end")) {
    cfg.lr_schedule = LrSchedule{cfg.lr, section.at("lr_end").get<double>(),
                                 section.value("lr_steps", std::int64_t{0})};
  }
  cfg.mask.static_ratio = section.value("static_ratio", cfg.mask.static_ratio);
  cfg.mask.ts_feature_ratio = section.value("ts_feature_ratio", cfg.mask.ts_feature_ratio);
  cfg.mask.block_ratio = section.value("block_ratio", cfg.mask.block_ratio);
  cfg.mask.block_hours = section.value("block_hours", cfg.mask.block_hours);
  cfg.mask.patient_ratio = section.value("patient_ratio", cfg.mask.patient_ratio);
}

struct DataArgs {
  std::string dir;

  Dataset load() const {
    Dataset ds = load_dataset((fs::path(dir) / "schema.json").string(),
                              (fs::path(dir) / "records.jsonl").string());
    interpolate_dataset(ds);
    return ds;
  }
};

struct GraphArgs {
  std::size_t k = 5;
  std::size_t subgraph_size = 500;
};

void write_small_manifest(const std::string& outdir, const std::string& phase, const json& extra) {
  json manifest;
  manifest["format"] = "popgraph.manifest/1";
  manifest["phase"] = phase;
  for (const auto& [key, value] : extra.items()) manifest[key] = value;
  manifest["created_at"] = static_cast<std::int64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  std::ofstream out(fs::path(outdir) / "manifest.json");
  out << manifest.dump(2) << '\n';
}

void save_training_history(const std::vector<EpochPoint>& history, std::size_t best_epoch,
                           const json& final_metrics, const std::string& path) {
  json doc;
  doc["format"] = "popgraph.metrics/1";
  json points = json::array();
  for (const auto& p : history) {
    points.push_back({{"epoch", p.epoch}, {"train_loss", p.train_loss},
                      {"val_metric", p.val_metric}});
  }
  doc["history"] = points;
  doc["best_epoch"] = best_epoch;
  doc["final"] = final_metrics;
  std::ofstream out(path);
  out << doc.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked pre-training of graph transformers over patient population graphs"};
  app.require_subcommand(1);

  GlobalOptions global;
  app.add_option("--seed", global.seed, "Global seed; every stage derives from it");
  app.add_option("--config", global.config_path, "JSON config file overriding built-in defaults");

  // ---- synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  SyntheticConfig synth_cfg;
  std::string synth_out;
  std::string synth_preset = "mixed";
  bool synth_force = false;
  synth->add_option("--n", synth_cfg.patients, "Number of patients");
  synth->add_option("--preset", synth_preset, "mixed (longitudinal) or static");
  synth->add_option("--missing-rate", synth_cfg.missing_rate, "Time-series missingness rate");
  synth->add_option("--timesteps", synth_cfg.timesteps, "Series length");
  synth->add_option("--measurements", synth_cfg.measurements, "Continuous ts features");
  synth->add_option("--treatments", synth_cfg.treatments, "Binary treatment features");
  synth->add_flag("--relational", synth_cfg.relational_task,
                  "Add the neighbour-severity label");
  synth->add_option("-o,--out", synth_out, "Output directory")->required();
  synth->add_flag("--force", synth_force, "Allow writing into a non-empty directory");

  // ---- graph build / inspect ----------------------------------------------
  auto* graph_cmd = app.add_subcommand("graph", "Population-graph utilities");
  graph_cmd->require_subcommand(1);
  auto* graph_build = graph_cmd->add_subcommand("build", "Build k-NN sub-graphs");
  DataArgs gb_data;
  GraphArgs gb_args;
  std::string gb_out;
  graph_build->add_option("--data", gb_data.dir, "Dataset directory")->required();
  auto* gb_k = graph_build->add_option("--k", gb_args.k, "Neighbors per node");
  auto* gb_size =
      graph_build->add_option("--subgraph-size", gb_args.subgraph_size, "Patients per sub-graph");
  graph_build->add_option("-o,--out", gb_out, "Graph file")->required();

  auto* graph_inspect = graph_cmd->add_subcommand("inspect", "Summarize a graph file");
  std::string gi_file;
  int gi_index = 0;
  int gi_node = -1;
  graph_inspect->add_option("--graphs", gi_file, "Graph file")->required();
  graph_inspect->add_option("--index", gi_index, "Sub-graph index");
  graph_inspect->add_option("--node", gi_node, "Print one node's row");

  // ---- mask preview ---------------------------------------------------------
  auto* mask_cmd = app.add_subcommand("mask", "Masking utilities");
  mask_cmd->require_subcommand(1);
  auto* mask_preview = mask_cmd->add_subcommand("preview", "Dump a mask plan");
  DataArgs mp_data;
  std::string mp_task = "tfm";
  std::string mp_out;
  MaskSettings mp_settings;
  mask_preview->add_option("--data", mp_data.dir, "Dataset directory")->required();
  mask_preview->add_option("--task", mp_task, "sfm|tfm|bm|tp|pm");
  mask_preview->add_option("--ratio", mp_settings.ts_feature_ratio, "Feature masking ratio");
  mask_preview->add_option("--block-hours", mp_settings.block_hours, "Block length");
  mask_preview->add_option("--patient-ratio", mp_settings.patient_ratio, "Patient masking ratio");
  mask_preview->add_option("-o,--out", mp_out, "Mask plan file")->required();

  // ---- pretrain --------------------------------------------------------------
  auto* pre_cmd = app.add_subcommand("pretrain", "Unsupervised pre-training");
  DataArgs pre_data;
  std::string pre_task = "mt";
  std::string pre_out;
  int pre_fold = 0;
  int pre_folds = 5;
  bool pre_force = false;
  GraphArgs pre_graph;
  std::size_t pre_epochs = 0;
  double pre_lr = 0.0;
  pre_cmd->add_option("--data", pre_data.dir, "Dataset directory")->required();
  pre_cmd->add_option("--task", pre_task, "sfm|tfm|bm|tp|pm|mt");
  pre_cmd->add_option("--fold", pre_fold, "Fold index");
  pre_cmd->add_option("--folds", pre_folds, "Fold count");
  auto* pre_epochs_opt = pre_cmd->add_option("--epochs", pre_epochs, "Epoch budget");
  auto* pre_lr_opt = pre_cmd->add_option("--lr", pre_lr, "Learning rate");
  pre_cmd->add_option("--k", pre_graph.k, "Neighbors per node");
  pre_cmd->add_option("--subgraph-size", pre_graph.subgraph_size, "Patients per sub-graph");
  pre_cmd->add_option("-o,--out", pre_out, "Output directory")->required();
  pre_cmd->add_flag("--force", pre_force, "Allow writing into a non-empty directory");

  // ---- finetune / transfer ----------------------------------------------------
  auto* ft_cmd = app.add_subcommand("finetune", "Supervised training on a task");
  auto* tr_cmd = app.add_subcommand("transfer", "Fine-tune with transferred backbone weights");
  struct FtArgs {
    DataArgs data;
    std::string task = "risk";
    std::string init;
    std::string out;
    int fold = 0;
    int folds = 5;
    double ratio = 1.0;
    bool force = false;
    GraphArgs graph;
    std::size_t epochs = 0;
    double lr = 0.0;
    CLI::Option* epochs_opt = nullptr;
    CLI::Option* lr_opt = nullptr;
  };
  FtArgs ft_args, tr_args;
  for (auto [cmd, args] : {std::pair{ft_cmd, &ft_args}, std::pair{tr_cmd, &tr_args}}) {
    cmd->add_option("--data", args->data.dir, "Dataset directory")->required();
    cmd->add_option("--task", args->task, "Downstream task name");
    auto* init_opt = cmd->add_option("--init", args->init, "Checkpoint to start from");
    if (cmd == tr_cmd) init_opt->required();
    cmd->add_option("--fold", args->fold, "Fold index");
    cmd->add_option("--folds", args->folds, "Fold count");
    cmd->add_option("--ratio", args->ratio, "Label ratio");
    args->epochs_opt = cmd->add_option("--epochs", args->epochs, "Epoch budget");
    args->lr_opt = cmd->add_option("--lr", args->lr, "Learning rate");
    cmd->add_option("--k", args->graph.k, "Neighbors per node");
    cmd->add_option("--subgraph-size", args->graph.subgraph_size, "Patients per sub-graph");
    cmd->add_option("-o,--out", args->out, "Output directory")->required();
    cmd->add_flag("--force", args->force, "Allow writing into a non-empty directory");
  }

  // ---- grid -----------------------------------------------------------------
  auto* grid_cmd = app.add_subcommand("grid", "Label-ratio experiment grid");
  DataArgs grid_data;
  std::string grid_out;
  std::string grid_task = "risk";
  std::vector<std::string> grid_inits = {"scratch", "mt"};
  std::vector<double> grid_ratios = {0.01, 1.0};
  std::vector<std::uint64_t> grid_seeds = {1};
  int grid_folds = 5;
  std::size_t grid_jobs = 1;
  bool grid_force = false;
  GraphArgs grid_graph;
  grid_cmd->add_option("--data", grid_data.dir, "Dataset directory")->required();
  grid_cmd->add_option("--task", grid_task, "Downstream task name");
  grid_cmd->add_option("--inits", grid_inits, "scratch and/or pre-training tasks")
      ->delimiter(',');
  grid_cmd->add_option("--ratios", grid_ratios, "Label ratios")->delimiter(',');
  grid_cmd->add_option("--seeds", grid_seeds, "Run seeds")->delimiter(',');
  grid_cmd->add_option("--folds", grid_folds, "Fold count");
  grid_cmd->add_option("--jobs", grid_jobs, "Parallel workers over grid cells");
  grid_cmd->add_option("--k", grid_graph.k, "Neighbors per node");
  grid_cmd->add_option("--subgraph-size", grid_graph.subgraph_size, "Patients per sub-graph");
  grid_cmd->add_option("-o,--out", grid_out, "Output directory")->required();
  grid_cmd->add_flag("--force", grid_force, "Allow writing into a non-empty directory");

  // ---- eval / export / gradcheck / report -------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a fold's test split");
  DataArgs eval_data;
  std::string eval_ckpt, eval_task = "risk";
  int eval_fold = 0, eval_folds = 5;
  GraphArgs eval_graph;
  eval_cmd->add_option("--data", eval_data.dir, "Dataset directory")->required();
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--task", eval_task, "Task name");
  eval_cmd->add_option("--fold", eval_fold, "Fold index");
  eval_cmd->add_option("--folds", eval_folds, "Fold count");
  eval_cmd->add_option("--k", eval_graph.k, "Neighbors per node");
  eval_cmd->add_option("--subgraph-size", eval_graph.subgraph_size, "Patients per sub-graph");

  auto* export_cmd = app.add_subcommand("export-embeddings", "Write final encoder vectors");
  DataArgs exp_data;
  std::string exp_ckpt, exp_out;
  int exp_fold = 0, exp_folds = 5;
  GraphArgs exp_graph;
  export_cmd->add_option("--data", exp_data.dir, "Dataset directory")->required();
  export_cmd->add_option("--ckpt", exp_ckpt, "Checkpoint file")->required();
  export_cmd->add_option("--fold", exp_fold, "Fold index");
  export_cmd->add_option("--folds", exp_folds, "Fold count");
  export_cmd->add_option("--k", exp_graph.k, "Neighbors per node");
  export_cmd->add_option("--subgraph-size", exp_graph.subgraph_size, "Patients per sub-graph");
  export_cmd->add_option("-o,--out", exp_out, "Embedding file")->required();

  auto* gradcheck_cmd =
      app.add_subcommand("gradcheck", "Finite-difference check of the full model");
  std::size_t gc_nodes = 8;
  std::size_t gc_samples = 150;
  double gc_eps = 1e-3;
  double gc_threshold = 1e-4;
  gradcheck_cmd->add_option("--nodes", gc_nodes, "Graph size");
  gradcheck_cmd->add_option("--samples", gc_samples, "Sampled coordinates");
  gradcheck_cmd->add_option("--eps", gc_eps, "Finite-difference step");
  gradcheck_cmd->add_option("--threshold", gc_threshold, "Failure threshold");

  auto* report_cmd = app.add_subcommand("report", "Render the aggregate table of a grid run");
  std::string report_dir;
  report_cmd->add_option("--run", report_dir, "Grid output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (!global.config_path.empty()) {
      std::ifstream in(global.config_path);
      if (!in) throw std::runtime_error("cannot read config file: " + global.config_path);
      global.config = json::parse(in);
    } else {
      global.config = json::object();
    }

    auto load_graph_args = [&](GraphArgs& args, const CLI::Option* k_flag,
                               const CLI::Option* size_flag) {
      const json section = config_section(global, "graph");
      overlay(args.k, section, "k", k_flag);
      overlay(args.subgraph_size, section, "subgraph_size", size_flag);
    };

    auto resolve_pretrain = [&](PretrainTask task, const CLI::Option* epochs_opt,
                                std::size_t epochs, const CLI::Option* lr_opt, double lr) {
      TrainConfig cfg = default_pretrain_config(task);
      apply_train_section(cfg, config_section(global, "pretrain"));
      if (epochs_opt && epochs_opt->count()) cfg.epochs = epochs;
      if (lr_opt && lr_opt->count()) {
        cfg.lr = lr;
        if (cfg.lr_schedule) cfg.lr_schedule->start_lr = lr;
      }
      cfg.seed = derive_seed(global.seed, "pretrain");
      return cfg;
    };
    auto resolve_finetune = [&](bool from_ckpt, const CLI::Option* epochs_opt, std::size_t epochs,
                                const CLI::Option* lr_opt, double lr) {
      TrainConfig cfg = default_finetune_config(from_ckpt);
      apply_train_section(cfg, config_section(global, "finetune"));
      if (epochs_opt && epochs_opt->count()) cfg.epochs = epochs;
      if (lr_opt && lr_opt->count()) cfg.lr = lr;
      cfg.seed = derive_seed(global.seed, "finetune");
      return cfg;
    };

    if (*synth) {
      if (synth_preset == "static") {
        SyntheticConfig preset = synthetic_static_preset(synth_cfg.patients);
        preset.missing_rate = synth_cfg.missing_rate;
        synth_cfg = preset;
      } else if (synth_preset != "mixed") {
        throw std::runtime_error("unknown preset '" + synth_preset + "' (mixed|static)");
      }
      ensure_output_dir(synth_out, synth_force);
      Dataset ds = generate_synthetic(synth_cfg, derive_seed(global.seed, "synth"));
      save_schema(ds.schema, (fs::path(synth_out) / "schema.json").string());
      save_records(ds.records, ds.schema, (fs::path(synth_out) / "records.jsonl").string());
      write_small_manifest(synth_out, "synth",
                           {{"generator_version", kSyntheticGeneratorVersion},
                            {"patients", synth_cfg.patients},
                            {"preset", synth_preset},
                            {"seed", global.seed}});
      std::cout << "wrote " << ds.records.size() << " records to " << synth_out << "\n";
    } else if (*graph_build) {
      load_graph_args(gb_args, gb_k, gb_size);
      Dataset ds = gb_data.load();
      auto graphs = build_population_graphs(ds, gb_args.k, gb_args.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      save_graphs(graphs, gb_out);
      std::cout << "wrote " << graphs.size() << " sub-graphs to " << gb_out << "\n";
    } else if (*graph_inspect) {
      auto graphs = load_graphs(gi_file);
      if (gi_index < 0 || static_cast<std::size_t>(gi_index) >= graphs.size()) {
        throw std::runtime_error("graph index out of range");
      }
      const PopulationGraph& g = graphs[static_cast<std::size_t>(gi_index)];
      std::cout << "sub-graphs: " << graphs.size() << "\n";
      std::cout << "nodes: " << g.size() << "  edges: " << g.edges.size() << "\n";
      std::size_t min_deg = g.size(), max_deg = 0;
      for (std::size_t d : g.degrees) {
        min_deg = std::min(min_deg, d);
        max_deg = std::max(max_deg, d);
      }
      std::cout << "degree range: [" << min_deg << ", " << max_deg << "]\n";
      if (gi_node >= 0) {
        const std::size_t n = static_cast<std::size_t>(gi_node);
        if (n >= g.size()) throw std::runtime_error("node index out of range");
        std::cout << "node " << n << " (" << g.node_ids[n] << ") neighbors:";
        for (const auto& [nb, w] : g.adjacency[n]) {
          std::cout << " " << nb << "(w=" << w << ")";
        }
        std::cout << "\nspd row:";
        for (std::size_t j = 0; j < g.size(); ++j) std::cout << ' ' << g.spd_at(n, j);
        std::cout << "\n";
      }
    } else if (*mask_preview) {
      Dataset ds = mp_data.load();
      std::vector<const PatientRecord*> nodes;
      for (const auto& r : ds.records) nodes.push_back(&r);
      std::vector<std::size_t> targets(nodes.size());
      for (std::size_t i = 0; i < nodes.size(); ++i) targets[i] = i;
      MaskedBatch batch =
          build_masked_batch(nodes, ds.schema, pretrain_task_from_string(mp_task), mp_settings,
                             targets, derive_seed(global.seed, "mask-preview"));
      save_mask_plan(batch, ds.schema, mp_out);
      std::cout << "wrote mask plan to " << mp_out << "\n";
    } else if (*pre_cmd) {
      ensure_output_dir(pre_out, pre_force);
      load_graph_args(pre_graph, nullptr, nullptr);
      Dataset ds = pre_data.load();
      auto graphs = build_population_graphs(ds, pre_graph.k, pre_graph.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      auto plans = make_folds(ds, "", pre_folds, {1.0}, derive_seed(global.seed, "folds"));
      const PretrainTask task = pretrain_task_from_string(pre_task);
      TrainConfig cfg = resolve_pretrain(task, pre_epochs_opt, pre_epochs, pre_lr_opt, pre_lr);
      RunData run{&ds, &graphs, resolve_model_config(global)};
      write_small_manifest(pre_out, "pretrain",
                           {{"task", pre_task}, {"fold", pre_fold}, {"folds", pre_folds},
                            {"epochs", cfg.epochs}, {"lr", cfg.lr}, {"seed", global.seed}});
      const FoldPlan* plan = nullptr;
      for (const auto& p : plans) {
        if (p.fold == pre_fold) plan = &p;
      }
      if (!plan) throw std::runtime_error("fold index out of range");
      PretrainResult result = pretrain(run, *plan, task, cfg);
      save_checkpoint((fs::path(pre_out) / "checkpoint.ckpt").string(), result.meta,
                      result.params);
      json final_metrics = {{"val_loss", result.best_val_loss},
                           {"rmse", result.val_metrics.rmse},
                           {"treatment_f1", result.val_metrics.treatment_f1},
                           {"margin_accuracy", result.val_metrics.margin_accuracy}};
      save_training_history(result.history, result.best_epoch, final_metrics,
                            (fs::path(pre_out) / "metrics.json").string());
      std::cout << "pretrain " << pre_task << " fold " << pre_fold << ": best val loss "
                << result.best_val_loss << " at epoch " << result.best_epoch << "\n";
    } else if (*ft_cmd || *tr_cmd) {
      FtArgs& args = *ft_cmd ? ft_args : tr_args;
      const bool transfer_mode = static_cast<bool>(*tr_cmd);
      ensure_output_dir(args.out, args.force);
      Dataset ds = args.data.load();
      auto graphs = build_population_graphs(ds, args.graph.k, args.graph.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      auto plans =
          make_folds(ds, args.task, args.folds, {args.ratio}, derive_seed(global.seed, "folds"));
      RunData run{&ds, &graphs, resolve_model_config(global)};
      TrainConfig cfg = resolve_finetune(!args.init.empty(), args.epochs_opt, args.epochs,
                                         args.lr_opt, args.lr);
      write_small_manifest(args.out, transfer_mode ? "transfer" : "finetune",
                           {{"task", args.task}, {"fold", args.fold}, {"ratio", args.ratio},
                            {"init", args.init}, {"epochs", cfg.epochs}, {"lr", cfg.lr},
                            {"seed", global.seed}});
      const FoldPlan* plan = nullptr;
      for (const auto& p : plans) {
        if (p.fold == args.fold) plan = &p;
      }
      if (!plan) throw std::runtime_error("fold index out of range");

      ParamStore encoder;
      const ParamStore* encoder_ptr = nullptr;
      if (!args.init.empty()) {
        auto [meta, ckpt_params] = load_checkpoint(args.init);
        if (transfer_mode) {
          Model target(run.model_config, ds.schema);
          encoder = transfer_init(ckpt_params, target,
                                  derive_seed(global.seed, "transfer-init"));
        } else {
          if (meta.schema_fingerprint != schema_fingerprint(ds.schema)) {
            throw std::runtime_error(
                "checkpoint was pre-trained on a different schema; use the transfer subcommand");
          }
          encoder = std::move(ckpt_params);
        }
        encoder_ptr = &encoder;
      }
      FinetuneResult result = finetune(run, *plan, args.task, cfg, encoder_ptr);
      CheckpointMeta meta;
      meta.model_config = run.model_config;
      meta.phase = transfer_mode ? "transfer" : "finetune";
      meta.task = args.task;
      meta.schema_fingerprint = schema_fingerprint(ds.schema);
      save_checkpoint((fs::path(args.out) / "checkpoint.ckpt").string(), meta, result.params);
      json final_metrics = {{"accuracy", result.test.accuracy},
                           {"macro_f1", result.test.macro_f1}};
      if (result.test.auc) final_metrics["auc"] = *result.test.auc;
      save_training_history(result.history, result.best_epoch, final_metrics,
                            (fs::path(args.out) / "metrics.json").string());
      std::cout << "test accuracy " << result.test.accuracy;
      if (result.test.auc) std::cout << "  auc " << *result.test.auc;
      std::cout << "  macro-f1 " << result.test.macro_f1 << "\n";
    } else if (*grid_cmd) {
      ensure_output_dir(grid_out, grid_force);
      load_graph_args(grid_graph, nullptr, nullptr);
      Dataset ds = grid_data.load();
      auto graphs = build_population_graphs(ds, grid_graph.k, grid_graph.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      auto plans = make_folds(ds, grid_task, grid_folds, grid_ratios,
                              derive_seed(global.seed, "folds"));
      GridConfig gc;
      gc.task = grid_task;
      gc.inits = grid_inits;
      gc.ratios = grid_ratios;
      gc.folds = grid_folds;
      gc.seeds = grid_seeds;
      gc.jobs = grid_jobs;
      gc.pretrain_config = resolve_pretrain(PretrainTask::kMT, nullptr, 0, nullptr, 0.0);
      gc.finetune_config = resolve_finetune(true, nullptr, 0, nullptr, 0.0);
      gc.scratch_lr = config_section(global, "finetune").value("scratch_lr", 0.0);
      gc.low_label_epochs = config_section(global, "finetune").value("low_label_epochs", 0);
      RunData run{&ds, &graphs, resolve_model_config(global)};
      GridResult result = run_experiment_grid(run, plans, gc, grid_out);
      std::size_t failed = 0;
      for (const auto& cell : result.cells) failed += !cell.ok;
      std::cout << render_grid_report(result);
      if (failed) std::cout << failed << " of " << result.cells.size() << " cells failed\n";
    } else if (*eval_cmd) {
      Dataset ds = eval_data.load();
      auto [meta, params] = load_checkpoint(eval_ckpt);
      auto graphs = build_population_graphs(ds, eval_graph.k, eval_graph.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      auto plans =
          make_folds(ds, eval_task, eval_folds, {1.0}, derive_seed(global.seed, "folds"));
      RunData run{&ds, &graphs, meta.model_config};
      const FoldPlan* plan = nullptr;
      for (const auto& p : plans) {
        if (p.fold == eval_fold) plan = &p;
      }
      if (!plan) throw std::runtime_error("fold index out of range");
      EvalMetrics metrics = evaluate_params(run, *plan, eval_task, params);
      std::cout << "accuracy " << metrics.accuracy;
      if (metrics.auc) std::cout << "  auc " << *metrics.auc;
      std::cout << "  macro-f1 " << metrics.macro_f1 << "\n";
      for (const auto& w : metrics.warnings) std::cout << "warning: " << w << "\n";
    } else if (*export_cmd) {
      Dataset ds = exp_data.load();
      auto [meta, params] = load_checkpoint(exp_ckpt);
      auto graphs = build_population_graphs(ds, exp_graph.k, exp_graph.subgraph_size,
                                            derive_seed(global.seed, "graphs"));
      auto plans = make_folds(ds, "", exp_folds, {1.0}, derive_seed(global.seed, "folds"));
      RunData run{&ds, &graphs, meta.model_config};
      const FoldPlan* plan = nullptr;
      for (const auto& p : plans) {
        if (p.fold == exp_fold) plan = &p;
      }
      if (!plan) throw std::runtime_error("fold index out of range");
      export_embeddings(run, *plan, params, exp_out);
      std::cout << "wrote embeddings to " << exp_out << "\n";
    } else if (*gradcheck_cmd) {
      SyntheticConfig cfg;
      cfg.patients = gc_nodes;
      cfg.timesteps = 4;
      cfg.measurements = 2;
      cfg.coded = 1;
      cfg.treatments = 1;
      cfg.missing_rate = 0.2;
      Dataset ds = generate_synthetic(cfg, derive_seed(global.seed, "gradcheck-data"));
      interpolate_dataset(ds);
      auto graphs =
          build_population_graphs(ds, 3, gc_nodes, derive_seed(global.seed, "gradcheck-graph"));
      ModelConfig mc = resolve_model_config(global);
      mc.graphormer_layers = 2;
      mc.dropout = 0.0;
      mc.d_hidden = mc.c_hidden = 8;
      mc.sd_hidden = mc.sc_hidden = 8;
      mc.heads = 2;
      Model model(mc, ds.schema);
      ParamStore params = model.init_params(derive_seed(global.seed, "gradcheck-init"));
      model.add_decoder_head(params, "task.risk", 2, derive_seed(global.seed, "gradcheck-head"));
      GraphContext ctx = build_graph_context(graphs[0], mc);
      std::vector<const PatientRecord*> nodes;
      std::vector<int> targets;
      for (std::size_t idx : graphs[0].dataset_index) {
        nodes.push_back(&ds.records[idx]);
        targets.push_back(ds.records[idx].label("risk"));
      }
      ModelInputs inputs = build_inputs(nodes, ds.schema);
      auto fn = [&](ParamStore& p) {
        Tensor enc = model.encode(inputs, &ctx, p, {});
        return softmax_cross_entropy(model.decode("task.risk", enc, p), targets);
      };
      GradCheckResult result = finite_difference_check(fn, params, gc_eps, gc_samples,
                                                       derive_seed(global.seed, "gradcheck"));
      std::cout << "max relative error " << result.max_rel_error << " (worst "
                << result.worst_param << "[" << result.worst_index << "], " << result.samples
                << " samples)\n";
      if (result.max_rel_error > gc_threshold) {
        std::cerr << "error: gradient check exceeded " << gc_threshold << "\n";
        return 1;
      }
    } else if (*report_cmd) {
      GridResult result =
          load_grid_metrics((fs::path(report_dir) / "metrics.json").string());
      std::cout << render_grid_report(result);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
