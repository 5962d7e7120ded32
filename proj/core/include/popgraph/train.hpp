#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "popgraph/adam.hpp"
#include "popgraph/checkpoint.hpp"
#include "popgraph/dataset.hpp"
#include "popgraph/folds.hpp"
#include "popgraph/graph.hpp"
#include "popgraph/masking.hpp"
#include "popgraph/metrics.hpp"
#include "popgraph/model.hpp"

namespace popgraph {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t eval_every = 2;  // epochs between validation passes
  std::size_t patience = 50;   // epochs without improvement before stopping
  double lr = 1e-3;
  std::optional<LrSchedule> lr_schedule;  // total_steps 0 = span the whole run
  std::uint64_t seed = 0;
  MaskSettings mask;
  std::vector<PretrainTask> mt_pool = {PretrainTask::kTFM, PretrainTask::kBM, PretrainTask::kTP,
                                       PretrainTask::kPM};
  double stop_at_train_accuracy = 0.0;  // > 0: stop once labeled-train accuracy reaches it
};

/// Built-in defaults mirror the reference configuration: polynomial decay
/// 1e-3 -> 1e-4 for the feature/block reconstruction tasks, 5e-4 for
/// treatment/patient/multi-task, 1e-5 for static masking; supervised training
///: 1e-4 from scratch and 1e-5 when starting from a checkpoint.
TrainConfig default_pretrain_config(PretrainTask task);
TrainConfig default_finetune_config(bool from_checkpoint);

/// The dataset is interpolated but unnormalized (graphs are built from these
/// raw features); per-fold normalization happens inside the training loops.
struct RunData {
  const Dataset* dataset = nullptr;
  const std::vector<PopulationGraph>* graphs = nullptr;
  ModelConfig model_config;
};

struct EpochPoint {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;  // loss for pre-training, AUC for fine-tuning
};

struct PretrainResult {
  ParamStore params;  // best validation snapshot
  CheckpointMeta meta;
  std::vector<EpochPoint> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  PretrainMetrics val_metrics;
  std::vector<std::size_t> head_updates;  // per mt_pool entry, MT only
};

/// Unsupervised pre-training on one fold: losses cover the fold's training
/// nodes only, validation masks are drawn once with a fixed seed, and the
/// best epoch is chosen on the validation loss (multi-task: mean over tasks).
PretrainResult pretrain(const RunData& run, const FoldPlan& fold, PretrainTask task,
                        const TrainConfig& config);

struct FinetuneResult {
  ParamStore params;
  std::vector<EpochPoint> history;
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
  double train_accuracy = 0.0;      // over labeled train nodes at the best epoch
  double max_train_accuracy = 0.0;  // best seen at any validation pass
  EvalMetrics test;
};

/// Assembles fine-tuning parameters: fresh everywhere, then encoder entries
/// copied from init when given. Any missing or mismatched encoder entry is an
/// error pointing to the transfer path.
ParamStore assemble_finetune_params(const Model& model, const std::string& task,
                                    std::size_t num_classes, const ParamStore* encoder_init,
                                    std::uint64_t seed);

/// Supervised training on one fold, transductive: every node joins the graph
/// forward pass, the loss covers only the fold's labeled train nodes, model
/// selection uses validation AUC (accuracy when AUC is undefined).
FinetuneResult finetune(const RunData& run, const FoldPlan& fold, const std::string& task,
                        const TrainConfig& config, const ParamStore* encoder_init);

/// Fresh input encoders and decoder; temporal-transformer and backbone
/// parameters copied from the checkpoint. Width mismatches are errors naming
/// both shapes.
ParamStore transfer_init(const ParamStore& checkpoint_params, const Model& target_model,
                         std::uint64_t seed);

/// Test-split metrics of an already-trained parameter set (the checkpoint
/// must hold the "task.<name>" decoder head).
EvalMetrics evaluate_params(const RunData& run, const FoldPlan& fold, const std::string& task,
                            const ParamStore& params);

struct GridConfig {
  std::string task = "risk";
  std::vector<std::string> inits = {"scratch", "mt"};  // "scratch" or a pretrain task
  std::vector<double> ratios = {0.01, 1.0};
  int folds = 5;
  std::vector<std::uint64_t> seeds = {1};
  TrainConfig pretrain_config;
  TrainConfig finetune_config;
  double scratch_lr = 0.0;           // 0 = use finetune_config.lr for scratch cells too
  std::size_t low_label_epochs = 0;  // 0 = no override at the smallest ratios
  std::size_t jobs = 1;
};

struct GridCell {
  std::string init;
  double ratio = 1.0;
  int fold = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double accuracy = 0.0;
  std::optional<double> auc;
  double macro_f1 = 0.0;
  std::size_t best_epoch = 0;
};

struct GridResult {
  GridConfig config;
  std::vector<GridCell> cells;
};

/// Executes {init} x {ratio} x {fold} x {seed}; cells are independent and may
/// run on config.jobs threads. Results are deterministic for a given
/// configuration regardless of scheduling. When outdir is nonempty, writes
/// manifest.json before training, then metrics.json, checkpoints/ and the
/// rendered report.
GridResult run_experiment_grid(const RunData& run, const std::vector<FoldPlan>& plans,
                               const GridConfig& config, const std::string& outdir);

/// Aggregated table (mean +/- std per init and ratio) as delimited text.
std::string render_grid_report(const GridResult& result);

void save_grid_metrics(const GridResult& result, const std::string& path);
GridResult load_grid_metrics(const std::string& path);

/// Final encoder vectors per node: "<id>\t<f0>\t<f1>..." per line.
void export_embeddings(const RunData& run, const FoldPlan& fold, const ParamStore& params,
                       const std::string& path);

}  // namespace popgraph
