#include "popgraph/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "config_json.hpp"
#include "popgraph/rng.hpp"

namespace popgraph {

using nlohmann::json;

TrainConfig default_pretrain_config(PretrainTask task) {
  TrainConfig cfg;
  switch (task) {
    case PretrainTask::kTFM:
    case PretrainTask::kBM:
      cfg.lr = 1e-3;
      cfg.lr_schedule = LrSchedule{1e-3, 1e-4, 0};
      break;
    case PretrainTask::kTP:
    case PretrainTask::kPM:
    case PretrainTask::kMT:
      cfg.lr = 5e-4;
      break;
    case PretrainTask::kSFM:
      cfg.lr = 1e-5;
      break;
  }
  return cfg;
}

TrainConfig default_finetune_config(bool from_checkpoint) {
  TrainConfig cfg;
  cfg.lr = from_checkpoint ? 1e-5 : 1e-4;
  return cfg;
}

namespace {

struct FoldSetup {
  Dataset normalized;
  NormStats stats;
  std::vector<GraphContext> contexts;
  std::vector<std::vector<const PatientRecord*>> graph_nodes;
  std::vector<std::vector<std::size_t>> train_nodes;
  std::vector<std::vector<std::size_t>> val_nodes;
  std::vector<std::vector<std::size_t>> test_nodes;
  std::vector<std::vector<std::size_t>> labeled_nodes;
};

FoldSetup prepare_fold(const RunData& run, const FoldPlan& fold) {
  if (!run.dataset || !run.graphs) throw std::invalid_argument("RunData is incomplete");
  FoldSetup setup;
  setup.stats = compute_norm_stats(*run.dataset, fold.train_ids);
  setup.normalized = normalize_dataset(*run.dataset, setup.stats);

  const std::set<std::string> train(fold.train_ids.begin(), fold.train_ids.end());
  const std::set<std::string> val(fold.val_ids.begin(), fold.val_ids.end());
  const std::set<std::string> test(fold.test_ids.begin(), fold.test_ids.end());
  const std::set<std::string> labeled(fold.labeled_train_ids.begin(),
                                      fold.labeled_train_ids.end());

  for (const PopulationGraph& graph : *run.graphs) {
    setup.contexts.push_back(build_graph_context(graph, run.model_config));
    std::vector<const PatientRecord*> nodes;
    std::vector<std::size_t> train_idx, val_idx, test_idx, labeled_idx;
    for (std::size_t i = 0; i < graph.dataset_index.size(); ++i) {
      const PatientRecord& r = setup.normalized.records[graph.dataset_index[i]];
      nodes.push_back(&r);
      if (train.count(r.id)) train_idx.push_back(i);
      if (val.count(r.id)) val_idx.push_back(i);
      if (test.count(r.id)) test_idx.push_back(i);
      if (labeled.count(r.id)) labeled_idx.push_back(i);
    }
    setup.graph_nodes.push_back(std::move(nodes));
    setup.train_nodes.push_back(std::move(train_idx));
    setup.val_nodes.push_back(std::move(val_idx));
    setup.test_nodes.push_back(std::move(test_idx));
    setup.labeled_nodes.push_back(std::move(labeled_idx));
  }
  return setup;
}

/// Steps only the parameters that received gradients; a multi-task batch
/// updates the sampled task's decoder head and leaves the others untouched.
void optimizer_step(ParamStore& params, AdamState& state) {
  ParamStore present;
  for (auto& [name, tensor] : params) {
    if (tensor.has_grad()) present.insert(name, tensor);  // shares storage
  }
  adam_step(present, state);
}

ParamStore clone_params(const ParamStore& source) {
  ParamStore out;
  for (const auto& [name, tensor] : source) {
    out.insert(name, Tensor::from_values(tensor.shape(),
                                         std::vector<double>(tensor.values().begin(),
                                                             tensor.values().end())));
  }
  return out;
}

void copy_values(const Tensor& from, Tensor& to) {
  std::copy(from.values().begin(), from.values().end(), to.mutable_values().begin());
}

double step_loss(const Model& model, const FoldSetup& setup, std::size_t g,
                 const MaskedBatch& batch, ParamStore& params, const EncodeOptions& options,
                 bool do_backward, AdamState* adam, PretrainMetrics* metrics) {
  std::vector<const PatientRecord*> masked_nodes;
  masked_nodes.reserve(batch.records.size());
  for (const auto& r : batch.records) masked_nodes.push_back(&r);
  ModelInputs inputs = build_inputs(masked_nodes, model.schema(), &batch.keep);
  Tensor enc = model.encode(inputs, &setup.contexts[g], params, options);
  std::map<std::string, Tensor> outs;
  for (const auto& [name, dim] : pretrain_head_dims(batch.task, model.schema())) {
    outs[name] = model.decode(name, enc, params);
  }
  Tensor loss = pretrain_loss(outs, batch, setup.graph_nodes[g], model.schema(), nullptr);
  const double value = loss.item();
  if (metrics) {
    metrics->merge(pretrain_metrics(outs, batch, setup.graph_nodes[g], model.schema()));
  }
  if (do_backward) {
    backward(loss);
    optimizer_step(params, *adam);
  }
  return value;
}

}  // namespace

PretrainResult pretrain(const RunData& run, const FoldPlan& fold, PretrainTask task,
                        const TrainConfig& config) {
  const FeatureSchema& schema = run.dataset->schema;
  if (task == PretrainTask::kMT) {
    if (config.mt_pool.empty()) throw std::invalid_argument("pretrain: empty multi-task pool");
    for (PretrainTask sub : config.mt_pool) check_task_compatible(sub, schema);
  } else {
    check_task_compatible(task, schema);
  }
  Model model(run.model_config, schema);
  FoldSetup setup = prepare_fold(run, fold);
  const std::size_t graphs = setup.graph_nodes.size();

  const std::uint64_t fold_seed =
      derive_seed(config.seed, "pretrain-f" + std::to_string(fold.fold));
  ParamStore params = model.init_params(derive_seed(fold_seed, "init"));
  for (const auto& [name, dim] : pretrain_head_dims(task, schema)) {
    model.add_decoder_head(params, name, dim, derive_seed(fold_seed, "heads"));
  }

  AdamState adam;
  adam.lr = config.lr;
  if (config.lr_schedule) {
    adam.lr_schedule = *config.lr_schedule;
    if (adam.lr_schedule->total_steps == 0) {
      adam.lr_schedule->total_steps = static_cast<std::int64_t>(config.epochs * graphs);
    }
  }

  const std::vector<PretrainTask> val_tasks =
      task == PretrainTask::kMT ? config.mt_pool : std::vector<PretrainTask>{task};

  PretrainResult result;
  result.head_updates.assign(config.mt_pool.size(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::uint64_t batch_counter = 0;
  std::int64_t steps = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double train_loss = 0.0;
    for (std::size_t g = 0; g < graphs; ++g) {
      PretrainTask step_task = task;
      if (task == PretrainTask::kMT) {
        step_task = sample_multitask(config.mt_pool, config.seed, batch_counter);
        for (std::size_t i = 0; i < config.mt_pool.size(); ++i) {
          if (config.mt_pool[i] == step_task) ++result.head_updates[i];
        }
      }
      if (setup.train_nodes[g].empty()) continue;
      MaskedBatch batch = build_masked_batch(
          setup.graph_nodes[g], schema, step_task, config.mask, setup.train_nodes[g],
          derive_seed(fold_seed, "mask-e" + std::to_string(epoch) + "-g" + std::to_string(g)));
      Rng dropout_rng(derive_seed(fold_seed, "dropout-" + std::to_string(batch_counter)));
      EncodeOptions options{true, &dropout_rng};
      train_loss +=
          step_loss(model, setup, g, batch, params, options, true, &adam, nullptr);
      ++steps;
      ++batch_counter;
    }
    train_loss /= static_cast<double>(graphs);

    const bool last = epoch + 1 == config.epochs;
    if (epoch % config.eval_every == 0 || last) {
      double val_loss = 0.0;
      std::size_t val_terms = 0;
      PretrainMetrics metrics;
      for (std::size_t g = 0; g < graphs; ++g) {
        if (setup.val_nodes[g].empty()) continue;
        for (PretrainTask vt : val_tasks) {
          MaskedBatch batch = build_masked_batch(
              setup.graph_nodes[g], schema, vt, config.mask, setup.val_nodes[g],
              derive_seed(fold_seed,
                          "valmask-g" + std::to_string(g) + "-" + pretrain_task_to_string(vt)));
          val_loss += step_loss(model, setup, g, batch, params, {}, false, nullptr, &metrics);
          ++val_terms;
        }
      }
      if (val_terms == 0) throw std::runtime_error("pretrain: no validation nodes in any graph");
      val_loss /= static_cast<double>(val_terms);
      result.history.push_back({epoch, train_loss, val_loss});
      if (val_loss < best) {
        best = val_loss;
        result.best_epoch = epoch;
        result.best_val_loss = val_loss;
        result.val_metrics = metrics;
        result.params = clone_params(params);
        since_best = 0;
      } else {
        since_best += config.eval_every;
        if (since_best >= config.patience) break;
      }
    }
  }

  if (result.params.size() == 0) result.params = clone_params(params);
  result.meta.model_config = run.model_config;
  result.meta.phase = "pretrain";
  result.meta.task = pretrain_task_to_string(task);
  result.meta.steps = steps;
  result.meta.schema_fingerprint = schema_fingerprint(schema);
  return result;
}

ParamStore assemble_finetune_params(const Model& model, const std::string& task,
                                    std::size_t num_classes, const ParamStore* encoder_init,
                                    std::uint64_t seed) {
  ParamStore params = model.init_params(seed);
  model.add_decoder_head(params, "task." + task, num_classes, derive_seed(seed, "task-head"));
  if (encoder_init) {
    for (auto& [name, tensor] : params) {
      if (name.rfind("decoder.", 0) == 0) continue;  // decoder always starts fresh
      if (!encoder_init->contains(name)) {
        throw std::invalid_argument("finetune init: checkpoint lacks encoder parameter '" + name +
                                    "'; use the transfer path for mismatched schemas");
      }
      const Tensor& src = encoder_init->at(name);
      if (src.shape() != tensor.shape()) {
        throw std::invalid_argument("finetune init: '" + name + "' shape " +
                                    shape_str(src.shape()) + " does not match " +
                                    shape_str(tensor.shape()) +
                                    "; use the transfer path for mismatched schemas");
      }
      copy_values(src, tensor);
    }
  }
  return params;
}

FinetuneResult finetune(const RunData& run, const FoldPlan& fold, const std::string& task,
                        const TrainConfig& config, const ParamStore* encoder_init) {
  const FeatureSchema& schema = run.dataset->schema;
  const TaskSpec* spec = schema.find_task(task);
  if (!spec) throw std::invalid_argument("finetune: schema has no task '" + task + "'");
  Model model(run.model_config, schema);
  FoldSetup setup = prepare_fold(run, fold);
  const std::size_t graphs = setup.graph_nodes.size();
  const std::string head = "task." + task;

  const std::uint64_t fold_seed =
      derive_seed(config.seed, "finetune-f" + std::to_string(fold.fold));
  ParamStore params =
      assemble_finetune_params(model, task, static_cast<std::size_t>(spec->num_classes),
                               encoder_init, derive_seed(fold_seed, "init"));

  std::size_t total_labeled = 0;
  for (const auto& nodes : setup.labeled_nodes) total_labeled += nodes.size();
  if (total_labeled == 0) throw std::runtime_error("finetune: no labeled train nodes");

  AdamState adam;
  adam.lr = config.lr;
  if (config.lr_schedule) {
    adam.lr_schedule = *config.lr_schedule;
    if (adam.lr_schedule->total_steps == 0) {
      adam.lr_schedule->total_steps = static_cast<std::int64_t>(config.epochs * graphs);
    }
  }

  // One evaluation pass shared by model selection and the final report.
  auto evaluate_split = [&](ParamStore& p,
                            const std::vector<std::vector<std::size_t>>& split_nodes)
      -> std::pair<EvalMetrics, double> {
    std::vector<double> scores;
    std::vector<int> labels;
    std::size_t labeled_hits = 0, labeled_total = 0;
    for (std::size_t g = 0; g < graphs; ++g) {
      ModelInputs inputs = build_inputs(setup.graph_nodes[g], schema);
      Tensor enc = model.encode(inputs, &setup.contexts[g], p, {});
      Tensor probs = softmax_rows(model.decode(head, enc, p));
      const std::size_t classes = static_cast<std::size_t>(spec->num_classes);
      for (std::size_t idx : split_nodes[g]) {
        const PatientRecord* r = setup.graph_nodes[g][idx];
        if (!r->has_label(task)) continue;
        for (std::size_t c = 0; c < classes; ++c) {
          scores.push_back(probs.values()[idx * classes + c]);
        }
        labels.push_back(r->label(task));
      }
      // labeled-train accuracy rides along for capacity reporting
      for (std::size_t idx : setup.labeled_nodes[g]) {
        const PatientRecord* r = setup.graph_nodes[g][idx];
        std::size_t best_class = 0;
        for (std::size_t c = 1; c < classes; ++c) {
          if (probs.values()[idx * classes + c] > probs.values()[idx * classes + best_class]) {
            best_class = c;
          }
        }
        labeled_hits += static_cast<int>(best_class) == r->label(task);
        ++labeled_total;
      }
    }
    if (labels.empty()) throw std::runtime_error("finetune: no labeled nodes in the split");
    EvalMetrics metrics = evaluate(scores, labels, *spec);
    const double train_acc =
        labeled_total ? static_cast<double>(labeled_hits) / static_cast<double>(labeled_total)
                      : 0.0;
    return {metrics, train_acc};
  };

  FinetuneResult result;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::uint64_t batch_counter = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double train_loss = 0.0;
    std::size_t steps_this_epoch = 0;
    for (std::size_t g = 0; g < graphs; ++g) {
      if (setup.labeled_nodes[g].empty()) continue;
      ModelInputs inputs = build_inputs(setup.graph_nodes[g], schema);
      Rng dropout_rng(derive_seed(fold_seed, "dropout-" + std::to_string(batch_counter)));
      EncodeOptions options{true, &dropout_rng};
      Tensor enc = model.encode(inputs, &setup.contexts[g], params, options);
      Tensor logits = model.decode(head, enc, params);
      std::vector<int> targets(setup.graph_nodes[g].size(), -1);
      for (std::size_t idx : setup.labeled_nodes[g]) {
        targets[idx] = setup.graph_nodes[g][idx]->label(task);
      }
      Tensor loss = softmax_cross_entropy(logits, std::move(targets));
      train_loss += loss.item();
      backward(loss);
      optimizer_step(params, adam);
      ++steps_this_epoch;
      ++batch_counter;
    }
    if (steps_this_epoch) train_loss /= static_cast<double>(steps_this_epoch);

    const bool last = epoch + 1 == config.epochs;
    if (epoch % config.eval_every == 0 || last) {
      auto [val_metrics, train_acc] = evaluate_split(params, setup.val_nodes);
      const double metric = val_metrics.auc.value_or(val_metrics.accuracy);
      result.max_train_accuracy = std::max(result.max_train_accuracy, train_acc);
      result.history.push_back({epoch, train_loss, metric});
      if (metric > best) {
        best = metric;
        result.best_epoch = epoch;
        result.best_val_metric = metric;
        result.train_accuracy = train_acc;
        result.params = clone_params(params);
        since_best = 0;
      } else {
        since_best += config.eval_every;
        if (since_best >= config.patience) break;
      }
      if (config.stop_at_train_accuracy > 0.0 &&
          train_acc >= config.stop_at_train_accuracy) {
        break;
      }
    }
  }

  if (result.params.size() == 0) result.params = clone_params(params);
  auto [test_metrics, train_acc_final] = evaluate_split(result.params, setup.test_nodes);
  result.test = test_metrics;
  result.train_accuracy = std::max(result.train_accuracy, train_acc_final);
  return result;
}

EvalMetrics evaluate_params(const RunData& run, const FoldPlan& fold, const std::string& task,
                            const ParamStore& params) {
  const FeatureSchema& schema = run.dataset->schema;
  const TaskSpec* spec = schema.find_task(task);
  if (!spec) throw std::invalid_argument("evaluate: schema has no task '" + task + "'");
  Model model(run.model_config, schema);
  FoldSetup setup = prepare_fold(run, fold);
  ParamStore working = clone_params(params);
  const std::string head = "task." + task;
  const std::size_t classes = static_cast<std::size_t>(spec->num_classes);

  std::vector<double> scores;
  std::vector<int> labels;
  for (std::size_t g = 0; g < setup.graph_nodes.size(); ++g) {
    ModelInputs inputs = build_inputs(setup.graph_nodes[g], schema);
    Tensor enc = model.encode(inputs, &setup.contexts[g], working, {});
    Tensor probs = softmax_rows(model.decode(head, enc, working));
    for (std::size_t idx : setup.test_nodes[g]) {
      const PatientRecord* r = setup.graph_nodes[g][idx];
      if (!r->has_label(task)) continue;
      for (std::size_t c = 0; c < classes; ++c) {
        scores.push_back(probs.values()[idx * classes + c]);
      }
      labels.push_back(r->label(task));
    }
  }
  if (labels.empty()) throw std::runtime_error("evaluate: no labeled test nodes");
  return evaluate(scores, labels, *spec);
}

ParamStore transfer_init(const ParamStore& checkpoint_params, const Model& target_model,
                         std::uint64_t seed) {
  ParamStore params = target_model.init_params(seed);
  for (auto& [name, tensor] : params) {
    if (!Model::is_backbone_param(name)) continue;
    if (!checkpoint_params.contains(name)) {
      throw std::invalid_argument("transfer_init: checkpoint lacks backbone parameter '" + name +
                                  "' (layer counts must match)");
    }
    const Tensor& src = checkpoint_params.at(name);
    if (src.shape() != tensor.shape()) {
      throw std::invalid_argument("transfer_init: backbone width mismatch at '" + name +
                                  "': checkpoint " + shape_str(src.shape()) + " vs target " +
                                  shape_str(tensor.shape()));
    }
    copy_values(src, tensor);
  }
  // Positional tables carry over when the horizon matches.
  for (const char* name : {"embed.td.pos", "embed.tc.pos"}) {
    if (params.contains(name) && checkpoint_params.contains(name) &&
        params.at(name).shape() == checkpoint_params.at(name).shape()) {
      copy_values(checkpoint_params.at(name), params.at(name));
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

namespace {

const FoldPlan& find_plan(const std::vector<FoldPlan>& plans, int fold, double ratio) {
  for (const auto& p : plans) {
    if (p.fold == fold && std::abs(p.label_ratio - ratio) < 1e-12) return p;
  }
  throw std::invalid_argument("grid: no fold plan for fold " + std::to_string(fold) +
                              " at ratio " + std::to_string(ratio));
}

struct WorkItem {
  std::string init;
  int fold = 0;
  std::uint64_t seed = 0;
};

}  // namespace

GridResult run_experiment_grid(const RunData& run, const std::vector<FoldPlan>& plans,
                               const GridConfig& config, const std::string& outdir) {
  namespace fs = std::filesystem;
  const bool persist = !outdir.empty();
  if (persist) {
    fs::create_directories(fs::path(outdir) / "checkpoints");
    // Manifest goes out before any training starts.
    json manifest;
    manifest["format"] = "popgraph.manifest/1";
    manifest["task"] = config.task;
    manifest["inits"] = config.inits;
    manifest["ratios"] = config.ratios;
    manifest["folds"] = config.folds;
    manifest["seeds"] = config.seeds;
    manifest["jobs"] = config.jobs;
    manifest["model_config"] = model_config_to_json(run.model_config);
    manifest["pretrain"] = {{"epochs", config.pretrain_config.epochs},
                            {"lr", config.pretrain_config.lr},
                            {"patience", config.pretrain_config.patience}};
    manifest["finetune"] = {{"epochs", config.finetune_config.epochs},
                            {"lr", config.finetune_config.lr},
                            {"patience", config.finetune_config.patience}};
    manifest["low_label_epochs"] = config.low_label_epochs;
    manifest["dataset"] = {{"records", run.dataset->records.size()},
                           {"schema_fingerprint", schema_fingerprint(run.dataset->schema)}};
    json graph_sizes = json::array();
    for (const auto& g : *run.graphs) graph_sizes.push_back(g.size());
    manifest["graphs"] = graph_sizes;
    if (!plans.empty()) manifest["fold_warnings"] = plans.front().warnings;
    // Wall-clock provenance lives in its own field so everything else stays
    // byte-comparable across runs.
    manifest["created_at"] = static_cast<std::int64_t>(
        std::chrono::duration_cast<std::chrono::seconds>(
            std::chrono::system_clock::now().time_since_epoch())
            .count());
    std::ofstream out(fs::path(outdir) / "manifest.json");
    out << manifest.dump(2) << '\n';
  }

  std::vector<WorkItem> items;
  for (std::uint64_t seed : config.seeds) {
    for (int fold = 0; fold < config.folds; ++fold) {
      for (const auto& init : config.inits) items.push_back({init, fold, seed});
    }
  }

  std::vector<std::vector<GridCell>> results(items.size());
  std::atomic<std::size_t> next{0};
  std::mutex io_mutex;

  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      const WorkItem& item = items[i];
      std::vector<GridCell>& cells = results[i];

      ParamStore encoder;
      bool have_encoder = false;
      std::string pretrain_error;
      if (item.init != "scratch") {
        try {
          PretrainTask task = pretrain_task_from_string(item.init);
          TrainConfig cfg = config.pretrain_config;
          cfg.seed = derive_seed(item.seed, "grid-" + item.init);
          const FoldPlan& plan = find_plan(plans, item.fold, config.ratios.front());
          PretrainResult pre = pretrain(run, plan, task, cfg);
          encoder = std::move(pre.params);
          have_encoder = true;
          if (persist) {
            std::lock_guard<std::mutex> lock(io_mutex);
            const std::string path = (fs::path(outdir) / "checkpoints" /
                                      ("pretrain_" + item.init + "_s" +
                                       std::to_string(item.seed) + "_f" +
                                       std::to_string(item.fold) + ".ckpt"))
                                         .string();
            save_checkpoint(path, pre.meta, encoder);
          }
        } catch (const std::exception& e) {
          pretrain_error = e.what();
        }
      }

      for (double ratio : config.ratios) {
        GridCell cell;
        cell.init = item.init;
        cell.ratio = ratio;
        cell.fold = item.fold;
        cell.seed = item.seed;
        if (item.init != "scratch" && !have_encoder) {
          cell.error = "pretrain failed: " + pretrain_error;
          cells.push_back(cell);
          continue;
        }
        try {
          const FoldPlan& plan = find_plan(plans, item.fold, ratio);
          TrainConfig cfg = config.finetune_config;
          cfg.seed = derive_seed(item.seed, "grid-ft-" + item.init);
          if (item.init == "scratch" && config.scratch_lr > 0.0) cfg.lr = config.scratch_lr;
          if (config.low_label_epochs > 0 && ratio <= 0.0100001) {
            cfg.epochs = config.low_label_epochs;
          }
          FinetuneResult ft = finetune(run, plan, config.task, cfg,
                                       have_encoder ? &encoder : nullptr);
          cell.ok = true;
          cell.accuracy = ft.test.accuracy;
          cell.auc = ft.test.auc;
          cell.macro_f1 = ft.test.macro_f1;
          cell.best_epoch = ft.best_epoch;
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
        cells.push_back(cell);
      }
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, config.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  GridResult result;
  result.config = config;
  for (auto& cells : results) {
    for (auto& cell : cells) result.cells.push_back(std::move(cell));
  }
  if (persist) {
    save_grid_metrics(result, (fs::path(outdir) / "metrics.json").string());
    std::ofstream report(fs::path(outdir) / "report.txt");
    report << render_grid_report(result);
  }
  return result;
}

namespace {

json cell_to_json(const GridCell& cell) {
  json j;
  j["init"] = cell.init;
  j["ratio"] = cell.ratio;
  j["fold"] = cell.fold;
  j["seed"] = cell.seed;
  j["ok"] = cell.ok;
  if (!cell.ok) j["error"] = cell.error;
  if (cell.ok) {
    j["accuracy"] = cell.accuracy;
    if (cell.auc) j["auc"] = *cell.auc;
    j["macro_f1"] = cell.macro_f1;
    j["best_epoch"] = cell.best_epoch;
  }
  return j;
}

}  // namespace

void save_grid_metrics(const GridResult& result, const std::string& path) {
  json doc;
  doc["format"] = "popgraph.metrics/1";
  doc["task"] = result.config.task;
  json cells = json::array();
  for (const auto& cell : result.cells) cells.push_back(cell_to_json(cell));
  doc["cells"] = cells;

  json aggregates = json::array();
  for (const auto& init : result.config.inits) {
    for (double ratio : result.config.ratios) {
      std::vector<double> accs, aucs, f1s;
      for (const auto& cell : result.cells) {
        if (!cell.ok || cell.init != init || std::abs(cell.ratio - ratio) > 1e-12) continue;
        accs.push_back(cell.accuracy);
        if (cell.auc) aucs.push_back(*cell.auc);
        f1s.push_back(cell.macro_f1);
      }
      if (accs.empty()) continue;
      const Aggregate acc = aggregate(accs);
      const Aggregate f1 = aggregate(f1s);
      json entry;
      entry["init"] = init;
      entry["ratio"] = ratio;
      entry["accuracy"] = {{"mean", acc.mean}, {"std", acc.stddev}, {"n", acc.count}};
      if (!aucs.empty()) {
        const Aggregate auc = aggregate(aucs);
        entry["auc"] = {{"mean", auc.mean}, {"std", auc.stddev}, {"n", auc.count}};
      }
      entry["macro_f1"] = {{"mean", f1.mean}, {"std", f1.stddev}, {"n", f1.count}};
      aggregates.push_back(std::move(entry));
    }
  }
  doc["aggregates"] = aggregates;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metrics: " + path);
  out << doc.dump(2) << '\n';
}

GridResult load_grid_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read metrics: " + path);
  json doc = json::parse(in);
  if (doc.value("format", "") != "popgraph.metrics/1") {
    throw std::invalid_argument("metrics file '" + path + "' has unsupported format");
  }
  GridResult result;
  result.config.task = doc.value("task", "");
  std::set<std::string> inits;
  std::set<double> ratios;
  for (const auto& j : doc.at("cells")) {
    GridCell cell;
    cell.init = j.at("init").get<std::string>();
    cell.ratio = j.at("ratio").get<double>();
    cell.fold = j.at("fold").get<int>();
    cell.seed = j.at("seed").get<std::uint64_t>();
    cell.ok = j.at("ok").get<bool>();
    if (cell.ok) {
      cell.accuracy = j.at("accuracy").get<double>();
      if (j.contains("auc")) cell.auc = j.at("auc").get<double>();
      cell.macro_f1 = j.at("macro_f1").get<double>();
      cell.best_epoch = j.at("best_epoch").get<std::size_t>();
    } else {
      cell.error = j.value("error", "");
    }
    inits.insert(cell.init);
    ratios.insert(cell.ratio);
    result.cells.push_back(std::move(cell));
  }
  result.config.inits.assign(inits.begin(), inits.end());
  result.config.ratios.assign(ratios.begin(), ratios.end());
  return result;
}

std::string render_grid_report(const GridResult& result) {
  std::ostringstream out;
  out << "labels\tmetric";
  for (const auto& init : result.config.inits) out << '\t' << init;
  out << '\n';
  out.setf(std::ios::fixed);
  out.precision(2);
  for (double ratio : result.config.ratios) {
    for (const char* metric : {"acc", "auc", "f1"}) {
      out << static_cast<int>(std::lround(ratio * 100)) << "%\t" << metric;
      for (const auto& init : result.config.inits) {
        std::vector<double> values;
        for (const auto& cell : result.cells) {
          if (!cell.ok || cell.init != init || std::abs(cell.ratio - ratio) > 1e-12) continue;
          if (std::string(metric) == "acc") {
            values.push_back(cell.accuracy * 100.0);
          } else if (std::string(metric) == "auc") {
            if (cell.auc) values.push_back(*cell.auc * 100.0);
          } else {
            values.push_back(cell.macro_f1 * 100.0);
          }
        }
        if (values.empty()) {
          out << "\t-";
        } else {
          const Aggregate agg = aggregate(values);
          out << '\t' << agg.mean << " +- " << agg.stddev;
        }
      }
      out << '\n';
    }
  }
  return out.str();
}

void export_embeddings(const RunData& run, const FoldPlan& fold, const ParamStore& params,
                       const std::string& path) {
  Model model(run.model_config, run.dataset->schema);
  FoldSetup setup = prepare_fold(run, fold);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write embeddings: " + path);
  out.precision(17);
  ParamStore working = clone_params(params);
  for (std::size_t g = 0; g < setup.graph_nodes.size(); ++g) {
    ModelInputs inputs = build_inputs(setup.graph_nodes[g], run.dataset->schema);
    Tensor enc = model.encode(inputs, &setup.contexts[g], working, {});
    const std::size_t width = enc.cols();
    for (std::size_t n = 0; n < setup.graph_nodes[g].size(); ++n) {
      out << setup.graph_nodes[g][n]->id;
      for (std::size_t c = 0; c < width; ++c) out << '\t' << enc.values()[n * width + c];
      out << '\n';
    }
  }
}

}  // namespace popgraph
