#include "popgraph/masking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace popgraph {

using nlohmann::json;

PretrainTask pretrain_task_from_string(const std::string& name) {
  if (name == "sfm" || name == "SFM") return PretrainTask::kSFM;
  if (name == "tfm" || name == "TFM") return PretrainTask::kTFM;
  if (name == "bm" || name == "BM") return PretrainTask::kBM;
  if (name == "tp" || name == "TP") return PretrainTask::kTP;
  if (name == "pm" || name == "PM") return PretrainTask::kPM;
  if (name == "mt" || name == "MT") return PretrainTask::kMT;
  throw std::invalid_argument("unknown pre-training task '" + name + "'");
}

std::string pretrain_task_to_string(PretrainTask task) {
  switch (task) {
    case PretrainTask::kSFM: return "sfm";
    case PretrainTask::kTFM: return "tfm";
    case PretrainTask::kBM: return "bm";
    case PretrainTask::kTP: return "tp";
    case PretrainTask::kPM: return "pm";
    case PretrainTask::kMT: return "mt";
  }
  return "?";
}

RecordMask RecordMask::all_kept(const FeatureSchema& schema) {
  RecordMask m;
  m.keep_d.assign(schema.d_count(), 1);
  m.keep_c.assign(schema.c_count(), 1);
  m.keep_td.assign(schema.sd_count(), std::vector<std::uint8_t>(schema.max_timesteps, 1));
  m.keep_tc.assign(schema.sc_count(), std::vector<std::uint8_t>(schema.max_timesteps, 1));
  return m;
}

std::size_t RecordMask::masked_count() const {
  std::size_t n = 0;
  for (auto v : keep_d) n += v == 0;
  for (auto v : keep_c) n += v == 0;
  for (const auto& row : keep_td) {
    for (auto v : row) n += v == 0;
  }
  for (const auto& row : keep_tc) {
    for (auto v : row) n += v == 0;
  }
  return n;
}

namespace {

std::size_t rounded_count(double ratio, std::size_t total) {
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
  return std::max<std::size_t>(n, 1);
}

void mask_static_discrete_at(PatientRecord& r, RecordMask& m, const FeatureSchema& schema,
                             std::size_t f) {
  r.d[f] = schema.static_discrete[f].cardinality;  // reserved token row
  m.keep_d[f] = 0;
}

void mask_ts_discrete_at(PatientRecord& r, RecordMask& m, const FeatureSchema& schema,
                         std::size_t f, std::size_t t) {
  r.t_d[f][t] = schema.ts_discrete[f].cardinality;
  m.keep_td[f][t] = 0;
}

void mask_ts_continuous_at(PatientRecord& r, RecordMask& m, std::size_t f, std::size_t t) {
  r.t_c[f][t] = 0.0;
  m.keep_tc[f][t] = 0;
}

std::vector<std::string> sfm_pool(const FeatureSchema& schema) {
  if (!schema.sfm_maskable.empty()) return schema.sfm_maskable;
  std::vector<std::string> all;
  for (const auto& f : schema.static_discrete) all.push_back(f.name);
  for (const auto& name : schema.static_continuous) all.push_back(name);
  return all;
}

}  // namespace

std::pair<PatientRecord, RecordMask> mask_static(const PatientRecord& record,
                                                 const FeatureSchema& schema, double ratio,
                                                 Rng& rng) {
  if (ratio <= 0.0 || ratio >= 1.0) {
    throw std::invalid_argument("mask_static: ratio " + std::to_string(ratio) +
                                " outside (0, 1)");
  }
  const std::vector<std::string> pool = sfm_pool(schema);
  if (pool.empty()) throw std::invalid_argument("mask_static: no maskable static features");
  PatientRecord masked = record;
  RecordMask keep = RecordMask::all_kept(schema);
  const std::size_t count = std::min(rounded_count(ratio, pool.size()), pool.size());
  for (std::size_t pick : rng.sample_without_replacement(pool.size(), count)) {
    const std::string& name = pool[pick];
    const int di = schema.static_discrete_index(name);
    if (di >= 0) {
      mask_static_discrete_at(masked, keep, schema, static_cast<std::size_t>(di));
    } else {
      const int ci = schema.static_continuous_index(name);
      masked.c[static_cast<std::size_t>(ci)] = 0.0;
      keep.keep_c[static_cast<std::size_t>(ci)] = 0;
    }
  }
  return {std::move(masked), std::move(keep)};
}

std::pair<PatientRecord, RecordMask> mask_ts_features(const PatientRecord& record,
                                                      const FeatureSchema& schema, double ratio,
                                                      Rng& rng) {
  const std::size_t total = schema.sd_count() + schema.sc_count();
  if (total == 0) throw std::invalid_argument("mask_ts_features: schema has no ts features");
  if (ratio <= 0.0 || ratio > 1.0) {
    throw std::invalid_argument("mask_ts_features: ratio outside (0, 1]");
  }
  PatientRecord masked = record;
  RecordMask keep = RecordMask::all_kept(schema);
  const std::size_t count = std::min(rounded_count(ratio, total), total);
  for (std::size_t pick : rng.sample_without_replacement(total, count)) {
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      if (pick < schema.sd_count()) {
        mask_ts_discrete_at(masked, keep, schema, pick, t);
      } else {
        mask_ts_continuous_at(masked, keep, pick - schema.sd_count(), t);
      }
    }
  }
  return {std::move(masked), std::move(keep)};
}

std::pair<PatientRecord, RecordMask> mask_blocks(const PatientRecord& record,
                                                 const FeatureSchema& schema, double ratio,
                                                 int block_hours, Rng& rng) {
  if (block_hours < 1) throw std::invalid_argument("mask_blocks: block_hours must be >= 1");
  const std::size_t total = schema.sd_count() + schema.sc_count();
  if (total == 0) throw std::invalid_argument("mask_blocks: schema has no ts features");
  if (ratio <= 0.0 || ratio > 1.0) throw std::invalid_argument("mask_blocks: ratio outside (0, 1]");
  const std::size_t tau = schema.max_timesteps;
  const std::size_t block = std::min<std::size_t>(static_cast<std::size_t>(block_hours), tau);
  PatientRecord masked = record;
  RecordMask keep = RecordMask::all_kept(schema);
  const std::size_t count = std::min(rounded_count(ratio, total), total);
  for (std::size_t pick : rng.sample_without_replacement(total, count)) {
    const std::size_t start = rng.index(tau - block + 1);
    for (std::size_t t = start; t < start + block; ++t) {
      if (pick < schema.sd_count()) {
        mask_ts_discrete_at(masked, keep, schema, pick, t);
      } else {
        mask_ts_continuous_at(masked, keep, pick - schema.sd_count(), t);
      }
    }
  }
  return {std::move(masked), std::move(keep)};
}

std::pair<PatientRecord, RecordMask> mask_treatments(const PatientRecord& record,
                                                     const FeatureSchema& schema) {
  const auto treatments = schema.treatment_indices();
  if (treatments.empty()) {
    throw std::invalid_argument("mask_treatments: schema designates no treatment features");
  }
  PatientRecord masked = record;
  RecordMask keep = RecordMask::all_kept(schema);
  for (std::size_t f : treatments) {
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      mask_ts_discrete_at(masked, keep, schema, f, t);
    }
  }
  return {std::move(masked), std::move(keep)};
}

std::pair<PatientRecord, RecordMask> mask_whole_patient(const PatientRecord& record,
                                                        const FeatureSchema& schema) {
  if (!schema.has_ts()) {
    throw std::invalid_argument("mask_whole_patient: schema has no measurement features");
  }
  PatientRecord masked = record;
  RecordMask keep = RecordMask::all_kept(schema);
  for (std::size_t f = 0; f < schema.sd_count(); ++f) {
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      mask_ts_discrete_at(masked, keep, schema, f, t);
    }
  }
  for (std::size_t f = 0; f < schema.sc_count(); ++f) {
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      mask_ts_continuous_at(masked, keep, f, t);
    }
  }
  return {std::move(masked), std::move(keep)};
}

std::vector<std::uint8_t> treatment_labels(const PatientRecord& record,
                                           const FeatureSchema& schema) {
  const auto treatments = schema.treatment_indices();
  if (treatments.empty()) {
    throw std::invalid_argument("treatment_labels: schema designates no treatment features");
  }
  std::vector<std::uint8_t> labels;
  labels.reserve(treatments.size());
  for (std::size_t f : treatments) {
    std::uint8_t active = 0;
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      if (record.observed_d[f][t] && record.t_d[f][t] == 1) {
        active = 1;
        break;
      }
    }
    labels.push_back(active);
  }
  return labels;
}

PretrainTask sample_multitask(const std::vector<PretrainTask>& pool, std::uint64_t seed,
                              std::uint64_t batch_index) {
  if (pool.empty()) throw std::invalid_argument("sample_multitask: empty task pool");
  Rng rng(derive_seed(seed, "mt-batch-" + std::to_string(batch_index)));
  return pool[rng.index(pool.size())];
}

void check_task_compatible(PretrainTask task, const FeatureSchema& schema) {
  switch (task) {
    case PretrainTask::kSFM:
      if (sfm_pool(schema).empty()) {
        throw std::invalid_argument("task sfm: schema has no maskable static features");
      }
      return;
    case PretrainTask::kTFM:
    case PretrainTask::kBM:
    case PretrainTask::kPM:
      if (!schema.has_ts()) {
        throw std::invalid_argument("task " + pretrain_task_to_string(task) +
                                    ": schema has no time-series features");
      }
      return;
    case PretrainTask::kTP:
      if (schema.treatment_indices().empty()) {
        throw std::invalid_argument("task tp: schema designates no treatment features");
      }
      return;
    case PretrainTask::kMT:
      for (PretrainTask sub :
           {PretrainTask::kTFM, PretrainTask::kBM, PretrainTask::kTP, PretrainTask::kPM}) {
        check_task_compatible(sub, schema);
      }
      return;
  }
}

MaskedBatch build_masked_batch(const std::vector<const PatientRecord*>& nodes,
                               const FeatureSchema& schema, PretrainTask task,
                               const MaskSettings& settings,
                               const std::vector<std::size_t>& target_nodes, std::uint64_t seed) {
  if (task == PretrainTask::kMT) {
    throw std::invalid_argument("build_masked_batch: sample a concrete task before masking");
  }
  check_task_compatible(task, schema);
  MaskedBatch batch;
  batch.task = task;
  batch.records.reserve(nodes.size());
  batch.keep.reserve(nodes.size());
  for (const PatientRecord* r : nodes) {
    batch.records.push_back(*r);
    batch.keep.push_back(RecordMask::all_kept(schema));
  }
  batch.is_target.assign(nodes.size(), 0);

  auto node_rng = [&](std::size_t n) {
    return Rng(derive_seed(seed, "mask:" + std::to_string(n)));
  };

  switch (task) {
    case PretrainTask::kSFM:
      for (std::size_t n : target_nodes) {
        Rng rng = node_rng(n);
        auto [masked, keep] = mask_static(*nodes[n], schema, settings.static_ratio, rng);
        batch.records[n] = std::move(masked);
        batch.keep[n] = std::move(keep);
        batch.is_target[n] = 1;
      }
      break;
    case PretrainTask::kTFM:
      for (std::size_t n : target_nodes) {
        Rng rng = node_rng(n);
        auto [masked, keep] = mask_ts_features(*nodes[n], schema, settings.ts_feature_ratio, rng);
        batch.records[n] = std::move(masked);
        batch.keep[n] = std::move(keep);
        batch.is_target[n] = 1;
      }
      break;
    case PretrainTask::kBM:
      for (std::size_t n : target_nodes) {
        Rng rng = node_rng(n);
        auto [masked, keep] =
            mask_blocks(*nodes[n], schema, settings.block_ratio, settings.block_hours, rng);
        batch.records[n] = std::move(masked);
        batch.keep[n] = std::move(keep);
        batch.is_target[n] = 1;
      }
      break;
    case PretrainTask::kTP: {
      // Treatments are hidden everywhere; only target nodes carry labels.
      const std::size_t n_treat = schema.treatment_indices().size();
      batch.treat_label.assign(nodes.size() * n_treat, 0);
      for (std::size_t n = 0; n < nodes.size(); ++n) {
        auto [masked, keep] = mask_treatments(*nodes[n], schema);
        batch.records[n] = std::move(masked);
        batch.keep[n] = std::move(keep);
      }
      for (std::size_t n : target_nodes) {
        batch.is_target[n] = 1;
        const auto labels = treatment_labels(*nodes[n], schema);
        std::copy(labels.begin(), labels.end(), batch.treat_label.begin() + n * n_treat);
      }
      break;
    }
    case PretrainTask::kPM: {
      if (settings.patient_ratio <= 0.0 || settings.patient_ratio >= 1.0) {
        throw std::invalid_argument("mask_patients: patient ratio outside (0, 1)");
      }
      if (target_nodes.empty()) break;
      Rng rng(derive_seed(seed, "pm"));
      const std::size_t count =
          std::min(rounded_count(settings.patient_ratio, target_nodes.size()),
                   target_nodes.size());
      for (std::size_t pick : rng.sample_without_replacement(target_nodes.size(), count)) {
        const std::size_t n = target_nodes[pick];
        auto [masked, keep] = mask_whole_patient(*nodes[n], schema);
        batch.records[n] = std::move(masked);
        batch.keep[n] = std::move(keep);
        batch.is_target[n] = 1;
      }
      break;
    }
    case PretrainTask::kMT:
      break;
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Decoder head layout
// ---------------------------------------------------------------------------

std::size_t ts_discrete_head_dim(const FeatureSchema& schema) {
  std::size_t dim = 0;
  for (const auto& f : schema.ts_discrete) {
    dim += static_cast<std::size_t>(f.cardinality) * schema.max_timesteps;
  }
  return dim;
}

std::size_t ts_discrete_head_offset(const FeatureSchema& schema, std::size_t feature) {
  std::size_t off = 0;
  for (std::size_t f = 0; f < feature; ++f) {
    off += static_cast<std::size_t>(schema.ts_discrete[f].cardinality) * schema.max_timesteps;
  }
  return off;
}

namespace {

std::size_t static_discrete_head_dim(const FeatureSchema& schema) {
  std::size_t dim = 0;
  for (const auto& f : schema.static_discrete) dim += static_cast<std::size_t>(f.cardinality);
  return dim;
}

std::size_t static_discrete_head_offset(const FeatureSchema& schema, std::size_t feature) {
  std::size_t off = 0;
  for (std::size_t f = 0; f < feature; ++f) {
    off += static_cast<std::size_t>(schema.static_discrete[f].cardinality);
  }
  return off;
}

}  // namespace

std::map<std::string, std::size_t> pretrain_head_dims(PretrainTask task,
                                                      const FeatureSchema& schema) {
  std::map<std::string, std::size_t> heads;
  auto add_recon_heads = [&](const std::string& prefix) {
    if (schema.sd_count() > 0) heads[prefix + ".td"] = ts_discrete_head_dim(schema);
    if (schema.sc_count() > 0) {
      heads[prefix + ".tc"] = schema.sc_count() * schema.max_timesteps;
    }
  };
  switch (task) {
    case PretrainTask::kSFM:
      if (schema.d_count() > 0) heads["sfm.sd"] = static_discrete_head_dim(schema);
      if (schema.c_count() > 0) heads["sfm.sc"] = schema.c_count();
      break;
    case PretrainTask::kTFM: add_recon_heads("tfm"); break;
    case PretrainTask::kBM: add_recon_heads("bm"); break;
    case PretrainTask::kPM: add_recon_heads("pm"); break;
    case PretrainTask::kTP: heads["tp.treat"] = schema.treatment_indices().size(); break;
    case PretrainTask::kMT:
      for (PretrainTask sub :
           {PretrainTask::kTFM, PretrainTask::kBM, PretrainTask::kTP, PretrainTask::kPM}) {
        for (const auto& [name, dim] : pretrain_head_dims(sub, schema)) heads[name] = dim;
      }
      break;
  }
  return heads;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

namespace {

const Tensor& head_or_throw(const std::map<std::string, Tensor>& outputs,
                            const std::string& name) {
  auto it = outputs.find(name);
  if (it == outputs.end()) {
    throw std::invalid_argument("pretrain_loss: missing decoder output '" + name + "'");
  }
  return it->second;
}

}  // namespace

Tensor pretrain_loss(const std::map<std::string, Tensor>& head_outputs, const MaskedBatch& batch,
                     const std::vector<const PatientRecord*>& originals,
                     const FeatureSchema& schema, LossReport* report) {
  if (originals.size() != batch.records.size()) {
    throw std::invalid_argument("pretrain_loss: originals do not match the batch");
  }
  const std::size_t n = batch.records.size();
  const std::size_t tau = schema.max_timesteps;
  const std::string prefix = pretrain_task_to_string(batch.task);
  LossReport local;
  std::vector<Tensor> components;

  const bool recon_task = batch.task == PretrainTask::kTFM || batch.task == PretrainTask::kBM ||
                          batch.task == PretrainTask::kPM;
  if (recon_task && schema.sc_count() > 0) {
    const Tensor& head = head_or_throw(head_outputs, prefix + ".tc");
    std::vector<double> target(n * schema.sc_count() * tau, 0.0);
    std::vector<std::uint8_t> valid(target.size(), 0);
    std::size_t count = 0;
    for (std::size_t node = 0; node < n; ++node) {
      if (!batch.is_target[node]) continue;
      for (std::size_t f = 0; f < schema.sc_count(); ++f) {
        for (std::size_t t = 0; t < tau; ++t) {
          if (!batch.keep[node].keep_tc[f][t] && originals[node]->observed_c[f][t]) {
            const std::size_t pos = node * schema.sc_count() * tau + f * tau + t;
            target[pos] = originals[node]->t_c[f][t];
            valid[pos] = 1;
            ++count;
          }
        }
      }
    }
    if (count > 0) {
      Tensor mse = mse_loss(head, std::move(target), std::move(valid));
      local.continuous_mse = mse.item();
      local.continuous_count = count;
      components.push_back(std::move(mse));
    }
  }

  if (recon_task && schema.sd_count() > 0) {
    const Tensor& head = head_or_throw(head_outputs, prefix + ".td");
    std::vector<Tensor> feature_losses;
    std::vector<std::size_t> feature_counts;
    std::size_t total_count = 0;
    for (std::size_t f = 0; f < schema.sd_count(); ++f) {
      const std::size_t card = static_cast<std::size_t>(schema.ts_discrete[f].cardinality);
      std::vector<int> targets(n * tau, -1);
      std::size_t count = 0;
      for (std::size_t node = 0; node < n; ++node) {
        if (!batch.is_target[node]) continue;
        for (std::size_t t = 0; t < tau; ++t) {
          if (!batch.keep[node].keep_td[f][t] && originals[node]->observed_d[f][t]) {
            targets[node * tau + t] = originals[node]->t_d[f][t];
            ++count;
          }
        }
      }
      if (count == 0) continue;
      Tensor slice = slice_cols(head, ts_discrete_head_offset(schema, f), card * tau);
      Tensor rows = reshape(slice, {n * tau, card});
      feature_losses.push_back(softmax_cross_entropy(rows, std::move(targets)));
      feature_counts.push_back(count);
      total_count += count;
    }
    if (total_count > 0) {
      // Per-feature means recombined into one mean over all discrete targets.
      Tensor ce = scale(feature_losses[0], static_cast<double>(feature_counts[0]));
      for (std::size_t i = 1; i < feature_losses.size(); ++i) {
        ce = add(ce, scale(feature_losses[i], static_cast<double>(feature_counts[i])));
      }
      ce = scale(ce, 1.0 / static_cast<double>(total_count));
      local.discrete_ce = ce.item();
      local.discrete_count = total_count;
      components.push_back(std::move(ce));
    }
  }

  if (batch.task == PretrainTask::kTP) {
    const Tensor& head = head_or_throw(head_outputs, "tp.treat");
    const std::size_t n_treat = schema.treatment_indices().size();
    std::vector<double> target(n * n_treat, 0.0);
    std::vector<std::uint8_t> valid(n * n_treat, 0);
    std::size_t count = 0;
    for (std::size_t node = 0; node < n; ++node) {
      if (!batch.is_target[node]) continue;
      for (std::size_t f = 0; f < n_treat; ++f) {
        target[node * n_treat + f] = batch.treat_label[node * n_treat + f];
        valid[node * n_treat + f] = 1;
        ++count;
      }
    }
    if (count > 0) {
      Tensor bce = bce_with_logits(head, std::move(target), std::move(valid));
      local.treatment_bce = bce.item();
      local.treatment_count = count;
      components.push_back(std::move(bce));
    }
  }

  if (batch.task == PretrainTask::kSFM) {
    if (schema.c_count() > 0) {
      const Tensor& head = head_or_throw(head_outputs, "sfm.sc");
      std::vector<double> target(n * schema.c_count(), 0.0);
      std::vector<std::uint8_t> valid(target.size(), 0);
      std::size_t count = 0;
      for (std::size_t node = 0; node < n; ++node) {
        if (!batch.is_target[node]) continue;
        for (std::size_t f = 0; f < schema.c_count(); ++f) {
          if (!batch.keep[node].keep_c[f]) {
            target[node * schema.c_count() + f] = originals[node]->c[f];
            valid[node * schema.c_count() + f] = 1;
            ++count;
          }
        }
      }
      if (count > 0) {
        Tensor mse = mse_loss(head, std::move(target), std::move(valid));
        local.continuous_mse = mse.item();
        local.continuous_count = count;
        components.push_back(std::move(mse));
      }
    }
    if (schema.d_count() > 0) {
      const Tensor& head = head_or_throw(head_outputs, "sfm.sd");
      std::vector<Tensor> feature_losses;
      std::vector<std::size_t> feature_counts;
      std::size_t total_count = 0;
      for (std::size_t f = 0; f < schema.d_count(); ++f) {
        const std::size_t card = static_cast<std::size_t>(schema.static_discrete[f].cardinality);
        std::vector<int> targets(n, -1);
        std::size_t count = 0;
        for (std::size_t node = 0; node < n; ++node) {
          if (batch.is_target[node] && !batch.keep[node].keep_d[f]) {
            targets[node] = originals[node]->d[f];
            ++count;
          }
        }
        if (count == 0) continue;
        Tensor slice = slice_cols(head, static_discrete_head_offset(schema, f), card);
        feature_losses.push_back(softmax_cross_entropy(slice, std::move(targets)));
        feature_counts.push_back(count);
        total_count += count;
      }
      if (total_count > 0) {
        Tensor ce = scale(feature_losses[0], static_cast<double>(feature_counts[0]));
        for (std::size_t i = 1; i < feature_losses.size(); ++i) {
          ce = add(ce, scale(feature_losses[i], static_cast<double>(feature_counts[i])));
        }
        ce = scale(ce, 1.0 / static_cast<double>(total_count));
        local.discrete_ce = ce.item();
        local.discrete_count = total_count;
        components.push_back(std::move(ce));
      }
    }
  }

  if (components.empty()) {
    throw std::runtime_error("pretrain_loss: degenerate batch, no valid targets of any type");
  }
  Tensor total = components[0];
  for (std::size_t i = 1; i < components.size(); ++i) total = add(total, components[i]);
  local.total = total.item();
  if (report) *report = local;
  return total;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

PretrainMetrics pretrain_metrics(const std::map<std::string, Tensor>& head_outputs,
                                 const MaskedBatch& batch,
                                 const std::vector<const PatientRecord*>& originals,
                                 const FeatureSchema& schema) {
  const std::size_t n = batch.records.size();
  const std::size_t tau = schema.max_timesteps;
  const std::string prefix = pretrain_task_to_string(batch.task);
  PretrainMetrics metrics;
  double sq_sum = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t margin_hits = 0, plain_hits = 0;

  const bool recon_task = batch.task == PretrainTask::kTFM || batch.task == PretrainTask::kBM ||
                          batch.task == PretrainTask::kPM;

  if (recon_task && schema.sc_count() > 0 && head_outputs.count(prefix + ".tc")) {
    const Tensor& head = head_outputs.at(prefix + ".tc");
    for (std::size_t node = 0; node < n; ++node) {
      if (!batch.is_target[node]) continue;
      for (std::size_t f = 0; f < schema.sc_count(); ++f) {
        for (std::size_t t = 0; t < tau; ++t) {
          if (!batch.keep[node].keep_tc[f][t] && originals[node]->observed_c[f][t]) {
            const double pred = head.values()[node * schema.sc_count() * tau + f * tau + t];
            const double diff = pred - originals[node]->t_c[f][t];
            sq_sum += diff * diff;
            ++metrics.continuous_count;
          }
        }
      }
    }
  }

  auto classify_discrete = [&](std::size_t feature, std::size_t node, std::size_t t,
                               const Tensor& head) {
    const std::size_t card = static_cast<std::size_t>(schema.ts_discrete[feature].cardinality);
    const std::size_t base = node * ts_discrete_head_dim(schema) +
                             ts_discrete_head_offset(schema, feature) + t * card;
    std::size_t best = 0;
    for (std::size_t c = 1; c < card; ++c) {
      if (head.values()[base + c] > head.values()[base + best]) best = c;
    }
    return static_cast<int>(best);
  };

  if (recon_task && schema.sd_count() > 0 && head_outputs.count(prefix + ".td")) {
    const Tensor& head = head_outputs.at(prefix + ".td");
    for (std::size_t f = 0; f < schema.sd_count(); ++f) {
      const std::string& name = schema.ts_discrete[f].name;
      const bool is_treat = schema.is_treatment(name);
      const auto margin_it = schema.ordinal_margins.find(name);
      for (std::size_t node = 0; node < n; ++node) {
        if (!batch.is_target[node]) continue;
        for (std::size_t t = 0; t < tau; ++t) {
          if (batch.keep[node].keep_td[f][t] || !originals[node]->observed_d[f][t]) continue;
          const int truth = originals[node]->t_d[f][t];
          const int pred = classify_discrete(f, node, t, head);
          if (is_treat) {
            ++metrics.treatment_count;
            if (pred == 1 && truth == 1) ++tp;
            if (pred == 1 && truth == 0) ++fp;
            if (pred == 0 && truth == 1) ++fn;
          } else if (margin_it != schema.ordinal_margins.end()) {
            ++metrics.margin_count;
            if (std::abs(pred - truth) <= margin_it->second) ++margin_hits;
          } else {
            ++metrics.discrete_count;
            if (pred == truth) ++plain_hits;
          }
        }
      }
    }
  }

  if (batch.task == PretrainTask::kTP && head_outputs.count("tp.treat")) {
    const Tensor& head = head_outputs.at("tp.treat");
    const std::size_t n_treat = schema.treatment_indices().size();
    for (std::size_t node = 0; node < n; ++node) {
      if (!batch.is_target[node]) continue;
      for (std::size_t f = 0; f < n_treat; ++f) {
        const int truth = batch.treat_label[node * n_treat + f];
        const int pred = head.values()[node * n_treat + f] > 0.0 ? 1 : 0;
        ++metrics.treatment_count;
        if (pred == 1 && truth == 1) ++tp;
        if (pred == 1 && truth == 0) ++fp;
        if (pred == 0 && truth == 1) ++fn;
      }
    }
  }

  if (batch.task == PretrainTask::kSFM) {
    if (schema.c_count() > 0 && head_outputs.count("sfm.sc")) {
      const Tensor& head = head_outputs.at("sfm.sc");
      for (std::size_t node = 0; node < n; ++node) {
        if (!batch.is_target[node]) continue;
        for (std::size_t f = 0; f < schema.c_count(); ++f) {
          if (!batch.keep[node].keep_c[f]) {
            const double diff = head.values()[node * schema.c_count() + f] - originals[node]->c[f];
            sq_sum += diff * diff;
            ++metrics.continuous_count;
          }
        }
      }
    }
    if (schema.d_count() > 0 && head_outputs.count("sfm.sd")) {
      const Tensor& head = head_outputs.at("sfm.sd");
      const std::size_t head_dim = static_discrete_head_dim(schema);
      for (std::size_t f = 0; f < schema.d_count(); ++f) {
        const std::size_t card = static_cast<std::size_t>(schema.static_discrete[f].cardinality);
        const std::size_t offset = static_discrete_head_offset(schema, f);
        const auto margin_it = schema.ordinal_margins.find(schema.static_discrete[f].name);
        for (std::size_t node = 0; node < n; ++node) {
          if (!batch.is_target[node] || batch.keep[node].keep_d[f]) continue;
          const std::size_t base = node * head_dim + offset;
          std::size_t best = 0;
          for (std::size_t c = 1; c < card; ++c) {
            if (head.values()[base + c] > head.values()[base + best]) best = c;
          }
          const int truth = originals[node]->d[f];
          if (margin_it != schema.ordinal_margins.end()) {
            ++metrics.margin_count;
            if (std::abs(static_cast<int>(best) - truth) <= margin_it->second) ++margin_hits;
          } else {
            ++metrics.discrete_count;
            if (static_cast<int>(best) == truth) ++plain_hits;
          }
        }
      }
    }
  }

  metrics.squared_error_sum = sq_sum;
  metrics.treat_tp = tp;
  metrics.treat_fp = fp;
  metrics.treat_fn = fn;
  metrics.margin_hits = margin_hits;
  metrics.discrete_hits = plain_hits;
  if (metrics.continuous_count > 0) {
    metrics.rmse = std::sqrt(sq_sum / static_cast<double>(metrics.continuous_count));
  }
  if (metrics.treatment_count > 0) {
    const double denom = static_cast<double>(2 * tp + fp + fn);
    metrics.treatment_f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  if (metrics.margin_count > 0) {
    metrics.margin_accuracy =
        static_cast<double>(margin_hits) / static_cast<double>(metrics.margin_count);
  }
  if (metrics.discrete_count > 0) {
    metrics.discrete_accuracy =
        static_cast<double>(plain_hits) / static_cast<double>(metrics.discrete_count);
  }
  return metrics;
}

void PretrainMetrics::merge(const PretrainMetrics& other) {
  squared_error_sum += other.squared_error_sum;
  continuous_count += other.continuous_count;
  treat_tp += other.treat_tp;
  treat_fp += other.treat_fp;
  treat_fn += other.treat_fn;
  treatment_count += other.treatment_count;
  margin_hits += other.margin_hits;
  margin_count += other.margin_count;
  discrete_hits += other.discrete_hits;
  discrete_count += other.discrete_count;
  if (continuous_count > 0) {
    rmse = std::sqrt(squared_error_sum / static_cast<double>(continuous_count));
  }
  if (treatment_count > 0) {
    const double denom = static_cast<double>(2 * treat_tp + treat_fp + treat_fn);
    treatment_f1 = denom > 0.0 ? 2.0 * static_cast<double>(treat_tp) / denom : 0.0;
  }
  if (margin_count > 0) {
    margin_accuracy = static_cast<double>(margin_hits) / static_cast<double>(margin_count);
  }
  if (discrete_count > 0) {
    discrete_accuracy = static_cast<double>(discrete_hits) / static_cast<double>(discrete_count);
  }
}

void save_mask_plan(const MaskedBatch& batch, const FeatureSchema& schema,
                    const std::string& path) {
  json doc;
  doc["format"] = "popgraph.maskplan/1";
  doc["task"] = pretrain_task_to_string(batch.task);
  json nodes = json::array();
  for (std::size_t n = 0; n < batch.records.size(); ++n) {
    json entry;
    entry["id"] = batch.records[n].id;
    entry["target"] = batch.is_target[n] != 0;
    json masked = json::array();
    const RecordMask& keep = batch.keep[n];
    for (std::size_t f = 0; f < keep.keep_d.size(); ++f) {
      if (!keep.keep_d[f]) masked.push_back({{"feature", schema.static_discrete[f].name}});
    }
    for (std::size_t f = 0; f < keep.keep_c.size(); ++f) {
      if (!keep.keep_c[f]) masked.push_back({{"feature", schema.static_continuous[f]}});
    }
    for (std::size_t f = 0; f < keep.keep_td.size(); ++f) {
      for (std::size_t t = 0; t < keep.keep_td[f].size(); ++t) {
        if (!keep.keep_td[f][t]) {
          masked.push_back({{"feature", schema.ts_discrete[f].name}, {"t", t}});
        }
      }
    }
    for (std::size_t f = 0; f < keep.keep_tc.size(); ++f) {
      for (std::size_t t = 0; t < keep.keep_tc[f].size(); ++t) {
        if (!keep.keep_tc[f][t]) {
          masked.push_back({{"feature", schema.ts_continuous[f]}, {"t", t}});
        }
      }
    }
    entry["masked"] = masked;
    nodes.push_back(std::move(entry));
  }
  doc["nodes"] = nodes;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << doc.dump(2) << '\n';
}

}  // namespace popgraph
