#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "popgraph/record.hpp"
#include "popgraph/rng.hpp"
#include "popgraph/schema.hpp"
#include "popgraph/tensor.hpp"

namespace popgraph {

enum class PretrainTask { kSFM, kTFM, kBM, kTP, kPM, kMT };

PretrainTask pretrain_task_from_string(const std::string& name);
std::string pretrain_task_to_string(PretrainTask task);

/// Keep matrices for one record; false = masked, mirroring the 0/1 mask
/// convention. Masked discrete inputs read the reserved token row (index =
/// cardinality), masked continuous inputs read 0.
struct RecordMask {
  std::vector<std::uint8_t> keep_d;
  std::vector<std::uint8_t> keep_c;
  std::vector<std::vector<std::uint8_t>> keep_td;
  std::vector<std::vector<std::uint8_t>> keep_tc;

  static RecordMask all_kept(const FeatureSchema& schema);
  std::size_t masked_count() const;
};

struct MaskSettings {
  double static_ratio = 0.3;
  double ts_feature_ratio = 0.3;
  double block_ratio = 1.0;
  int block_hours = 6;
  double patient_ratio = 0.1;
};

// Record-level masking. Each returns the masked record (fill values applied)
// plus the keep matrices. At least one feature is always masked when rounding
// would select none.
std::pair<PatientRecord, RecordMask> mask_static(const PatientRecord& record,
                                                 const FeatureSchema& schema, double ratio,
                                                 Rng& rng);
std::pair<PatientRecord, RecordMask> mask_ts_features(const PatientRecord& record,
                                                      const FeatureSchema& schema, double ratio,
                                                      Rng& rng);
std::pair<PatientRecord, RecordMask> mask_blocks(const PatientRecord& record,
                                                 const FeatureSchema& schema, double ratio,
                                                 int block_hours, Rng& rng);
/// Masks every treatment series end to end.
std::pair<PatientRecord, RecordMask> mask_treatments(const PatientRecord& record,
                                                     const FeatureSchema& schema);
/// Masks every measurement and treatment series; demographics stay visible.
std::pair<PatientRecord, RecordMask> mask_whole_patient(const PatientRecord& record,
                                                        const FeatureSchema& schema);

/// One binary indicator per treatment feature: 1 iff any observed hour of
/// that series is active.
std::vector<std::uint8_t> treatment_labels(const PatientRecord& record,
                                           const FeatureSchema& schema);

/// Uniform draw over the pool, deterministic in (seed, batch_index).
PretrainTask sample_multitask(const std::vector<PretrainTask>& pool, std::uint64_t seed,
                              std::uint64_t batch_index);

/// Masked inputs, keep matrices and target bookkeeping for one sub-graph
/// batch. Only target nodes contribute targets; for SFM/TFM/BM each target
/// node is masked independently, TP masks treatments of every node, PM fully
/// masks a subset of the target nodes.
struct MaskedBatch {
  PretrainTask task = PretrainTask::kTFM;
  std::vector<PatientRecord> records;     // masked inputs for all nodes
  std::vector<RecordMask> keep;           // aligned with records
  std::vector<std::uint8_t> is_target;    // nodes whose masked values enter the loss
  std::vector<std::uint8_t> treat_label;  // [targets' nodes * treatments], TP only (row-major)
};

MaskedBatch build_masked_batch(const std::vector<const PatientRecord*>& nodes,
                               const FeatureSchema& schema, PretrainTask task,
                               const MaskSettings& settings,
                               const std::vector<std::size_t>& target_nodes, std::uint64_t seed);

/// Raised-to-task error when the schema cannot support the task (no ts
/// features, no treatments, ...).
void check_task_compatible(PretrainTask task, const FeatureSchema& schema);

struct LossReport {
  double total = 0.0;
  double continuous_mse = 0.0;
  double discrete_ce = 0.0;
  double treatment_bce = 0.0;
  std::size_t continuous_count = 0;
  std::size_t discrete_count = 0;
  std::size_t treatment_count = 0;
};

/// Reconstruction loss restricted to masked-and-observed positions: MSE over
/// continuous targets plus cross-entropy over discrete targets (BCE for
/// treatment indicators), summed with unit weights. Errors when no target of
/// any type is valid.
Tensor pretrain_loss(const std::map<std::string, Tensor>& head_outputs, const MaskedBatch& batch,
                     const std::vector<const PatientRecord*>& originals,
                     const FeatureSchema& schema, LossReport* report = nullptr);

struct PretrainMetrics {
  double rmse = 0.0;
  double treatment_f1 = 0.0;
  double margin_accuracy = 0.0;
  double discrete_accuracy = 0.0;
  std::size_t continuous_count = 0;
  std::size_t treatment_count = 0;
  std::size_t margin_count = 0;
  std::size_t discrete_count = 0;
  // raw tallies, so metrics from several sub-graphs combine exactly
  double squared_error_sum = 0.0;
  std::size_t treat_tp = 0;
  std::size_t treat_fp = 0;
  std::size_t treat_fn = 0;
  std::size_t margin_hits = 0;
  std::size_t discrete_hits = 0;

  void merge(const PretrainMetrics& other);
};

/// RMSE over continuous targets, binary F1 over treatment targets, and
/// accuracy-within-margin for features with configured ordinal margins.
PretrainMetrics pretrain_metrics(const std::map<std::string, Tensor>& head_outputs,
                                 const MaskedBatch& batch,
                                 const std::vector<const PatientRecord*>& originals,
                                 const FeatureSchema& schema);

/// Decoder heads a pre-training task needs: name -> output dimension.
std::map<std::string, std::size_t> pretrain_head_dims(PretrainTask task,
                                                      const FeatureSchema& schema);

/// Output layout helpers for the reconstruction heads.
std::size_t ts_discrete_head_dim(const FeatureSchema& schema);
std::size_t ts_discrete_head_offset(const FeatureSchema& schema, std::size_t feature);

void save_mask_plan(const MaskedBatch& batch, const FeatureSchema& schema,
                    const std::string& path);

}  // namespace popgraph
