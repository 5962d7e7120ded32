#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "popgraph/graph.hpp"
#include "popgraph/model_config.hpp"
#include "popgraph/param_store.hpp"
#include "popgraph/record.hpp"
#include "popgraph/tensor.hpp"

namespace popgraph {

/// Flattened per-graph model inputs. Time-series rows are patient-major:
/// row n * tau + t holds node n at step t. Discrete values are already
/// offset into the concatenated embedding tables (mask token = the reserved
/// last row of each feature's block). Indicator channels are 1 at masked
/// time-series positions.
struct ModelInputs {
  std::size_t nodes = 0;
  std::size_t tau = 1;
  std::vector<std::size_t> sd_indices;  // [N * D]
  std::vector<double> sc_values;        // [N * C]
  std::vector<std::size_t> td_indices;  // [N*tau * S_d]
  std::vector<double> td_indicator;     // [N*tau * S_d]
  std::vector<double> tc_values;        // [N*tau * S_c]
  std::vector<double> tc_indicator;     // [N*tau * S_c]
};

struct RecordMask;  // masking.hpp

/// Row offsets of each discrete feature's block inside the concatenated
/// embedding table; each block has cardinality + 1 rows (the extra row is the
/// mask token).
std::vector<std::size_t> discrete_table_offsets(const std::vector<DiscreteFeature>& features);
std::size_t discrete_table_rows(const std::vector<DiscreteFeature>& features);

ModelInputs build_inputs(const std::vector<const PatientRecord*>& nodes,
                         const FeatureSchema& schema,
                         const std::vector<RecordMask>* masks = nullptr);

/// Structural tensors for one sub-graph, precomputed once per run.
struct GraphContext {
  std::size_t nodes = 0;
  std::vector<std::size_t> degree_index;  // degree clamped to the table
  std::vector<std::size_t> spd_bucket;    // [N*N], max_spd + 1 for unreachable
  Tensor path_features;                   // constant [N*N, max_spd]
};

GraphContext build_graph_context(const PopulationGraph& graph, const ModelConfig& config);

struct EncodeOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training and dropout > 0
};

/// Encoder (data embedding module + backbone) and decoder heads.
class Model {
 public:
  Model(ModelConfig config, FeatureSchema schema);

  const ModelConfig& config() const { return config_; }
  const FeatureSchema& schema() const { return schema_; }
  std::size_t node_width() const { return width_; }

  ParamStore init_params(std::uint64_t seed) const;
  void add_decoder_head(ParamStore& params, const std::string& name, std::size_t out_dim,
                        std::uint64_t seed) const;

  /// Per-node embeddings [N, F] before the backbone.
  Tensor embed_nodes(const ModelInputs& inputs, ParamStore& params,
                     const EncodeOptions& options) const;
  /// Full encoder output [N, F]. graph may be null only for the linear
  /// backbone.
  Tensor encode(const ModelInputs& inputs, const GraphContext* graph, ParamStore& params,
                const EncodeOptions& options) const;
  Tensor decode(const std::string& head, const Tensor& node_vectors, ParamStore& params) const;

  Tensor embed_static_discrete(const ModelInputs& inputs, ParamStore& params) const;
  Tensor embed_static_continuous(const ModelInputs& inputs, ParamStore& params) const;
  Tensor embed_timeseries_discrete(const ModelInputs& inputs, ParamStore& params,
                                   const EncodeOptions& options) const;
  Tensor embed_timeseries_continuous(const ModelInputs& inputs, ParamStore& params,
                                     const EncodeOptions& options) const;
  Tensor graphormer_forward(const Tensor& node_embeds, const GraphContext& graph,
                            ParamStore& params, const EncodeOptions& options) const;
  Tensor linear_backbone_forward(const Tensor& node_embeds, ParamStore& params) const;

  /// Parameter names the transfer path copies between schemas: the temporal
  /// transformer layers and the whole backbone, but not the per-feature-type
  /// input encoders or decoder heads.
  static bool is_backbone_param(const std::string& name);

 private:
  Tensor temporal_stack(const Tensor& steps, const std::string& prefix, std::size_t tau,
                        std::size_t width, ParamStore& params, const EncodeOptions& options) const;
  Tensor transformer_block(const Tensor& x, const std::string& prefix, std::size_t block_rows,
                           std::size_t width, const std::vector<Tensor>* attn_bias,
                           ParamStore& params, const EncodeOptions& options) const;
  Tensor maybe_dropout(const Tensor& x, const EncodeOptions& options) const;

  ModelConfig config_;
  FeatureSchema schema_;
  std::size_t width_ = 0;
  std::vector<std::size_t> sd_offsets_;
  std::vector<std::size_t> td_offsets_;
};

}  // namespace popgraph
