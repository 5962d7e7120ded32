#include "popgraph/model.hpp"

#include <cctype>
#include <cmath>
#include <stdexcept>

#include "popgraph/masking.hpp"

namespace popgraph {

std::vector<std::size_t> discrete_table_offsets(const std::vector<DiscreteFeature>& features) {
  std::vector<std::size_t> offsets;
  offsets.reserve(features.size());
  std::size_t off = 0;
  for (const auto& f : features) {
    offsets.push_back(off);
    off += static_cast<std::size_t>(f.cardinality) + 1;  // +1 mask token row
  }
  return offsets;
}

std::size_t discrete_table_rows(const std::vector<DiscreteFeature>& features) {
  std::size_t rows = 0;
  for (const auto& f : features) rows += static_cast<std::size_t>(f.cardinality) + 1;
  return rows;
}

ModelInputs build_inputs(const std::vector<const PatientRecord*>& nodes,
                         const FeatureSchema& schema, const std::vector<RecordMask>* masks) {
  if (masks && masks->size() != nodes.size()) {
    throw std::invalid_argument("build_inputs: mask list does not match node list");
  }
  ModelInputs in;
  in.nodes = nodes.size();
  in.tau = schema.max_timesteps;
  const std::size_t D = schema.d_count(), C = schema.c_count();
  const std::size_t Sd = schema.sd_count(), Sc = schema.sc_count();
  const auto sd_off = discrete_table_offsets(schema.static_discrete);
  const auto td_off = discrete_table_offsets(schema.ts_discrete);

  in.sd_indices.reserve(in.nodes * D);
  in.sc_values.reserve(in.nodes * C);
  in.td_indices.reserve(in.nodes * in.tau * Sd);
  in.td_indicator.assign(in.nodes * in.tau * Sd, 0.0);
  in.tc_values.reserve(in.nodes * in.tau * Sc);
  in.tc_indicator.assign(in.nodes * in.tau * Sc, 0.0);

  for (std::size_t n = 0; n < nodes.size(); ++n) {
    const PatientRecord& r = *nodes[n];
    for (std::size_t f = 0; f < D; ++f) {
      in.sd_indices.push_back(sd_off[f] + static_cast<std::size_t>(r.d[f]));
    }
    for (std::size_t f = 0; f < C; ++f) in.sc_values.push_back(r.c[f]);
    for (std::size_t t = 0; t < in.tau; ++t) {
      const std::size_t row = n * in.tau + t;
      for (std::size_t f = 0; f < Sd; ++f) {
        in.td_indices.push_back(td_off[f] + static_cast<std::size_t>(r.t_d[f][t]));
        if (masks && !(*masks)[n].keep_td[f][t]) in.td_indicator[row * Sd + f] = 1.0;
      }
      for (std::size_t f = 0; f < Sc; ++f) {
        in.tc_values.push_back(r.t_c[f][t]);
        if (masks && !(*masks)[n].keep_tc[f][t]) in.tc_indicator[row * Sc + f] = 1.0;
      }
    }
  }
  return in;
}

GraphContext build_graph_context(const PopulationGraph& graph, const ModelConfig& config) {
  GraphContext ctx;
  const std::size_t n = graph.size();
  ctx.nodes = n;
  ctx.degree_index.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ctx.degree_index.push_back(std::min(graph.degrees[i], config.degree_cap));
  }
  ctx.spd_bucket.resize(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    const int d = graph.spd[i];
    ctx.spd_bucket[i] = d == kUnreachable ? config.max_spd + 1
                                          : std::min<std::size_t>(static_cast<std::size_t>(d),
                                                                  config.max_spd);
  }
  ctx.path_features =
      Tensor::from_values({n * n, config.max_spd}, path_feature_matrix(graph, config.max_spd));
  return ctx;
}

// ---------------------------------------------------------------------------

Model::Model(ModelConfig config, FeatureSchema schema)
    : config_(config), schema_(std::move(schema)) {
  schema_.validate();
  config_.validate(schema_);
  width_ = config_.node_width(schema_);
  sd_offsets_ = discrete_table_offsets(schema_.static_discrete);
  td_offsets_ = discrete_table_offsets(schema_.ts_discrete);
}

namespace {

void init_transformer_block(ParamStore& params, const std::string& prefix, std::size_t width,
                            std::size_t ffn_mult, Rng& rng) {
  params.insert(prefix + ".ln1.g", init_ones({width}));
  params.insert(prefix + ".ln1.b", init_zeros({width}));
  for (const char* name : {"wq", "wk", "wv", "wo"}) {
    params.insert(prefix + ".attn." + name, init_linear_weight(width, width, rng));
  }
  for (const char* name : {"bq", "bk", "bv", "bo"}) {
    params.insert(prefix + ".attn." + name, init_zeros({width}));
  }
  params.insert(prefix + ".ln2.g", init_ones({width}));
  params.insert(prefix + ".ln2.b", init_zeros({width}));
  params.insert(prefix + ".ffn.w1", init_linear_weight(width, width * ffn_mult, rng));
  params.insert(prefix + ".ffn.b1", init_zeros({width * ffn_mult}));
  params.insert(prefix + ".ffn.w2", init_linear_weight(width * ffn_mult, width, rng));
  params.insert(prefix + ".ffn.b2", init_zeros({width}));
}

}  // namespace

ParamStore Model::init_params(std::uint64_t seed) const {
  ParamStore params;
  Rng rng(derive_seed(seed, "model-init"));
  if (schema_.d_count() > 0) {
    params.insert("embed.sd.table",
                  init_embedding_table(discrete_table_rows(schema_.static_discrete),
                                       config_.d_hidden, rng));
  }
  if (schema_.c_count() > 0) {
    params.insert("embed.sc.w", init_linear_weight(schema_.c_count(), config_.c_hidden, rng));
    params.insert("embed.sc.b", init_zeros({config_.c_hidden}));
  }
  if (schema_.sd_count() > 0) {
    params.insert("embed.td.table",
                  init_embedding_table(discrete_table_rows(schema_.ts_discrete),
                                       config_.sd_hidden, rng));
    params.insert("embed.td.ind.w",
                  init_linear_weight(schema_.sd_count(), config_.sd_hidden, rng));
    params.insert("embed.td.ind.b", init_zeros({config_.sd_hidden}));
    params.insert("embed.td.pos",
                  init_embedding_table(schema_.max_timesteps, config_.sd_hidden, rng));
    for (std::size_t i = 0; i < config_.temporal_layers; ++i) {
      init_transformer_block(params, "embed.td.t" + std::to_string(i), config_.sd_hidden,
                             config_.ffn_multiplier, rng);
    }
  }
  if (schema_.sc_count() > 0) {
    params.insert("embed.tc.in.w",
                  init_linear_weight(2 * schema_.sc_count(), config_.sc_hidden, rng));
    params.insert("embed.tc.in.b", init_zeros({config_.sc_hidden}));
    params.insert("embed.tc.pos",
                  init_embedding_table(schema_.max_timesteps, config_.sc_hidden, rng));
    for (std::size_t i = 0; i < config_.temporal_layers; ++i) {
      init_transformer_block(params, "embed.tc.t" + std::to_string(i), config_.sc_hidden,
                             config_.ffn_multiplier, rng);
    }
  }
  if (config_.backbone == Backbone::kGraphormer) {
    params.insert("graphormer.degree.table",
                  init_embedding_table(config_.degree_cap + 1, width_, rng));
    Tensor spatial = init_embedding_table(config_.max_spd + 2, config_.heads, rng);
    for (std::size_t b = 0; b < config_.max_spd + 2; ++b) {
      for (std::size_t h = 0; h < config_.heads; ++h) {
        spatial.mutable_values()[b * config_.heads + h] -=
            config_.spatial_locality * static_cast<double>(b);
      }
    }
    params.insert("graphormer.spatial.table", spatial);
    params.insert("graphormer.edge.w",
                  init_embedding_table(config_.max_spd, config_.heads, rng));
    for (std::size_t i = 0; i < config_.graphormer_layers; ++i) {
      init_transformer_block(params, "graphormer.l" + std::to_string(i), width_,
                             config_.ffn_multiplier, rng);
    }
    params.insert("graphormer.out_ln.g", init_ones({width_}));
    params.insert("graphormer.out_ln.b", init_zeros({width_}));
  } else {
    params.insert("linear.w", init_linear_weight(width_, width_, rng));
    params.insert("linear.b", init_zeros({width_}));
  }
  return params;
}

void Model::add_decoder_head(ParamStore& params, const std::string& name, std::size_t out_dim,
                             std::uint64_t seed) const {
  Rng rng(derive_seed(seed, "head:" + name));
  params.insert("decoder." + name + ".w", init_linear_weight(width_, out_dim, rng));
  params.insert("decoder." + name + ".b", init_zeros({out_dim}));
}

Tensor Model::maybe_dropout(const Tensor& x, const EncodeOptions& options) const {
  if (!options.training || config_.dropout == 0.0) return x;
  if (!options.dropout_rng) {
    throw std::invalid_argument("encode: training mode needs a dropout rng");
  }
  return dropout(x, config_.dropout, *options.dropout_rng);
}

Tensor Model::embed_static_discrete(const ModelInputs& inputs, ParamStore& params) const {
  if (schema_.d_count() == 0) {
    throw std::invalid_argument("embed_static_discrete: schema has no static discrete features");
  }
  return embedding_bag(params.at("embed.sd.table"), inputs.sd_indices, inputs.nodes);
}

Tensor Model::embed_static_continuous(const ModelInputs& inputs, ParamStore& params) const {
  if (schema_.c_count() == 0) {
    throw std::invalid_argument("embed_static_continuous: schema has no static continuous features");
  }
  Tensor x = Tensor::from_values({inputs.nodes, schema_.c_count()}, inputs.sc_values);
  return add_row(matmul(x, params.at("embed.sc.w")), params.at("embed.sc.b"));
}

Tensor Model::temporal_stack(const Tensor& steps, const std::string& prefix, std::size_t tau,
                             std::size_t width, ParamStore& params,
                             const EncodeOptions& options) const {
  std::vector<std::size_t> pos_index(steps.rows());
  for (std::size_t r = 0; r < pos_index.size(); ++r) pos_index[r] = r % tau;
  Tensor x = add(steps, gather_rows(params.at(prefix + ".pos"), std::move(pos_index)));
  for (std::size_t i = 0; i < config_.temporal_layers; ++i) {
    x = transformer_block(x, prefix + ".t" + std::to_string(i), tau, width, nullptr, params,
                          options);
  }
  return mean_row_blocks(x, tau);
}

Tensor Model::embed_timeseries_discrete(const ModelInputs& inputs, ParamStore& params,
                                        const EncodeOptions& options) const {
  if (schema_.sd_count() == 0) {
    throw std::invalid_argument("embed_timeseries_discrete: schema has no discrete ts features");
  }
  if (inputs.tau == 0) throw std::invalid_argument("embed_timeseries_discrete: tau must be >= 1");
  const std::size_t rows = inputs.nodes * inputs.tau;
  Tensor bag = embedding_bag(params.at("embed.td.table"), inputs.td_indices, rows);
  Tensor ind = Tensor::from_values({rows, schema_.sd_count()}, inputs.td_indicator);
  Tensor up = add(bag, add_row(matmul(ind, params.at("embed.td.ind.w")),
                               params.at("embed.td.ind.b")));
  return temporal_stack(up, "embed.td", inputs.tau, config_.sd_hidden, params, options);
}

Tensor Model::embed_timeseries_continuous(const ModelInputs& inputs, ParamStore& params,
                                          const EncodeOptions& options) const {
  if (schema_.sc_count() == 0) {
    throw std::invalid_argument(
        "embed_timeseries_continuous: schema has no continuous ts features");
  }
  if (inputs.tau == 0) {
    throw std::invalid_argument("embed_timeseries_continuous: tau must be >= 1");
  }
  const std::size_t rows = inputs.nodes * inputs.tau;
  Tensor values = Tensor::from_values({rows, schema_.sc_count()}, inputs.tc_values);
  Tensor ind = Tensor::from_values({rows, schema_.sc_count()}, inputs.tc_indicator);
  std::vector<Tensor> parts = {values, ind};
  Tensor joint = concat_cols(parts);
  Tensor up = add_row(matmul(joint, params.at("embed.tc.in.w")), params.at("embed.tc.in.b"));
  return temporal_stack(up, "embed.tc", inputs.tau, config_.sc_hidden, params, options);
}

Tensor Model::transformer_block(const Tensor& x, const std::string& prefix,
                                std::size_t block_rows, std::size_t width,
                                const std::vector<Tensor>* attn_bias, ParamStore& params,
                                const EncodeOptions& options) const {
  const std::size_t heads = config_.heads;
  const std::size_t dh = width / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor a = layer_norm_rows(x, params.at(prefix + ".ln1.g"), params.at(prefix + ".ln1.b"));
  Tensor q = add_row(matmul(a, params.at(prefix + ".attn.wq")), params.at(prefix + ".attn.bq"));
  Tensor k = add_row(matmul(a, params.at(prefix + ".attn.wk")), params.at(prefix + ".attn.bk"));
  Tensor v = add_row(matmul(a, params.at(prefix + ".attn.wv")), params.at(prefix + ".attn.bv"));

  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, dh);
    Tensor kh = slice_cols(k, h * dh, dh);
    Tensor vh = slice_cols(v, h * dh, dh);
    Tensor bias = attn_bias ? (*attn_bias)[h] : Tensor{};
    head_outputs.push_back(attention(qh, kh, vh, block_rows, bias, scale_factor));
  }
  Tensor attn = concat_cols(head_outputs);
  attn = add_row(matmul(attn, params.at(prefix + ".attn.wo")), params.at(prefix + ".attn.bo"));
  Tensor h1 = add(x, maybe_dropout(attn, options));

  Tensor f = layer_norm_rows(h1, params.at(prefix + ".ln2.g"), params.at(prefix + ".ln2.b"));
  Tensor ff = add_row(matmul(f, params.at(prefix + ".ffn.w1")), params.at(prefix + ".ffn.b1"));
  ff = maybe_dropout(gelu(ff), options);
  ff = add_row(matmul(ff, params.at(prefix + ".ffn.w2")), params.at(prefix + ".ffn.b2"));
  return add(h1, ff);
}

Tensor Model::embed_nodes(const ModelInputs& inputs, ParamStore& params,
                          const EncodeOptions& options) const {
  std::vector<Tensor> groups;
  if (schema_.d_count() > 0) groups.push_back(embed_static_discrete(inputs, params));
  if (schema_.c_count() > 0) groups.push_back(embed_static_continuous(inputs, params));
  if (schema_.sd_count() > 0) groups.push_back(embed_timeseries_discrete(inputs, params, options));
  if (schema_.sc_count() > 0) {
    groups.push_back(embed_timeseries_continuous(inputs, params, options));
  }
  return groups.size() == 1 ? groups[0] : concat_cols(groups);
}

Tensor Model::graphormer_forward(const Tensor& node_embeds, const GraphContext& graph,
                                 ParamStore& params, const EncodeOptions& options) const {
  const std::size_t n = graph.nodes;
  if (node_embeds.rows() != n || node_embeds.cols() != width_) {
    throw std::invalid_argument("graphormer_forward: embeddings " +
                                shape_str(node_embeds.shape()) + " do not fit graph of " +
                                std::to_string(n) + " nodes at width " + std::to_string(width_));
  }
  if (graph.spd_bucket.size() != n * n || !graph.path_features.defined()) {
    throw std::invalid_argument("graphormer_forward: structural tables missing");
  }
  Tensor x = add(node_embeds, gather_rows(params.at("graphormer.degree.table"),
                                          graph.degree_index));

  // Structural attention biases are shared across layers: a learned scalar per
  // hop bucket plus the mean of per-position weighted edge features along the
  // chosen shortest path.
  Tensor bias_all = add(gather_rows(params.at("graphormer.spatial.table"), graph.spd_bucket),
                        matmul(graph.path_features, params.at("graphormer.edge.w")));
  std::vector<Tensor> bias_per_head;
  bias_per_head.reserve(config_.heads);
  for (std::size_t h = 0; h < config_.heads; ++h) {
    bias_per_head.push_back(reshape(slice_cols(bias_all, h, 1), {n, n}));
  }

  for (std::size_t i = 0; i < config_.graphormer_layers; ++i) {
    x = transformer_block(x, "graphormer.l" + std::to_string(i), n, width_, &bias_per_head,
                          params, options);
  }
  return layer_norm_rows(x, params.at("graphormer.out_ln.g"), params.at("graphormer.out_ln.b"));
}

Tensor Model::linear_backbone_forward(const Tensor& node_embeds, ParamStore& params) const {
  return add_row(matmul(node_embeds, params.at("linear.w")), params.at("linear.b"));
}

Tensor Model::encode(const ModelInputs& inputs, const GraphContext* graph, ParamStore& params,
                     const EncodeOptions& options) const {
  Tensor embeds = embed_nodes(inputs, params, options);
  if (config_.backbone == Backbone::kLinear) {
    return linear_backbone_forward(embeds, params);
  }
  if (!graph) throw std::invalid_argument("encode: graphormer backbone needs a graph context");
  return graphormer_forward(embeds, *graph, params, options);
}

Tensor Model::decode(const std::string& head, const Tensor& node_vectors,
                     ParamStore& params) const {
  const std::string key = "decoder." + head;
  if (!params.contains(key + ".w")) {
    throw std::out_of_range("decode: no decoder head '" + head + "'");
  }
  return add_row(matmul(node_vectors, params.at(key + ".w")), params.at(key + ".b"));
}

bool Model::is_backbone_param(const std::string& name) {
  if (name.rfind("graphormer.", 0) == 0 || name.rfind("linear.", 0) == 0) return true;
  for (const char* prefix : {"embed.td.t", "embed.tc.t"}) {
    const std::size_t len = std::string(prefix).size();
    if (name.rfind(prefix, 0) == 0 && name.size() > len &&
        std::isdigit(static_cast<unsigned char>(name[len]))) {
      return true;
    }
  }
  return false;
}

}  // namespace popgraph
