#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "popgraph/gradcheck.hpp"
#include "popgraph/masking.hpp"
#include "popgraph/model.hpp"
#include "popgraph/synthetic.hpp"

using namespace popgraph;

namespace {

struct Fixture {
  Dataset dataset;
  std::vector<PopulationGraph> graphs;
  ModelConfig config;

  static Fixture make(std::size_t patients, std::uint64_t seed, std::size_t layers = 2) {
    Fixture f;
    SyntheticConfig cfg;
    cfg.patients = patients;
    cfg.timesteps = 4;
    cfg.measurements = 2;
    cfg.coded = 1;
    cfg.treatments = 1;
    cfg.missing_rate = 0.2;
    f.dataset = generate_synthetic(cfg, seed);
    interpolate_dataset(f.dataset);
    f.graphs = build_population_graphs(f.dataset, 3, patients, seed);
    f.config.graphormer_layers = layers;
    f.config.d_hidden = 8;
    f.config.c_hidden = 8;
    f.config.sd_hidden = 8;
    f.config.sc_hidden = 8;
    f.config.heads = 2;
    f.config.temporal_layers = 2;
    f.config.dropout = 0.0;
    return f;
  }

  std::vector<const PatientRecord*> nodes(std::size_t g = 0) const {
    std::vector<const PatientRecord*> out;
    for (std::size_t idx : graphs[g].dataset_index) out.push_back(&dataset.records[idx]);
    return out;
  }
};

GraphContext permute_context(const GraphContext& ctx, const ModelConfig& config,
                             const std::vector<std::size_t>& perm) {
  const std::size_t n = ctx.nodes;
  GraphContext out;
  out.nodes = n;
  out.degree_index.resize(n);
  out.spd_bucket.resize(n * n);
  std::vector<double> path(n * n * config.max_spd);
  for (std::size_t i = 0; i < n; ++i) {
    out.degree_index[i] = ctx.degree_index[perm[i]];
    for (std::size_t j = 0; j < n; ++j) {
      out.spd_bucket[i * n + j] = ctx.spd_bucket[perm[i] * n + perm[j]];
      for (std::size_t p = 0; p < config.max_spd; ++p) {
        path[(i * n + j) * config.max_spd + p] =
            ctx.path_features.values()[(perm[i] * n + perm[j]) * config.max_spd + p];
      }
    }
  }
  out.path_features = Tensor::from_values({n * n, config.max_spd}, std::move(path));
  return out;
}

}  // namespace

TEST_CASE("static discrete embedding sums the looked-up rows") {
  Fixture f = Fixture::make(8, 3);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(1);

  // zero tables -> zero vector
  std::fill(params.at("embed.sd.table").mutable_values().begin(),
            params.at("embed.sd.table").mutable_values().end(), 0.0);
  ModelInputs in = build_inputs(f.nodes(), f.dataset.schema);
  Tensor out = model.embed_static_discrete(in, params);
  for (double v : out.values()) CHECK(v == 0.0);

  // two features -> row_a + row_b
  Tensor& table = params.at("embed.sd.table");
  for (std::size_t i = 0; i < table.size(); ++i) {
    table.mutable_values()[i] = 0.01 * static_cast<double>(i);
  }
  out = model.embed_static_discrete(in, params);
  const std::size_t width = f.config.d_hidden;
  for (std::size_t c = 0; c < width; ++c) {
    const double row_a = table.values()[in.sd_indices[0] * width + c];
    const double row_b = table.values()[in.sd_indices[1] * width + c];
    CHECK(out.values()[c] == doctest::Approx(row_a + row_b));
  }

  // summation is order-invariant: swapping the two lookups changes nothing
  ModelInputs swapped = in;
  std::swap(swapped.sd_indices[0], swapped.sd_indices[1]);
  Tensor out2 = model.embed_static_discrete(swapped, params);
  for (std::size_t c = 0; c < width; ++c) {
    CHECK(out2.values()[c] == doctest::Approx(out.values()[c]));
  }
}

TEST_CASE("static continuous embedding is affine") {
  Fixture f = Fixture::make(6, 5);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(2);
  std::fill(params.at("embed.sc.b").mutable_values().begin(),
            params.at("embed.sc.b").mutable_values().end(), 0.0);

  ModelInputs zero_in = build_inputs(f.nodes(), f.dataset.schema);
  std::fill(zero_in.sc_values.begin(), zero_in.sc_values.end(), 0.0);
  Tensor out0 = model.embed_static_continuous(zero_in, params);
  for (double v : out0.values()) CHECK(v == 0.0);

  ModelInputs in = build_inputs(f.nodes(), f.dataset.schema);
  Tensor once = model.embed_static_continuous(in, params);
  ModelInputs doubled = in;
  for (double& v : doubled.sc_values) v *= 2.0;
  Tensor twice = model.embed_static_continuous(doubled, params);
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(twice.values()[i] == doctest::Approx(2.0 * once.values()[i]));
  }
}

TEST_CASE("time-series embedding width is stable across sequence lengths") {
  for (std::size_t tau : {4UL, 24UL}) {
    SyntheticConfig cfg;
    cfg.patients = 4;
    cfg.timesteps = tau;
    cfg.measurements = 2;
    cfg.coded = 1;
    cfg.treatments = 1;
    Dataset ds = generate_synthetic(cfg, 11);
    interpolate_dataset(ds);
    ModelConfig mc;
    mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
    mc.heads = 2;
    mc.dropout = 0.0;
    Model model(mc, ds.schema);
    ParamStore params = model.init_params(3);
    std::vector<const PatientRecord*> nodes;
    for (const auto& r : ds.records) nodes.push_back(&r);
    ModelInputs in = build_inputs(nodes, ds.schema);
    Tensor out = model.embed_timeseries_continuous(in, params, {});
    CHECK(out.rows() == 4);
    CHECK(out.cols() == 8);
  }
}

TEST_CASE("constant time steps with zeroed positions reduce to one step") {
  SyntheticConfig cfg;
  cfg.patients = 3;
  cfg.timesteps = 6;
  cfg.measurements = 2;
  cfg.coded = 1;
  cfg.treatments = 1;
  cfg.missing_rate = 0.0;
  Dataset ds = generate_synthetic(cfg, 21);
  ModelConfig mc;
  mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
  mc.heads = 2;
  mc.dropout = 0.0;
  Model model(mc, ds.schema);
  ParamStore params = model.init_params(7);
  std::fill(params.at("embed.tc.pos").mutable_values().begin(),
            params.at("embed.tc.pos").mutable_values().end(), 0.0);

  // make every step identical to step 0
  Dataset flat = ds;
  for (auto& r : flat.records) {
    for (auto& row : r.t_c) std::fill(row.begin(), row.end(), row[0]);
    for (auto& row : r.t_d) std::fill(row.begin(), row.end(), row[0]);
  }
  std::vector<const PatientRecord*> nodes;
  for (const auto& r : flat.records) nodes.push_back(&r);
  ModelInputs in = build_inputs(nodes, flat.schema);
  Tensor constant_out = model.embed_timeseries_continuous(in, params, {});

  // single-step schema sharing every non-positional parameter
  SyntheticConfig one = cfg;
  one.timesteps = 1;
  Dataset ds1 = generate_synthetic(one, 21);
  for (std::size_t i = 0; i < ds1.records.size(); ++i) {
    for (std::size_t ff = 0; ff < ds1.records[i].t_c.size(); ++ff) {
      ds1.records[i].t_c[ff][0] = flat.records[i].t_c[ff][0];
    }
  }
  Model model1(mc, ds1.schema);
  ParamStore params1 = model1.init_params(7);
  for (auto& [name, tensor] : params1) {
    if (name == "embed.tc.pos" || name == "embed.td.pos") {
      std::fill(tensor.mutable_values().begin(), tensor.mutable_values().end(), 0.0);
    } else {
      auto src = params.at(name).values();
      std::copy(src.begin(), src.end(), tensor.mutable_values().begin());
    }
  }
  std::vector<const PatientRecord*> nodes1;
  for (const auto& r : ds1.records) nodes1.push_back(&r);
  Tensor single_out =
      model1.embed_timeseries_continuous(build_inputs(nodes1, ds1.schema), params1, {});

  REQUIRE(constant_out.size() == single_out.size());
  for (std::size_t i = 0; i < constant_out.size(); ++i) {
    CHECK(constant_out.values()[i] == doctest::Approx(single_out.values()[i]).epsilon(1e-10));
  }
}

TEST_CASE("node embeddings are independent across nodes before the backbone") {
  Fixture f = Fixture::make(6, 9);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(5);
  auto nodes = f.nodes();
  Tensor base = model.embed_nodes(build_inputs(nodes, f.dataset.schema), params, {});

  Dataset mutated = f.dataset;
  const std::size_t victim = f.graphs[0].dataset_index[0];
  mutated.records[victim].c[0] += 5.0;
  for (auto& row : mutated.records[victim].t_c) {
    for (double& v : row) v += 1.0;
  }
  std::vector<const PatientRecord*> mutated_nodes;
  for (std::size_t idx : f.graphs[0].dataset_index) {
    mutated_nodes.push_back(&mutated.records[idx]);
  }
  Tensor changed = model.embed_nodes(build_inputs(mutated_nodes, f.dataset.schema), params, {});

  const std::size_t width = model.node_width();
  bool node0_changed = false;
  for (std::size_t c = 0; c < width; ++c) {
    if (base.values()[c] != changed.values()[c]) node0_changed = true;
  }
  CHECK(node0_changed);
  for (std::size_t n = 1; n < 6; ++n) {
    for (std::size_t c = 0; c < width; ++c) {
      CHECK(base.values()[n * width + c] == changed.values()[n * width + c]);
    }
  }
}

TEST_CASE("two single-node graphs with the same features agree") {
  Fixture f = Fixture::make(6, 13);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(11);

  PopulationGraph solo;
  solo.node_ids = {f.dataset.records[0].id};
  solo.dataset_index = {0};
  solo.adjacency = {{}};
  compute_structural(solo);
  GraphContext ctx = build_graph_context(solo, f.config);

  std::vector<const PatientRecord*> one = {&f.dataset.records[0]};
  ModelInputs in = build_inputs(one, f.dataset.schema);
  Tensor a = model.encode(in, &ctx, params, {});
  Tensor b = model.encode(in, &ctx, params, {});
  CHECK(a.rows() == 1);
  CHECK(a.cols() == model.node_width());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::isfinite(a.values()[i]));
    CHECK(a.values()[i] == b.values()[i]);
  }
}

TEST_CASE("full model is permutation equivariant") {
  Fixture f = Fixture::make(10, 17);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(13);
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  auto nodes = f.nodes();
  Tensor base = model.encode(build_inputs(nodes, f.dataset.schema), &ctx, params, {});

  std::vector<std::size_t> perm(nodes.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(99);
  rng.shuffle(perm);

  std::vector<const PatientRecord*> permuted_nodes;
  for (std::size_t i : perm) permuted_nodes.push_back(nodes[i]);
  GraphContext permuted_ctx = permute_context(ctx, f.config, perm);
  Tensor permuted =
      model.encode(build_inputs(permuted_nodes, f.dataset.schema), &permuted_ctx, params, {});

  const std::size_t width = model.node_width();
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t c = 0; c < width; ++c) {
      CHECK(std::abs(permuted.values()[i * width + c] -
                     base.values()[perm[i] * width + c]) < 1e-9);
    }
  }
}

TEST_CASE("decoder shapes and zero weights") {
  Fixture f = Fixture::make(4, 19);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(17);
  model.add_decoder_head(params, "task.risk", 2, 17);
  std::fill(params.at("decoder.task.risk.w").mutable_values().begin(),
            params.at("decoder.task.risk.w").mutable_values().end(), 0.0);
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  Tensor enc = model.encode(build_inputs(f.nodes(), f.dataset.schema), &ctx, params, {});
  Tensor logits = model.decode("task.risk", enc, params);
  CHECK(logits.rows() == 4);
  CHECK(logits.cols() == 2);
  for (double v : logits.values()) CHECK(v == 0.0);
  Tensor probs = softmax_rows(logits);
  for (double p : probs.values()) CHECK(p == doctest::Approx(0.5));
  CHECK_THROWS_AS(model.decode("task.none", enc, params), std::out_of_range);
}

TEST_CASE("linear backbone ignores the graph") {
  Fixture f = Fixture::make(8, 23);
  f.config.backbone = Backbone::kLinear;
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(19);
  ModelInputs in = build_inputs(f.nodes(), f.dataset.schema);
  Tensor without_graph = model.encode(in, nullptr, params, {});
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  Tensor with_graph = model.encode(in, &ctx, params, {});
  CHECK(without_graph.cols() == model.node_width());
  for (std::size_t i = 0; i < without_graph.size(); ++i) {
    CHECK(without_graph.values()[i] == with_graph.values()[i]);
  }
}

TEST_CASE("gradients through the full encoder and decoder pass finite differences") {
  Fixture f = Fixture::make(8, 29);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(23);
  model.add_decoder_head(params, "task.risk", 2, 23);
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  ModelInputs in = build_inputs(f.nodes(), f.dataset.schema);
  std::vector<int> targets = {0, 1, 1, 0, 1, 0, 0, 1};

  auto fn = [&](ParamStore& p) {
    Tensor enc = model.encode(in, &ctx, p, {});
    Tensor logits = model.decode("task.risk", enc, p);
    return softmax_cross_entropy(logits, targets);
  };
  GradCheckResult res = finite_difference_check(fn, params, 1e-3, 120, 31);
  INFO("worst " << res.worst_param << "[" << res.worst_index << "]");
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradients flow through the reconstruction losses") {
  Fixture f = Fixture::make(6, 31);
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(29);
  for (const auto& [name, dim] : pretrain_head_dims(PretrainTask::kMT, f.dataset.schema)) {
    model.add_decoder_head(params, name, dim, 29);
  }
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  auto nodes = f.nodes();
  MaskSettings settings;
  std::vector<std::size_t> targets = {0, 1, 2, 3, 4, 5};
  MaskedBatch batch = build_masked_batch(nodes, f.dataset.schema, PretrainTask::kTFM, settings,
                                         targets, 7);
  std::vector<RecordMask> keeps = batch.keep;
  std::vector<const PatientRecord*> masked_nodes;
  for (const auto& r : batch.records) masked_nodes.push_back(&r);
  ModelInputs in = build_inputs(masked_nodes, f.dataset.schema, &keeps);

  auto fn = [&](ParamStore& p) {
    Tensor enc = model.encode(in, &ctx, p, {});
    std::map<std::string, Tensor> outs;
    outs["tfm.td"] = model.decode("tfm.td", enc, p);
    outs["tfm.tc"] = model.decode("tfm.tc", enc, p);
    return pretrain_loss(outs, batch, nodes, f.dataset.schema);
  };
  GradCheckResult res = finite_difference_check(fn, params, 1e-3, 80, 37);
  INFO("worst " << res.worst_param << "[" << res.worst_index << "]");
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("training mode without an rng is rejected when dropout is on") {
  Fixture f = Fixture::make(4, 37);
  f.config.dropout = 0.1;
  Model model(f.config, f.dataset.schema);
  ParamStore params = model.init_params(31);
  GraphContext ctx = build_graph_context(f.graphs[0], f.config);
  ModelInputs in = build_inputs(f.nodes(), f.dataset.schema);
  EncodeOptions opts;
  opts.training = true;
  CHECK_THROWS_AS(model.encode(in, &ctx, params, opts), std::invalid_argument);
  Rng rng(3);
  opts.dropout_rng = &rng;
  Tensor out = model.encode(in, &ctx, params, opts);
  CHECK(out.rows() == 4);
}
