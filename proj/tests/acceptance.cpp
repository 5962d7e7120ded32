// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Run with --only=<k> to execute a single criterion, --jobs=<n> to bound the
// worker threads used by the training criteria.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "popgraph/checkpoint.hpp"
#include "popgraph/gradcheck.hpp"
#include "popgraph/graph.hpp"
#include "popgraph/masking.hpp"
#include "popgraph/metrics.hpp"
#include "popgraph/model.hpp"
#include "popgraph/synthetic.hpp"
#include "popgraph/train.hpp"

using namespace popgraph;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::size_t g_jobs = std::max(2u, std::thread::hardware_concurrency());

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool condition, const std::string& message) {
  if (!condition) throw Failure(message);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

SyntheticConfig mixed_config(std::size_t patients) {
  SyntheticConfig cfg;
  cfg.patients = patients;
  cfg.timesteps = 8;
  cfg.measurements = 4;
  cfg.coded = 1;
  cfg.treatments = 2;
  cfg.missing_rate = 0.3;
  return cfg;
}

ModelConfig desk_model() {
  ModelConfig mc;
  mc.graphormer_layers = 2;
  mc.d_hidden = 16;
  mc.c_hidden = 16;
  mc.sd_hidden = 24;
  mc.sc_hidden = 24;
  mc.heads = 4;
  mc.temporal_layers = 2;
  mc.ffn_multiplier = 2;
  mc.dropout = 0.1;
  return mc;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness over the full encoder + decoder
// ---------------------------------------------------------------------------

std::string criterion_gradients() {
  SyntheticConfig cfg = mixed_config(8);
  cfg.timesteps = 4;
  cfg.measurements = 2;
  cfg.coded = 1;
  cfg.treatments = 1;
  Dataset ds = generate_synthetic(cfg, 29);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 3, 8, 29);

  ModelConfig mc;
  mc.graphormer_layers = 2;
  mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
  mc.heads = 2;
  mc.temporal_layers = 2;
  mc.dropout = 0.0;
  Model model(mc, ds.schema);
  ParamStore params = model.init_params(23);
  model.add_decoder_head(params, "task.risk", 2, 23);
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

  const auto t0 = Clock::now();
  GradCheckResult result = finite_difference_check(fn, params, 1e-3, 250, 17);
  const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  require(result.max_rel_error < 1e-4,
          "max relative error " + fmt(result.max_rel_error) + " at " + result.worst_param);
  require(seconds < 60.0, "runtime " + fmt(seconds) + "s exceeds 60s");
  return "max rel err " + fmt(result.max_rel_error) + " over 250 coordinates in " +
         fmt(seconds) + "s";
}

// ---------------------------------------------------------------------------
// 2. Graph construction against brute-force oracles
// ---------------------------------------------------------------------------

struct OracleDescriptor {
  double mean, stddev, min, max;
};

OracleDescriptor oracle_descriptor(const std::vector<double>& values,
                                   const std::vector<std::uint8_t>& observed) {
  OracleDescriptor d{0, 0, 0, 0};
  std::size_t count = 0;
  double sum = 0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    if (!observed[t]) continue;
    if (count == 0) {
      d.min = d.max = values[t];
    } else {
      d.min = std::min(d.min, values[t]);
      d.max = std::max(d.max, values[t]);
    }
    sum += values[t];
    ++count;
  }
  if (count == 0) return {0, 0, 0, 0};
  d.mean = sum / static_cast<double>(count);
  double var = 0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    if (observed[t]) var += (values[t] - d.mean) * (values[t] - d.mean);
  }
  d.stddev = std::sqrt(var / static_cast<double>(count));
  return d;
}

std::vector<int> oracle_floyd_warshall(std::size_t n,
                                       const std::set<std::pair<std::size_t, std::size_t>>& edges) {
  const int inf = 1 << 20;
  std::vector<int> dist(n * n, inf);
  for (std::size_t i = 0; i < n; ++i) dist[i * n + i] = 0;
  for (const auto& [a, b] : edges) {
    dist[a * n + b] = 1;
    dist[b * n + a] = 1;
  }
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        dist[i * n + j] = std::min(dist[i * n + j], dist[i * n + k] + dist[k * n + j]);
      }
    }
  }
  for (int& d : dist) {
    if (d >= inf) d = kUnreachable;
  }
  return dist;
}

std::string criterion_graph_oracle() {
  const auto t0 = Clock::now();
  SyntheticConfig cfg = mixed_config(50);
  Dataset ds = generate_synthetic(cfg, 55);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 5, 50, 21);
  require(graphs.size() == 1, "expected one sub-graph");
  const PopulationGraph& g = graphs[0];
  const std::size_t n = 50;

  // Brute-force similarities straight from the definitions.
  std::vector<std::vector<OracleDescriptor>> desc(n);
  for (std::size_t i = 0; i < n; ++i) {
    const PatientRecord& r = ds.records[g.dataset_index[i]];
    for (std::size_t f = 0; f < ds.schema.sc_count(); ++f) {
      desc[i].push_back(oracle_descriptor(r.t_c[f], r.observed_c[f]));
    }
  }
  std::vector<double> dist(n * n, 0.0);
  double max_dist = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double total = 0.0;
      for (std::size_t f = 0; f < desc[i].size(); ++f) {
        const double dm = desc[i][f].mean - desc[j][f].mean;
        const double dsd = desc[i][f].stddev - desc[j][f].stddev;
        const double dmin = desc[i][f].min - desc[j][f].min;
        const double dmax = desc[i][f].max - desc[j][f].max;
        total += std::sqrt(dm * dm + dsd * dsd + dmin * dmin + dmax * dmax);
      }
      const double d = total / static_cast<double>(desc[i].size());
      dist[i * n + j] = dist[j * n + i] = d;
      max_dist = std::max(max_dist, d);
    }
  }
  // similarity values must match exactly
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double lib = sim_measurements(ds.records[g.dataset_index[i]],
                                          ds.records[g.dataset_index[j]], ds.schema);
      require(lib == dist[i * n + j], "similarity mismatch at pair (" + std::to_string(i) + "," +
                                          std::to_string(j) + ")");
    }
  }
  // brute-force k-NN with the documented tie-break, then symmetrize
  std::set<std::pair<std::size_t, std::size_t>> oracle_edges;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double sa = 1.0 - dist[i * n + a] / max_dist;
      const double sb = 1.0 - dist[i * n + b] / max_dist;
      if (sa != sb) return sa > sb;
      return a < b;
    });
    for (std::size_t r = 0; r < 5; ++r) {
      oracle_edges.insert({std::min(i, order[r]), std::max(i, order[r])});
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> lib_edges;
  for (const auto& e : g.edges) lib_edges.insert({e.a, e.b});
  require(lib_edges == oracle_edges, "k-NN edge sets differ from the brute-force oracle");
  for (const auto& e : g.edges) {
    require(e.weight == 1.0 - dist[e.a * n + e.b] / max_dist, "edge weight mismatch");
  }
  require(g.spd == oracle_floyd_warshall(n, oracle_edges), "SPD differs from Floyd-Warshall");

  // static-path similarities on the static preset
  Dataset st = generate_synthetic(synthetic_static_preset(50), 77);
  auto st_graphs = build_population_graphs(st, 5, 50, 7);
  const PopulationGraph& sg = st_graphs[0];
  double max_cog = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      max_cog = std::max(max_cog, sim_cognitive(st.records[sg.dataset_index[i]],
                                                st.records[sg.dataset_index[j]], st.schema));
    }
  }
  std::vector<double> combined(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const PatientRecord& a = st.records[sg.dataset_index[i]];
      const PatientRecord& b = st.records[sg.dataset_index[j]];
      // direct evaluation of the three static component definitions
      double matches = 0.0;
      matches += a.d[0] == b.d[0] ? 1.0 : 0.0;  // sex
      matches += a.d[1] == b.d[1] ? 1.0 : 0.0;  // geno
      matches += std::abs(a.c[0] - b.c[0]) <= 2.0 ? 1.0 : 0.0;
      const double dem = matches / 3.0;
      double cog = 0.0;
      for (int f = 0; f < 4; ++f) cog += std::abs(double(a.d[2 + f] - b.d[2 + f])) / 10.0;
      double img_sum = 0.0;
      for (int f = 0; f < 5; ++f) img_sum += std::abs(a.c[1 + f] - b.c[1 + f]);
      const double img = 1.0 / (1.0 + std::exp(-img_sum));
      require(sim_demographics(a, b, st.schema) == dem, "demographic similarity mismatch");
      require(sim_cognitive(a, b, st.schema) == cog, "cognitive distance mismatch");
      require(sim_imaging(a, b, st.schema) == img, "imaging distance mismatch");
      const double s =
          (dem + (max_cog > 0 ? 1.0 - cog / max_cog : 1.0) + (1.0 - img)) / 3.0;
      combined[i * n + j] = combined[j * n + i] = s;
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> st_oracle;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) order.push_back(j);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (combined[i * n + a] != combined[i * n + b]) {
        return combined[i * n + a] > combined[i * n + b];
      }
      return a < b;
    });
    for (std::size_t r = 0; r < 5; ++r) {
      st_oracle.insert({std::min(i, order[r]), std::max(i, order[r])});
    }
  }
  std::set<std::pair<std::size_t, std::size_t>> st_edges;
  for (const auto& e : sg.edges) st_edges.insert({e.a, e.b});
  require(st_edges == st_oracle, "static-path k-NN edges differ from the oracle");
  require(sg.spd == oracle_floyd_warshall(n, st_oracle), "static-path SPD mismatch");

  const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  require(seconds < 10.0, "runtime " + fmt(seconds) + "s exceeds 10s");
  return "similarities, 5-NN edges and SPD match on both paths in " + fmt(seconds) + "s";
}

// ---------------------------------------------------------------------------
// 3. Masking invariants, 200 seeded trials per task
// ---------------------------------------------------------------------------

std::string criterion_masking() {
  SyntheticConfig cfg = mixed_config(30);
  cfg.timesteps = 12;
  cfg.measurements = 4;  // S = 4 + 1 + 2 = 7 ts features
  cfg.scores = 3;        // maskable statics: geno + 3 scores + 0 imaging
  Dataset ds = generate_synthetic(cfg, 404);
  interpolate_dataset(ds);
  const FeatureSchema& schema = ds.schema;
  const std::size_t S = schema.sd_count() + schema.sc_count();
  const std::size_t maskable_static = schema.sfm_maskable.size();
  std::vector<const PatientRecord*> nodes;
  for (const auto& r : ds.records) nodes.push_back(&r);
  std::vector<std::size_t> all_targets(nodes.size());
  std::iota(all_targets.begin(), all_targets.end(), 0);

  MaskSettings settings;  // 30% features, 100% six-hour blocks, 10% patients
  std::size_t violations = 0;
  std::string first_violation;
  auto violate = [&](const std::string& what) {
    ++violations;
    if (first_violation.empty()) first_violation = what;
  };

  Rng pick(99);
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    for (PretrainTask task : {PretrainTask::kSFM, PretrainTask::kTFM, PretrainTask::kBM,
                              PretrainTask::kTP, PretrainTask::kPM}) {
      MaskedBatch batch =
          build_masked_batch(nodes, schema, task, settings, all_targets, trial * 7 + 1);

      // masked-fraction bookkeeping
      if (task == PretrainTask::kSFM) {
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          std::size_t masked = 0;
          for (auto v : batch.keep[n].keep_d) masked += v == 0;
          for (auto v : batch.keep[n].keep_c) masked += v == 0;
          if (std::abs(double(masked) - 0.3 * double(maskable_static)) > 1.0) {
            violate("sfm count " + std::to_string(masked));
          }
        }
      } else if (task == PretrainTask::kTFM) {
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          std::size_t masked_features = 0;
          for (const auto& row : batch.keep[n].keep_td) {
            const bool all_masked =
                std::all_of(row.begin(), row.end(), [](std::uint8_t v) { return v == 0; });
            const bool none_masked =
                std::all_of(row.begin(), row.end(), [](std::uint8_t v) { return v == 1; });
            if (!all_masked && !none_masked) violate("tfm partial feature");
            masked_features += all_masked;
          }
          for (const auto& row : batch.keep[n].keep_tc) {
            const bool all_masked =
                std::all_of(row.begin(), row.end(), [](std::uint8_t v) { return v == 0; });
            const bool none_masked =
                std::all_of(row.begin(), row.end(), [](std::uint8_t v) { return v == 1; });
            if (!all_masked && !none_masked) violate("tfm partial feature");
            masked_features += all_masked;
          }
          if (std::abs(double(masked_features) - 0.3 * double(S)) > 1.0) {
            violate("tfm count " + std::to_string(masked_features));
          }
        }
      } else if (task == PretrainTask::kBM) {
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          auto check_block = [&](const std::vector<std::uint8_t>& row) {
            std::size_t first = row.size(), last = 0, count = 0;
            for (std::size_t t = 0; t < row.size(); ++t) {
              if (!row[t]) {
                first = std::min(first, t);
                last = t;
                ++count;
              }
            }
            const std::size_t expect = std::min<std::size_t>(6, schema.max_timesteps);
            if (count != expect || last - first + 1 != count) violate("bm block shape");
          };
          for (const auto& row : batch.keep[n].keep_td) check_block(row);
          for (const auto& row : batch.keep[n].keep_tc) check_block(row);
        }
      } else if (task == PretrainTask::kPM) {
        std::size_t masked_patients = 0;
        for (auto v : batch.is_target) masked_patients += v;
        if (std::abs(double(masked_patients) - 0.1 * double(nodes.size())) > 1.0) {
          violate("pm count " + std::to_string(masked_patients));
        }
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          if (batch.is_target[n]) {
            if (batch.records[n].d != nodes[n]->d || batch.records[n].c != nodes[n]->c) {
              violate("pm touched demographics");
            }
          }
        }
      } else if (task == PretrainTask::kTP) {
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          for (std::size_t f = 0; f < schema.sd_count(); ++f) {
            const bool treat = schema.is_treatment(schema.ts_discrete[f].name);
            for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
              if (static_cast<bool>(!batch.keep[n].keep_td[f][t]) != treat) {
                violate("tp mask shape");
              }
            }
          }
        }
      }

      // unmasked positions bit-identical
      for (std::size_t n = 0; n < nodes.size(); ++n) {
        const RecordMask& keep = batch.keep[n];
        for (std::size_t f = 0; f < schema.sd_count(); ++f) {
          for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
            if (keep.keep_td[f][t] && batch.records[n].t_d[f][t] != nodes[n]->t_d[f][t]) {
              violate("ts discrete changed while kept");
            }
          }
        }
        for (std::size_t f = 0; f < schema.sc_count(); ++f) {
          for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
            if (keep.keep_tc[f][t] && batch.records[n].t_c[f][t] != nodes[n]->t_c[f][t]) {
              violate("ts continuous changed while kept");
            }
          }
        }
        for (std::size_t f = 0; f < schema.d_count(); ++f) {
          if (keep.keep_d[f] && batch.records[n].d[f] != nodes[n]->d[f]) {
            violate("static changed while kept");
          }
        }
      }

      // loss invariant to perturbations outside masked-and-observed targets
      if (task == PretrainTask::kTFM || task == PretrainTask::kBM || task == PretrainTask::kPM) {
        const std::size_t tc_dim = schema.sc_count() * schema.max_timesteps;
        std::vector<double> tc(nodes.size() * tc_dim);
        for (double& v : tc) v = pick.normal();
        std::vector<double> td(nodes.size() * ts_discrete_head_dim(schema));
        for (double& v : td) v = pick.normal();
        std::map<std::string, Tensor> outs;
        const std::string prefix = pretrain_task_to_string(task);
        outs[prefix + ".tc"] = Tensor::from_values({nodes.size(), tc_dim}, tc);
        outs[prefix + ".td"] =
            Tensor::from_values({nodes.size(), ts_discrete_head_dim(schema)}, td);
        const double base = pretrain_loss(outs, batch, nodes, schema).item();

        // perturb every continuous prediction that is NOT masked-and-observed
        std::vector<double> tc2 = tc;
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          for (std::size_t f = 0; f < schema.sc_count(); ++f) {
            for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
              const bool valid = batch.is_target[n] && !batch.keep[n].keep_tc[f][t] &&
                                 nodes[n]->observed_c[f][t];
              if (!valid) {
                tc2[n * tc_dim + f * schema.max_timesteps + t] += 1000.0;
              }
            }
          }
        }
        outs[prefix + ".tc"] = Tensor::from_values({nodes.size(), tc_dim}, tc2);
        const double perturbed = pretrain_loss(outs, batch, nodes, schema).item();
        if (perturbed != base) violate("loss changed under out-of-target perturbation");
      }
    }
  }
  require(violations == 0,
          std::to_string(violations) + " violations, first: " + first_violation);
  return "0 violations over 200 trials x 5 tasks";
}

// ---------------------------------------------------------------------------
// 4. Permutation equivariance on 20 random graphs
// ---------------------------------------------------------------------------

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

std::string criterion_equivariance() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    SyntheticConfig cfg = mixed_config(12);
    cfg.timesteps = 4;
    Dataset ds = generate_synthetic(cfg, 1000 + trial);
    interpolate_dataset(ds);
    auto graphs = build_population_graphs(ds, 3, 12, trial);
    ModelConfig mc;
    mc.graphormer_layers = 2;
    mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
    mc.heads = 2;
    mc.dropout = 0.0;
    Model model(mc, ds.schema);
    ParamStore params = model.init_params(trial * 13 + 1);
    GraphContext ctx = build_graph_context(graphs[0], mc);
    std::vector<const PatientRecord*> nodes;
    for (std::size_t idx : graphs[0].dataset_index) nodes.push_back(&ds.records[idx]);
    Tensor base = model.encode(build_inputs(nodes, ds.schema), &ctx, params, {});

    std::vector<std::size_t> perm(nodes.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(trial + 5);
    rng.shuffle(perm);
    std::vector<const PatientRecord*> permuted;
    for (std::size_t i : perm) permuted.push_back(nodes[i]);
    GraphContext pctx = permute_context(ctx, mc, perm);
    Tensor out = model.encode(build_inputs(permuted, ds.schema), &pctx, params, {});

    const std::size_t width = model.node_width();
    for (std::size_t i = 0; i < perm.size(); ++i) {
      for (std::size_t c = 0; c < width; ++c) {
        worst = std::max(worst, std::abs(out.values()[i * width + c] -
                                         base.values()[perm[i] * width + c]));
      }
    }
  }
  require(worst < 1e-9, "max deviation " + fmt(worst));
  return "max |permuted - base| = " + fmt(worst) + " over 20 graphs";
}

// ---------------------------------------------------------------------------
// 5. Capacity: overfit 16 labeled patients
// ---------------------------------------------------------------------------

std::string criterion_capacity() {
  SyntheticConfig cfg = mixed_config(20);
  cfg.noise = 0.5;
  Dataset ds = generate_synthetic(cfg, 7);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 3, 20, 7);
  auto plans = make_folds(ds, "risk", 10, {1.0}, 7);  // train split = 16 patients
  require(plans[0].train_ids.size() == 16, "expected a 16-patient train split");

  ModelConfig mc = desk_model();
  mc.dropout = 0.0;
  RunData run{&ds, &graphs, mc};
  TrainConfig tc;
  tc.epochs = 500;
  tc.eval_every = 5;
  tc.patience = 100000;
  tc.lr = 3e-3;
  tc.seed = 11;
  tc.stop_at_train_accuracy = 0.995;
  FinetuneResult result = finetune(run, plans[0], "risk", tc, nullptr);
  require(result.max_train_accuracy >= 0.99,
          "train accuracy peaked at " + fmt(result.max_train_accuracy));
  return "reached " + fmt(result.max_train_accuracy * 100) + "% train accuracy";
}

// ---------------------------------------------------------------------------
// 6. Directional pre-training gain
// ---------------------------------------------------------------------------

std::string criterion_pretraining_gain() {
  SyntheticConfig cfg = mixed_config(600);
  cfg.noise = 2.5;
  cfg.missing_rate = 0.5;
  Dataset ds = generate_synthetic(cfg, 2026);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 5, 200, 2026);
  auto plans = make_folds(ds, "risk", 5, {0.01, 1.0}, 2026);

  GridConfig gc;
  gc.task = "risk";
  gc.inits = {"scratch", "mt"};
  gc.ratios = {0.01, 1.0};
  gc.folds = 5;
  gc.seeds = {1, 2, 3};
  gc.jobs = g_jobs;
  gc.pretrain_config = default_pretrain_config(PretrainTask::kMT);
  gc.pretrain_config.epochs = 40;
  gc.pretrain_config.eval_every = 5;
  gc.pretrain_config.patience = 30;
  gc.finetune_config.epochs = 80;
  gc.finetune_config.eval_every = 5;
  gc.finetune_config.patience = 40;
  gc.finetune_config.lr = 3e-4;
  gc.scratch_lr = 1e-3;

  RunData run{&ds, &graphs, desk_model()};
  GridResult result = run_experiment_grid(run, plans, gc, "");

  auto mean_auc = [&](const std::string& init, double ratio) {
    std::vector<double> values;
    for (const auto& cell : result.cells) {
      if (!cell.ok) throw Failure("cell failed: " + cell.error);
      if (cell.init == init && std::abs(cell.ratio - ratio) < 1e-9 && cell.auc) {
        values.push_back(*cell.auc * 100.0);
      }
    }
    require(values.size() == 15, "expected 15 cells per configuration");
    return aggregate(values).mean;
  };
  const double sc01 = mean_auc("scratch", 0.01);
  const double mt01 = mean_auc("mt", 0.01);
  const double sc100 = mean_auc("scratch", 1.0);
  const double mt100 = mean_auc("mt", 1.0);
  require(mt01 >= sc01 + 2.0, "1% labels: mt " + fmt(mt01) + " vs scratch " + fmt(sc01) +
                                  " (need +2.0)");
  require(mt100 >= sc100 - 1.0, "100% labels: mt " + fmt(mt100) + " vs scratch " + fmt(sc100) +
                                    " (need >= -1.0)");
  return "1%: scratch " + fmt(sc01) + " -> mt " + fmt(mt01) + " (gain " + fmt(mt01 - sc01) +
         "); 100%: " + fmt(sc100) + " -> " + fmt(mt100);
}

// ---------------------------------------------------------------------------
// 7. Linear-backbone ablation direction
// ---------------------------------------------------------------------------

std::string criterion_linear_ablation() {
  SyntheticConfig cfg = mixed_config(400);
  cfg.noise = 0.3;
  cfg.relational_task = true;
  cfg.relational_k = 15;
  Dataset ds = generate_synthetic(cfg, 777);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 5, 400, 777);
  auto plans = make_folds(ds, "cohort_risk", 5, {1.0}, 777);

  struct Item {
    std::uint64_t seed;
    int fold;
    Backbone backbone;
  };
  std::vector<Item> items;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (int fold : {0, 1}) {
      items.push_back({seed, fold, Backbone::kGraphormer});
      items.push_back({seed, fold, Backbone::kLinear});
    }
  }
  std::vector<double> aucs(items.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= items.size()) return;
      ModelConfig mc = desk_model();
      mc.backbone = items[i].backbone;
      RunData run{&ds, &graphs, mc};
      TrainConfig tc;
      tc.epochs = 150;
      tc.eval_every = 5;
      tc.patience = 60;
      tc.lr = 1e-3;
      tc.seed = derive_seed(items[i].seed, "ablation");
      FinetuneResult r = finetune(run, plans[static_cast<std::size_t>(items[i].fold)],
                                  "cohort_risk", tc, nullptr);
      aucs[i] = r.test.auc.value_or(0.0) * 100.0;
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < std::min<std::size_t>(g_jobs, items.size()); ++t) {
    threads.emplace_back(worker);
  }
  for (auto& t : threads) t.join();

  double graphormer = 0.0, linear = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    (items[i].backbone == Backbone::kGraphormer ? graphormer : linear) +=
        aucs[i] / (static_cast<double>(items.size()) / 2.0);
  }
  require(graphormer >= linear + 2.0,
          "graphormer " + fmt(graphormer) + " vs linear " + fmt(linear) + " (need +2.0)");
  return "graphormer " + fmt(graphormer) + " vs linear " + fmt(linear) + " AUC (3 seeds)";
}

// ---------------------------------------------------------------------------
// 8. Metric fixtures
// ---------------------------------------------------------------------------

std::string criterion_metric_fixtures() {
  // AUC fixtures
  require(*binary_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0, "perfect AUC != 1");
  require(*binary_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}) == 0.5, "tied AUC != 0.5");

  // accuracy + macro F1 on a hand-built confusion
  std::vector<double> scores = {0.8, 0.1, 0.1, 0.7, 0.2, 0.1, 0.2, 0.7, 0.1,
                                0.6, 0.3, 0.1, 0.1, 0.2, 0.7, 0.2, 0.2, 0.6};
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  EvalMetrics m = evaluate(scores, labels, TaskSpec{"toy", 3});
  require(std::abs(m.accuracy - 5.0 / 6.0) < 1e-12, "accuracy fixture");
  require(std::abs(m.macro_f1 - (0.8 + 2.0 / 3.0 + 1.0) / 3.0) < 1e-12, "macro F1 fixture");

  // margin accuracy with the clinically-motivated margins
  FeatureSchema schema;
  schema.static_discrete = {{"CDRSB", 19}, {"ADAS11", 107}, {"MMSE", 11},
                           {"RAVLT_immediate", 68}};
  schema.ordinal_margins = {{"CDRSB", 4}, {"ADAS11", 15}, {"MMSE", 2}, {"RAVLT_immediate", 5}};
  schema.max_timesteps = 1;
  schema.validate();
  PatientRecord r;
  r.id = "p0";
  r.d = {10, 50, 8, 30};
  std::vector<const PatientRecord*> nodes = {&r};
  MaskedBatch batch;
  batch.task = PretrainTask::kSFM;
  batch.records = {r};
  batch.keep = {RecordMask::all_kept(schema)};
  batch.keep[0].keep_d = {0, 0, 0, 0};
  batch.is_target = {1};
  const std::size_t dim = 19 + 107 + 11 + 68;
  auto logits_for = [&](int cdrsb, int adas, int mmse, int ravlt) {
    std::vector<double> v(dim, 0.0);
    v[cdrsb] = 10.0;
    v[19 + adas] = 10.0;
    v[19 + 107 + mmse] = 10.0;
    v[19 + 107 + 11 + ravlt] = 10.0;
    return Tensor::from_values({1, dim}, v);
  };
  std::map<std::string, Tensor> outs;
  // all four at their margin boundary: counted correct
  outs["sfm.sd"] = logits_for(10 + 4, 50 + 15, 8 - 2, 30 + 5);
  PretrainMetrics pm = pretrain_metrics(outs, batch, nodes, schema);
  require(pm.margin_count == 4, "margin fixture count");
  require(pm.margin_accuracy == 1.0, "within-margin predictions must count as correct");
  // all four one past the margin: counted wrong
  outs["sfm.sd"] = logits_for(10 + 5, 50 + 16, 8 - 3, 30 + 6);
  pm = pretrain_metrics(outs, batch, nodes, schema);
  require(pm.margin_accuracy == 0.0, "outside-margin predictions must count as wrong");
  return "AUC, accuracy, macro-F1 and margin fixtures all exact";
}

// ---------------------------------------------------------------------------
// 9. Reproducibility
// ---------------------------------------------------------------------------

std::string criterion_reproducibility() {
  SyntheticConfig cfg = mixed_config(40);
  Dataset ds = generate_synthetic(cfg, 5);
  interpolate_dataset(ds);
  auto graphs = build_population_graphs(ds, 3, 40, 5);
  auto plans = make_folds(ds, "risk", 3, {1.0}, 5);
  ModelConfig mc;
  mc.graphormer_layers = 1;
  mc.d_hidden = mc.c_hidden = mc.sd_hidden = mc.sc_hidden = 8;
  mc.heads = 2;
  mc.temporal_layers = 1;
  RunData run{&ds, &graphs, mc};

  GridConfig gc;
  gc.task = "risk";
  gc.inits = {"scratch", "tfm"};
  gc.ratios = {1.0};
  gc.folds = 2;
  gc.seeds = {1};
  gc.jobs = 2;
  gc.pretrain_config.epochs = 3;
  gc.pretrain_config.eval_every = 1;
  gc.finetune_config.epochs = 3;
  gc.finetune_config.eval_every = 1;

  const std::string dir_a = "/tmp/popgraph_accept_grid_a";
  const std::string dir_b = "/tmp/popgraph_accept_grid_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  run_experiment_grid(run, plans, gc, dir_a);
  run_experiment_grid(run, plans, gc, dir_b);
  const std::string metrics_a = read_file(dir_a + "/metrics.json");
  require(!metrics_a.empty(), "metrics file missing");
  require(metrics_a == read_file(dir_b + "/metrics.json"),
          "metrics files differ between identical runs");

  // checkpoint byte-stability: save -> load -> save
  const std::string ckpt_a = dir_a + "/checkpoints/pretrain_tfm_s1_f0.ckpt";
  auto [meta, params] = load_checkpoint(ckpt_a);
  const std::string ckpt_b = dir_b + "/resaved.ckpt";
  save_checkpoint(ckpt_b, meta, params);
  require(read_file(ckpt_a) == read_file(ckpt_b), "checkpoint bytes changed across reload");
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  return "grid metrics byte-identical; checkpoints byte-stable";
}

// ---------------------------------------------------------------------------
// 10. Transfer path across schemas
// ---------------------------------------------------------------------------

std::string criterion_transfer() {
  SyntheticConfig cfg_a = mixed_config(40);
  cfg_a.measurements = 2;
  Dataset ds_a = generate_synthetic(cfg_a, 21);
  interpolate_dataset(ds_a);
  auto graphs_a = build_population_graphs(ds_a, 3, 40, 21);
  auto plans_a = make_folds(ds_a, "risk", 3, {1.0}, 21);
  ModelConfig mc;
  mc.graphormer_layers = 2;
  mc.d_hidden = mc.c_hidden = 8;
  mc.sd_hidden = mc.sc_hidden = 16;
  mc.heads = 2;
  RunData run_a{&ds_a, &graphs_a, mc};
  TrainConfig pc = default_pretrain_config(PretrainTask::kTFM);
  pc.epochs = 5;
  pc.eval_every = 1;
  pc.seed = 3;
  PretrainResult pre = pretrain(run_a, plans_a[0], PretrainTask::kTFM, pc);

  // schema B differs in the continuous measurement count
  SyntheticConfig cfg_b = mixed_config(40);
  cfg_b.measurements = 3;
  Dataset ds_b = generate_synthetic(cfg_b, 22);
  interpolate_dataset(ds_b);
  require(schema_fingerprint(ds_b.schema) != schema_fingerprint(ds_a.schema),
          "schemas unexpectedly identical");
  Model target(mc, ds_b.schema);
  ParamStore transferred = transfer_init(pre.params, target, 9);

  std::size_t backbone_params = 0;
  for (const auto& [name, tensor] : transferred) {
    if (!Model::is_backbone_param(name)) continue;
    ++backbone_params;
    const Tensor& src = pre.params.at(name);
    require(src.shape() == tensor.shape(), "backbone shape changed in transfer");
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      require(tensor.values()[i] == src.values()[i],
              "backbone parameter '" + name + "' not byte-equal");
    }
  }
  require(backbone_params > 0, "no backbone parameters were transferred");
  require(transferred.at("embed.tc.in.w").shape() != pre.params.at("embed.tc.in.w").shape(),
          "input encoder was not reinitialized");

  auto graphs_b = build_population_graphs(ds_b, 3, 40, 22);
  auto plans_b = make_folds(ds_b, "risk", 3, {1.0}, 22);
  RunData run_b{&ds_b, &graphs_b, mc};
  TrainConfig fc;
  fc.epochs = 5;
  fc.eval_every = 1;
  fc.lr = 1e-3;
  fc.seed = 7;
  FinetuneResult result = finetune(run_b, plans_b[0], "risk", fc, &transferred);
  require(result.history.size() >= 1, "fine-tuning on the target schema did not run");
  return "backbone byte-equal, encoders fresh, fine-tuning completed (test acc " +
         fmt(result.test.accuracy) + ")";
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg.rfind("--only=", 0) == 0) only = std::stoi(arg.substr(7));
    if (arg.rfind("--jobs=", 0) == 0) g_jobs = std::stoul(arg.substr(7));
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", criterion_gradients},
      {2, "graph oracle equivalence", criterion_graph_oracle},
      {3, "masking invariant suite", criterion_masking},
      {4, "permutation equivariance", criterion_equivariance},
      {5, "capacity check", criterion_capacity},
      {6, "directional pre-training gain", criterion_pretraining_gain},
      {7, "linear-backbone ablation direction", criterion_linear_ablation},
      {8, "metric unit fixtures", criterion_metric_fixtures},
      {9, "reproducibility", criterion_reproducibility},
      {10, "transfer path", criterion_transfer},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    if (only != 0 && criterion.id != only) continue;
    const auto t0 = Clock::now();
    try {
      const std::string detail = criterion.run();
      const double s = std::chrono::duration<double>(Clock::now() - t0).count();
      std::printf("[%2d] PASS %-36s %s (%.1fs)\n", criterion.id, criterion.name, detail.c_str(),
                  s);
    } catch (const std::exception& e) {
      const double s = std::chrono::duration<double>(Clock::now() - t0).count();
      std::printf("[%2d] FAIL %-36s %s (%.1fs)\n", criterion.id, criterion.name, e.what(), s);
      ++failures;
    }
    std::fflush(stdout);
  }
  if (failures) std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
