#include "popgraph/graph.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "popgraph/rng.hpp"

namespace popgraph {

using nlohmann::json;

namespace {
constexpr const char* kGraphFormat = "popgraph.graphs/1";
}

double PopulationGraph::edge_weight(std::size_t i, std::size_t j) const {
  for (const auto& [n, w] : adjacency[i]) {
    if (n == j) return w;
  }
  throw std::out_of_range("no edge between nodes " + std::to_string(i) + " and " +
                          std::to_string(j));
}

bool PopulationGraph::has_edge(std::size_t i, std::size_t j) const {
  for (const auto& [n, _] : adjacency[i]) {
    if (n == j) return true;
  }
  return false;
}

namespace {

PopulationGraph build_group_graph(const Dataset& dataset, const std::vector<std::size_t>& members,
                                  std::size_t k) {
  const std::size_t m = members.size();
  if (k >= m) {
    throw std::invalid_argument("build_population_graphs: k=" + std::to_string(k) +
                                " requires groups larger than k, got " + std::to_string(m));
  }
  PopulationGraph graph;
  graph.dataset_index = members;
  graph.node_ids.reserve(m);
  for (std::size_t idx : members) graph.node_ids.push_back(dataset.records[idx].id);

  const FeatureSchema& schema = dataset.schema;
  const bool use_meas = !schema.graph_features.empty();
  std::vector<std::vector<FeatureDescriptor>> descriptors;
  if (use_meas) {
    descriptors.reserve(m);
    for (std::size_t idx : members) {
      descriptors.push_back(record_descriptors(dataset.records[idx], schema));
    }
  }

  // Components for all pairs, then group-level normalizers, then combined.
  std::vector<SimilarityBreakdown> pair_parts(m * m);
  SimilarityNormalizers norms;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      SimilarityBreakdown parts = similarity_breakdown(dataset.records[members[i]],
                                                       dataset.records[members[j]], schema);
      if (use_meas) parts.sim_meas = sim_measurements(descriptors[i], descriptors[j]);
      if (parts.sim_meas) norms.max_meas = std::max(norms.max_meas, *parts.sim_meas);
      if (parts.s_cog) norms.max_cog = std::max(norms.max_cog, *parts.s_cog);
      pair_parts[i * m + j] = parts;
    }
  }
  std::vector<double> score(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      const double s = combined_similarity(pair_parts[i * m + j], norms);
      score[i * m + j] = s;
      score[j * m + i] = s;
    }
  }

  // Top-k per node, ties toward the smaller index; union over directions.
  std::vector<std::vector<std::pair<std::size_t, double>>> adjacency(m);
  auto add_edge = [&adjacency](std::size_t a, std::size_t b, double w) {
    for (const auto& [n, _] : adjacency[a]) {
      if (n == b) return;
    }
    adjacency[a].emplace_back(b, w);
    adjacency[b].emplace_back(a, w);
  };
  std::vector<std::size_t> candidates(m);
  for (std::size_t i = 0; i < m; ++i) {
    candidates.clear();
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i) candidates.push_back(j);
    }
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(k),
                      candidates.end(), [&](std::size_t a, std::size_t b) {
                        const double sa = score[i * m + a], sb = score[i * m + b];
                        if (sa != sb) return sa > sb;
                        return a < b;
                      });
    for (std::size_t r = 0; r < k; ++r) add_edge(i, candidates[r], score[i * m + candidates[r]]);
  }
  for (auto& list : adjacency) std::sort(list.begin(), list.end());
  graph.adjacency = std::move(adjacency);
  for (std::size_t i = 0; i < m; ++i) {
    for (const auto& [j, w] : graph.adjacency[i]) {
      if (i < j) graph.edges.push_back({i, j, w});
    }
  }
  compute_structural(graph);
  return graph;
}

}  // namespace

std::vector<PopulationGraph> build_population_graphs(const Dataset& dataset, std::size_t k,
                                                     std::size_t subgraph_size,
                                                     std::uint64_t seed) {
  const std::size_t n = dataset.records.size();
  if (n == 0) throw std::invalid_argument("build_population_graphs: empty dataset");
  if (subgraph_size == 0) throw std::invalid_argument("build_population_graphs: zero group size");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "subgraphs"));
  rng.shuffle(order);

  const std::size_t groups = (n + subgraph_size - 1) / subgraph_size;
  std::vector<PopulationGraph> out;
  out.reserve(groups);
  std::size_t offset = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t remaining = n - offset;
    const std::size_t take = remaining / (groups - g) + (remaining % (groups - g) ? 1 : 0);
    std::vector<std::size_t> members(order.begin() + static_cast<long>(offset),
                                     order.begin() + static_cast<long>(offset + take));
    std::sort(members.begin(), members.end());
    out.push_back(build_group_graph(dataset, members, k));
    offset += take;
  }
  return out;
}

void compute_structural(PopulationGraph& graph) {
  const std::size_t n = graph.size();
  graph.degrees.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) graph.degrees[i] = graph.adjacency[i].size();
  graph.spd.assign(n * n, kUnreachable);
  std::deque<std::size_t> queue;
  for (std::size_t src = 0; src < n; ++src) {
    int* dist = graph.spd.data() + src * n;
    dist[src] = 0;
    queue.clear();
    queue.push_back(src);
    while (!queue.empty()) {
      const std::size_t u = queue.front();
      queue.pop_front();
      for (const auto& [v, _] : graph.adjacency[u]) {
        if (dist[v] == kUnreachable) {
          dist[v] = dist[u] + 1;
          queue.push_back(v);
        }
      }
    }
  }
}

std::vector<double> shortest_path_edge_features(const PopulationGraph& graph, std::size_t i,
                                                std::size_t j) {
  std::vector<double> features;
  const int dist = graph.spd_at(i, j);
  if (dist <= 0) return features;
  // Greedy construction of the lexicographically smallest node sequence:
  // from the current node, step to the smallest neighbor that still lies on
  // a shortest path to j (adjacency lists are sorted by neighbor index).
  std::size_t current = i;
  int remaining = dist;
  features.reserve(static_cast<std::size_t>(dist));
  while (remaining > 0) {
    for (const auto& [next, weight] : graph.adjacency[current]) {
      if (graph.spd_at(next, j) == remaining - 1) {
        features.push_back(weight);
        current = next;
        break;
      }
    }
    --remaining;
  }
  return features;
}

std::vector<double> path_feature_matrix(const PopulationGraph& graph, std::size_t max_spd) {
  const std::size_t n = graph.size();
  std::vector<double> out(n * n * max_spd, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || graph.spd_at(i, j) <= 0) continue;
      const std::vector<double> feats = shortest_path_edge_features(graph, i, j);
      const std::size_t len = std::min(feats.size(), max_spd);
      double* row = out.data() + (i * n + j) * max_spd;
      for (std::size_t p = 0; p < len; ++p) {
        row[p] = feats[p] / static_cast<double>(feats.size());
      }
    }
  }
  return out;
}

void save_graphs(const std::vector<PopulationGraph>& graphs, const std::string& path) {
  json doc;
  doc["format"] = kGraphFormat;
  json list = json::array();
  for (const auto& g : graphs) {
    json item;
    item["nodes"] = g.node_ids;
    item["dataset_index"] = g.dataset_index;
    json edges = json::array();
    for (const auto& e : g.edges) edges.push_back({e.a, e.b, e.weight});
    item["edges"] = edges;
    item["degrees"] = g.degrees;
    json spd_rows = json::array();
    for (std::size_t i = 0; i < g.size(); ++i) {
      json row = json::array();
      for (std::size_t j = 0; j < g.size(); ++j) row.push_back(g.spd_at(i, j));
      spd_rows.push_back(std::move(row));
    }
    item["spd"] = spd_rows;
    list.push_back(std::move(item));
  }
  doc["graphs"] = list;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << doc.dump() << '\n';
}

std::vector<PopulationGraph> load_graphs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  json doc = json::parse(in);
  if (doc.value("format", "") != kGraphFormat) {
    throw std::invalid_argument("graph file '" + path + "' has unsupported format");
  }
  std::vector<PopulationGraph> graphs;
  for (const auto& item : doc.at("graphs")) {
    PopulationGraph g;
    g.node_ids = item.at("nodes").get<std::vector<std::string>>();
    g.dataset_index = item.at("dataset_index").get<std::vector<std::size_t>>();
    g.adjacency.assign(g.node_ids.size(), {});
    for (const auto& e : item.at("edges")) {
      GraphEdge edge{e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(),
                     e.at(2).get<double>()};
      g.edges.push_back(edge);
      g.adjacency[edge.a].emplace_back(edge.b, edge.weight);
      g.adjacency[edge.b].emplace_back(edge.a, edge.weight);
    }
    for (auto& list : g.adjacency) std::sort(list.begin(), list.end());
    compute_structural(g);
    graphs.push_back(std::move(g));
  }
  return graphs;
}

}  // namespace popgraph
