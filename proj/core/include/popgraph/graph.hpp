#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "popgraph/dataset.hpp"
#include "popgraph/similarity.hpp"

namespace popgraph {

/// Hop count recorded for unreachable pairs. Consumers bucket distances as
/// min(spd, max_spd) for reachable pairs and max_spd + 1 for this sentinel.
inline constexpr int kUnreachable = -1;
inline constexpr int kDefaultMaxSpd = 20;

struct GraphEdge {
  std::size_t a = 0;  // a < b
  std::size_t b = 0;
  double weight = 0.0;
};

/// One undirected k-NN sub-graph over <= subgraph_size patients. Node order
/// follows the dataset order of its members. Edge weights are combined
/// similarities; structural tables are filled by compute_structural.
struct PopulationGraph {
  std::vector<std::string> node_ids;
  std::vector<std::size_t> dataset_index;              // node -> record index
  std::vector<std::vector<std::pair<std::size_t, double>>> adjacency;  // sorted by neighbor
  std::vector<GraphEdge> edges;                        // a < b, sorted
  std::vector<std::size_t> degrees;
  std::vector<int> spd;  // row-major hop counts, kUnreachable sentinel

  std::size_t size() const { return node_ids.size(); }
  int spd_at(std::size_t i, std::size_t j) const { return spd[i * size() + j]; }
  double edge_weight(std::size_t i, std::size_t j) const;
  bool has_edge(std::size_t i, std::size_t j) const;
};

/// Randomly partitions the dataset into balanced groups of at most
/// subgraph_size patients (train/val/test mixed by the shuffle), builds a
/// k-NN graph per group with symmetrized edges weighted by combined
/// similarity, and fills the structural tables. Ties in the k-NN ranking
/// break toward the smaller node index.
std::vector<PopulationGraph> build_population_graphs(const Dataset& dataset, std::size_t k,
                                                     std::size_t subgraph_size,
                                                     std::uint64_t seed);

/// Degrees, BFS hop distances for all pairs and the derived tables. Called by
/// build_population_graphs; exposed for graphs assembled by hand.
void compute_structural(PopulationGraph& graph);

/// Edge features along one shortest path from i to j, tie-broken toward the
/// lexicographically smallest node sequence. Empty for i == j or unreachable.
std::vector<double> shortest_path_edge_features(const PopulationGraph& graph, std::size_t i,
                                                std::size_t j);

/// Dense [N*N, max_spd] matrix whose row (i, j) holds the edge features along
/// the chosen shortest path divided by the path length, zero-padded; rows for
/// self and unreachable pairs are zero. Paths longer than max_spd are
/// truncated to their first max_spd edges.
std::vector<double> path_feature_matrix(const PopulationGraph& graph, std::size_t max_spd);

std::vector<PopulationGraph> load_graphs(const std::string& path);
void save_graphs(const std::vector<PopulationGraph>& graphs, const std::string& path);

}  // namespace popgraph
