#pragma once

#include <cstddef>
#include <string>

#include "popgraph/graph.hpp"
#include "popgraph/schema.hpp"

namespace popgraph {

enum class Backbone { kGraphormer, kLinear };

struct ModelConfig {
  std::size_t graphormer_layers = 4;
  std::size_t d_hidden = 32;   // static discrete embedding width
  std::size_t c_hidden = 32;   // static continuous embedding width
  std::size_t sd_hidden = 64;  // discrete ts embedding width
  std::size_t sc_hidden = 64;  // continuous ts embedding width
  std::size_t heads = 4;
  std::size_t temporal_layers = 2;
  std::size_t ffn_multiplier = 2;
  double dropout = 0.1;
  Backbone backbone = Backbone::kGraphormer;
  std::size_t max_spd = kDefaultMaxSpd;
  std::size_t degree_cap = 32;
  /// Locality prior on the spatial attention bias: bucket b starts at
  /// -spatial_locality * b (plus the usual table noise), so early training
  /// attends to nearby nodes instead of diluting over the whole sub-graph.
  /// The bias stays learnable; 0 disables the prior.
  double spatial_locality = 1.0;

  /// Node embedding width: the sum of the widths of the feature groups the
  /// schema actually has.
  std::size_t node_width(const FeatureSchema& schema) const;
  void validate(const FeatureSchema& schema) const;
};

Backbone backbone_from_string(const std::string& name);
std::string backbone_to_string(Backbone backbone);

}  // namespace popgraph
