#include "popgraph/model_config.hpp"

#include <stdexcept>

namespace popgraph {

std::size_t ModelConfig::node_width(const FeatureSchema& schema) const {
  std::size_t width = 0;
  if (schema.d_count() > 0) width += d_hidden;
  if (schema.c_count() > 0) width += c_hidden;
  if (schema.sd_count() > 0) width += sd_hidden;
  if (schema.sc_count() > 0) width += sc_hidden;
  return width;
}

void ModelConfig::validate(const FeatureSchema& schema) const {
  if (heads == 0) throw std::invalid_argument("model config: heads must be > 0");
  const std::size_t width = node_width(schema);
  if (width == 0) throw std::invalid_argument("model config: schema has no feature groups");
  if (width % heads != 0) {
    throw std::invalid_argument("model config: node width " + std::to_string(width) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (schema.sd_count() > 0 && sd_hidden % heads != 0) {
    throw std::invalid_argument("model config: sd_hidden not divisible by heads");
  }
  if (schema.sc_count() > 0 && sc_hidden % heads != 0) {
    throw std::invalid_argument("model config: sc_hidden not divisible by heads");
  }
  if (backbone == Backbone::kGraphormer && graphormer_layers == 0) {
    throw std::invalid_argument("model config: graphormer backbone needs >= 1 layer");
  }
  if (schema.has_ts() && temporal_layers == 0) {
    throw std::invalid_argument("model config: time-series features need >= 1 temporal layer");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("model config: dropout outside [0, 1)");
  }
}

Backbone backbone_from_string(const std::string& name) {
  if (name == "graphormer") return Backbone::kGraphormer;
  if (name == "linear") return Backbone::kLinear;
  throw std::invalid_argument("unknown backbone '" + name + "' (graphormer|linear)");
}

std::string backbone_to_string(Backbone backbone) {
  return backbone == Backbone::kGraphormer ? "graphormer" : "linear";
}

}  // namespace popgraph
