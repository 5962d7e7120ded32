#pragma once

#include <json.hpp>

#include "popgraph/model_config.hpp"

namespace popgraph {

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["graphormer_layers"] = c.graphormer_layers;
  j["d_hidden"] = c.d_hidden;
  j["c_hidden"] = c.c_hidden;
  j["sd_hidden"] = c.sd_hidden;
  j["sc_hidden"] = c.sc_hidden;
  j["heads"] = c.heads;
  j["temporal_layers"] = c.temporal_layers;
  j["ffn_multiplier"] = c.ffn_multiplier;
  j["dropout"] = c.dropout;
  j["backbone"] = backbone_to_string(c.backbone);
  j["max_spd"] = c.max_spd;
  j["spatial_locality"] = c.spatial_locality;
  j["degree_cap"] = c.degree_cap;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.graphormer_layers = j.value("graphormer_layers", c.graphormer_layers);
  c.d_hidden = j.value("d_hidden", c.d_hidden);
  c.c_hidden = j.value("c_hidden", c.c_hidden);
  c.sd_hidden = j.value("sd_hidden", c.sd_hidden);
  c.sc_hidden = j.value("sc_hidden", c.sc_hidden);
  c.heads = j.value("heads", c.heads);
  c.temporal_layers = j.value("temporal_layers", c.temporal_layers);
  c.ffn_multiplier = j.value("ffn_multiplier", c.ffn_multiplier);
  c.dropout = j.value("dropout", c.dropout);
  c.backbone = backbone_from_string(j.value("backbone", backbone_to_string(c.backbone)));
  c.max_spd = j.value("max_spd", c.max_spd);
  c.spatial_locality = j.value("spatial_locality", c.spatial_locality);
  c.degree_cap = j.value("degree_cap", c.degree_cap);
  return c;
}

}  // namespace popgraph
