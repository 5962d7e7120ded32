#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "popgraph/model_config.hpp"
#include "popgraph/param_store.hpp"
#include "popgraph/schema.hpp"

namespace popgraph {

/// Self-describing binary container: a JSON header (format version, model
/// config, provenance) followed by every parameter as raw little-endian f64.
/// save -> load -> save is byte-stable and parameters round-trip bit-exactly.
struct CheckpointMeta {
  ModelConfig model_config;
  std::string phase;  // "pretrain", "finetune", ...
  std::string task;
  std::int64_t steps = 0;
  std::uint64_t schema_fingerprint = 0;
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params);
std::pair<CheckpointMeta, ParamStore> load_checkpoint(const std::string& path);

std::uint64_t schema_fingerprint(const FeatureSchema& schema);

}  // namespace popgraph
