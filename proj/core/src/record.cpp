#include "popgraph/record.hpp"

#include <stdexcept>

namespace popgraph {

namespace {

[[noreturn]] void reject(const std::string& id, const std::string& detail) {
  throw std::invalid_argument("record '" + id + "': " + detail);
}

}  // namespace

void validate_record(const PatientRecord& record, const FeatureSchema& schema) {
  const std::string& id = record.id;
  if (id.empty()) throw std::invalid_argument("record with empty id");
  if (record.d.size() != schema.d_count()) {
    reject(id, "expected " + std::to_string(schema.d_count()) + " static discrete values, got " +
                   std::to_string(record.d.size()));
  }
  for (std::size_t i = 0; i < record.d.size(); ++i) {
    const auto& f = schema.static_discrete[i];
    if (record.d[i] < 0 || record.d[i] >= f.cardinality) {
      reject(id, "field '" + f.name + "' value " + std::to_string(record.d[i]) +
                     " outside [0, " + std::to_string(f.cardinality) + ")");
    }
  }
  if (record.c.size() != schema.c_count()) {
    reject(id, "expected " + std::to_string(schema.c_count()) + " static continuous values");
  }
  auto check_ts = [&](const auto& series, const auto& observed, std::size_t count,
                      const char* kind) {
    if (series.size() != count || observed.size() != count) {
      reject(id, std::string("expected ") + std::to_string(count) + " " + kind + " series");
    }
    for (std::size_t f = 0; f < count; ++f) {
      if (series[f].size() != schema.max_timesteps || observed[f].size() != schema.max_timesteps) {
        reject(id, std::string(kind) + " series " + std::to_string(f) + " length != " +
                       std::to_string(schema.max_timesteps));
      }
    }
  };
  check_ts(record.t_d, record.observed_d, schema.sd_count(), "discrete ts");
  check_ts(record.t_c, record.observed_c, schema.sc_count(), "continuous ts");
  for (std::size_t f = 0; f < schema.sd_count(); ++f) {
    const auto& feature = schema.ts_discrete[f];
    for (std::size_t t = 0; t < schema.max_timesteps; ++t) {
      if (!record.observed_d[f][t]) continue;
      const int v = record.t_d[f][t];
      if (v < 0 || v >= feature.cardinality) {
        reject(id, "field '" + feature.name + "' value " + std::to_string(v) + " at step " +
                       std::to_string(t) + " outside [0, " + std::to_string(feature.cardinality) +
                       ")");
      }
    }
  }
  for (const auto& [task, value] : record.labels) {
    const TaskSpec* spec = schema.find_task(task);
    if (!spec) reject(id, "label for unknown task '" + task + "'");
    if (value < 0 || value >= spec->num_classes) {
      reject(id, "label " + std::to_string(value) + " for task '" + task + "' outside [0, " +
                     std::to_string(spec->num_classes) + ")");
    }
  }
}

}  // namespace popgraph
