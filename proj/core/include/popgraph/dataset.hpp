#pragma once

#include <map>
#include <string>
#include <vector>

#include "popgraph/record.hpp"
#include "popgraph/schema.hpp"

namespace popgraph {

struct Dataset {
  FeatureSchema schema;
  std::vector<PatientRecord> records;

  const PatientRecord& by_id(const std::string& id) const;
  std::vector<std::string> ids() const;
};

// Structured-text IO. Schemas are single JSON documents; records are one JSON
// object per line with explicit nulls at unobserved time-series positions.
FeatureSchema load_schema(const std::string& path);
void save_schema(const FeatureSchema& schema, const std::string& path);
std::vector<PatientRecord> load_records(const std::string& path, const FeatureSchema& schema);
void save_records(const std::vector<PatientRecord>& records, const FeatureSchema& schema,
                  const std::string& path);
Dataset load_dataset(const std::string& schema_path, const std::string& records_path);

/// Fills continuous gaps by linear interpolation between the nearest observed
/// neighbors, extends leading/trailing gaps with the nearest observed value,
/// and fills fully-unobserved features with zero. Discrete series use the
/// nearest observed value (earlier step wins ties). Observed flags are kept.
PatientRecord interpolate_missing(const PatientRecord& record);
void interpolate_dataset(Dataset& dataset);

struct FeatureRange {
  double min = 0.0;
  double max = 0.0;
};

/// Min/max per continuous feature (static and time-series), computed over the
/// training split only; time-series stats cover observed positions.
struct NormStats {
  std::map<std::string, FeatureRange> features;
};

NormStats compute_norm_stats(const Dataset& dataset, const std::vector<std::string>& train_ids);
/// (x - min) / (max - min); constant features map to 0, out-of-range values
/// are not clamped.
double normalize_value(const NormStats& stats, const std::string& feature, double value);
double denormalize_value(const NormStats& stats, const std::string& feature, double value);
PatientRecord normalize_record(const PatientRecord& record, const FeatureSchema& schema,
                               const NormStats& stats);
Dataset normalize_dataset(const Dataset& dataset, const NormStats& stats);

NormStats load_norm_stats(const std::string& path);
void save_norm_stats(const NormStats& stats, const std::string& path);

}  // namespace popgraph
