#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "popgraph/schema.hpp"

namespace popgraph {

/// One patient's four feature groups plus observation masks and labels.
/// Time-series matrices are feature-major: t_c[f][t].
struct PatientRecord {
  std::string id;
  std::vector<int> d;
  std::vector<double> c;
  std::vector<std::vector<int>> t_d;
  std::vector<std::vector<double>> t_c;
  std::vector<std::vector<std::uint8_t>> observed_d;
  std::vector<std::vector<std::uint8_t>> observed_c;
  std::map<std::string, int> labels;

  bool has_label(const std::string& task) const { return labels.count(task) > 0; }
  int label(const std::string& task) const { return labels.at(task); }
};

/// Validates one record against the schema; throws with the record id and the
/// offending field on violation.
void validate_record(const PatientRecord& record, const FeatureSchema& schema);

}  // namespace popgraph
