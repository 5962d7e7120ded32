#pragma once

#include <optional>
#include <vector>

#include "popgraph/record.hpp"
#include "popgraph/schema.hpp"

namespace popgraph {

/// Summary of one continuous time-series feature over its observed values;
/// all-zero when the feature was never observed.
struct FeatureDescriptor {
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
};

FeatureDescriptor compute_descriptor(const std::vector<double>& values,
                                     const std::vector<std::uint8_t>& observed);

/// Descriptors for the schema's graph features, in graph_features order.
std::vector<FeatureDescriptor> record_descriptors(const PatientRecord& record,
                                                  const FeatureSchema& schema);

/// Mean over graph features of the L2 norm of descriptor differences.
/// Lower = more similar.
double sim_measurements(const PatientRecord& a, const PatientRecord& b,
                        const FeatureSchema& schema);
double sim_measurements(const std::vector<FeatureDescriptor>& a,
                        const std::vector<FeatureDescriptor>& b);

/// Fraction of matching designated demographics; the age-like feature counts
/// as matching within the configured tolerance. Higher = more similar.
double sim_demographics(const PatientRecord& a, const PatientRecord& b,
                        const FeatureSchema& schema);

/// Sum over designated ordinal features of |a - b| / (cardinality - 1).
/// Lower = more similar.
double sim_cognitive(const PatientRecord& a, const PatientRecord& b, const FeatureSchema& schema);

/// sigmoid of the summed distances over designated continuous features;
/// 0.5 at identity, growing with distance.
double sim_imaging(const PatientRecord& a, const PatientRecord& b, const FeatureSchema& schema);

struct SimilarityBreakdown {
  std::optional<double> s_dem;
  std::optional<double> s_cog;
  std::optional<double> s_img;
  std::optional<double> sim_meas;
};

/// Largest observed pairwise value per distance-type component, used to fold
/// distances into [0, 1] similarities before averaging.
struct SimilarityNormalizers {
  double max_meas = 0.0;
  double max_cog = 0.0;
};

SimilarityBreakdown similarity_breakdown(const PatientRecord& a, const PatientRecord& b,
                                         const FeatureSchema& schema);

/// Unified orientation: distances are inverted (1 - d / max_pairwise for the
/// unbounded ones, 1 - d for the sigmoid one) and averaged with the match
/// score, so that larger always means more similar.
double combined_similarity(const SimilarityBreakdown& breakdown,
                           const SimilarityNormalizers& normalizers);

}  // namespace popgraph
