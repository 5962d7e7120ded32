#pragma once

#include <cstdint>
#include <string>

#include "popgraph/dataset.hpp"

namespace popgraph {

/// Synthetic EHR-style cohort. Each patient draws a latent severity
/// z ~ uniform(0,1); features are noisy monotone functions of z except the
/// sex feature (pure noise) and the coded series, which follow a second
/// independent latent component. Treatments are per-hour Bernoulli with
/// probability increasing in z. Labels: "risk" = 1{z > 0.5}, "severity" =
/// quartile of z, and optionally "cohort_risk" = 1{mean second-component
/// severity of the patient's k nearest neighbours (by measurement-descriptor
/// similarity, excluding the patient) is above the cohort median} - a target
/// the patient's own record cannot predict but the neighbours' records can.
struct SyntheticConfig {
  std::size_t patients = 600;
  std::size_t scores = 0;        // ordinal static discrete features, cardinality 11
  std::size_t imaging = 0;       // static continuous features
  std::size_t measurements = 4;  // ts continuous features
  std::size_t coded = 1;         // ts discrete features, cardinality 4
  std::size_t treatments = 2;    // ts discrete binary features
  std::size_t timesteps = 8;
  double missing_rate = 0.3;
  double noise = 0.25;
  bool relational_task = false;
  std::size_t relational_k = 5;
};

inline constexpr int kSyntheticGeneratorVersion = 1;

Dataset generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// The latent severities behind generate_synthetic(config, seed), in record
/// order. Useful for tests that need the generating factor.
std::vector<double> synthetic_severities(const SyntheticConfig& config, std::uint64_t seed);

/// Static-only preset: score and imaging features plus the demographic trio.
SyntheticConfig synthetic_static_preset(std::size_t patients);

}  // namespace popgraph
