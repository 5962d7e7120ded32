#include "popgraph/similarity.hpp"

#include <cmath>
#include <stdexcept>

namespace popgraph {

namespace {

double feature_value(const PatientRecord& record, const FeatureSchema& schema,
                     const std::string& name, const char* context) {
  int idx = schema.static_discrete_index(name);
  if (idx >= 0) return static_cast<double>(record.d[idx]);
  idx = schema.static_continuous_index(name);
  if (idx >= 0) return record.c[idx];
  throw std::invalid_argument(std::string(context) + ": schema does not designate static feature '" +
                              name + "'");
}

}  // namespace

FeatureDescriptor compute_descriptor(const std::vector<double>& values,
                                     const std::vector<std::uint8_t>& observed) {
  FeatureDescriptor d;
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    if (!observed[t]) continue;
    const double v = values[t];
    if (count == 0) {
      d.min = d.max = v;
    } else {
      d.min = std::min(d.min, v);
      d.max = std::max(d.max, v);
    }
    sum += v;
    ++count;
  }
  if (count == 0) return FeatureDescriptor{};
  d.mean = sum / static_cast<double>(count);
  double var = 0.0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    if (!observed[t]) continue;
    var += (values[t] - d.mean) * (values[t] - d.mean);
  }
  d.stddev = std::sqrt(var / static_cast<double>(count));
  return d;
}

std::vector<FeatureDescriptor> record_descriptors(const PatientRecord& record,
                                                  const FeatureSchema& schema) {
  std::vector<FeatureDescriptor> out;
  out.reserve(schema.graph_features.size());
  for (const auto& name : schema.graph_features) {
    const int idx = schema.ts_continuous_index(name);
    if (idx < 0) {
      throw std::invalid_argument("graph feature '" + name + "' is not a continuous ts feature");
    }
    out.push_back(compute_descriptor(record.t_c[idx], record.observed_c[idx]));
  }
  return out;
}

double sim_measurements(const std::vector<FeatureDescriptor>& a,
                        const std::vector<FeatureDescriptor>& b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("sim_measurements: descriptor lists of sizes " +
                                std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double total = 0.0;
  for (std::size_t f = 0; f < a.size(); ++f) {
    const double dm = a[f].mean - b[f].mean;
    const double ds = a[f].stddev - b[f].stddev;
    const double dmin = a[f].min - b[f].min;
    const double dmax = a[f].max - b[f].max;
    total += std::sqrt(dm * dm + ds * ds + dmin * dmin + dmax * dmax);
  }
  return total / static_cast<double>(a.size());
}

double sim_measurements(const PatientRecord& a, const PatientRecord& b,
                        const FeatureSchema& schema) {
  return sim_measurements(record_descriptors(a, schema), record_descriptors(b, schema));
}

double sim_demographics(const PatientRecord& a, const PatientRecord& b,
                        const FeatureSchema& schema) {
  const StaticSimilarity& sim = schema.static_similarity;
  if (!sim.demographics_designated()) {
    throw std::invalid_argument("sim_demographics: schema does not designate match/age features");
  }
  double matches = 0.0;
  for (const auto& name : sim.exact_match) {
    if (feature_value(a, schema, name, "sim_demographics") ==
        feature_value(b, schema, name, "sim_demographics")) {
      matches += 1.0;
    }
  }
  const double age_a = feature_value(a, schema, sim.age_feature, "sim_demographics");
  const double age_b = feature_value(b, schema, sim.age_feature, "sim_demographics");
  if (std::abs(age_a - age_b) <= sim.age_tolerance) matches += 1.0;
  return matches / static_cast<double>(sim.exact_match.size() + 1);
}

double sim_cognitive(const PatientRecord& a, const PatientRecord& b, const FeatureSchema& schema) {
  const auto& names = schema.static_similarity.cognitive;
  if (names.empty()) {
    throw std::invalid_argument("sim_cognitive: schema designates no ordinal features");
  }
  double total = 0.0;
  for (const auto& name : names) {
    const int idx = schema.static_discrete_index(name);
    if (idx < 0) {
      throw std::invalid_argument("sim_cognitive: '" + name + "' is not a static discrete feature");
    }
    const double span = static_cast<double>(schema.static_discrete[idx].cardinality - 1);
    total += std::abs(static_cast<double>(a.d[idx] - b.d[idx])) / span;
  }
  return total;
}

double sim_imaging(const PatientRecord& a, const PatientRecord& b, const FeatureSchema& schema) {
  const auto& names = schema.static_similarity.imaging;
  if (names.empty()) {
    throw std::invalid_argument("sim_imaging: schema designates no continuous features");
  }
  double total = 0.0;
  for (const auto& name : names) {
    const int idx = schema.static_continuous_index(name);
    if (idx < 0) {
      throw std::invalid_argument("sim_imaging: '" + name + "' is not a static continuous feature");
    }
    total += std::abs(a.c[idx] - b.c[idx]);
  }
  return 1.0 / (1.0 + std::exp(-total));
}

SimilarityBreakdown similarity_breakdown(const PatientRecord& a, const PatientRecord& b,
                                         const FeatureSchema& schema) {
  SimilarityBreakdown out;
  const StaticSimilarity& sim = schema.static_similarity;
  if (sim.demographics_designated()) out.s_dem = sim_demographics(a, b, schema);
  if (!sim.cognitive.empty()) out.s_cog = sim_cognitive(a, b, schema);
  if (!sim.imaging.empty()) out.s_img = sim_imaging(a, b, schema);
  if (!schema.graph_features.empty()) out.sim_meas = sim_measurements(a, b, schema);
  return out;
}

double combined_similarity(const SimilarityBreakdown& breakdown,
                           const SimilarityNormalizers& normalizers) {
  double total = 0.0;
  std::size_t count = 0;
  if (breakdown.s_dem) {
    total += *breakdown.s_dem;
    ++count;
  }
  if (breakdown.s_cog) {
    total += normalizers.max_cog > 0.0 ? 1.0 - *breakdown.s_cog / normalizers.max_cog : 1.0;
    ++count;
  }
  if (breakdown.s_img) {
    total += 1.0 - *breakdown.s_img;
    ++count;
  }
  if (breakdown.sim_meas) {
    total += normalizers.max_meas > 0.0 ? 1.0 - *breakdown.sim_meas / normalizers.max_meas : 1.0;
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("combined_similarity: breakdown has no components");
  }
  return total / static_cast<double>(count);
}

}  // namespace popgraph
