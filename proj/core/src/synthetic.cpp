#include "popgraph/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "popgraph/rng.hpp"
#include "popgraph/similarity.hpp"

namespace popgraph {

namespace {

int quantize(double x, int cardinality) {
  const int v = static_cast<int>(std::floor(x * cardinality));
  return std::clamp(v, 0, cardinality - 1);
}

FeatureSchema build_schema(const SyntheticConfig& cfg) {
  const bool has_ts = cfg.measurements + cfg.coded + cfg.treatments > 0;
  FeatureSchema schema;
  schema.static_discrete.push_back({"sex", 2});
  schema.static_discrete.push_back({"geno", 3});
  for (std::size_t j = 0; j < cfg.scores; ++j) {
    schema.static_discrete.push_back({"score" + std::to_string(j), 11});
    schema.ordinal_margins["score" + std::to_string(j)] = 2;
  }
  schema.static_continuous.push_back("age");
  for (std::size_t j = 0; j < cfg.imaging; ++j) {
    schema.static_continuous.push_back("img" + std::to_string(j));
  }
  for (std::size_t j = 0; j < cfg.coded; ++j) {
    schema.ts_discrete.push_back({"coded" + std::to_string(j), 4});
  }
  for (std::size_t j = 0; j < cfg.treatments; ++j) {
    const std::string name = "trt" + std::to_string(j);
    schema.ts_discrete.push_back({name, 2});
    schema.treatment_features.push_back(name);
  }
  for (std::size_t j = 0; j < cfg.measurements; ++j) {
    const std::string name = "meas" + std::to_string(j);
    schema.ts_continuous.push_back(name);
    schema.graph_features.push_back(name);
  }
  schema.max_timesteps = has_ts ? cfg.timesteps : 1;
  // Longitudinal cohorts build their graph from measurement descriptors
  // alone; the static path drives similarity only for static-only cohorts.
  if (!has_ts) {
    schema.static_similarity.exact_match = {"sex", "geno"};
    schema.static_similarity.age_feature = "age";
    schema.static_similarity.age_tolerance = 2.0;
    for (std::size_t j = 0; j < cfg.scores; ++j) {
      schema.static_similarity.cognitive.push_back("score" + std::to_string(j));
    }
    for (std::size_t j = 0; j < cfg.imaging; ++j) {
      schema.static_similarity.imaging.push_back("img" + std::to_string(j));
    }
  }
  // Masking targets mirror the static setup: the genetic marker, the ordinal
  // scores and the imaging features; sex and age stay visible.
  schema.sfm_maskable.push_back("geno");
  for (std::size_t j = 0; j < cfg.scores; ++j) {
    schema.sfm_maskable.push_back("score" + std::to_string(j));
  }
  for (std::size_t j = 0; j < cfg.imaging; ++j) {
    schema.sfm_maskable.push_back("img" + std::to_string(j));
  }
  schema.tasks.push_back({"risk", 2});
  schema.tasks.push_back({"severity", 4});
  if (cfg.relational_task) schema.tasks.push_back({"cohort_risk", 2});
  schema.validate();
  return schema;
}

std::string patient_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "p%05zu", i);
  return buf;
}

}  // namespace

SyntheticConfig synthetic_static_preset(std::size_t patients) {
  SyntheticConfig cfg;
  cfg.patients = patients;
  cfg.scores = 4;
  cfg.imaging = 5;
  cfg.measurements = 0;
  cfg.coded = 0;
  cfg.treatments = 0;
  cfg.timesteps = 1;
  cfg.missing_rate = 0.0;
  return cfg;
}

Dataset generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  if (cfg.patients == 0) throw std::invalid_argument("generate_synthetic: zero patients");
  if (cfg.missing_rate < 0.0 || cfg.missing_rate >= 1.0) {
    throw std::invalid_argument("generate_synthetic: missing rate outside [0, 1)");
  }
  const bool has_ts = cfg.measurements + cfg.coded + cfg.treatments > 0;
  if (has_ts && cfg.timesteps == 0) {
    throw std::invalid_argument("generate_synthetic: time-series features need timesteps >= 1");
  }

  Dataset ds;
  ds.schema = build_schema(cfg);
  const std::size_t tau = ds.schema.max_timesteps;
  Rng rng(derive_seed(seed, "synthetic"));

  std::vector<double> severity(cfg.patients);
  for (double& z : severity) z = rng.uniform();
  // Second, independent severity component; it drives the coded series and
  // the relational label, while the graph features follow the first.
  std::vector<double> burden(cfg.patients);
  for (double& w : burden) w = rng.uniform();

  ds.records.reserve(cfg.patients);
  for (std::size_t i = 0; i < cfg.patients; ++i) {
    const double z = severity[i];
    const double w = burden[i];
    PatientRecord r;
    r.id = patient_id(i);
    r.d.push_back(static_cast<int>(rng.index(2)));  // sex: pure noise
    r.d.push_back(quantize(z + cfg.noise * rng.normal(), 3));
    for (std::size_t j = 0; j < cfg.scores; ++j) {
      r.d.push_back(quantize(z + cfg.noise * rng.normal(), 11));
    }
    r.c.push_back(35.0 + 45.0 * z + 4.0 * rng.normal());
    for (std::size_t j = 0; j < cfg.imaging; ++j) {
      const double slope = 0.8 + 0.15 * static_cast<double>(j);
      r.c.push_back(0.2 + slope * z + cfg.noise * rng.normal());
    }

    for (std::size_t j = 0; j < cfg.coded; ++j) {
      std::vector<int> series(tau);
      std::vector<std::uint8_t> observed(tau, 1);
      for (std::size_t t = 0; t < tau; ++t) {
        series[t] = quantize(w + cfg.noise * rng.normal(), 4);
        if (rng.uniform() < cfg.missing_rate) observed[t] = 0;
      }
      r.t_d.push_back(std::move(series));
      r.observed_d.push_back(std::move(observed));
    }
    for (std::size_t j = 0; j < cfg.treatments; ++j) {
      const double p = 0.1 + 0.7 * z;
      std::vector<int> series(tau);
      std::vector<std::uint8_t> observed(tau, 1);
      for (std::size_t t = 0; t < tau; ++t) {
        series[t] = rng.uniform() < p ? 1 : 0;
        if (rng.uniform() < cfg.missing_rate) observed[t] = 0;
      }
      r.t_d.push_back(std::move(series));
      r.observed_d.push_back(std::move(observed));
    }
    for (std::size_t j = 0; j < cfg.measurements; ++j) {
      const double slope = 0.8 + 0.2 * static_cast<double>(j % 4);
      const double base = 0.3 * static_cast<double>(j);
      const double phase = static_cast<double>(j);
      std::vector<double> series(tau);
      std::vector<std::uint8_t> observed(tau, 1);
      for (std::size_t t = 0; t < tau; ++t) {
        const double season =
            0.4 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) /
                               static_cast<double>(tau) +
                           phase);
        series[t] = base + slope * z + season + cfg.noise * rng.normal();
        if (rng.uniform() < cfg.missing_rate) observed[t] = 0;
      }
      r.t_c.push_back(std::move(series));
      r.observed_c.push_back(std::move(observed));
    }

    r.labels["risk"] = z > 0.5 ? 1 : 0;
    r.labels["severity"] = std::min(3, static_cast<int>(std::floor(z * 4.0)));
    ds.records.push_back(std::move(r));
  }

  if (cfg.relational_task) {
    if (cfg.measurements == 0 || cfg.coded == 0) {
      throw std::invalid_argument(
          "generate_synthetic: the relational task needs measurements and coded features");
    }
    // Mean burden of the measurement-descriptor k-NN neighborhood. Neighbors
    // are picked by the first severity component while burden is independent
    // of it, so the patient's own record says nothing about the label; the
    // neighbors' records answer it directly.
    std::vector<std::vector<FeatureDescriptor>> desc;
    desc.reserve(cfg.patients);
    for (const auto& r : ds.records) desc.push_back(record_descriptors(r, ds.schema));
    std::vector<double> neighbor_burden(cfg.patients, 0.0);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < cfg.patients; ++i) {
      ranked.clear();
      for (std::size_t j = 0; j < cfg.patients; ++j) {
        if (j != i) ranked.emplace_back(sim_measurements(desc[i], desc[j]), j);
      }
      const std::size_t k = std::min(cfg.relational_k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<long>(k), ranked.end());
      double total = 0.0;
      for (std::size_t r = 0; r < k; ++r) total += burden[ranked[r].second];
      neighbor_burden[i] = total / static_cast<double>(k);
    }
    std::vector<double> sorted = neighbor_burden;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2),
                     sorted.end());
    const double median = sorted[sorted.size() / 2];
    for (std::size_t i = 0; i < cfg.patients; ++i) {
      ds.records[i].labels["cohort_risk"] = neighbor_burden[i] > median ? 1 : 0;
    }
  }

  for (const auto& r : ds.records) validate_record(r, ds.schema);
  return ds;
}

// Latent severities are useful to tests and diagnostics; regenerating them is
// cheap and keeps the record format free of oracle fields.
std::vector<double> synthetic_severities(const SyntheticConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synthetic"));
  std::vector<double> severity(cfg.patients);
  for (double& z : severity) z = rng.uniform();
  return severity;
}

}  // namespace popgraph
