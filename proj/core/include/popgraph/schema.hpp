#pragma once

#include <map>
#include <string>
#include <vector>

namespace popgraph {

struct DiscreteFeature {
  std::string name;
  int cardinality = 2;
};

struct TaskSpec {
  std::string name;
  int num_classes = 2;

  bool is_binary() const { return num_classes == 2; }
};

/// Designations for the static similarity path: features compared by exact
/// match, an age-like feature compared within a tolerance, ordinal features
/// compared by normalized distance, and continuous features compared through
/// a sigmoid of summed distances.
struct StaticSimilarity {
  std::vector<std::string> exact_match;
  std::string age_feature;
  double age_tolerance = 2.0;
  std::vector<std::string> cognitive;
  std::vector<std::string> imaging;

  bool demographics_designated() const {
    return !exact_match.empty() && !age_feature.empty();
  }
  bool enabled() const {
    return demographics_designated() || !cognitive.empty() || !imaging.empty();
  }
};

struct FeatureSchema {
  std::vector<DiscreteFeature> static_discrete;
  std::vector<std::string> static_continuous;
  std::vector<DiscreteFeature> ts_discrete;
  std::vector<std::string> ts_continuous;
  std::size_t max_timesteps = 1;
  std::vector<std::string> treatment_features;
  std::vector<std::string> graph_features;  // ts continuous names used for descriptors
  StaticSimilarity static_similarity;
  std::vector<std::string> sfm_maskable;  // static features eligible for masking
  std::map<std::string, int> ordinal_margins;
  std::vector<TaskSpec> tasks;

  std::size_t d_count() const { return static_discrete.size(); }
  std::size_t c_count() const { return static_continuous.size(); }
  std::size_t sd_count() const { return ts_discrete.size(); }
  std::size_t sc_count() const { return ts_continuous.size(); }
  bool has_ts() const { return sd_count() + sc_count() > 0; }

  int static_discrete_index(const std::string& name) const;
  int static_continuous_index(const std::string& name) const;
  int ts_discrete_index(const std::string& name) const;
  int ts_continuous_index(const std::string& name) const;
  bool is_treatment(const std::string& name) const;
  std::vector<std::size_t> treatment_indices() const;  // into ts_discrete
  const TaskSpec* find_task(const std::string& name) const;

  /// Throws std::invalid_argument on any structural violation.
  void validate() const;
};

}  // namespace popgraph
