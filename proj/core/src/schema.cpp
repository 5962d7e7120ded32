#include "popgraph/schema.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace popgraph {

namespace {

int find_name(const std::vector<DiscreteFeature>& features, const std::string& name) {
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

int find_name(const std::vector<std::string>& names, const std::string& name) {
  auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

int FeatureSchema::static_discrete_index(const std::string& name) const {
  return find_name(static_discrete, name);
}
int FeatureSchema::static_continuous_index(const std::string& name) const {
  return find_name(static_continuous, name);
}
int FeatureSchema::ts_discrete_index(const std::string& name) const {
  return find_name(ts_discrete, name);
}
int FeatureSchema::ts_continuous_index(const std::string& name) const {
  return find_name(ts_continuous, name);
}

bool FeatureSchema::is_treatment(const std::string& name) const {
  return std::find(treatment_features.begin(), treatment_features.end(), name) !=
         treatment_features.end();
}

std::vector<std::size_t> FeatureSchema::treatment_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ts_discrete.size(); ++i) {
    if (is_treatment(ts_discrete[i].name)) out.push_back(i);
  }
  return out;
}

const TaskSpec* FeatureSchema::find_task(const std::string& name) const {
  for (const TaskSpec& task : tasks) {
    if (task.name == name) return &task;
  }
  return nullptr;
}

void FeatureSchema::validate() const {
  std::set<std::string> seen;
  auto check_unique = [&seen](const std::string& name) {
    if (!seen.insert(name).second) {
      throw std::invalid_argument("schema: duplicate feature name '" + name + "'");
    }
  };
  for (const auto& f : static_discrete) {
    check_unique(f.name);
    if (f.cardinality < 2) {
      throw std::invalid_argument("schema: feature '" + f.name + "' has cardinality " +
                                  std::to_string(f.cardinality) + " < 2");
    }
  }
  for (const auto& name : static_continuous) check_unique(name);
  for (const auto& f : ts_discrete) {
    check_unique(f.name);
    if (f.cardinality < 2) {
      throw std::invalid_argument("schema: feature '" + f.name + "' has cardinality " +
                                  std::to_string(f.cardinality) + " < 2");
    }
  }
  for (const auto& name : ts_continuous) check_unique(name);
  if (max_timesteps < 1) throw std::invalid_argument("schema: max_timesteps must be >= 1");
  for (const auto& name : treatment_features) {
    if (ts_discrete_index(name) < 0) {
      throw std::invalid_argument("schema: treatment feature '" + name +
                                  "' is not a discrete time-series feature");
    }
  }
  for (const auto& name : graph_features) {
    if (ts_continuous_index(name) < 0) {
      throw std::invalid_argument("schema: graph feature '" + name +
                                  "' is not a continuous time-series feature");
    }
  }
  for (const auto& name : sfm_maskable) {
    if (static_discrete_index(name) < 0 && static_continuous_index(name) < 0) {
      throw std::invalid_argument("schema: maskable feature '" + name +
                                  "' is not a static feature");
    }
  }
  for (const auto& task : tasks) {
    if (task.num_classes < 2) {
      throw std::invalid_argument("schema: task '" + task.name + "' needs >= 2 classes");
    }
  }
}

}  // namespace popgraph
