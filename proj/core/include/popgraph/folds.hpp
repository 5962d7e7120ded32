#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "popgraph/dataset.hpp"

namespace popgraph {

struct FoldPlan {
  int fold = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  double label_ratio = 1.0;
  std::vector<std::string> labeled_train_ids;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

/// Rotation cross-validation: test = shard f, val = shard (f+1) mod F, train =
/// the rest. Shards are stratified by the task label where present. Label
/// subsets are nested across ratios under the same seed, and each subset keeps
/// at least one member per class when the train split has one.
std::vector<FoldPlan> make_folds(const Dataset& dataset, const std::string& task, int fold_count,
                                 const std::vector<double>& ratios, std::uint64_t seed);

std::vector<FoldPlan> load_fold_plans(const std::string& path);
void save_fold_plans(const std::vector<FoldPlan>& plans, const std::string& path);

}  // namespace popgraph
