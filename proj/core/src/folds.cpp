#include "popgraph/folds.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "popgraph/rng.hpp"

namespace popgraph {

using nlohmann::json;

namespace {
constexpr const char* kFoldsFormat = "popgraph.folds/1";

/// Class-interleaved ordering: deal one id per class in rotation so that any
/// prefix of length >= #classes covers every class present.
std::vector<std::string> interleave_by_class(
    const std::map<int, std::vector<std::string>>& by_class) {
  std::vector<std::string> out;
  std::size_t round = 0;
  bool emitted = true;
  while (emitted) {
    emitted = false;
    for (const auto& [_, members] : by_class) {
      if (round < members.size()) {
        out.push_back(members[round]);
        emitted = true;
      }
    }
    ++round;
  }
  return out;
}

}  // namespace

std::vector<FoldPlan> make_folds(const Dataset& dataset, const std::string& task, int fold_count,
                                 const std::vector<double>& ratios, std::uint64_t seed) {
  if (fold_count < 2) throw std::invalid_argument("make_folds: fold_count must be >= 2");
  if (dataset.records.size() < static_cast<std::size_t>(fold_count)) {
    throw std::invalid_argument("make_folds: fewer records than folds");
  }

  // Stratified shard assignment: shuffle within each class, then deal classes
  // round-robin over the shards.
  std::map<int, std::vector<std::string>> by_class;  // -1 = unlabeled stratum
  for (const auto& r : dataset.records) {
    const int label = r.has_label(task) ? r.label(task) : -1;
    by_class[label].push_back(r.id);
  }
  Rng rng(derive_seed(seed, "folds"));
  for (auto& [_, members] : by_class) rng.shuffle(members);

  std::vector<std::string> class_warnings;
  for (const auto& [label, members] : by_class) {
    if (label >= 0 && members.size() < static_cast<std::size_t>(fold_count)) {
      class_warnings.push_back("class " + std::to_string(label) + " has " +
                               std::to_string(members.size()) + " members over " +
                               std::to_string(fold_count) + " folds");
    }
  }

  std::vector<std::vector<std::string>> shards(fold_count);
  std::size_t cursor = 0;
  for (const auto& [_, members] : by_class) {
    for (const auto& id : members) {
      shards[cursor % fold_count].push_back(id);
      ++cursor;
    }
  }

  std::vector<FoldPlan> plans;
  for (int f = 0; f < fold_count; ++f) {
    FoldPlan base;
    base.fold = f;
    base.seed = seed;
    base.warnings = class_warnings;
    base.test_ids = shards[f];
    base.val_ids = shards[(f + 1) % fold_count];
    for (int s = 0; s < fold_count; ++s) {
      if (s == f || s == (f + 1) % fold_count) continue;
      base.train_ids.insert(base.train_ids.end(), shards[s].begin(), shards[s].end());
    }

    // One labeled ordering per fold; ratio subsets are nested prefixes.
    std::map<int, std::vector<std::string>> train_by_class;
    for (const auto& id : base.train_ids) {
      const auto& r = dataset.by_id(id);
      train_by_class[r.has_label(task) ? r.label(task) : -1].push_back(id);
    }
    Rng fold_rng(derive_seed(seed, "labels-fold-" + std::to_string(f)));
    for (auto& [_, members] : train_by_class) fold_rng.shuffle(members);
    const std::vector<std::string> ordering = interleave_by_class(train_by_class);
    std::size_t classes_present = 0;
    for (const auto& [label, members] : train_by_class) {
      if (label >= 0 && !members.empty()) ++classes_present;
    }

    for (double ratio : ratios) {
      if (ratio <= 0.0 || ratio > 1.0) {
        throw std::invalid_argument("make_folds: label ratio " + std::to_string(ratio) +
                                    " outside (0, 1]");
      }
      FoldPlan plan = base;
      plan.label_ratio = ratio;
      std::size_t count = static_cast<std::size_t>(
          std::llround(ratio * static_cast<double>(base.train_ids.size())));
      count = std::max<std::size_t>(count, std::max<std::size_t>(classes_present, 1));
      count = std::min(count, ordering.size());
      plan.labeled_train_ids.assign(ordering.begin(), ordering.begin() + static_cast<long>(count));
      plans.push_back(std::move(plan));
    }
  }
  return plans;
}

void save_fold_plans(const std::vector<FoldPlan>& plans, const std::string& path) {
  json doc;
  doc["format"] = kFoldsFormat;
  json list = json::array();
  for (const auto& p : plans) {
    json item;
    item["fold"] = p.fold;
    item["train"] = p.train_ids;
    item["val"] = p.val_ids;
    item["test"] = p.test_ids;
    item["label_ratio"] = p.label_ratio;
    item["labeled_train"] = p.labeled_train_ids;
    item["seed"] = p.seed;
    item["warnings"] = p.warnings;
    list.push_back(std::move(item));
  }
  doc["plans"] = list;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << doc.dump(2) << '\n';
}

std::vector<FoldPlan> load_fold_plans(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  json doc = json::parse(in);
  if (doc.value("format", "") != kFoldsFormat) {
    throw std::invalid_argument("fold plan file '" + path + "' has unsupported format");
  }
  std::vector<FoldPlan> plans;
  for (const auto& item : doc.at("plans")) {
    FoldPlan p;
    p.fold = item.at("fold").get<int>();
    p.train_ids = item.at("train").get<std::vector<std::string>>();
    p.val_ids = item.at("val").get<std::vector<std::string>>();
    p.test_ids = item.at("test").get<std::vector<std::string>>();
    p.label_ratio = item.at("label_ratio").get<double>();
    p.labeled_train_ids = item.at("labeled_train").get<std::vector<std::string>>();
    p.seed = item.at("seed").get<std::uint64_t>();
    p.warnings = item.at("warnings").get<std::vector<std::string>>();
    plans.push_back(std::move(p));
  }
  return plans;
}

}  // namespace popgraph
