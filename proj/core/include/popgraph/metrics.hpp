#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "popgraph/schema.hpp"

namespace popgraph {

struct EvalMetrics {
  double accuracy = 0.0;
  std::optional<double> auc;  // absent when no class has both kinds of examples
  double macro_f1 = 0.0;
  std::vector<std::string> warnings;
};

/// Top-1 accuracy, macro one-vs-rest ROC-AUC (midrank tie handling) and
/// macro F1 over all task classes. scores is row-major [n, num_classes].
EvalMetrics evaluate(std::span<const double> scores, const std::vector<int>& labels,
                     const TaskSpec& task);

/// Binary ROC-AUC from positive-class scores via the rank statistic.
std::optional<double> binary_auc(const std::vector<double>& scores,
                                 const std::vector<int>& labels);

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population convention (divides by n)
  std::size_t count = 0;
};

Aggregate aggregate(std::span<const double> values);

}  // namespace popgraph
