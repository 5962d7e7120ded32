#include "popgraph/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace popgraph {

std::optional<double> binary_auc(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument("binary_auc: scores and labels differ in length");
  }
  std::size_t positives = 0;
  for (int l : labels) positives += l == 1;
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;

  // Mann-Whitney statistic with midranks for ties.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] == 1) rank_sum += rank[n];
  }
  const double p = static_cast<double>(positives);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

EvalMetrics evaluate(std::span<const double> scores, const std::vector<int>& labels,
                     const TaskSpec& task) {
  const std::size_t classes = static_cast<std::size_t>(task.num_classes);
  const std::size_t n = labels.size();
  if (scores.size() != n * classes) {
    throw std::invalid_argument("evaluate: " + std::to_string(scores.size()) +
                                " scores do not fit " + std::to_string(n) + " x " +
                                std::to_string(classes));
  }
  if (n == 0) throw std::invalid_argument("evaluate: empty label set");
  EvalMetrics out;

  std::vector<int> predictions(n);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (scores[r * classes + c] > scores[r * classes + best]) best = c;
    }
    predictions[r] = static_cast<int>(best);
    correct += predictions[r] == labels[r];
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  // macro one-vs-rest AUC over the classes that have both kinds of examples
  double auc_sum = 0.0;
  std::size_t auc_classes = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> class_scores(n);
    std::vector<int> class_labels(n);
    for (std::size_t r = 0; r < n; ++r) {
      class_scores[r] = scores[r * classes + c];
      class_labels[r] = labels[r] == static_cast<int>(c) ? 1 : 0;
    }
    if (auto auc = binary_auc(class_scores, class_labels)) {
      auc_sum += *auc;
      ++auc_classes;
    }
  }
  if (auc_classes > 0) {
    out.auc = auc_sum / static_cast<double>(auc_classes);
  } else {
    out.warnings.push_back("auc undefined: the label set covers a single class");
  }

  // macro F1 over all task classes; classes without support or predictions
  // contribute 0
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const bool truth = labels[r] == static_cast<int>(c);
      const bool pred = predictions[r] == static_cast<int>(c);
      tp += truth && pred;
      fp += !truth && pred;
      fn += truth && !pred;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    f1_sum += denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  out.macro_f1 = f1_sum / static_cast<double>(classes);
  return out;
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate out;
  out.count = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - out.mean) * (v - out.mean);
  out.stddev = std::sqrt(var / static_cast<double>(values.size()));
  return out;
}

}  // namespace popgraph
