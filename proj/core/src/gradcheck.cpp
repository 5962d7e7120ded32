#include "popgraph/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "popgraph/rng.hpp"

namespace popgraph {

GradCheckResult finite_difference_check(const std::function<Tensor(ParamStore&)>& fn,
                                        ParamStore& params, double eps, std::size_t samples,
                                        std::uint64_t seed) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw std::invalid_argument("finite_difference_check: eps must be in [1e-7, 1e-3]");
  }
  const double probe1 = fn(params).item();
  const double probe2 = fn(params).item();
  if (probe1 != probe2) {
    throw std::runtime_error("finite_difference_check: fn is not deterministic (" +
                             std::to_string(probe1) + " vs " + std::to_string(probe2) + ")");
  }

  params.zero_grads();
  Tensor loss = fn(params);
  backward(loss);
  std::map<std::string, std::vector<double>> analytic;
  for (const auto& [name, tensor] : params) {
    auto g = tensor.grad();
    analytic[name] = tensor.has_grad() ? std::vector<double>(g.begin(), g.end())
                                       : std::vector<double>(tensor.size(), 0.0);
  }
  params.zero_grads();

  const std::size_t total = params.total_coordinates();
  if (total == 0) throw std::invalid_argument("finite_difference_check: empty ParamStore");
  Rng rng(derive_seed(seed, "gradcheck"));

  GradCheckResult result;
  result.samples = samples;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = rng.index(total);
    std::string pick_name;
    std::size_t pick_index = 0;
    for (const auto& [name, tensor] : params) {
      if (flat < tensor.size()) {
        pick_name = name;
        pick_index = flat;
        break;
      }
      flat -= tensor.size();
    }
    Tensor& tensor = params.at(pick_name);
    double& coord = tensor.mutable_values()[pick_index];
    const double original = coord;
    // Fourth-order central difference: the O(eps^2) truncation term would
    // otherwise dominate exactly where cancellation noise forces eps upward.
    coord = original + 2.0 * eps;
    const double p2 = fn(params).item();
    coord = original + eps;
    const double p1 = fn(params).item();
    coord = original - eps;
    const double m1 = fn(params).item();
    coord = original - 2.0 * eps;
    const double m2 = fn(params).item();
    coord = original;

    // Differences first, so coordinates the loss does not depend on cancel
    // exactly instead of leaving O(eps_mach * |f|) residue.
    const double numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
    const double a = analytic[pick_name][pick_index];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = pick_name;
      result.worst_index = pick_index;
    }
  }
  return result;
}

}  // namespace popgraph
