#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "popgraph/param_store.hpp"

namespace popgraph {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t samples = 0;
};

/// Compares analytic gradients of fn against central finite differences at
/// `samples` randomly chosen parameter coordinates. fn must rebuild the
/// forward pass on every call and return the scalar loss tensor; determinism
/// is verified by evaluating fn twice before checking. Relative error uses
/// denominator max(|analytic|, |numeric|, 1e-8).
GradCheckResult finite_difference_check(const std::function<Tensor(ParamStore&)>& fn,
                                        ParamStore& params, double eps, std::size_t samples,
                                        std::uint64_t seed);

}  // namespace popgraph
