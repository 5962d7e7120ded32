#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "popgraph/param_store.hpp"

namespace popgraph {

/// Linear-polynomial learning-rate decay from start_lr to end_lr over
/// total_steps; constant at end_lr afterwards.
struct LrSchedule {
  double start_lr = 0.0;
  double end_lr = 0.0;
  std::int64_t total_steps = 0;

  double at(std::int64_t step) const;
};

struct AdamState {
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  std::optional<LrSchedule> lr_schedule;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  double effective_lr() const;
};

/// One Adam update with bias correction. Every parameter must carry a grad;
/// grads are cleared and the step counter advances by one.
void adam_step(ParamStore& params, AdamState& state);

}  // namespace popgraph
