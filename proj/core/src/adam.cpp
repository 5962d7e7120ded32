#include "popgraph/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace popgraph {

double LrSchedule::at(std::int64_t step) const {
  if (total_steps <= 0 || step >= total_steps) return end_lr;
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return end_lr + (start_lr - end_lr) * frac;
}

double AdamState::effective_lr() const {
  return lr_schedule ? lr_schedule->at(step) : lr;
}

void adam_step(ParamStore& params, AdamState& state) {
  for (auto& [name, tensor] : params) {
    if (!tensor.has_grad()) {
      throw std::runtime_error("adam_step: parameter '" + name + "' has no gradient");
    }
  }
  const double lr = state.effective_lr();
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, tensor] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != tensor.size()) m.assign(tensor.size(), 0.0);
    if (v.size() != tensor.size()) v.assign(tensor.size(), 0.0);
    auto values = tensor.mutable_values();
    auto grad = tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    tensor.zero_grad();
  }
}

}  // namespace popgraph
