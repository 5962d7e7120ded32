#include "popgraph/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace popgraph {

void ParamStore::insert(const std::string& name, Tensor tensor) {
  if (entries_.count(name)) {
    throw std::invalid_argument("ParamStore: duplicate parameter name '" + name + "'");
  }
  tensor.set_requires_grad(true);
  entries_.emplace(name, std::move(tensor));
}

bool ParamStore::contains(const std::string& name) const { return entries_.count(name) > 0; }

Tensor& ParamStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t ParamStore::total_coordinates() const {
  std::size_t n = 0;
  for (const auto& [_, tensor] : entries_) n += tensor.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [_, tensor] : entries_) tensor.zero_grad();
}

Tensor init_linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> values(fan_in * fan_out);
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from_values({fan_in, fan_out}, std::move(values));
}

Tensor init_embedding_table(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.normal(0.0, 0.02);
  return Tensor::from_values({rows, cols}, std::move(values));
}

Tensor init_zeros(Shape shape) { return Tensor::zeros(std::move(shape)); }

Tensor init_ones(Shape shape) { return Tensor::full(std::move(shape), 1.0); }

}  // namespace popgraph
