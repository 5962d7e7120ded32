#pragma once

#include <map>
#include <string>
#include <vector>

#include "popgraph/rng.hpp"
#include "popgraph/tensor.hpp"

namespace popgraph {

/// Named parameter tensors with deterministic (sorted) iteration order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const;
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const;
  std::size_t total_coordinates() const;
  void zero_grads();

 private:
  Map entries_;
};

// Conventional initializers; every parameter is seed-controlled.
Tensor init_linear_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor init_embedding_table(std::size_t rows, std::size_t cols, Rng& rng);
Tensor init_zeros(Shape shape);
Tensor init_ones(Shape shape);

}  // namespace popgraph
