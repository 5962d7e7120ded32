#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace popgraph {

/// Deterministic random source. All distributions are implemented by hand so
/// that streams are identical across standard libraries and platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  /// Uniform double in [0, 1).
  double uniform();
  double uniform(double lo, double hi);

  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal();
  double normal(double mean, double stddev);

  /// Unbiased index in [0, n). n must be > 0.
  std::size_t index(std::size_t n);

  /// k distinct values from [0, n), in random order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Derives an independent seed from a base seed and a purpose tag, so a single
/// CLI-level seed can drive every randomized stage without hidden coupling.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

}  // namespace popgraph
