#pragma once

#include <cstdint>
#include <random>

#include "flowseg/ndarray.hpp"

namespace flowseg {

/// splitmix64 finalizer; mixes a base seed with stream identifiers.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0);

/// Seeded random stream. Normal draws use Box-Muller on top of mt19937_64 so
/// sequences are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  NdArr normal_array(const Shape& shape, Real stddev = 1);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0;
};

}  // namespace flowseg
