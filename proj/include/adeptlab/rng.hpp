#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

namespace adeptlab {

// Seeded random source. All reductions from the raw 64-bit stream are
// spelled out here instead of going through std::*_distribution, whose
// output is implementation-defined; this keeps every sample reproducible
// from the seed alone, on any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform index in [0, n). n must be positive. The modulo bias is
  // below 2^-50 for every n used in this project.
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Uniform real in [lo, hi) with 53-bit resolution.
  double uniform_real(double lo, double hi) {
    double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace adeptlab
