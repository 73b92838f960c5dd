#pragma once

#include <cstddef>
#include <span>

namespace adeptlab {

// Streaming exact accumulator (Shewchuk expansion arithmetic, the same
// scheme as Python's math.fsum). The rounded result depends only on the
// multiset of addends, never on the order they arrive in, which is what
// makes the bit-level permutation invariants of the model hold.
class ExactSum {
 public:
  void add(double x);
  void add_product(double a, double b) { add(a * b); }
  // Correctly rounded sum of everything added so far.
  double result() const;
  void reset() { count_ = 0; }

 private:
  // fp64 expansions never need more than ~40 non-overlapping partials.
  static constexpr std::size_t kMaxPartials = 64;
  double partials_[kMaxPartials];
  std::size_t count_ = 0;
};

// Correctly rounded, order-independent sum of a range of fp64 values.
double exact_sum(std::span<const double> xs);

// Exact dot product of two equal-length ranges (products are rounded
// individually, their sum is exact).
double exact_dot(std::span<const double> a, std::span<const double> b);

}  // namespace adeptlab
