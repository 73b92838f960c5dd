#include "adeptlab/numerics.hpp"

#include <cassert>
#include <cmath>
#include <utility>

namespace adeptlab {

void ExactSum::add(double x) {
  // Grow-expansion step: fold x into the list of non-overlapping partials,
  // keeping them sorted by increasing magnitude.
  std::size_t keep = 0;
  for (std::size_t j = 0; j < count_; ++j) {
    double y = partials_[j];
    if (std::fabs(x) < std::fabs(y)) std::swap(x, y);
    double hi = x + y;
    double lo = y - (hi - x);
    if (lo != 0.0) partials_[keep++] = lo;
    x = hi;
  }
  assert(keep < kMaxPartials);
  partials_[keep++] = x;
  count_ = keep;
}

double ExactSum::result() const {
  if (count_ == 0) return 0.0;
  // Round the expansion to the nearest double, with the half-even tie
  // correction used by math.fsum.
  std::size_t n = count_;
  double hi = partials_[--n];
  double lo = 0.0;
  while (n > 0) {
    double x = hi;
    double y = partials_[--n];
    hi = x + y;
    double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials_[n - 1] < 0.0) ||
                (lo > 0.0 && partials_[n - 1] > 0.0))) {
    double y = lo * 2.0;
    double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

double exact_sum(std::span<const double> xs) {
  ExactSum acc;
  for (double x : xs) acc.add(x);
  return acc.result();
}

double exact_dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  ExactSum acc;
  for (std::size_t i = 0; i < a.size(); ++i) acc.add(a[i] * b[i]);
  return acc.result();
}

}  // namespace adeptlab
