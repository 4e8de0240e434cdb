#include "ciodetect/numeric.hpp"

#include <algorithm>

#include "ciodetect/error.hpp"

namespace ciod {

double logsumexp(std::span<const double> xs) {
  if (xs.empty()) return kNegInf;
  const double hi = *std::max_element(xs.begin(), xs.end());
  if (hi == kNegInf) return kNegInf;
  if (!std::isfinite(hi)) return hi;
  double acc = 0.0;
  for (double x : xs) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

namespace {

// Remainder of Stirling's series: lgamma(x) - [(x-0.5)ln x - x + 0.5 ln 2pi], x >= 10.
double stirling_remainder(double x) {
  const double r = 1.0 / x;
  const double r2 = r * r;
  return r * (1.0 / 12.0 -
              r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 * (1.0 / 1680.0 - r2 / 1188.0))));
}

}  // namespace

double log_beta(double a, double b) {
  if (!(a > 0.0) || !(b > 0.0) || !std::isfinite(a) || !std::isfinite(b)) {
    throw DomainError("log_beta requires a, b > 0 (got " + std::to_string(a) + ", " +
                      std::to_string(b) + ")");
  }
  // Order the arguments so the result is exactly symmetric.
  if (a > b) std::swap(a, b);
  if (b < 10.0) return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  // lgamma(b) - lgamma(a + b) without cancelling two huge numbers.
  const double diff = -(b - 0.5) * std::log1p(a / b) - a * std::log(a + b) + a +
                      stirling_remainder(b) - stirling_remainder(a + b);
  return std::lgamma(a) + diff;
}

double log_binom(double n, double k) {
  if (k < 0 || k > n) return kNegInf;
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

LogFactorialTable::LogFactorialTable(std::size_t n) : table_(n + 1, 0.0) {
  for (std::size_t i = 1; i <= n; ++i) table_[i] = table_[i - 1] + std::log(static_cast<double>(i));
}

}  // namespace ciod
