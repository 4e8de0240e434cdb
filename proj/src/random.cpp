#include "ciodetect/random.hpp"

#include "ciodetect/numeric.hpp"

namespace ciod {

std::uint64_t Rng::binomial(std::uint64_t n, double p) {
  if (n == 0 || p <= 0.0) return 0;
  if (p >= 1.0) return n;
  if (p > 0.5) return n - binomial(n, 1.0 - p);

  const double q = 1.0 - p;
  const double ratio = p / q;
  const double nd = static_cast<double>(n);
  double pmf = std::exp(nd * std::log1p(-p));
  double u = uniform();

  if (pmf > 1e-300) {
    std::uint64_t k = 0;
    while (u > pmf && k < n) {
      u -= pmf;
      pmf *= ratio * static_cast<double>(n - k) / static_cast<double>(k + 1);
      ++k;
    }
    return k;
  }

  // Chop-down search outward from the mode.
  const auto mode = static_cast<std::uint64_t>(std::floor((nd + 1.0) * p));
  const double md = static_cast<double>(mode);
  const double pmf_mode =
      std::exp(log_binom(nd, md) + md * std::log(p) + (nd - md) * std::log1p(-p));
  u -= pmf_mode;
  if (u <= 0.0) return mode;
  double up = pmf_mode;
  double down = pmf_mode;
  std::uint64_t hi = mode;
  std::uint64_t lo = mode;
  while (true) {
    if (hi < n) {
      up *= ratio * static_cast<double>(n - hi) / static_cast<double>(hi + 1);
      ++hi;
      u -= up;
      if (u <= 0.0) return hi;
    }
    if (lo > 0) {
      down *= static_cast<double>(lo) / (static_cast<double>(n - lo + 1) * ratio);
      --lo;
      u -= down;
      if (u <= 0.0) return lo;
    }
    if (hi == n && lo == 0) return mode;
  }
}

}  // namespace ciod
