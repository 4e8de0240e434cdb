#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace ciod {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLogTwoPi = 1.8378770664093454836;
inline constexpr double kLn10 = 2.3025850929940456840;

// Probabilities inside log-pmfs are clamped to [kProbFloor, 1 - kProbFloor].
inline constexpr double kProbFloor = 1e-12;
// logit(1 - kProbFloor): log-odds beyond this are clamped.
inline const double kLogitClamp = std::log((1.0 - kProbFloor) / kProbFloor);

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid(double x) {
  if (x >= 0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double normal_logpdf(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * kLogTwoPi;
}

// Entropy of a univariate Normal with the given log standard deviation.
inline double normal_entropy_from_logsd(double log_sd) {
  return log_sd + 0.5 * (1.0 + kLogTwoPi);
}

double logsumexp(std::span<const double> xs);

inline double logaddexp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

// Streaming log-sum-exp with a running maximum; order of additions is the
// caller's, so results are bit-reproducible for a fixed order.
class LogSumAccumulator {
 public:
  void add(double x) {
    if (x == kNegInf) return;
    if (x <= max_) {
      sum_ += std::exp(x - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - x) + 1.0;
      max_ = x;
    }
  }
  double value() const { return max_ == kNegInf ? kNegInf : max_ + std::log(sum_); }
  bool empty() const { return max_ == kNegInf; }

 private:
  double max_ = kNegInf;
  double sum_ = 0.0;
};

// ln B(a, b); throws DomainError unless a, b > 0.
double log_beta(double a, double b);

// ln C(n, k) for 0 <= k <= n; kNegInf outside that range.
double log_binom(double n, double k);

// Table of ln(i!) for i = 0..n, used by hot loops over integer counts.
class LogFactorialTable {
 public:
  explicit LogFactorialTable(std::size_t n);
  double operator()(std::size_t i) const { return table_[i]; }
  double log_binom(std::int64_t n, std::int64_t k) const {
    if (k < 0 || k > n) return kNegInf;
    return table_[n] - table_[k] - table_[n - k];
  }
  std::size_t size() const { return table_.size(); }

 private:
  std::vector<double> table_;
};

}  // namespace ciod
