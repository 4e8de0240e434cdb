#include "ciodetect/exact_small.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>
#include <string>

#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/parallel.hpp"
#include "ciodetect/random.hpp"
#include "ciodetect/synth.hpp"

namespace ciod {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// k * log(p) with 0 * log(0) = 0.
double xlog(std::int64_t k, double log_p) { return k == 0 ? 0.0 : static_cast<double>(k) * log_p; }

double log1m(double rho) { return std::log1p(-rho); }

class LgammaTable {
 public:
  LgammaTable(double offset, std::int64_t n) : v_(static_cast<std::size_t>(n) + 1) {
    for (std::int64_t i = 0; i <= n; ++i) v_[i] = std::lgamma(offset + static_cast<double>(i));
  }
  double operator[](std::int64_t i) const { return v_[static_cast<std::size_t>(i)]; }

 private:
  std::vector<double> v_;
};

// Beta-marginal log-likelihood of the full data given CIO totals, up to a
// constant: x of the T CIO accounts carry the flag, y carry the narrative.
class MarginalLik {
 public:
  MarginalLik(const CellCounts& cells, const SimplePriors& p)
      : m_(cells.total()),
        F_(cells.flagged()),
        Nn_(cells.narrative()),
        a0_(p.a0, m_), b0_(p.b0, m_), ab0_(p.a0 + p.b0, m_),
        a1_(p.a1, m_), b1_(p.b1, m_), ab1_(p.a1 + p.b1, m_),
        c0_(p.c0, m_), d0_(p.d0, m_), cd0_(p.c0 + p.d0, m_),
        c1_(p.c1, m_), d1_(p.d1, m_), cd1_(p.c1 + p.d1, m_) {}

  double flag(std::int64_t x, std::int64_t T) const {
    const std::int64_t G = m_ - F_;
    return a0_[F_ - x] + b0_[G - (T - x)] - ab0_[m_ - T] + a1_[x] + b1_[T - x] - ab1_[T];
  }
  double narrative(std::int64_t y, std::int64_t T) const {
    const std::int64_t H = m_ - Nn_;
    return c0_[Nn_ - y] + d0_[H - (T - y)] - cd0_[m_ - T] + c1_[y] + d1_[T - y] - cd1_[T];
  }
  double operator()(std::int64_t x, std::int64_t y, std::int64_t T) const {
    return flag(x, T) + narrative(y, T);
  }

  // Largest log-likelihood over all feasible (x, y) for a given T. Each part
  // is a sum of lgamma terms affine in x (resp. y), hence convex, so the
  // maximum sits at an end of the feasible range.
  double max_over_counts(std::int64_t T) const {
    auto best = [&](std::int64_t total, auto&& part) {
      const std::int64_t lo = std::max<std::int64_t>(0, T - (m_ - total));
      const std::int64_t hi = std::min(total, T);
      return std::max(part(lo, T), part(hi, T));
    };
    return best(F_, [&](std::int64_t x, std::int64_t t) { return flag(x, t); }) +
           best(Nn_, [&](std::int64_t y, std::int64_t t) { return narrative(y, t); });
  }

 private:
  std::int64_t m_, F_, Nn_;
  LgammaTable a0_, b0_, ab0_, a1_, b1_, ab1_, c0_, d0_, cd0_, c1_, d1_, cd1_;
};

void check_cells(const CellCounts& cells) {
  for (std::int64_t c : cells.m) {
    if (c < 0) throw ConfigError("cell counts must be nonnegative");
  }
  if (cells.total() < 1) throw ConfigError("at least one account is required");
}

}  // namespace

void SimplePriors::validate() const {
  for (double v : {a0, b0, a1, b1, c0, d0, c1, d1}) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("Beta prior parameters must be positive");
  }
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
}

SimpleData SimpleData::from_vectors(std::vector<std::uint8_t> f, std::vector<std::uint8_t> n) {
  if (f.size() != n.size()) throw ConfigError("flag and narrative vectors differ in length");
  SimpleData d;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f[i] > 1 || n[i] > 1) throw ConfigError("simple data entries must be 0 or 1");
    ++d.cells.m[cell_index(f[i], n[i])];
  }
  d.f = std::move(f);
  d.n = std::move(n);
  return d;
}

std::vector<double> CellPosterior::per_account(const SimpleData& data) const {
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i] = p[cell_index(data.f[i], data.n[i])];
  return out;
}

std::vector<double> exact_posterior_enumerate(const SimpleData& data, const SimplePriors& pr) {
  pr.validate();
  const std::size_t m = data.size();
  if (m > 20) throw SizeError("enumeration supports at most 20 accounts (got " + std::to_string(m) + ")");
  if (m == 0) return {};

  std::uint32_t fmask = 0, nmask = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (data.f[i]) fmask |= 1u << i;
    if (data.n[i]) nmask |= 1u << i;
  }
  const int F = std::popcount(fmask);
  const int Nn = std::popcount(nmask);
  const int M = static_cast<int>(m);
  const double lr = std::log(pr.rho);
  const double l1r = log1m(pr.rho);

  LogSumAccumulator total;
  std::vector<LogSumAccumulator> cio(m);
  for (std::uint32_t alpha = 0; alpha < (1u << m); ++alpha) {
    const int T = std::popcount(alpha);
    const int x = std::popcount(alpha & fmask);
    const int y = std::popcount(alpha & nmask);
    const double lw = log_beta(pr.a0 + (F - x), pr.b0 + (M - F) - (T - x)) +
                      log_beta(pr.a1 + x, pr.b1 + (T - x)) +
                      log_beta(pr.c0 + (Nn - y), pr.d0 + (M - Nn) - (T - y)) +
                      log_beta(pr.c1 + y, pr.d1 + (T - y)) + xlog(T, lr) + xlog(M - T, l1r);
    total.add(lw);
    for (std::uint32_t bits = alpha; bits; bits &= bits - 1) cio[std::countr_zero(bits)].add(lw);
  }
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    out[i] = cio[i].empty() ? 0.0 : std::exp(cio[i].value() - total.value());
  }
  return out;
}

CellPosterior factorized_posterior(const CellCounts& cells, const SimplePriors& pr,
                                   const TruncationSpec& trunc) {
  pr.validate();
  check_cells(cells);
  const std::int64_t m = cells.total();
  const std::int64_t mm = m - 1;
  const double lr = std::log(pr.rho);
  const double l1r = log1m(pr.rho);
  const MarginalLik lik(cells, pr);
  const LogFactorialTable lf(static_cast<std::size_t>(m));

  const std::int64_t t_lo = std::max<std::int64_t>(trunc.t_lo, 0);
  const std::int64_t t_hi = std::min(trunc.t_hi, mm);
  if (t_lo > t_hi) throw ConfigError("truncation retains no CIO count");

  // Upper bound on the excluded mass of the normalizer, same units as den.
  LogSumAccumulator excluded;
  for (std::int64_t t = 0; t <= mm; ++t) {
    if (trunc.retains(t)) continue;
    const double prior = lf.log_binom(mm, t) + xlog(t, lr) + xlog(mm - t, l1r);
    excluded.add(prior + logaddexp(lr + lik.max_over_counts(t + 1), l1r + lik.max_over_counts(t)));
  }

  CellPosterior out;
  double worst = kNegInf;
  for (int c = 0; c < 4; ++c) {
    if (cells.m[c] == 0) {
      out.p[c] = kNaN;
      continue;
    }
    std::array<std::int64_t, 4> o = cells.m;
    --o[c];
    const int fc = cell_flag(c) ? 1 : 0;
    const int nc = cell_narrative(c) ? 1 : 0;
    LogSumAccumulator num, den;
    for (std::int64_t t = t_lo; t <= t_hi; ++t) {
      const double prior = xlog(t, lr) + xlog(mm - t, l1r);
      const std::int64_t j1_lo = std::max<std::int64_t>(0, t - (o[1] + o[2] + o[3]));
      const std::int64_t j1_hi = std::min(o[0], t);
      for (std::int64_t j1 = j1_lo; j1 <= j1_hi; ++j1) {
        const double w1 = lf.log_binom(o[0], j1);
        const std::int64_t j2_lo = std::max<std::int64_t>(0, t - j1 - (o[2] + o[3]));
        const std::int64_t j2_hi = std::min(o[1], t - j1);
        for (std::int64_t j2 = j2_lo; j2 <= j2_hi; ++j2) {
          const double w2 = w1 + lf.log_binom(o[1], j2);
          const std::int64_t r = t - j1 - j2;
          const std::int64_t j3_lo = std::max<std::int64_t>(0, r - o[3]);
          const std::int64_t j3_hi = std::min(o[2], r);
          const std::int64_t x = j1 + j2;
          for (std::int64_t j3 = j3_lo; j3 <= j3_hi; ++j3) {
            const std::int64_t j4 = r - j3;
            const double w = w2 + lf.log_binom(o[2], j3) + lf.log_binom(o[3], j4) + prior;
            const std::int64_t y = j1 + j3;
            const double lp = w + lr + lik(x + fc, y + nc, t + 1);
            const double lq = w + l1r + lik(x, y, t);
            num.add(lp);
            den.add(lp);
            den.add(lq);
          }
        }
      }
    }
    if (!std::isfinite(den.value())) throw NonFiniteError("factorized posterior normalizer is not finite");
    out.p[c] = num.empty() ? 0.0 : std::exp(num.value() - den.value());
    if (!excluded.empty()) {
      const double b = excluded.value();
      worst = std::max(worst, b - logaddexp(den.value(), b));
    }
  }
  // Rounding allowance on top of the truncation bound.
  constexpr double kRounding = 1e-13;
  out.log10_error_bound = std::log10(std::exp(worst) + kRounding);
  return out;
}

FactorizedResult factorized_posterior(const SimpleData& data, const SimplePriors& priors,
                                      const TruncationSpec& trunc) {
  FactorizedResult r;
  r.cells = factorized_posterior(data.cells, priors, trunc);
  r.p = r.cells.per_account(data);
  return r;
}

double truncation_error_bound(std::int64_t m, double rho, const TruncationSpec& trunc) {
  if (m < 0) throw ConfigError("m must be nonnegative");
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("rho must lie in (0, 1)");
  // E = {0..m} minus [t_lo, t_hi]: up to two contiguous runs.
  struct Run {
    std::int64_t lo, hi;
  };
  std::vector<Run> runs;
  if (trunc.t_lo > 0) runs.push_back({0, std::min(trunc.t_lo - 1, m)});
  if (trunc.t_hi < m) runs.push_back({std::max<std::int64_t>(trunc.t_hi + 1, 0), m});
  std::int64_t t_max_e = -1;
  for (const Run& r : runs) {
    if (r.lo <= r.hi) t_max_e = std::max(t_max_e, r.hi);
  }
  if (t_max_e < 0) return kNegInf;
  const double lr = std::log(rho);
  // C(t'+3, 3) grows with t', so the max over E is at its largest element.
  const double log_coef = log_binom(static_cast<double>(t_max_e) + 3.0, 3.0);
  LogSumAccumulator sum;
  for (const Run& r : runs) {
    if (r.lo > r.hi) continue;
    // sum_{t=lo}^{hi} rho^t = rho^lo (1 - rho^(hi-lo+1)) / (1 - rho)
    const double n = static_cast<double>(r.hi - r.lo + 1);
    sum.add(static_cast<double>(r.lo) * lr + std::log(-std::expm1(n * lr)) - log1m(rho));
  }
  return (log_coef + sum.value()) / kLn10;
}

// ---------------------------------------------------------------------------
// Quadrature over the Beta-integral form.

namespace {

struct GaussHermite {
  std::vector<double> z;
  std::vector<double> w;  // weights for the e^{-z^2} kernel

  explicit GaussHermite(int n) {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    z.resize(n);
    w.resize(n);
    const double sqrt_pi = std::sqrt(M_PI);
    for (int i = 0; i < n; ++i) {
      z[i] = es.eigenvalues()(i);
      const double v = es.eigenvectors()(0, i);
      w[i] = sqrt_pi * v * v;
    }
  }
};

// Log integrand in logit coordinates u = (beta0, gamma0, beta1, gamma1).
class MixtureDensity {
 public:
  MixtureDensity(const CellCounts& cells, const SimplePriors& p) : p_(p) {
    for (int c = 0; c < 4; ++c) mc_[c] = static_cast<double>(cells.m[c]);
    lr_ = std::log(p.rho);
    l1r_ = log1m(p.rho);
  }

  struct Outer {
    std::array<double, 4> lq1;  // log q1 per cell
    double prior;
  };

  Outer outer(double ub1, double ug1) const {
    const double lb = log_sigmoid(ub1), lnb = log_sigmoid(-ub1);
    const double lg = log_sigmoid(ug1), lng = log_sigmoid(-ug1);
    Outer o;
    for (int c = 0; c < 4; ++c) o.lq1[c] = (cell_flag(c) ? lb : lnb) + (cell_narrative(c) ? lg : lng);
    o.prior = p_.a1 * lb + p_.b1 * lnb + p_.c1 * lg + p_.d1 * lng;
    return o;
  }

  // Value, and optionally gradient/Hessian w.r.t. the non-CIO logits.
  double inner(const Outer& o, double ub0, double ug0, double* grad = nullptr,
               double* hess = nullptr, std::array<double, 4>* r = nullptr) const {
    const double sb = sigmoid(ub0), sg = sigmoid(ug0);
    const double lb = log_sigmoid(ub0), lnb = log_sigmoid(-ub0);
    const double lg = log_sigmoid(ug0), lng = log_sigmoid(-ug0);
    double v = o.prior + p_.a0 * lb + p_.b0 * lnb + p_.c0 * lg + p_.d0 * lng;
    double gb = p_.a0 * (1.0 - sb) - p_.b0 * sb;
    double gg = p_.c0 * (1.0 - sg) - p_.d0 * sg;
    double hbb = -(p_.a0 + p_.b0) * sb * (1.0 - sb);
    double hgg = -(p_.c0 + p_.d0) * sg * (1.0 - sg);
    double hbg = 0.0;
    for (int c = 0; c < 4; ++c) {
      const double lq0 = (cell_flag(c) ? lb : lnb) + (cell_narrative(c) ? lg : lng);
      const double a = l1r_ + lq0;
      const double b = lr_ + o.lq1[c];
      const double s = logaddexp(a, b);
      if (r) (*r)[c] = b == kNegInf ? 0.0 : std::exp(b - s);
      if (mc_[c] == 0.0) continue;
      v += mc_[c] * s;
      if (grad) {
        const double w0 = std::exp(a - s);
        const double db = cell_flag(c) ? 1.0 - sb : -sb;
        const double dg = cell_narrative(c) ? 1.0 - sg : -sg;
        gb += mc_[c] * w0 * db;
        gg += mc_[c] * w0 * dg;
        const double ww = w0 * (1.0 - w0);
        hbb += mc_[c] * (ww * db * db - w0 * sb * (1.0 - sb));
        hgg += mc_[c] * (ww * dg * dg - w0 * sg * (1.0 - sg));
        hbg += mc_[c] * ww * db * dg;
      }
    }
    if (grad) {
      grad[0] = gb;
      grad[1] = gg;
      hess[0] = hbb;
      hess[1] = hbg;
      hess[2] = hgg;
    }
    return v;
  }

 private:
  SimplePriors p_;
  std::array<double, 4> mc_{};
  double lr_ = 0.0, l1r_ = 0.0;
};

struct InnerMode {
  double u0[2];
  double value;
  double hess[3];  // of the log integrand at the mode
};

// Damped Newton ascent on the non-CIO logits.
InnerMode find_inner_mode(const MixtureDensity& dens, const MixtureDensity::Outer& o, double ub0,
                          double ug0) {
  double g[2], h[3];
  double v = dens.inner(o, ub0, ug0, g, h);
  for (int iter = 0; iter < 200; ++iter) {
    // Solve (-H + lambda I) step = g with lambda raised until ascent.
    double lambda = 0.0;
    const double det = h[0] * h[2] - h[1] * h[1];
    if (!(h[0] < 0.0 && det > 0.0)) lambda = std::abs(h[0]) + std::abs(h[2]) + std::abs(h[1]) + 1.0;
    bool moved = false;
    double step_norm = 0.0;
    for (int tries = 0; tries < 60; ++tries) {
      const double A = -h[0] + lambda, B = -h[1], C = -h[2] + lambda;
      const double D = A * C - B * B;
      const double s0 = (C * g[0] - B * g[1]) / D;
      const double s1 = (A * g[1] - B * g[0]) / D;
      const double nb = ub0 + s0, ng = ug0 + s1;
      double g2[2], h2[3];
      const double v2 = dens.inner(o, nb, ng, g2, h2);
      if (std::isfinite(v2) && v2 >= v - 1e-12 * std::abs(v)) {
        step_norm = std::abs(s0) + std::abs(s1);
        ub0 = nb;
        ug0 = ng;
        v = v2;
        std::copy(g2, g2 + 2, g);
        std::copy(h2, h2 + 3, h);
        moved = true;
        break;
      }
      lambda = lambda == 0.0 ? 1e-3 * (std::abs(h[0]) + std::abs(h[2]) + 1.0) : lambda * 4.0;
    }
    if (!moved || step_norm < 1e-10) break;
  }
  return {{ub0, ug0}, v, {h[0], h[1], h[2]}};
}

struct NodeSums {
  double z = 0.0;
  std::array<double, 4> n{};

  void add(const NodeSums& o) {
    z += o.z;
    for (int c = 0; c < 4; ++c) n[c] += o.n[c];
  }
};

}  // namespace

CellPosterior quadrature_posterior(const CellCounts& cells, const SimplePriors& pr,
                                   const QuadratureOptions& opts) {
  pr.validate();
  check_cells(cells);
  CellPosterior out;
  if (pr.rho == 0.0) {
    for (int c = 0; c < 4; ++c) out.p[c] = cells.m[c] == 0 ? kNaN : 0.0;
    return out;
  }
  const MixtureDensity dens(cells, pr);
  const GaussHermite gh(opts.inner_order);

  const double min_shape = std::min({pr.a1, pr.b1, pr.c1, pr.d1, 1.0});
  double L = std::min(400.0, 40.0 / min_shape);
  const double h0 = opts.coarse_step;

  for (int attempt = 0; attempt < 3; ++attempt, L *= 2.0) {
    const int n = static_cast<int>(std::ceil(2.0 * L / h0)) + 1;
    auto coord = [&](int i, double h) { return -L + i * h; };

    // Laplace-approximated outer log density on the coarse grid.
    std::vector<double> lap(static_cast<std::size_t>(n) * n);
    std::vector<std::array<double, 2>> modes(lap.size());
    double start[2] = {std::log(0.3), std::log(0.3)};
    for (int i = 0; i < n; ++i) {
      double row_start[2] = {start[0], start[1]};
      for (int j = 0; j < n; ++j) {
        const auto o = dens.outer(coord(i, h0), coord(j, h0));
        const InnerMode im = find_inner_mode(dens, o, row_start[0], row_start[1]);
        const double det = im.hess[0] * im.hess[2] - im.hess[1] * im.hess[1];
        const std::size_t k = static_cast<std::size_t>(i) * n + j;
        lap[k] = det > 0 ? im.value + std::log(2.0 * M_PI) - 0.5 * std::log(det) : im.value;
        modes[k] = {im.u0[0], im.u0[1]};
        row_start[0] = im.u0[0];
        row_start[1] = im.u0[1];
        if (j == 0) {
          start[0] = im.u0[0];
          start[1] = im.u0[1];
        }
      }
    }
    const double ref = *std::max_element(lap.begin(), lap.end());
    if (!std::isfinite(ref)) throw NonFiniteError("quadrature reference density is not finite");

    // Coarse cells touching a significant node, dilated by one cell.
    const int nc = n - 1;
    std::vector<std::uint8_t> sig(static_cast<std::size_t>(nc) * nc, 0);
    bool touches_edge = false;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (lap[static_cast<std::size_t>(i) * n + j] < ref - opts.significance) continue;
        if (i == 0 || j == 0 || i == n - 1 || j == n - 1) touches_edge = true;
        for (int di = -2; di <= 1; ++di) {
          for (int dj = -2; dj <= 1; ++dj) {
            const int ci = i + di, cj = j + dj;
            if (ci >= 0 && cj >= 0 && ci < nc && cj < nc) sig[static_cast<std::size_t>(ci) * nc + cj] = 1;
          }
        }
      }
    }
    if (touches_edge && attempt < 2) continue;

    auto node_value = [&](double ub1, double ug1, int ci, int cj) {
      const auto o = dens.outer(ub1, ug1);
      const auto& st = modes[static_cast<std::size_t>(ci) * n + cj];
      const InnerMode im = find_inner_mode(dens, o, st[0], st[1]);
      NodeSums s;
      // Scaled Gauss-Hermite rule around the inner mode.
      const double A = -im.hess[0], B = -im.hess[1], C = -im.hess[2];
      const double det = A * C - B * B;
      if (!(A > 0 && det > 0)) return s;
      // Cholesky factor of the covariance (inverse of [[A,B],[B,C]]).
      const double c00 = C / det, c01 = -B / det, c11 = A / det;
      const double l00 = std::sqrt(c00);
      const double l10 = c01 / l00;
      const double l11 = std::sqrt(std::max(c11 - l10 * l10, 0.0));
      const double jac = 2.0 * l00 * l11;
      for (std::size_t a = 0; a < gh.z.size(); ++a) {
        for (std::size_t b = 0; b < gh.z.size(); ++b) {
          const double za = M_SQRT2 * gh.z[a], zb = M_SQRT2 * gh.z[b];
          const double ub0 = im.u0[0] + l00 * za;
          const double ug0 = im.u0[1] + l10 * za + l11 * zb;
          std::array<double, 4> r;
          const double v = dens.inner(o, ub0, ug0, nullptr, nullptr, &r);
          const double e =
              gh.w[a] * gh.w[b] * jac *
              std::exp(v - ref + gh.z[a] * gh.z[a] + gh.z[b] * gh.z[b]);
          s.z += e;
          for (int c = 0; c < 4; ++c) s.n[c] += e * r[c];
        }
      }
      return s;
    };

    // Trapezoid refinement; level l adds the nodes with odd indices.
    NodeSums raw;
    std::array<double, 5> prev{};
    bool have_prev = false;
    for (int level = 0; level <= opts.max_levels; ++level) {
      const int scale = 1 << level;
      const double h = h0 / scale;
      const int nf = nc * scale + 1;
      for (int p = 0; p < nf; ++p) {
        const int ci = std::min(p / scale, nc - 1);
        for (int q = 0; q < nf; ++q) {
          if (level > 0 && p % 2 == 0 && q % 2 == 0) continue;
          const int cj = std::min(q / scale, nc - 1);
          // Include the node if any coarse cell containing it is significant.
          bool in = false;
          const int a_hi = p / scale, a_lo = (p + scale - 1) / scale - 1;
          const int b_hi = q / scale, b_lo = (q + scale - 1) / scale - 1;
          for (int a : {a_lo, a_hi}) {
            for (int b : {b_lo, b_hi}) {
              if (a >= 0 && b >= 0 && a < nc && b < nc && sig[static_cast<std::size_t>(a) * nc + b]) in = true;
            }
          }
          if (!in) continue;
          raw.add(node_value(coord(p, h), coord(q, h), ci, cj));
        }
      }
      const double w = h * h;
      std::array<double, 5> cur{raw.z * w, raw.n[0] * w, raw.n[1] * w, raw.n[2] * w, raw.n[3] * w};
      if (!(cur[0] > 0.0) || !std::isfinite(cur[0])) throw NonFiniteError("quadrature normalizer vanished");
      bool converged = have_prev;
      if (have_prev) {
        if (std::abs(cur[0] - prev[0]) > opts.rel_tol * cur[0]) converged = false;
        for (int c = 0; c < 4; ++c) {
          if (std::abs(cur[c + 1] / cur[0] - prev[c + 1] / prev[0]) > opts.rel_tol) converged = false;
        }
      }
      prev = cur;
      have_prev = true;
      if (converged) break;
    }
    for (int c = 0; c < 4; ++c) out.p[c] = cells.m[c] == 0 ? kNaN : std::clamp(prev[c + 1] / prev[0], 0.0, 1.0);
    out.log10_error_bound = kNegInf;
    return out;
  }
  throw NonFiniteError("posterior mass reaches the quadrature boundary");
}

// ---------------------------------------------------------------------------
// Power analyses.

namespace {

struct Tally {
  double cio_sum = 0.0, non_sum = 0.0;
  std::size_t cio = 0, non = 0;
};

Tally score_replicate(std::int64_t m, double share, RatePair flag, RatePair narrative,
                      SimplePriors priors, std::uint64_t seed) {
  const SimpleSample s = generate_simple(m, share, flag, narrative, seed);
  priors.rho = share;
  Tally t;
  if (s.data.cells.total() == 0) return t;
  const CellPosterior post = quadrature_posterior(s.data.cells, priors);
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    const double p = post.p[cell_index(s.data.f[i], s.data.n[i])];
    if (s.labels[i]) {
      t.cio_sum += p;
      ++t.cio;
    } else {
      t.non_sum += p;
      ++t.non;
    }
  }
  return t;
}

PowerRow reduce(double x, const std::vector<Tally>& reps) {
  Tally all;
  for (const Tally& t : reps) {
    all.cio_sum += t.cio_sum;
    all.non_sum += t.non_sum;
    all.cio += t.cio;
    all.non += t.non;
  }
  PowerRow row;
  row.x = x;
  row.cio_accounts = all.cio;
  row.noncio_accounts = all.non;
  row.p_cio_given_cio = all.cio ? all.cio_sum / static_cast<double>(all.cio) : kNaN;
  row.p_cio_given_noncio = all.non ? all.non_sum / static_cast<double>(all.non) : kNaN;
  return row;
}

template <typename Setting>
std::vector<PowerRow> sweep(std::size_t settings, std::size_t replicates, std::uint64_t seed,
                            Setting&& run) {
  if (replicates == 0) throw ConfigError("replicates must be at least 1");
  std::vector<Tally> tallies(settings * replicates);
  parallel_for(tallies.size(), default_jobs(), [&](std::size_t k) {
    const std::size_t s = k / replicates, r = k % replicates;
    tallies[k] = run(s, derive_seed(seed, (static_cast<std::uint64_t>(s) << 32) | r));
  });
  std::vector<PowerRow> rows;
  for (std::size_t s = 0; s < settings; ++s) {
    rows.push_back(reduce(0.0, std::vector<Tally>(tallies.begin() + s * replicates,
                                                  tallies.begin() + (s + 1) * replicates)));
  }
  return rows;
}

}  // namespace

std::vector<PowerRow> power_analysis_share(const ShareScenario& sc) {
  auto rows = sweep(sc.shares.size(), sc.replicates, sc.seed, [&](std::size_t s, std::uint64_t seed) {
    return score_replicate(sc.m, sc.shares[s], sc.flag, sc.narrative, sc.priors, seed);
  });
  for (std::size_t s = 0; s < rows.size(); ++s) rows[s].x = sc.shares[s];
  return rows;
}

std::vector<PowerRow> power_analysis_size(const SizeScenario& sc) {
  auto rows = sweep(sc.sizes.size(), sc.replicates, sc.seed, [&](std::size_t s, std::uint64_t seed) {
    return score_replicate(sc.sizes[s], sc.share, sc.flag, sc.narrative, sc.priors, seed);
  });
  for (std::size_t s = 0; s < rows.size(); ++s) rows[s].x = static_cast<double>(sc.sizes[s]);
  return rows;
}

std::vector<PowerRow> power_analysis_adoption(const AdoptionScenario& sc) {
  auto rows = sweep(sc.adoption.size(), sc.replicates, sc.seed, [&](std::size_t s, std::uint64_t seed) {
    return score_replicate(sc.m, sc.share, {sc.adoption[s], sc.flag_noncio},
                           {sc.adoption[s], sc.narrative_noncio}, sc.priors, seed);
  });
  for (std::size_t s = 0; s < rows.size(); ++s) rows[s].x = sc.adoption[s];
  return rows;
}

void write_power_csv(const std::vector<PowerRow>& rows, const std::string& x_name, std::ostream& out) {
  std::string text = x_name + ",p_cio_given_cio,p_cio_given_noncio\n";
  for (const PowerRow& r : rows) {
    csv::append_double(text, r.x);
    text += ',';
    csv::append_double(text, r.p_cio_given_cio);
    text += ',';
    csv::append_double(text, r.p_cio_given_noncio);
    text += '\n';
  }
  out << text;
}

}  // namespace ciod
