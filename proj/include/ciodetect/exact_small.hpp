#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace ciod {

// Beta priors on the flag (a, b) and narrative (c, d) rates of the non-CIO
// (index 0) and CIO (index 1) clusters, and the Bernoulli CIO prior rho.
struct SimplePriors {
  double a0 = 1.0, b0 = 1.0, a1 = 1.0, b1 = 1.0;
  double c0 = 1.0, d0 = 1.0, c1 = 1.0, d1 = 1.0;
  double rho = 0.01;

  void validate() const;
};

// Cells in the order (flag, narrative) = 11, 10, 01, 00.
inline constexpr int cell_index(bool flag, bool narrative) {
  return flag ? (narrative ? 0 : 1) : (narrative ? 2 : 3);
}
inline constexpr bool cell_flag(int c) { return c < 2; }
inline constexpr bool cell_narrative(int c) { return c == 0 || c == 2; }

struct CellCounts {
  std::array<std::int64_t, 4> m{};

  std::int64_t total() const { return m[0] + m[1] + m[2] + m[3]; }
  std::int64_t flagged() const { return m[0] + m[1]; }
  std::int64_t narrative() const { return m[0] + m[2]; }
};

struct SimpleData {
  std::vector<std::uint8_t> f;
  std::vector<std::uint8_t> n;
  CellCounts cells;

  std::size_t size() const { return f.size(); }
  static SimpleData from_vectors(std::vector<std::uint8_t> f, std::vector<std::uint8_t> n);
};

// Retained CIO counts t (among the other m-1 accounts) form [t_lo, t_hi];
// everything else is the excluded set E.
struct TruncationSpec {
  std::int64_t t_lo = 0;
  std::int64_t t_hi = std::numeric_limits<std::int64_t>::max();

  static TruncationSpec none() { return {}; }
  static TruncationSpec below(std::int64_t t_max) { return {0, t_max - 1}; }
  bool retains(std::int64_t t) const { return t >= t_lo && t <= t_hi; }
};

// Per-cell P(alpha = 1); NaN for cells with no accounts.
struct CellPosterior {
  std::array<double, 4> p{};
  // log10 of the certified absolute error; -inf when nothing was dropped.
  double log10_error_bound = -std::numeric_limits<double>::infinity();

  std::vector<double> per_account(const SimpleData& data) const;
};

// Brute-force sum over all 2^m assignments. Throws SizeError for m > 20.
std::vector<double> exact_posterior_enumerate(const SimpleData& data, const SimplePriors& priors);

// Compositional sum over the retained t and (j1..j4) with binomial weights,
// one evaluation per cell.
CellPosterior factorized_posterior(const CellCounts& cells, const SimplePriors& priors,
                                   const TruncationSpec& trunc = TruncationSpec::none());

struct FactorizedResult {
  std::vector<double> p;  // per account
  CellPosterior cells;
};
FactorizedResult factorized_posterior(const SimpleData& data, const SimplePriors& priors,
                                      const TruncationSpec& trunc = TruncationSpec::none());

// log10 of sum_{t in E} max_{t' in E} C(t'+3, 3) rho^t with E = {0..m} minus
// the retained window. -inf when E is empty.
double truncation_error_bound(std::int64_t m, double rho, const TruncationSpec& trunc);

struct QuadratureOptions {
  int inner_order = 16;           // Gauss-Hermite points per non-CIO rate
  double coarse_step = 0.5;       // logit-space grid for locating mass
  double significance = 30.0;     // nats below the peak that are dropped
  double rel_tol = 1e-9;          // trapezoid refinement stop
  int max_levels = 7;
};

// Same posterior as factorized_posterior with no truncation, computed from
// the Beta-integral form by nested quadrature; scales to m in the 1e4-1e5
// range.
CellPosterior quadrature_posterior(const CellCounts& cells, const SimplePriors& priors,
                                   const QuadratureOptions& opts = {});

struct RatePair {
  double cio = 0.5;
  double non_cio = 0.5;
};

struct PowerRow {
  double x = 0.0;  // share, m, or adoption rate
  double p_cio_given_cio = 0.0;
  double p_cio_given_noncio = 0.0;
  std::size_t cio_accounts = 0;
  std::size_t noncio_accounts = 0;
};

struct ShareScenario {
  std::int64_t m = 25000;
  std::vector<double> shares{0.001, 0.0025, 0.005, 0.01, 0.015, 0.02};
  RatePair flag{0.98, 0.21};
  RatePair narrative{0.93, 0.12};
  std::size_t replicates = 25;
  std::uint64_t seed = 1;
  SimplePriors priors;  // rho is replaced by each share
};
std::vector<PowerRow> power_analysis_share(const ShareScenario& sc);

struct SizeScenario {
  std::vector<std::int64_t> sizes{500, 2000, 8000};
  double share = 0.003;
  RatePair flag{0.98, 0.21};
  RatePair narrative{0.93, 0.12};
  std::size_t replicates = 25;
  std::uint64_t seed = 1;
  SimplePriors priors;  // rho is replaced by share
};
std::vector<PowerRow> power_analysis_size(const SizeScenario& sc);

struct AdoptionScenario {
  std::int64_t m = 25000;
  double share = 0.003;
  std::vector<double> adoption{0.2, 0.5, 0.8, 0.95};
  double flag_noncio = 0.216;
  double narrative_noncio = 0.117;
  std::size_t replicates = 25;
  std::uint64_t seed = 1;
  SimplePriors priors;
};
std::vector<PowerRow> power_analysis_adoption(const AdoptionScenario& sc);

// <x_name>,p_cio_given_cio,p_cio_given_noncio
void write_power_csv(const std::vector<PowerRow>& rows, const std::string& x_name, std::ostream& out);

}  // namespace ciod
