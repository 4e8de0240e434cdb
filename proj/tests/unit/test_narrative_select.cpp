#include <cmath>
#include <random>
#include <sstream>

#include "ciodetect/error.hpp"
#include "ciodetect/narrative_select.hpp"
#include "doctest.h"

using namespace ciod;

namespace {

NarrativeFlagStats stat(std::uint32_t id, std::uint32_t m, std::uint32_t f) { return {id, m, {f}}; }

double log_sig(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

double log_target(double lam, double u, const std::vector<double>& L, const std::vector<NarrativeFlagStats>& st) {
  const double s = std::exp(u);
  double lp = -0.5 * (lam + 2) * (lam + 2) - 0.5 * s * s + u;
  for (std::size_t i = 0; i < L.size(); ++i) {
    const double z = (L[i] - lam) / s;
    lp += -0.5 * z * z - u + st[i].flagged[0] * log_sig(L[i]) + (st[i].accounts - st[i].flagged[0]) * log_sig(-L[i]);
  }
  return lp;
}

}  // namespace

TEST_CASE("prior predictive share of flag rates below 20%") {
  // P = E_s Phi((logit 0.2 + 2) / sqrt(1 + s^2)), s half-normal; Simpson on [0, 8]
  const double c = std::log(0.25) + 2.0;
  const int n = 4000;
  const double h = 8.0 / n;
  double acc = 0;
  for (int i = 0; i <= n; ++i) {
    const double s = i * h;
    const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
    const double dens = std::sqrt(2.0 / M_PI) * std::exp(-0.5 * s * s);
    acc += w * dens * 0.5 * std::erfc(-c / std::sqrt(1 + s * s) / std::sqrt(2.0));
  }
  const double oracle = acc * h / 3;
  const double sim = prior_rate_below(0.2, SelectConfig{}, 400000, 5);
  CHECK(sim == doctest::Approx(oracle).epsilon(0.01));
  CHECK(std::abs(sim - 0.69) <= 0.03);
}

TEST_CASE("variational fit tracks a Metropolis reference") {
  const std::vector<NarrativeFlagStats> st{stat(0, 40, 8), stat(1, 30, 3), stat(2, 25, 20), stat(3, 60, 12)};
  SelectConfig cfg;
  cfg.steps = 6000;
  const FlagRatePosterior post = fit_flag_rate_model(st, 0, cfg, 9);

  std::mt19937_64 g(1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud;
  double lam = -1.5, u = 0.0;
  std::vector<double> L{-1.4, -2.2, 1.4, -1.4};
  double cur = log_target(lam, u, L, st);
  std::vector<double> sum(4, 0.0);
  std::size_t kept = 0;
  for (int it = 0; it < 400000; ++it) {
    const double lam2 = lam + 0.3 * nd(g), u2 = u + 0.3 * nd(g);
    std::vector<double> L2 = L;
    for (double& x : L2) x += 0.15 * nd(g);
    const double prop = log_target(lam2, u2, L2, st);
    if (std::log(ud(g)) < prop - cur) lam = lam2, u = u2, L = L2, cur = prop;
    if (it >= 50000) {
      for (int i = 0; i < 4; ++i) sum[i] += L[i];
      ++kept;
    }
  }
  for (int i = 0; i < 4; ++i) CHECK(std::abs(post.L_mean(i) - sum[i] / kept) < 0.12);
  CHECK(post.L_samples.cols() == 1000);
  CHECK(post.elbo_trace.size() == 120);
  CHECK(post.elbo_trace.back() > post.elbo_trace.front());
}

TEST_CASE("KL suspicion") {
  FlagRatePosterior p;
  const int S = 40000;
  std::mt19937_64 g(4);
  std::normal_distribution<double> nd;
  p.lambda_samples.assign(S, 0.0);
  p.s_samples.assign(S, 1.0);
  p.L_samples.resize(3, S);
  for (int k = 0; k < S; ++k) {
    p.L_samples(0, k) = nd(g);
    p.L_samples(1, k) = 2.0 + 0.5 * nd(g);
    p.L_samples(2, k) = -1.0;
  }
  std::size_t degenerate = 0;
  const auto kl = kl_suspicion(p, &degenerate);
  CHECK(kl[0] < 0.01);
  // KL(N(2, 0.5) || N(0, 1)) = ln 2 + (0.25 + 4) / 2 - 1/2
  CHECK(kl[1] == doctest::Approx(std::log(2.0) + 2.125 - 0.5).epsilon(0.02));
  CHECK(kl[2] == 0.0);
  CHECK(degenerate == 1);
  for (double v : kl) CHECK(v >= 0.0);
}

TEST_CASE("more evidence at the same rate scores higher") {
  std::vector<NarrativeFlagStats> st;
  for (std::uint32_t i = 0; i < 30; ++i) st.push_back(stat(i, 50, 5 + i % 5));
  st.push_back(stat(30, 10, 8));
  st.push_back(stat(31, 100, 80));
  SelectConfig cfg;
  cfg.steps = 3000;
  const SuspicionScores s = score_narratives(st, 1, cfg, 3);
  CHECK(s.max[31] > s.max[30]);
  CHECK(s.max[30] > s.max[0]);
  const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (int i = 0; i < 32; ++i) v.push_back("t" + std::to_string(i));
    return v;
  }();
  const auto top = select_top_k(s.max, st, names, 2);
  CHECK(top == std::vector<std::uint32_t>{31, 30});
  std::ostringstream out;
  write_scores_csv(s, st, names, {"egg"}, out);
  CHECK(out.str().rfind("narrative,flag,kl,score_max,M_n,F_n\nt0,egg,", 0) == 0);
}

TEST_CASE("ranking ties and validation") {
  const std::vector<NarrativeFlagStats> st{stat(0, 5, 1), stat(1, 9, 1), stat(2, 9, 1), stat(3, 2, 1)};
  const std::vector<std::string> names{"d", "c", "b", "a"};
  const std::vector<double> scores{1.0, 0.5, 0.5, 2.0};
  CHECK(select_top_k(scores, st, names, 3) == std::vector<std::uint32_t>{3, 0, 2});
  CHECK(select_top_k(scores, st, names, 10).size() == 4);
  CHECK(select_most_frequent(st, names, 2) == std::vector<std::uint32_t>{2, 1});
  CHECK_THROWS_AS(select_top_k(scores, st, names, 0), ConfigError);
  SelectConfig one;
  one.samples = 1;
  CHECK_THROWS_AS(fit_flag_rate_model(st, 0, one, 1), ConfigError);
}

TEST_CASE("flag statistics from a table") {
  FeatureTable t;
  t.flag_names = {"egg", "baby"};
  t.narratives = {"x", "y", "z"};
  t.accounts = {{"a", {1, 0}, {{0, 3}, {2, 1}}, 4, 0.0}, {"b", {1, 1}, {{0, 1}}, 1, 0.0}, {"c", {0, 1}, {}, 2, 0.0}};
  const auto st = narrative_flag_stats(t);
  REQUIRE(st.size() == 2);
  CHECK(st[0].narrative == 0);
  CHECK(st[0].accounts == 2);
  CHECK(st[0].flagged == std::vector<std::uint32_t>{2, 1});
  CHECK(st[1].narrative == 2);
  CHECK(st[1].flagged == std::vector<std::uint32_t>{1, 0});
}
