#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ciodetect/detect_model.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/random.hpp"
#include "ciodetect/synth.hpp"
#include "doctest.h"

using namespace ciod;

namespace {

FeatureTable small_table(std::size_t n, std::size_t mf, std::size_t msel, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_int_distribution<int> msg(1, 9);
  std::bernoulli_distribution coin(0.4);
  FeatureTable t;
  for (std::size_t f = 0; f < mf; ++f) t.flag_names.push_back("f" + std::to_string(f));
  for (std::size_t c = 0; c < msel; ++c) t.narratives.push_back("n" + std::to_string(c));
  for (std::size_t j = 0; j < n; ++j) {
    AccountFeatures a;
    a.account_id = "a" + std::to_string(j);
    a.message_count = static_cast<std::uint32_t>(msg(g));
    for (std::size_t f = 0; f < mf; ++f) a.flags.push_back(coin(g) ? 1 : 0);
    for (std::size_t c = 0; c < msel; ++c) {
      std::uniform_int_distribution<std::uint32_t> cnt(0, a.message_count);
      const std::uint32_t v = cnt(g);
      if (v) a.narrative_counts.emplace_back(static_cast<std::uint32_t>(c), v);
    }
    a.narrative_entropy = narrative_entropy(a.narrative_counts);
    t.accounts.push_back(a);
  }
  return t;
}

ModelPriors random_priors(Eigen::Index k, Eigen::Index mf, Eigen::Index msel, std::mt19937_64& g) {
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ud(0.5, 2.0);
  ModelPriors p;
  p.mu_clust.resize(k);
  p.sigma_clust.resize(k);
  for (Eigen::Index i = 0; i < k; ++i) p.mu_clust(i) = nd(g), p.sigma_clust(i) = ud(g);
  p.mu_f = Eigen::MatrixXd::NullaryExpr(k, mf, [&] { return nd(g); });
  p.sigma_f = Eigen::MatrixXd::NullaryExpr(k, mf, [&] { return ud(g); });
  p.mu_n = Eigen::MatrixXd::NullaryExpr(k, msel, [&] { return nd(g) - 1.0; });
  p.sigma_n = Eigen::MatrixXd::NullaryExpr(k, msel, [&] { return ud(g); });
  return p;
}

double lnorm(double x, double m, double s) { return -0.5 * ((x - m) / s) * ((x - m) / s) - std::log(s) - 0.5 * std::log(2 * M_PI); }

// Explicit product-sum over every assignment of accounts to clusters.
double brute_log_joint(const Eigen::MatrixXd& beta, const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& l,
                       const FeatureTable& t, const ModelPriors& p) {
  const Eigen::Index k = l.cols();
  const std::size_t n = t.accounts.size();
  double base = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index f = 0; f < beta.cols(); ++f) base += lnorm(beta(i, f), p.mu_f(i, f), p.sigma_f(i, f));
    for (Eigen::Index c = 0; c < gamma.cols(); ++c) base += lnorm(gamma(i, c), p.mu_n(i, c), p.sigma_n(i, c));
  }
  for (std::size_t j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < k; ++i) base += lnorm(l(j, i), p.mu_clust(i), p.sigma_clust(i));
  auto lik = [&](std::size_t j, Eigen::Index i) {
    const auto& a = t.accounts[j];
    double v = 1;
    for (Eigen::Index f = 0; f < beta.cols(); ++f) {
      const double q = 1 / (1 + std::exp(-beta(i, f)));
      v *= a.flags[f] ? q : 1 - q;
    }
    for (Eigen::Index c = 0; c < gamma.cols(); ++c) {
      const double q = 1 / (1 + std::exp(-gamma(i, c)));
      const double M = a.message_count, x = a.count(static_cast<std::uint32_t>(c));
      v *= std::exp(std::lgamma(M + 1) - std::lgamma(x + 1) - std::lgamma(M - x + 1)) * std::pow(q, x) * std::pow(1 - q, M - x);
    }
    double z = 0;
    for (Eigen::Index h = 0; h < k; ++h) z += std::exp(l(j, h));
    return std::exp(l(j, i)) / z * v;
  };
  double total = 0;
  std::size_t combos = 1;
  for (std::size_t j = 0; j < n; ++j) combos *= static_cast<std::size_t>(k);
  for (std::size_t a = 0; a < combos; ++a) {
    double prod = 1;
    std::size_t code = a;
    for (std::size_t j = 0; j < n; ++j) {
      prod *= lik(j, static_cast<Eigen::Index>(code % k));
      code /= static_cast<std::size_t>(k);
    }
    total += prod;
  }
  return base + std::log(total);
}

std::vector<Eigen::Index> all_rows(Eigen::Index n) {
  std::vector<Eigen::Index> r(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = i;
  return r;
}

// Sets the encoder's log-sd head to a constant and its weights to zero.
void pin_logsd(VariationalState& st, double logsd) {
  const Eigen::Index k = st.layout.k, h3 = st.encoder.hidden[2];
  st.theta.tail(k).setConstant(logsd);
  st.theta.segment(st.theta.size() - k - k * h3, k * h3).setZero();
}

}  // namespace

TEST_CASE("default cluster priors") {
  const auto s = default_cluster_shares(4);
  const double expect[] = {10000.0 / 10016, 10.0 / 10016, 5.0 / 10016, 1.0 / 10016};
  for (int i = 0; i < 4; ++i) CHECK(std::abs(s[i] - expect[i]) < 1e-12);
  CHECK(default_cluster_shares(6).size() == 6);
  CHECK(default_cluster_shares(6)[5] == doctest::Approx(default_cluster_shares(6)[4] * 0.2));
  CHECK_THROWS_AS(default_cluster_shares(1), ConfigError);

  FeatureTable t = small_table(1000, 1, 1, 1);
  for (std::size_t j = 0; j < 1000; ++j) t.accounts[j].flags[0] = j < 216;
  const ModelData d = assemble_model_data(t);
  const ModelPriors p = default_priors(d, 4);
  CHECK(p.mu_f(0, 0) == doctest::Approx(-1.5325).epsilon(1e-4));
  CHECK(p.sigma_f(0, 0) == 0.3);
  CHECK(p.mu_f(2, 0) == 0.0);
  CHECK(p.sigma_f(2, 0) == 3.0);
  CHECK(p.sigma_clust(0) == 0.5);
  CHECK(p.sigma_clust(3) == 1.8);
  Eigen::VectorXd soft = p.mu_clust.array().exp();
  soft /= soft.sum();
  for (int i = 0; i < 4; ++i) CHECK(std::abs(soft(i) - expect[i]) < 1e-12);
}

TEST_CASE("prior share intervals by forward sampling") {
  auto intervals = [](const std::vector<double>& mu, const std::vector<double>& sd) {
    std::mt19937_64 g(42);
    std::normal_distribution<double> nd;
    const std::size_t k = mu.size(), n = 200000;
    std::vector<std::vector<double>> share(k, std::vector<double>(n));
    for (std::size_t s = 0; s < n; ++s) {
      std::vector<double> e(k);
      double z = 0;
      for (std::size_t i = 0; i < k; ++i) z += e[i] = std::exp(mu[i] + sd[i] * nd(g));
      for (std::size_t i = 0; i < k; ++i) share[i][s] = e[i] / z;
    }
    std::vector<std::pair<double, double>> out;
    for (auto& v : share) {
      std::sort(v.begin(), v.end());
      out.emplace_back(v[n / 40], v[n - n / 40]);
    }
    return out;
  };
  auto within = [](double got, double want) { return std::abs(got - want) <= 0.2 * want; };

  // k = 3 example with scales used as standard deviations
  const auto k3 = intervals({-0.01, -5.30, -5.30}, {0.1, 1, 1});
  CHECK(within(k3[0].first, 0.947));
  CHECK(within(k3[0].second, 0.997));
  CHECK(within(k3[1].first, 0.0007));
  CHECK(within(k3[1].second, 0.03));

  // The k = 4 intervals are reproduced when the stated scales are read as
  // variances; the last upper endpoint (0.021%) is not reproduced either way.
  std::vector<double> mu;
  for (double s : default_cluster_shares(4)) mu.push_back(std::log(s));
  const auto k4 = intervals(mu, {std::sqrt(0.5), std::sqrt(1.8), std::sqrt(1.8), std::sqrt(1.8)});
  CHECK(within(k4[0].first, 0.97));
  CHECK(k4[0].second > 0.99);
  CHECK(within(k4[1].first, 0.000047));
  CHECK(within(k4[1].second, 0.020));
  CHECK(within(k4[2].first, 0.000022));
  CHECK(within(k4[2].second, 0.01));
  CHECK(within(k4[3].first, 0.000005));

  // Under the standard-deviation reading the minority intervals widen.
  const auto sd4 = intervals(mu, {0.5, 1.8, 1.8, 1.8});
  CHECK(sd4[1].first < k4[1].first);
  CHECK(sd4[1].second > k4[1].second);
}

TEST_CASE("log_joint matches the brute-force product-sum") {
  std::mt19937_64 g(8);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 12; ++rep) {
    const Eigen::Index k = 1 + rep % 3, mf = 1 + rep % 2, msel = (rep / 2) % 3;
    const std::size_t n = 1 + rep % 5;
    const FeatureTable t = small_table(n, mf, msel, 100 + rep);
    const ModelData d = assemble_model_data(t);
    const ModelPriors p = random_priors(k, mf, msel, g);
    const Eigen::MatrixXd beta = Eigen::MatrixXd::NullaryExpr(k, mf, [&] { return nd(g); });
    const Eigen::MatrixXd gamma = Eigen::MatrixXd::NullaryExpr(k, msel, [&] { return nd(g) - 1; });
    const Eigen::MatrixXd l = Eigen::MatrixXd::NullaryExpr(static_cast<Eigen::Index>(n), k, [&] { return nd(g); });
    const auto rows = all_rows(static_cast<Eigen::Index>(n));
    CHECK(log_joint(beta, gamma, l, d, rows, p) == doctest::Approx(brute_log_joint(beta, gamma, l, t, p)).epsilon(1e-11));
  }
}

TEST_CASE("log_joint modes, batch scaling and supervision") {
  std::mt19937_64 g(9);
  std::normal_distribution<double> nd;
  const FeatureTable t = small_table(4, 2, 2, 5);
  ModelData d = assemble_model_data(t);
  const ModelPriors p = random_priors(2, 2, 2, g);
  const Eigen::MatrixXd beta = Eigen::MatrixXd::NullaryExpr(2, 2, [&] { return nd(g); });
  const Eigen::MatrixXd gamma = Eigen::MatrixXd::NullaryExpr(2, 2, [&] { return nd(g); });
  const Eigen::MatrixXd l = Eigen::MatrixXd::NullaryExpr(4, 2, [&] { return nd(g); });
  const auto rows = all_rows(4);

  // flags only equals the full model on a table without narratives
  FeatureTable no_n = t;
  no_n.narratives.clear();
  for (auto& a : no_n.accounts) a.narrative_counts.clear();
  ModelPriors pf = p;
  pf.mu_n.resize(2, 0);
  pf.sigma_n.resize(2, 0);
  const ModelData dn = assemble_model_data(no_n);
  CHECK(log_joint(beta, gamma, l, d, rows, p, FeatureMode::kFlagsOnly) ==
        doctest::Approx(log_joint(beta, Eigen::MatrixXd(2, 0), l, dn, rows, pf)).epsilon(1e-13));

  // a batch of two copies of one account at fixed N gives the same value as one copy
  const std::vector<Eigen::Index> one{1}, two{1, 1};
  Eigen::MatrixXd l2(2, 2);
  l2 << l.row(1), l.row(1);
  CHECK(log_joint(beta, gamma, l.row(1), d, one, p) == doctest::Approx(log_joint(beta, gamma, l2, d, two, p)).epsilon(1e-13));

  // supervised: only the labelled cluster's term
  d.labels = {0, 1, 1, 0};
  const double sup = log_joint(beta, gamma, l, d, rows, p, FeatureMode::kBoth, true);
  double by_hand = 0;
  for (Eigen::Index i = 0; i < 2; ++i) {
    for (Eigen::Index f = 0; f < 2; ++f) by_hand += lnorm(beta(i, f), p.mu_f(i, f), p.sigma_f(i, f));
    for (Eigen::Index c = 0; c < 2; ++c) by_hand += lnorm(gamma(i, c), p.mu_n(i, c), p.sigma_n(i, c));
  }
  for (std::size_t j = 0; j < 4; ++j) {
    const int y = d.labels[j];
    const auto& a = t.accounts[j];
    for (Eigen::Index i = 0; i < 2; ++i) by_hand += lnorm(l(j, i), p.mu_clust(i), p.sigma_clust(i));
    by_hand += l(j, y) - std::log(std::exp(l(j, 0)) + std::exp(l(j, 1)));
    for (Eigen::Index f = 0; f < 2; ++f) by_hand += a.flags[f] ? log_sigmoid(beta(y, f)) : log_sigmoid(-beta(y, f));
    for (Eigen::Index c = 0; c < 2; ++c) {
      const double M = a.message_count, x = a.count(static_cast<std::uint32_t>(c));
      by_hand += log_binom(M, x) + x * log_sigmoid(gamma(y, c)) + (M - x) * log_sigmoid(-gamma(y, c));
    }
  }
  CHECK(sup == doctest::Approx(by_hand).epsilon(1e-12));
  d.labels = {0, 2, 1, 0};
  CHECK_THROWS_AS(log_joint(beta, gamma, l, d, rows, p, FeatureMode::kBoth, true), ConfigError);
  Eigen::MatrixXd bad = beta;
  bad(0, 0) = NAN;
  CHECK_THROWS_AS(log_joint(bad, gamma, l, d, rows, p), NonFiniteError);
}

TEST_CASE("ELBO gradient matches central finite differences") {
  std::mt19937_64 g(10);
  for (FeatureMode mode : {FeatureMode::kBoth, FeatureMode::kFlagsOnly, FeatureMode::kNarrativesOnly}) {
    for (bool supervised : {false, true}) {
      const FeatureTable t = small_table(7, 2, 2, 31);
      ModelData d = assemble_model_data(t);
      d.labels = {0, 1, 0, 1, 1, 0, 0};
      FitConfig cfg;
      cfg.mode = mode;
      cfg.supervised = supervised;
      cfg.seed = 4;
      VariationalState st = init_state(d, random_priors(2, 2, 2, g), cfg);
      CHECK(st.layout.total <= 500);
      // move away from the symmetric initialization
      std::normal_distribution<double> nd(0.0, 0.3);
      for (Eigen::Index i = 0; i < st.theta.size(); ++i) st.theta(i) += nd(g);
      Rng rng(77);
      const auto rows = all_rows(7);
      const ElboNoise noise = draw_noise(st, 7, 2, false, rng);
      Eigen::VectorXd grad;
      elbo_estimate(st, d, rows, noise, &grad);
      Eigen::VectorXd again;
      elbo_estimate(st, d, rows, noise, &again);
      CHECK((grad.array() == again.array()).all());

      const double h = 1e-5;
      int bad = 0;
      for (Eigen::Index i = 0; i < st.theta.size(); ++i) {
        VariationalState a = st, b = st;
        a.theta(i) += h;
        b.theta(i) -= h;
        const double fd = (elbo_estimate(a, d, rows, noise).elbo - elbo_estimate(b, d, rows, noise).elbo) / (2 * h);
        const double err = std::abs(fd - grad(i)) / std::max({std::abs(fd), std::abs(grad(i)), 1e-2});
        if (err >= 1e-3) {
          ++bad;
          MESSAGE("coordinate " << i << " analytic " << grad(i) << " numeric " << fd);
        }
      }
      CHECK(bad == 0);

      const ParamLayout& L = st.layout;
      if (!uses_narratives(mode)) {
        CHECK((grad.segment(L.gamma_mean, 2 * L.k * L.msel).array() == 0.0).all());
      }
      if (!uses_flags(mode)) {
        CHECK((grad.segment(L.beta_mean, 2 * L.k * L.mf).array() == 0.0).all());
      }
    }
  }
}

TEST_CASE("point-mass ELBO equals the log joint at the mean") {
  std::mt19937_64 g(12);
  const FeatureTable t = small_table(9, 2, 3, 3);
  const ModelData d = assemble_model_data(t);
  FitConfig cfg;
  VariationalState st = init_state(d, random_priors(3, 2, 3, g), cfg);
  const double tiny = std::log(1e-6);
  st.theta.segment(st.layout.beta_logsd, st.layout.k * st.layout.mf).setConstant(tiny);
  st.theta.segment(st.layout.gamma_logsd, st.layout.k * st.layout.msel).setConstant(tiny);
  pin_logsd(st, tiny);
  Rng rng(1);
  const auto rows = all_rows(9);
  EncoderCache cache;
  const ElboParts parts = elbo_estimate(st, d, rows, draw_noise(st, 9, 1, false, rng), nullptr, &cache);
  const double lj = log_joint(st.beta_mean(), st.gamma_mean(), cache.mu, d, rows, st.priors);
  CHECK(parts.expected_log_joint == doctest::Approx(lj).epsilon(1e-5));
}

TEST_CASE("ELBO stays below the log evidence") {
  // N = 2, one flag, no narratives, k = 2
  FeatureTable t;
  t.flag_names = {"egg"};
  t.accounts = {{"a", {1}, {}, 3, 0.0}, {"b", {0}, {}, 5, 0.0}};
  const ModelData d = assemble_model_data(t);
  ModelPriors p;
  p.mu_clust = Eigen::Vector2d(0.0, -1.0);
  p.sigma_clust = Eigen::Vector2d(1.0, 1.0);
  p.mu_f = Eigen::Matrix<double, 2, 1>(-1.0, 0.5);
  p.sigma_f = Eigen::Matrix<double, 2, 1>(1.0, 2.0);
  p.mu_n.resize(2, 0);
  p.sigma_n.resize(2, 0);

  // pi_1 = E sigmoid(l1 - l0) with l1 - l0 ~ N(-1, sqrt 2)
  double pi1 = 0;
  {
    const double m = -1, s = std::sqrt(2.0), lo = m - 12 * s, hi = m + 12 * s;
    const int n = 20000;
    const double h = (hi - lo) / n;
    for (int i = 0; i <= n; ++i) {
      const double x = lo + i * h;
      pi1 += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(lnorm(x, m, s)) / (1 + std::exp(-x));
    }
    pi1 *= h;
  }
  const double pi0 = 1 - pi1;
  // 2-D trapezoid over (beta_0, beta_1)
  const int n = 800;
  const double lo0 = -1 - 10, h0 = 20.0 / n, lo1 = 0.5 - 20, h1 = 40.0 / n;
  double z = 0;
  for (int a = 0; a <= n; ++a) {
    const double b0 = lo0 + a * h0;
    const double q0 = 1 / (1 + std::exp(-b0));
    const double w0 = (a == 0 || a == n ? 0.5 : 1.0) * std::exp(lnorm(b0, -1, 1));
    for (int b = 0; b <= n; ++b) {
      const double b1 = lo1 + b * h1;
      const double q1 = 1 / (1 + std::exp(-b1));
      const double w1 = (b == 0 || b == n ? 0.5 : 1.0) * std::exp(lnorm(b1, 0.5, 2));
      z += w0 * w1 * (pi0 * q0 + pi1 * q1) * (pi0 * (1 - q0) + pi1 * (1 - q1));
    }
  }
  const double log_evidence = std::log(z * h0 * h1);

  FitConfig cfg;
  cfg.mode = FeatureMode::kFlagsOnly;
  for (std::uint64_t seed : {1, 2, 3}) {
    cfg.seed = seed;
    const VariationalState st = init_state(d, p, cfg);
    Rng rng(seed);
    const auto rows = all_rows(2);
    double sum = 0, sq = 0;
    const int draws = 4000;
    for (int s = 0; s < draws; ++s) {
      const double e = elbo_estimate(st, d, rows, draw_noise(st, 2, 1, false, rng)).elbo;
      sum += e;
      sq += e * e;
    }
    const double mean = sum / draws;
    const double se = std::sqrt((sq / draws - mean * mean) / draws);
    CHECK(mean + 3 * se < log_evidence);
  }
}

TEST_CASE("ELBO Monte Carlo error on a synthetic fixture") {
  GeneratorSpec spec = planted_preset(2000, 60, 2);
  const SyntheticData sd = generate_full(spec);
  const ModelData d = assemble_model_data(sd.table);
  FitConfig cfg;
  const VariationalState st = init_state(d, default_priors(d, 4), cfg);
  Rng rng(3);
  std::vector<Eigen::Index> rows = all_rows(d.size());
  rows.resize(512);
  double sum = 0, sq = 0;
  const int draws = 1000;
  for (int s = 0; s < draws; ++s) {
    const double e = elbo_estimate(st, d, rows, draw_noise(st, 512, 1, true, rng)).elbo;
    sum += e;
    sq += e * e;
  }
  const double mean = sum / draws;
  const double se = std::sqrt((sq / draws - mean * mean) / (draws - 1));
  CHECK(se < 0.01 * std::abs(mean));
}

TEST_CASE("responsibility properties") {
  std::mt19937_64 g(13);
  const FeatureTable t = small_table(30, 2, 2, 8);
  const ModelData d = assemble_model_data(t);
  FitConfig cfg;
  VariationalState st = init_state(d, random_priors(3, 2, 2, g), cfg);

  const ScoreTable r = responsibilities(st, d, 50, 5);
  for (Eigen::Index j = 0; j < d.size(); ++j) {
    CHECK(std::abs(r.resp.row(j).sum() - 1.0) < 1e-9);
    CHECK(r.minority[static_cast<std::size_t>(j)] == doctest::Approx(1 - r.resp(j, 0)).epsilon(1e-15));
    CHECK((r.resp.row(j).array() >= 0).all());
  }
  const ScoreTable again = responsibilities(st, d, 50, 5);
  CHECK(again.resp == r.resp);

  // common shift of the logits
  VariationalState shifted = st;
  const Eigen::Index k = st.layout.k, h3 = st.encoder.hidden[2];
  shifted.theta.segment(st.theta.size() - 2 * k - k * h3, k).array() += 2.5;
  const ScoreTable rs = responsibilities(shifted, d, 50, 5);
  CHECK((rs.resp - r.resp).cwiseAbs().maxCoeff() < 1e-10);

  // identical clusters and flat logits give 1/k
  VariationalState flat = st;
  const double tiny = std::log(1e-9);
  for (Eigen::Index i = 1; i < k; ++i) {
    for (Eigen::Index f = 0; f < 2; ++f) flat.theta(flat.layout.beta_mean + f * k + i) = flat.theta(flat.layout.beta_mean + f * k);
    for (Eigen::Index c = 0; c < 2; ++c) flat.theta(flat.layout.gamma_mean + c * k + i) = flat.theta(flat.layout.gamma_mean + c * k);
  }
  flat.theta.segment(flat.layout.beta_logsd, k * 2).setConstant(tiny);
  flat.theta.segment(flat.layout.gamma_logsd, k * 2).setConstant(tiny);
  flat.theta.segment(flat.theta.size() - 2 * k - 2 * k * h3, k * h3 + k).setZero();
  pin_logsd(flat, tiny);
  const ScoreTable u = responsibilities(flat, d, 10, 5);
  CHECK((u.resp.array() - 1.0 / 3.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("point-mass responsibilities follow Bayes' rule") {
  std::mt19937_64 g(14);
  const FeatureTable t = small_table(6, 2, 2, 9);
  const ModelData d = assemble_model_data(t);
  FitConfig cfg;
  VariationalState st = init_state(d, random_priors(2, 2, 2, g), cfg);
  const double tiny = std::log(1e-9);
  st.theta.segment(st.layout.beta_logsd, 4).setConstant(tiny);
  st.theta.segment(st.layout.gamma_logsd, 4).setConstant(tiny);
  pin_logsd(st, tiny);
  const ScoreTable r = responsibilities(st, d, 3, 1);
  const Encoder enc(st.encoder);
  EncoderCache cache;
  const auto rows = all_rows(6);
  enc.forward(st.theta.data() + st.layout.encoder, encoder_inputs(d, st.mode, rows), false, {}, &st.running, cache);
  const Eigen::MatrixXd beta = st.beta_mean(), gamma = st.gamma_mean();
  for (std::size_t j = 0; j < 6; ++j) {
    const auto& a = t.accounts[j];
    double w[2];
    for (int i = 0; i < 2; ++i) {
      double v = cache.mu(j, i);
      for (int f = 0; f < 2; ++f) v += a.flags[f] ? log_sigmoid(beta(i, f)) : log_sigmoid(-beta(i, f));
      for (int c = 0; c < 2; ++c) {
        const double x = a.count(c);
        v += x * log_sigmoid(gamma(i, c)) + (a.message_count - x) * log_sigmoid(-gamma(i, c));
      }
      w[i] = v;
    }
    const double p1 = 1 / (1 + std::exp(w[0] - w[1]));
    CHECK(r.minority[j] == doctest::Approx(p1).epsilon(1e-6));
  }
}

TEST_CASE("feature modes ignore the unused block") {
  std::mt19937_64 g(15);
  const FeatureTable t = small_table(20, 2, 2, 10);
  const ModelData d = assemble_model_data(t);
  ModelData other = d;
  other.counts.setZero();
  other.counts(0, 1) = 1;
  other.entropy.setZero();
  other.log_binom.setZero();
  ModelData other_flags = d;
  other_flags.flags = 1.0 - d.flags.array();

  FitConfig cfg;
  cfg.steps = 20;
  cfg.mode = FeatureMode::kFlagsOnly;
  const ModelPriors p = random_priors(2, 2, 2, g);
  const FitResult a = fit(d, p, cfg);
  const FitResult b = fit(other, p, cfg);
  const ParamLayout& L = a.state.layout;
  CHECK(a.state.theta.segment(L.beta_mean, 2 * L.k * L.mf) == b.state.theta.segment(L.beta_mean, 2 * L.k * L.mf));
  CHECK(a.state.theta.tail(L.total - L.encoder) == b.state.theta.tail(L.total - L.encoder));
  CHECK(responsibilities(a.state, d, 20, 1).resp == responsibilities(a.state, other, 20, 1).resp);

  cfg.mode = FeatureMode::kNarrativesOnly;
  const FitResult c = fit(d, p, cfg);
  const FitResult e = fit(other_flags, p, cfg);
  CHECK(c.state.theta.segment(L.gamma_mean, 2 * L.k * L.msel) == e.state.theta.segment(L.gamma_mean, 2 * L.k * L.msel));
  CHECK(c.state.theta.tail(c.state.layout.total - c.state.layout.encoder) ==
        e.state.theta.tail(e.state.layout.total - e.state.layout.encoder));
  CHECK(responsibilities(c.state, d, 20, 1).resp == responsibilities(c.state, other_flags, 20, 1).resp);
  CHECK(c.state.encoder.d_in == 3);
  CHECK(a.state.encoder.d_in == 2);
}

TEST_CASE("fitting: determinism, trace, supervised recovery, ensembles") {
  GeneratorSpec spec;
  spec.n_accounts = 3000;
  spec.shares = {0.7, 0.3};
  spec.flag_names = {"f0", "f1", "f2"};
  spec.narratives = {"x", "y", "z"};
  spec.beta.resize(2, 3);
  spec.beta << logit(0.2), logit(0.1), logit(0.3), logit(0.8), logit(0.6), logit(0.3);
  spec.gamma.resize(2, 3);
  spec.gamma << logit(0.02), logit(0.05), logit(0.01), logit(0.2), logit(0.05), logit(0.1);
  spec.seed = 5;
  const SyntheticData sd = generate_full(spec);
  const ModelData d = assemble_model_data(sd.table, &sd.labels);
  const ModelPriors p = default_priors(d, 2);

  FitConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 256;
  cfg.seed = 3;
  cfg.supervised = true;
  const FitResult sup = fit(d, p, cfg);
  const Eigen::MatrixXd bm = sup.state.beta_mean();
  for (Eigen::Index i = 0; i < 2; ++i)
    for (Eigen::Index f = 0; f < 3; ++f) CHECK(std::abs(sigmoid(bm(i, f)) - sigmoid(spec.beta(i, f))) < 0.05);

  cfg.supervised = false;
  cfg.steps = 600;
  cfg.batch = 3000;
  const FitResult a = fit(d, p, cfg);
  const FitResult b = fit(d, p, cfg);
  CHECK(a.state.theta == b.state.theta);
  CHECK(a.trace == b.trace);
  REQUIRE(a.trace.size() == 13);
  CHECK(a.trace.back().first == 599);
  // smoothed trace over the last 80%: final window does not fall below the
  // best earlier window by more than 1%
  std::vector<double> smooth;
  for (std::size_t i = 0; i + 4 <= a.trace.size(); ++i) {
    double s = 0;
    for (std::size_t w = 0; w < 4; ++w) s += a.trace[i + w].second;
    smooth.push_back(s / 4);
  }
  const std::size_t start = smooth.size() / 5;
  const double best = *std::max_element(smooth.begin() + start, smooth.end() - 1);
  CHECK(smooth.back() >= best - 0.01 * std::abs(best));

  cfg.steps = 100;
  cfg.batch = 256;
  cfg.mc_score = 20;
  const EnsembleResult one = fit_ensemble(d, p, cfg, 1);
  const FitResult single = fit(d, p, cfg);
  const ScoreTable ss = responsibilities(single.state, d, 20, derive_seed(cfg.seed, 4));
  CHECK(one.mean.minority == ss.minority);

  const EnsembleResult three = fit_ensemble(d, p, cfg, 3);
  for (std::size_t j = 0; j < 50; ++j) {
    const double rev = (three.runs[2].minority[j] + three.runs[1].minority[j] + three.runs[0].minority[j]) / 3;
    CHECK(three.mean.minority[j] == doctest::Approx(rev).epsilon(1e-14));
  }
  CHECK(three.runs[0].minority == one.runs[0].minority);

  std::ostringstream out;
  write_scores_csv(three.mean, out);
  std::istringstream in(out.str());
  const ScoreTable back = read_scores_csv(in);
  CHECK(back.account_ids == three.mean.account_ids);
  CHECK(back.labels == three.mean.labels);
  CHECK(back.resp == three.mean.resp);
  CHECK(back.minority == three.mean.minority);

  const VariationalState round = state_from_json(state_to_json(a.state, R"({"steps":600})"));
  CHECK(round.theta == a.state.theta);
  CHECK(round.running.var[1] == a.state.running.var[1]);
  CHECK(round.adam_v == a.state.adam_v);
  CHECK(responsibilities(round, d, 10, 1).resp == responsibilities(a.state, d, 10, 1).resp);
  CHECK_THROWS_AS(state_from_json("{}"), SchemaError);
  CHECK_THROWS_AS(state_from_json("not json"), SchemaError);

  FitConfig bad = cfg;
  bad.supervised = true;
  ModelData unlabeled = d;
  unlabeled.labels.clear();
  CHECK_THROWS_AS(fit(unlabeled, p, bad), ConfigError);
}

TEST_CASE("feature mode names") {
  CHECK(parse_feature_mode("flags-only") == FeatureMode::kFlagsOnly);
  CHECK(parse_feature_mode("narratives_only") == FeatureMode::kNarrativesOnly);
  CHECK(to_string(FeatureMode::kBoth) == "both");
  CHECK_THROWS_AS(parse_feature_mode("all"), ConfigError);
  FeatureTable t = small_table(2, 1, 1, 1);
  t.accounts[0].message_count = 0;
  t.accounts[0].narrative_counts.clear();
  CHECK_THROWS_AS(assemble_model_data(t), ConfigError);
}
