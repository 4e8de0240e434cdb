#include "ciodetect/narrative_select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "ciodetect/adam.hpp"
#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/parallel.hpp"
#include "ciodetect/random.hpp"

namespace ciod {

std::vector<NarrativeFlagStats> narrative_flag_stats(const FeatureTable& table) {
  const std::size_t nf = table.num_flags();
  std::vector<NarrativeFlagStats> all(table.num_narratives());
  for (std::size_t c = 0; c < all.size(); ++c) {
    all[c].narrative = static_cast<std::uint32_t>(c);
    all[c].flagged.assign(nf, 0);
  }
  for (const auto& a : table.accounts) {
    for (const auto& [c, n] : a.narrative_counts) {
      if (n == 0) continue;
      auto& s = all[c];
      ++s.accounts;
      for (std::size_t f = 0; f < nf; ++f) s.flagged[f] += a.flags[f];
    }
  }
  std::vector<NarrativeFlagStats> out;
  for (auto& s : all) {
    if (s.accounts > 0) out.push_back(std::move(s));
  }
  return out;
}

namespace {

// Parameter layout: [lambda mean, lambda logsd, log-s mean, log-s logsd,
// L means..., L logsds...].
struct Layout {
  Eigen::Index n;
  Eigen::Index size() const { return 4 + 2 * n; }
  Eigen::Index lm(Eigen::Index i) const { return 4 + i; }
  Eigen::Index ls(Eigen::Index i) const { return 4 + n + i; }
};

}  // namespace

FlagRatePosterior fit_flag_rate_model(const std::vector<NarrativeFlagStats>& stats,
                                      std::size_t flag, const SelectConfig& cfg,
                                      std::uint64_t seed) {
  if (cfg.samples < 2) throw ConfigError("N_samp must be at least 2");
  if (cfg.steps < 1) throw ConfigError("steps must be positive");
  if (stats.empty()) throw ConfigError("no narratives to fit");
  const Layout lay{static_cast<Eigen::Index>(stats.size())};
  const Eigen::Index n = lay.n;
  Eigen::ArrayXd M(n), F(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = stats[static_cast<std::size_t>(i)];
    if (s.accounts == 0) throw ConfigError("narrative with no accounts");
    if (flag >= s.flagged.size()) throw ConfigError("flag index out of range");
    M(i) = s.accounts;
    F(i) = s.flagged[flag];
  }

  Eigen::VectorXd theta(lay.size());
  const Eigen::ArrayXd emp = ((F + 0.5) / (M + 1.0)).log() - ((M - F + 0.5) / (M + 1.0)).log();
  theta(0) = emp.mean();
  theta(1) = std::log(0.1);
  const double spread = std::sqrt((emp - emp.mean()).square().mean());
  theta(2) = std::log(std::max(spread, 0.05));
  theta(3) = std::log(0.1);
  theta.segment(4, n) = emp.matrix();
  theta.segment(4 + n, n).setConstant(std::log(0.1));

  Adam adam(lay.size(), AdamConfig{cfg.lr});
  Rng rng(seed);
  Eigen::VectorXd grad(lay.size());
  Eigen::ArrayXd eps(n);
  Eigen::VectorXd avg = Eigen::VectorXd::Zero(lay.size());
  const std::size_t tail_start =
      cfg.steps - std::max<std::size_t>(1, static_cast<std::size_t>(cfg.average_tail * cfg.steps));
  std::size_t averaged = 0;
  FlagRatePosterior post;
  const double log_half_normal_const = std::log(2.0) - 0.5 * kLogTwoPi - std::log(cfg.scale_prior);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double e_lam = rng.normal();
    const double e_u = rng.normal();
    for (Eigen::Index i = 0; i < n; ++i) eps(i) = rng.normal();

    const double sd_lam = std::exp(theta(1)), sd_u = std::exp(theta(3));
    const double lam = theta(0) + sd_lam * e_lam;
    const double u = theta(2) + sd_u * e_u;
    const double s = std::exp(u);
    const Eigen::ArrayXd sdL = theta.segment(4 + n, n).array().exp();
    const Eigen::ArrayXd L = theta.segment(4, n).array() + sdL * eps;
    const Eigen::ArrayXd z = (L - lam) / s;
    const Eigen::ArrayXd sig = L.unaryExpr([](double x) { return sigmoid(x); });

    // d log p / d L_n, d lambda, d u.
    const Eigen::ArrayXd gL = -z / s + F - M * sig;
    const double g_lam = -(lam - cfg.prior_mean) / (cfg.prior_sd * cfg.prior_sd) + (z / s).sum();
    const double g_u = -s * s / (cfg.scale_prior * cfg.scale_prior) + 1.0 +
                       (z.square() - 1.0).sum();

    grad(0) = g_lam;
    grad(1) = g_lam * sd_lam * e_lam + 1.0;
    grad(2) = g_u;
    grad(3) = g_u * sd_u * e_u + 1.0;
    grad.segment(4, n) = gL.matrix();
    grad.segment(4 + n, n) = (gL * sdL * eps + 1.0).matrix();

    if (step % 50 == 0 || step + 1 == cfg.steps) {
      double lp = normal_logpdf(lam, cfg.prior_mean, cfg.prior_sd) + log_half_normal_const -
                  0.5 * s * s / (cfg.scale_prior * cfg.scale_prior) + u;
      for (Eigen::Index i = 0; i < n; ++i) {
        lp += -0.5 * z(i) * z(i) - u - 0.5 * kLogTwoPi + F(i) * log_sigmoid(L(i)) +
              (M(i) - F(i)) * log_sigmoid(-L(i));
      }
      double ent = normal_entropy_from_logsd(theta(1)) + normal_entropy_from_logsd(theta(3));
      for (Eigen::Index i = 0; i < n; ++i) ent += normal_entropy_from_logsd(theta(4 + n + i));
      const double elbo = lp + ent;
      if (!std::isfinite(elbo)) throw NonFiniteError("flag-rate ELBO", static_cast<long>(step));
      if (step % 50 == 0) post.elbo_trace.push_back(elbo);
    }
    if (!grad.allFinite()) throw NonFiniteError("flag-rate gradient", static_cast<long>(step));
    adam.ascend(theta, grad);
    if (step >= tail_start) {
      avg += theta;
      ++averaged;
    }
  }
  theta = avg / static_cast<double>(averaged);

  post.lambda_mean = theta(0);
  post.lambda_logsd = theta(1);
  post.logs_mean = theta(2);
  post.logs_logsd = theta(3);
  post.L_mean = theta.segment(4, n);
  post.L_logsd = theta.segment(4 + n, n);

  Rng draw(derive_seed(seed, 1));
  post.lambda_samples.resize(cfg.samples);
  post.s_samples.resize(cfg.samples);
  post.L_samples.resize(n, static_cast<Eigen::Index>(cfg.samples));
  for (std::size_t k = 0; k < cfg.samples; ++k) {
    post.lambda_samples[k] = theta(0) + std::exp(theta(1)) * draw.normal();
    post.s_samples[k] = std::exp(theta(2) + std::exp(theta(3)) * draw.normal());
    for (Eigen::Index i = 0; i < n; ++i) {
      post.L_samples(i, static_cast<Eigen::Index>(k)) = theta(4 + i) + std::exp(theta(4 + n + i)) * draw.normal();
    }
  }
  return post;
}

std::vector<double> kl_suspicion(const FlagRatePosterior& post, std::size_t* degenerate) {
  const Eigen::Index n = post.L_samples.rows();
  const Eigen::Index S = post.L_samples.cols();
  if (S < 2) throw ConfigError("need at least 2 samples");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  std::size_t bad = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = post.L_samples.row(i);
    const double mean = row.mean();
    const double var = (row.array() - mean).square().sum() / static_cast<double>(S - 1);
    if (!(var > 0.0)) {
      ++bad;
      continue;
    }
    const double sd = std::sqrt(var);
    double total = 0.0;
    for (Eigen::Index k = 0; k < S; ++k) {
      const double x = row(k);
      total += normal_logpdf(x, mean, sd) -
               normal_logpdf(x, post.lambda_samples[static_cast<std::size_t>(k)],
                             post.s_samples[static_cast<std::size_t>(k)]);
    }
    out[static_cast<std::size_t>(i)] = std::max(0.0, total / static_cast<double>(S));
  }
  if (degenerate) *degenerate = bad;
  return out;
}

SuspicionScores score_narratives(const std::vector<NarrativeFlagStats>& stats, std::size_t num_flags,
                                 const SelectConfig& cfg, std::uint64_t seed, unsigned jobs) {
  SuspicionScores out;
  const auto n = static_cast<Eigen::Index>(stats.size());
  out.kl = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(num_flags));
  out.max.assign(stats.size(), 0.0);
  if (stats.empty()) return out;
  std::vector<std::size_t> degenerate(num_flags, 0);
  parallel_for(num_flags, jobs, [&](std::size_t f) {
    const FlagRatePosterior post = fit_flag_rate_model(stats, f, cfg, derive_seed(seed, f));
    const std::vector<double> kl = kl_suspicion(post, &degenerate[f]);
    for (Eigen::Index i = 0; i < n; ++i) out.kl(i, static_cast<Eigen::Index>(f)) = kl[static_cast<std::size_t>(i)];
  });
  for (Eigen::Index i = 0; i < n; ++i) out.max[static_cast<std::size_t>(i)] = num_flags ? out.kl.row(i).maxCoeff() : 0.0;
  out.degenerate = std::accumulate(degenerate.begin(), degenerate.end(), std::size_t{0});
  return out;
}

namespace {

std::vector<std::uint32_t> ranked(const std::vector<double>* scores, const std::vector<NarrativeFlagStats>& stats,
                                  const std::vector<std::string>& names, std::size_t k) {
  std::vector<std::uint32_t> idx(stats.size());
  std::iota(idx.begin(), idx.end(), 0u);
  auto name = [&](std::uint32_t i) -> const std::string& { return names.at(stats[i].narrative); };
  std::sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores && (*scores)[a] != (*scores)[b]) return (*scores)[a] > (*scores)[b];
    if (stats[a].accounts != stats[b].accounts) return stats[a].accounts > stats[b].accounts;
    return name(a) < name(b);
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

}  // namespace

std::vector<std::uint32_t> select_top_k(const std::vector<double>& scores,
                                        const std::vector<NarrativeFlagStats>& stats,
                                        const std::vector<std::string>& names, std::size_t k) {
  if (k < 1) throw ConfigError("K must be at least 1");
  if (scores.size() != stats.size()) throw ConfigError("scores and stats differ in length");
  return ranked(&scores, stats, names, k);
}

std::vector<std::uint32_t> select_most_frequent(const std::vector<NarrativeFlagStats>& stats,
                                                const std::vector<std::string>& names, std::size_t k) {
  return ranked(nullptr, stats, names, k);
}

double prior_rate_below(double threshold, const SelectConfig& cfg, std::size_t draws, std::uint64_t seed) {
  Rng rng(seed);
  const double cut = logit(threshold);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const double lam = cfg.prior_mean + cfg.prior_sd * rng.normal();
    const double s = std::abs(cfg.scale_prior * rng.normal());
    if (lam + s * rng.normal() < cut) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(draws);
}

void write_scores_csv(const SuspicionScores& scores, const std::vector<NarrativeFlagStats>& stats,
                      const std::vector<std::string>& names, const std::vector<std::string>& flag_names,
                      std::ostream& out) {
  std::string text = "narrative,flag,kl,score_max,M_n,F_n\n";
  for (std::size_t i = 0; i < stats.size(); ++i) {
    for (std::size_t f = 0; f < flag_names.size(); ++f) {
      text += csv::escape(names.at(stats[i].narrative));
      text += ',';
      text += csv::escape(flag_names[f]);
      text += ',';
      csv::append_double(text, scores.kl(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)));
      text += ',';
      csv::append_double(text, scores.max[i]);
      text += ',';
      csv::append_int(text, stats[i].accounts);
      text += ',';
      csv::append_int(text, stats[i].flagged[f]);
      text += '\n';
    }
  }
  out << text;
}

}  // namespace ciod
