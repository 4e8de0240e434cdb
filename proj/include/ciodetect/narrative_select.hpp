#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ciodetect/features.hpp"

namespace ciod {

// Accounts posting narrative `narrative` at least once (M_n) and how many of
// them carry each flag (F_n).
struct NarrativeFlagStats {
  std::uint32_t narrative = 0;
  std::uint32_t accounts = 0;
  std::vector<std::uint32_t> flagged;
};

std::vector<NarrativeFlagStats> narrative_flag_stats(const FeatureTable& table);

struct SelectConfig {
  std::size_t samples = 1000;  // N_samp
  std::size_t steps = 5000;
  double lr = 1e-2;
  double prior_mean = -2.0;    // lambda ~ Normal(prior_mean, prior_sd)
  double prior_sd = 1.0;
  double scale_prior = 1.0;    // s ~ HalfNormal(scale_prior)
  // Iterates are averaged over this final fraction of the optimization.
  double average_tail = 0.1;
};

// Mean-field Normal posterior over (lambda, log s, L_1..L_n) and joint draws
// from it.
struct FlagRatePosterior {
  double lambda_mean = 0.0, lambda_logsd = 0.0;
  double logs_mean = 0.0, logs_logsd = 0.0;
  Eigen::VectorXd L_mean, L_logsd;

  std::vector<double> lambda_samples;
  std::vector<double> s_samples;
  Eigen::MatrixXd L_samples;  // narratives x samples
  std::vector<double> elbo_trace;  // every 50 steps
};

FlagRatePosterior fit_flag_rate_model(const std::vector<NarrativeFlagStats>& stats,
                                      std::size_t flag, const SelectConfig& cfg,
                                      std::uint64_t seed);

// Monte Carlo KL between the Normal fitted to each narrative's L draws and the
// global Normal(lambda, s), clamped at 0. Narratives whose draws have zero
// variance score 0 and are counted in *degenerate.
std::vector<double> kl_suspicion(const FlagRatePosterior& post, std::size_t* degenerate = nullptr);

struct SuspicionScores {
  Eigen::MatrixXd kl;         // narratives x flags
  std::vector<double> max;    // per narrative, over flags
  std::size_t degenerate = 0;
};

// Fits one model per flag (independently seeded) and scores every narrative.
SuspicionScores score_narratives(const std::vector<NarrativeFlagStats>& stats, std::size_t num_flags,
                                 const SelectConfig& cfg, std::uint64_t seed, unsigned jobs = 1);

// Indices into `stats`, by descending score; ties by larger M_n, then name.
std::vector<std::uint32_t> select_top_k(const std::vector<double>& scores,
                                        const std::vector<NarrativeFlagStats>& stats,
                                        const std::vector<std::string>& names, std::size_t k);
std::vector<std::uint32_t> select_most_frequent(const std::vector<NarrativeFlagStats>& stats,
                                                const std::vector<std::string>& names, std::size_t k);

// Forward simulation of the prior: P(sigmoid(L) < threshold).
double prior_rate_below(double threshold, const SelectConfig& cfg, std::size_t draws, std::uint64_t seed);

// narrative,flag,kl,score_max,M_n,F_n
void write_scores_csv(const SuspicionScores& scores, const std::vector<NarrativeFlagStats>& stats,
                      const std::vector<std::string>& names, const std::vector<std::string>& flag_names,
                      std::ostream& out);

}  // namespace ciod
