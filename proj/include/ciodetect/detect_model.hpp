#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ciodetect/encoder.hpp"
#include "ciodetect/features.hpp"

namespace ciod {

enum class FeatureMode { kBoth, kFlagsOnly, kNarrativesOnly };

std::string to_string(FeatureMode mode);
FeatureMode parse_feature_mode(const std::string& text);

inline bool uses_flags(FeatureMode m) { return m != FeatureMode::kNarrativesOnly; }
inline bool uses_narratives(FeatureMode m) { return m != FeatureMode::kFlagsOnly; }

// Dense observations for the model. Rows follow the feature table.
struct ModelData {
  std::vector<std::string> account_ids;
  Eigen::MatrixXd flags;    // N x mf, 0/1
  Eigen::MatrixXd counts;   // N x msel
  Eigen::VectorXd messages; // M_j
  Eigen::VectorXd entropy;
  Eigen::VectorXd log_binom;  // sum_c ln C(M_j, n_jc)
  std::vector<int> labels;    // empty when unlabeled

  Eigen::Index size() const { return flags.rows(); }
  Eigen::Index num_flags() const { return flags.cols(); }
  Eigen::Index num_narratives() const { return counts.cols(); }
};

// Rejects accounts with M_j = 0. Labels, when given, follow the table's rows.
ModelData assemble_model_data(const FeatureTable& table, const std::vector<int>* labels = nullptr);

struct ModelPriors {
  Eigen::VectorXd mu_clust, sigma_clust;  // k
  Eigen::MatrixXd mu_f, sigma_f;          // k x mf
  Eigen::MatrixXd mu_n, sigma_n;          // k x msel

  Eigen::Index k() const { return mu_clust.size(); }
  void validate(Eigen::Index mf, Eigen::Index msel) const;
};

// Shares [10000, 10, 5, 1, ...] (continued geometrically) renormalized;
// cluster 0 centred on the log population rate (floored at 1/(2N)).
ModelPriors default_priors(const ModelData& data, Eigen::Index k = 4);
std::vector<double> default_cluster_shares(Eigen::Index k);

struct FitConfig {
  std::size_t steps = 3000;
  std::size_t batch = 1024;
  double lr = 1e-2;
  std::size_t mc_train = 1;   // S_train
  std::size_t mc_score = 100; // S_score
  std::uint64_t seed = 0;
  FeatureMode mode = FeatureMode::kBoth;
  bool supervised = false;
  double init_jitter = 1.0;   // sd of the minority-cluster initial offsets
  double init_logsd = -2.0;   // initial log-sd of q(beta, gamma)

  void validate() const;
};

// Offsets of the variational blocks inside the flat parameter vector.
struct ParamLayout {
  Eigen::Index k = 0, mf = 0, msel = 0;
  Eigen::Index beta_mean = 0, beta_logsd = 0, gamma_mean = 0, gamma_logsd = 0, encoder = 0, total = 0;

  static ParamLayout make(Eigen::Index k, Eigen::Index mf, Eigen::Index msel, Eigen::Index encoder_params);
};

struct VariationalState {
  FeatureMode mode = FeatureMode::kBoth;
  bool supervised = false;
  ModelPriors priors;
  EncoderSpec encoder;
  ParamLayout layout;
  Eigen::VectorXd theta;
  BatchNormStats running;
  long adam_steps = 0;
  Eigen::VectorXd adam_m, adam_v;

  Eigen::MatrixXd beta_mean() const;   // k x mf
  Eigen::MatrixXd beta_logsd() const;
  Eigen::MatrixXd gamma_mean() const;  // k x msel
  Eigen::MatrixXd gamma_logsd() const;
};

// Initial state: cluster 0 at the population logits, minority clusters
// jittered around them; encoder heads biased to the cluster prior.
VariationalState init_state(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg);

// Encoder input rows for the given accounts under the state's mode.
Eigen::MatrixXd encoder_inputs(const ModelData& data, FeatureMode mode, std::span<const Eigen::Index> rows);

// Marginalized log joint. logits is B x k for the batch rows; the local sum
// is scaled by N / B. Supervised mode keeps only each account's labelled
// cluster term.
double log_joint(const Eigen::MatrixXd& beta, const Eigen::MatrixXd& gamma, const Eigen::MatrixXd& logits,
                 const ModelData& data, std::span<const Eigen::Index> rows, const ModelPriors& priors,
                 FeatureMode mode = FeatureMode::kBoth, bool supervised = false);

// Standard-normal noise for one ELBO estimate.
struct NoiseDraw {
  Eigen::MatrixXd beta;   // k x mf
  Eigen::MatrixXd gamma;  // k x msel
  Eigen::MatrixXd l;      // B x k
};
struct ElboNoise {
  std::vector<NoiseDraw> draws;  // S_train draws, averaged
  Eigen::MatrixXd dropout;       // B x h1 keep mask in {0,1}; empty disables dropout
};

struct ElboParts {
  double expected_log_joint = 0.0;
  double entropy = 0.0;
  double elbo = 0.0;
};

// Reparameterized ELBO estimate for the batch with batch-norm in training
// mode. When grad is non-null it receives the exact gradient of the estimate
// with respect to state.theta. The cache, if given, holds the encoder pass.
ElboParts elbo_estimate(const VariationalState& state, const ModelData& data, std::span<const Eigen::Index> rows,
                        const ElboNoise& noise, Eigen::VectorXd* grad = nullptr, EncoderCache* cache = nullptr);

template <typename Rng>
ElboNoise draw_noise(const VariationalState& state, Eigen::Index batch, std::size_t samples, bool dropout, Rng& rng);

struct FitResult {
  VariationalState state;
  std::vector<std::pair<std::size_t, double>> trace;  // (step, ELBO) every 50 steps
};

FitResult fit(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg);

struct ScoreTable {
  std::vector<std::string> account_ids;
  Eigen::MatrixXd resp;            // N x k
  std::vector<double> minority;    // 1 - resp(j, 0)
  std::vector<int> labels;         // empty when unlabeled
};

ScoreTable responsibilities(const VariationalState& state, const ModelData& data, std::size_t samples,
                            std::uint64_t seed, unsigned jobs = 1);

struct EnsembleResult {
  ScoreTable mean;
  std::vector<ScoreTable> runs;
  std::vector<FitResult> fits;
};

// Runs r = 0..R-1 use seed + r. Per-account responsibilities are averaged.
EnsembleResult fit_ensemble(const ModelData& data, const ModelPriors& priors, const FitConfig& cfg,
                            std::size_t runs, unsigned jobs = 1);

void write_scores_csv(const ScoreTable& scores, std::ostream& out);
ScoreTable read_scores_csv(std::istream& in);
void write_trace_csv(const std::vector<std::pair<std::size_t, double>>& trace, std::ostream& out);

// JSON container: version, mode, priors, encoder spec, parameters, running
// statistics and optimizer state, plus the caller's config object.
std::string state_to_json(const VariationalState& state, const std::string& config_json);
VariationalState state_from_json(const std::string& text);

template <typename Rng>
ElboNoise draw_noise(const VariationalState& state, Eigen::Index batch, std::size_t samples, bool dropout, Rng& rng) {
  const ParamLayout& L = state.layout;
  ElboNoise noise;
  noise.draws.resize(samples);
  for (auto& d : noise.draws) {
    d.beta.resize(L.k, L.mf);
    d.gamma.resize(L.k, L.msel);
    d.l.resize(batch, L.k);
    for (Eigen::Index i = 0; i < d.beta.size(); ++i) d.beta.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < d.gamma.size(); ++i) d.gamma.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < d.l.size(); ++i) d.l.data()[i] = rng.normal();
  }
  if (dropout && state.encoder.dropout > 0.0) {
    noise.dropout.resize(batch, state.encoder.hidden[0]);
    for (Eigen::Index i = 0; i < noise.dropout.size(); ++i) {
      noise.dropout.data()[i] = rng.uniform() < state.encoder.dropout ? 0.0 : 1.0;
    }
  }
  return noise;
}

}  // namespace ciod
