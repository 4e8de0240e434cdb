#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ciodetect/corpus.hpp"
#include "ciodetect/exact_small.hpp"
#include "ciodetect/features.hpp"

namespace ciod {

// Parameters of the full generative process. beta and gamma hold log-odds
// (k x m_f and k x m_sel).
struct GeneratorSpec {
  std::size_t n_accounts = 1000;
  std::vector<double> shares{1.0};
  // When set, each account's cluster is drawn from softmax(l_j) with
  // l_j ~ Normal(mu_clust, sigma_clust) instead of the fixed shares.
  bool lognormal_shares = false;
  std::vector<double> mu_clust;
  std::vector<double> sigma_clust;
  Eigen::MatrixXd beta;
  Eigen::MatrixXd gamma;
  std::vector<std::string> flag_names;
  std::vector<std::string> narratives;
  double messages_median = 20.0;  // M_j ~ max(1, round(LogNormal))
  double messages_sigma = 1.0;
  std::uint64_t seed = 0;

  // Columns planted as suspicious for each minority cluster (preset only).
  std::vector<std::vector<std::uint32_t>> planted_narratives;
  std::vector<std::vector<std::uint32_t>> elevated_flags;

  std::size_t k() const { return static_cast<std::size_t>(beta.rows()); }
  void validate() const;
};

// Preset with planted suspicious narratives: k = 4, shares
// [0.994, 0.003, 0.002, 0.001], a Zipf-like organic vocabulary, and for each
// minority cluster three planted narratives and two elevated flags.
GeneratorSpec planted_preset(std::size_t n_accounts = 50000, std::size_t vocabulary = 2000,
                             std::uint64_t seed = 20240611);

struct SyntheticData {
  FeatureTable table;
  std::vector<int> labels;  // true cluster per account
  Eigen::MatrixXd beta;
  Eigen::MatrixXd gamma;
};

SyntheticData generate_full(const GeneratorSpec& spec);

void write_labels_csv(const FeatureTable& table, const std::vector<int>& labels, std::ostream& out);
// Returns the cluster per account id, in file order.
std::vector<std::pair<std::string, int>> read_labels_csv(std::istream& in);

// Message-level corpus whose extraction reproduces the table's flags and
// narrative counts. Flood-flagged accounts carry the shared flood text as
// their first message; if a narrative must appear in every message of such an
// account the tag is appended to that message and the flood flag is lost.
Corpus synthesize_corpus(const SyntheticData& data, std::uint64_t seed);

struct SimpleSample {
  SimpleData data;
  std::vector<std::uint8_t> labels;
};

SimpleSample generate_simple(std::int64_t m, double rho, RatePair flag, RatePair narrative,
                             std::uint64_t seed);

// f,n[,label] with 0/1 entries. Labels are optional on input.
void write_simple_csv(const SimpleSample& sample, std::ostream& out);
SimpleSample read_simple_csv(std::istream& in);

}  // namespace ciod
