#include "ciodetect/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>

#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/random.hpp"

namespace ciod {
namespace {

std::string padded(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, i);
  return buf;
}

std::size_t categorical(Rng& rng, const std::vector<double>& probs) {
  double u = rng.uniform();
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  return probs.size() - 1;
}

// Binomial(n, p) by inversion for p <= 1/2 given the precomputed log(1-p).
std::uint32_t small_binomial(Rng& rng, std::uint32_t n, double p, double log1mp) {
  double pmf = std::exp(n * log1mp);
  if (p > 0.5 || pmf < 1e-250) return static_cast<std::uint32_t>(rng.binomial(n, p));
  double u = rng.uniform();
  const double ratio = p / (1.0 - p);
  std::uint32_t k = 0;
  while (u > pmf && k < n) {
    u -= pmf;
    pmf *= ratio * static_cast<double>(n - k) / static_cast<double>(k + 1);
    ++k;
  }
  return k;
}

}  // namespace

void GeneratorSpec::validate() const {
  const auto K = static_cast<std::size_t>(beta.rows());
  if (K < 1) throw ConfigError("generator needs at least one cluster");
  if (static_cast<std::size_t>(gamma.rows()) != K) throw ConfigError("beta and gamma differ in cluster count");
  if (static_cast<std::size_t>(beta.cols()) != flag_names.size()) throw ConfigError("beta columns must match flag names");
  if (static_cast<std::size_t>(gamma.cols()) != narratives.size()) throw ConfigError("gamma columns must match narratives");
  if (!beta.allFinite() || !gamma.allFinite()) throw ConfigError("generator log-odds must be finite");
  if (n_accounts < 1) throw ConfigError("n_accounts must be positive");
  if (lognormal_shares) {
    if (mu_clust.size() != K || sigma_clust.size() != K) throw ConfigError("mu/sigma_clust must have k entries");
    for (double s : sigma_clust) {
      if (!(s > 0)) throw ConfigError("sigma_clust entries must be positive");
    }
  } else {
    if (shares.size() != K) throw ConfigError("shares must have k entries");
    double total = 0.0;
    for (double s : shares) {
      if (!(s >= 0.0)) throw ConfigError("shares must be nonnegative");
      total += s;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("shares must sum to 1");
  }
  if (!(messages_median >= 1.0) || !(messages_sigma >= 0.0)) throw ConfigError("invalid message-count distribution");
}

GeneratorSpec planted_preset(std::size_t n_accounts, std::size_t vocabulary, std::uint64_t seed) {
  constexpr std::size_t kClusters = 4;
  constexpr std::size_t kPlantedPerCluster = 3;
  if (vocabulary < kPlantedPerCluster * (kClusters - 1)) throw ConfigError("vocabulary too small for the preset");

  GeneratorSpec spec;
  spec.n_accounts = n_accounts;
  spec.shares = {0.994, 0.003, 0.002, 0.001};
  spec.seed = seed;
  spec.flag_names.assign(kBuiltinFlagNames.begin(), kBuiltinFlagNames.end());
  for (std::size_t c = 0; c < vocabulary; ++c) spec.narratives.push_back(padded("n", c, 4));
  spec.messages_median = 20.0;
  spec.messages_sigma = 1.0;

  const std::vector<double> background{0.216, 0.15, 0.03, 0.10, 0.05};
  spec.elevated_flags = {{}, {0, 1}, {2, 3}, {0, 4}};
  spec.beta.resize(kClusters, 5);
  for (std::size_t i = 0; i < kClusters; ++i) {
    for (std::size_t f = 0; f < 5; ++f) spec.beta(i, f) = logit(background[f]);
    for (std::uint32_t f : spec.elevated_flags[i]) spec.beta(i, f) = logit(0.9);
  }

  // Organic per-message rates fall off with rank; the rank order is
  // shuffled so planted columns are scattered through the vocabulary.
  Rng rng(derive_seed(seed, 0xC0FFEE));
  std::vector<std::uint32_t> order(vocabulary);
  std::iota(order.begin(), order.end(), 0u);
  for (std::size_t i = vocabulary; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  spec.gamma.resize(kClusters, static_cast<Eigen::Index>(vocabulary));
  for (std::size_t r = 0; r < vocabulary; ++r) {
    const double rate = 0.02 / std::pow(static_cast<double>(r + 1), 0.9);
    spec.gamma.col(order[r]).setConstant(logit(rate));
  }
  spec.planted_narratives.assign(kClusters, {});
  std::size_t next = 0;
  for (std::size_t i = 1; i < kClusters; ++i) {
    for (std::size_t j = 0; j < kPlantedPerCluster; ++j) {
      // Planted columns take ranks spread over the middle of the vocabulary.
      const std::uint32_t col = order[vocabulary / 4 + next * (vocabulary / 2) / (kPlantedPerCluster * (kClusters - 1))];
      ++next;
      spec.planted_narratives[i].push_back(col);
      spec.gamma.col(col).setConstant(logit(0.0003));
      spec.gamma(static_cast<Eigen::Index>(i), col) = logit(0.06);
    }
  }
  return spec;
}

SyntheticData generate_full(const GeneratorSpec& spec) {
  spec.validate();
  const std::size_t K = spec.k();
  const std::size_t nf = spec.flag_names.size();
  const std::size_t nc = spec.narratives.size();

  Eigen::MatrixXd flag_p(K, nf);
  for (Eigen::Index i = 0; i < spec.beta.rows(); ++i) {
    for (Eigen::Index f = 0; f < spec.beta.cols(); ++f) flag_p(i, f) = sigmoid(spec.beta(i, f));
  }
  Eigen::MatrixXd narr_p(K, nc), narr_l1p(K, nc);
  for (Eigen::Index i = 0; i < spec.gamma.rows(); ++i) {
    for (Eigen::Index c = 0; c < spec.gamma.cols(); ++c) {
      narr_p(i, c) = sigmoid(spec.gamma(i, c));
      narr_l1p(i, c) = log_sigmoid(-spec.gamma(i, c));
    }
  }

  SyntheticData out;
  out.beta = spec.beta;
  out.gamma = spec.gamma;
  out.table.flag_names = spec.flag_names;
  out.table.narratives = spec.narratives;
  out.table.accounts.resize(spec.n_accounts);
  out.labels.resize(spec.n_accounts);
  const int width = std::max(6, static_cast<int>(std::to_string(spec.n_accounts).size()));
  const double log_median = std::log(spec.messages_median);

  for (std::size_t j = 0; j < spec.n_accounts; ++j) {
    Rng rng(derive_seed(spec.seed, j));
    std::size_t z;
    if (spec.lognormal_shares) {
      std::vector<double> l(K);
      for (std::size_t i = 0; i < K; ++i) l[i] = spec.mu_clust[i] + spec.sigma_clust[i] * rng.normal();
      const double lse = logsumexp(l);
      for (double& v : l) v = std::exp(v - lse);
      z = categorical(rng, l);
    } else {
      z = categorical(rng, spec.shares);
    }
    AccountFeatures& a = out.table.accounts[j];
    a.account_id = padded("acct", j, width);
    const double draw = std::exp(log_median + spec.messages_sigma * rng.normal());
    a.message_count = static_cast<std::uint32_t>(std::max(1.0, std::min(std::round(draw), 1e6)));
    a.flags.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) a.flags[f] = rng.bernoulli(flag_p(z, f)) ? 1 : 0;
    for (std::size_t c = 0; c < nc; ++c) {
      const std::uint32_t n = small_binomial(rng, a.message_count, narr_p(z, c), narr_l1p(z, c));
      if (n > 0) a.narrative_counts.emplace_back(static_cast<std::uint32_t>(c), n);
    }
    a.narrative_entropy = narrative_entropy(a.narrative_counts);
    out.labels[j] = static_cast<int>(z);
  }
  return out;
}

void write_labels_csv(const FeatureTable& table, const std::vector<int>& labels, std::ostream& out) {
  if (labels.size() != table.accounts.size()) throw ConfigError("labels and accounts differ in length");
  std::string text = "account_id,cluster\n";
  for (std::size_t j = 0; j < labels.size(); ++j) {
    text += csv::escape(table.accounts[j].account_id);
    text += ',';
    csv::append_int(text, labels[j]);
    text += '\n';
  }
  out << text;
}

std::vector<std::pair<std::string, int>> read_labels_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(1, "labels CSV is empty");
  const auto header = csv::split_line(line);
  if (header.size() != 2 || header[0] != "account_id" || header[1] != "cluster") {
    throw SchemaError(1, "labels CSV header must be account_id,cluster");
  }
  std::vector<std::pair<std::string, int>> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto fields = csv::split_line(line);
    if (fields.size() != 2) throw SchemaError(n, "expected 2 fields");
    const std::int64_t v = csv::parse_int(fields[1], n);
    if (v < 0) throw SchemaError(n, "cluster must be nonnegative");
    out.emplace_back(fields[0], static_cast<int>(v));
  }
  return out;
}

Corpus synthesize_corpus(const SyntheticData& data, std::uint64_t seed) {
  const FeatureTable& t = data.table;
  const auto col = [&](std::string_view name) -> int {
    auto it = std::find(t.flag_names.begin(), t.flag_names.end(), name);
    return it == t.flag_names.end() ? -1 : static_cast<int>(it - t.flag_names.begin());
  };
  const int egg = col("egg"), baby = col("baby"), flood = col("flood"), odd = col("odd_client"), hyper = col("hyper");
  const std::string flood_text = "breaking news everyone must read and share this now";
  constexpr std::int64_t kCollected = 1700000000;

  Corpus corpus;
  for (std::size_t j = 0; j < t.accounts.size(); ++j) {
    const AccountFeatures& a = t.accounts[j];
    Rng rng(derive_seed(seed, j));
    auto has = [&](int f) { return f >= 0 && a.flags[static_cast<std::size_t>(f)] != 0; };

    AccountProfile p;
    p.account_id = a.account_id;
    p.verified = false;
    p.description = has(egg) ? "" : "synthetic account " + a.account_id;
    const bool is_baby = has(baby), is_hyper = has(hyper);
    p.statuses_count = is_baby ? 50 : (is_hyper ? 5000 : 2000);
    const double age_days = is_hyper ? (is_baby ? 0.25 : 10.0) : (is_baby ? 30.0 : 400.0);
    p.collected_at = kCollected;
    p.created_at = kCollected - static_cast<std::int64_t>(age_days * 86400.0);
    for (std::size_t e = kNumBuiltinFlags; e < a.flags.size(); ++e) p.extra_flags.push_back(a.flags[e]);

    const std::uint32_t M = a.message_count;
    std::vector<std::string> tags(M);
    const bool flooder = has(flood);
    std::vector<std::uint32_t> slots(M);
    std::iota(slots.begin(), slots.end(), 0u);
    for (const auto& [c, n] : a.narrative_counts) {
      // Choose n distinct messages, preferring those after the flood slot.
      for (std::uint32_t i = M; i > 1; --i) std::swap(slots[i - 1], slots[rng.below(i)]);
      if (flooder) std::stable_partition(slots.begin(), slots.end(), [](std::uint32_t s) { return s != 0; });
      for (std::uint32_t k = 0; k < n; ++k) tags[slots[k]] += " #" + t.narratives[c];
    }
    for (std::uint32_t k = 0; k < M; ++k) {
      Message m;
      m.message_id = a.account_id + "-" + std::to_string(k);
      m.account_id = a.account_id;
      m.timestamp = p.created_at + k;
      if (flooder && k == 0) {
        m.text = flood_text + tags[k];
      } else {
        m.text = "post " + std::to_string(k) + " from " + a.account_id + tags[k];
      }
      m.client = (has(odd) && k == 0) ? "Synthetic Scheduler" : "Twitter for Android";
      m.is_retweet = false;
      corpus.messages.push_back(std::move(m));
    }
    corpus.profiles.emplace(p.account_id, std::move(p));
  }
  return corpus;
}

SimpleSample generate_simple(std::int64_t m, double rho, RatePair flag, RatePair narrative,
                             std::uint64_t seed) {
  if (m < 0) throw ConfigError("m must be nonnegative");
  for (double r : {rho, flag.cio, flag.non_cio, narrative.cio, narrative.non_cio}) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("rates must lie in [0, 1]");
  }
  Rng rng(seed);
  std::vector<std::uint8_t> f(static_cast<std::size_t>(m)), n(f.size());
  SimpleSample s;
  s.labels.resize(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) {
    const bool cio = rng.bernoulli(rho);
    s.labels[i] = cio;
    f[i] = rng.bernoulli(cio ? flag.cio : flag.non_cio);
    n[i] = rng.bernoulli(cio ? narrative.cio : narrative.non_cio);
  }
  s.data = SimpleData::from_vectors(std::move(f), std::move(n));
  return s;
}

void write_simple_csv(const SimpleSample& sample, std::ostream& out) {
  const bool labelled = !sample.labels.empty();
  std::string text = labelled ? "f,n,label\n" : "f,n\n";
  for (std::size_t i = 0; i < sample.data.size(); ++i) {
    text += static_cast<char>('0' + sample.data.f[i]);
    text += ',';
    text += static_cast<char>('0' + sample.data.n[i]);
    if (labelled) {
      text += ',';
      text += static_cast<char>('0' + sample.labels[i]);
    }
    text += '\n';
  }
  out << text;
}

SimpleSample read_simple_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(1, "simple data CSV is empty");
  const auto header = csv::split_line(line);
  const bool labelled = header.size() == 3 && header[2] == "label";
  if (header.size() < 2 || header[0] != "f" || header[1] != "n" || (header.size() == 3 && !labelled) ||
      header.size() > 3) {
    throw SchemaError(1, "simple data header must be f,n[,label]");
  }
  std::vector<std::uint8_t> f, n;
  SimpleSample s;
  std::size_t row = 1;
  auto bit = [&](const std::string& v) -> std::uint8_t {
    const std::int64_t x = csv::parse_int(v, row);
    if (x != 0 && x != 1) throw SchemaError(row, "entries must be 0 or 1");
    return static_cast<std::uint8_t>(x);
  };
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = csv::split_line(line);
    if (fields.size() != header.size()) throw SchemaError(row, "expected " + std::to_string(header.size()) + " fields");
    f.push_back(bit(fields[0]));
    n.push_back(bit(fields[1]));
    if (labelled) s.labels.push_back(bit(fields[2]));
  }
  s.data = SimpleData::from_vectors(std::move(f), std::move(n));
  return s;
}

}  // namespace ciod
