#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "ciodetect/error.hpp"
#include "ciodetect/numeric.hpp"
#include "ciodetect/synth.hpp"
#include "doctest.h"

using namespace ciod;

namespace {
std::string table_csv(const FeatureTable& t) {
  std::ostringstream o;
  write_feature_csv(t, o);
  return o.str();
}
}  // namespace

TEST_CASE("preset structure") {
  const GeneratorSpec s = planted_preset(1000, 400, 3);
  CHECK(s.k() == 4);
  CHECK(s.shares == std::vector<double>{0.994, 0.003, 0.002, 0.001});
  CHECK(s.narratives.size() == 400);
  std::vector<std::uint32_t> planted;
  for (std::size_t i = 1; i < 4; ++i) {
    CHECK(s.planted_narratives[i].size() == 3);
    for (auto c : s.planted_narratives[i]) {
      planted.push_back(c);
      CHECK(sigmoid(s.gamma(static_cast<Eigen::Index>(i), c)) == doctest::Approx(0.06));
      CHECK(sigmoid(s.gamma(0, c)) == doctest::Approx(0.0003));
    }
  }
  std::sort(planted.begin(), planted.end());
  CHECK(std::adjacent_find(planted.begin(), planted.end()) == planted.end());
  CHECK(sigmoid(s.beta(0, 0)) == doctest::Approx(0.216));
  CHECK(sigmoid(s.beta(1, 0)) == doctest::Approx(0.9));
  CHECK_THROWS_AS(planted_preset(10, 5), ConfigError);
}

TEST_CASE("generator is deterministic and matches its rates") {
  GeneratorSpec s = planted_preset(20000, 300, 8);
  const SyntheticData a = generate_full(s);
  const SyntheticData b = generate_full(s);
  CHECK(table_csv(a.table) == table_csv(b.table));
  CHECK(a.labels == b.labels);
  s.seed = 9;
  CHECK(table_csv(generate_full(s).table) != table_csv(a.table));

  const double n = 20000;
  std::vector<double> count(4, 0);
  for (int z : a.labels) ++count[static_cast<std::size_t>(z)];
  for (std::size_t i = 0; i < 4; ++i) {
    const double p = s.shares[i];
    CHECK(std::abs(count[i] / n - p) < 4 * std::sqrt(p * (1 - p) / n));
  }
  // flag rates among cluster 0
  for (std::size_t f = 0; f < 5; ++f) {
    double hit = 0;
    for (std::size_t j = 0; j < a.labels.size(); ++j)
      if (a.labels[j] == 0) hit += a.table.accounts[j].flags[f];
    const double p = sigmoid(s.beta(0, static_cast<Eigen::Index>(f)));
    CHECK(std::abs(hit / count[0] - p) < 4 * std::sqrt(p * (1 - p) / count[0]));
  }
  // per-message narrative rate of a common column
  const Eigen::Index top = [&] {
    Eigen::Index best = 0;
    s.gamma.row(0).maxCoeff(&best);
    return best;
  }();
  double hits = 0, msgs = 0;
  std::vector<double> m;
  for (std::size_t j = 0; j < a.labels.size(); ++j) {
    const auto& acc = a.table.accounts[j];
    m.push_back(acc.message_count);
    if (a.labels[j] != 0) continue;
    msgs += acc.message_count;
    hits += acc.count(static_cast<std::uint32_t>(top));
  }
  const double p = sigmoid(s.gamma(0, top));
  CHECK(std::abs(hits / msgs - p) < 4 * std::sqrt(p * (1 - p) / msgs));
  std::nth_element(m.begin(), m.begin() + m.size() / 2, m.end());
  CHECK(std::abs(m[m.size() / 2] - 20.0) <= 1.0);
}

TEST_CASE("lognormal cluster shares") {
  GeneratorSpec s;
  s.n_accounts = 4000;
  s.lognormal_shares = true;
  s.mu_clust = {0.0, -3.0};
  s.sigma_clust = {0.1, 0.1};
  s.beta = Eigen::MatrixXd::Zero(2, 1);
  s.gamma = Eigen::MatrixXd::Zero(2, 1);
  s.flag_names = {"egg"};
  s.narratives = {"x"};
  s.shares.clear();
  const SyntheticData d = generate_full(s);
  double minority = 0;
  for (int z : d.labels) minority += z;
  const double p = 1.0 / (1.0 + std::exp(3.0));
  CHECK(std::abs(minority / 4000 - p) < 0.015);
  s.sigma_clust = {0.1, 0.0};
  CHECK_THROWS_AS(generate_full(s), ConfigError);
}

TEST_CASE("synthesized corpus reproduces the table") {
  const SyntheticData d = generate_full(planted_preset(600, 150, 4));
  const Corpus c = synthesize_corpus(d, 4);
  const ExtractResult r = extract_features(c);
  REQUIRE(r.table.accounts.size() == d.table.accounts.size());
  std::map<std::string, int> users;
  for (const auto& a : d.table.accounts)
    for (const auto& [col, n] : a.narrative_counts) ++users[d.table.narratives[col]];
  for (const auto& name : r.table.narratives) CHECK(users[name] >= 2);
  for (const auto& [name, u] : users)
    if (u >= 2) CHECK(std::find(r.table.narratives.begin(), r.table.narratives.end(), name) != r.table.narratives.end());

  std::size_t lost = 0;
  for (std::size_t j = 0; j < d.table.accounts.size(); ++j) {
    const auto& want = d.table.accounts[j];
    const auto& got = r.table.accounts[j];
    CHECK(got.account_id == want.account_id);
    CHECK(got.message_count == want.message_count);
    for (std::size_t f = 0; f < 5; ++f) {
      if (f == 2 && want.flags[f] && !got.flags[f]) {
        ++lost;
        continue;
      }
      CHECK(got.flags[f] == want.flags[f]);
    }
    for (std::size_t col = 0; col < r.table.narratives.size(); ++col) {
      const auto src = static_cast<std::uint32_t>(d.table.column_of(r.table.narratives[col]));
      CHECK(got.count(static_cast<std::uint32_t>(col)) == want.count(src));
    }
  }
  CHECK(lost <= 3);
}

TEST_CASE("labels CSV round trip") {
  const SyntheticData d = generate_full(planted_preset(50, 20, 1));
  std::ostringstream o;
  write_labels_csv(d.table, d.labels, o);
  std::istringstream in(o.str());
  const auto back = read_labels_csv(in);
  REQUIRE(back.size() == 50);
  for (std::size_t j = 0; j < 50; ++j) {
    CHECK(back[j].first == d.table.accounts[j].account_id);
    CHECK(back[j].second == d.labels[j]);
  }
  std::istringstream bad("id,cluster\n");
  CHECK_THROWS_AS(read_labels_csv(bad), SchemaError);
}

TEST_CASE("simple data generator") {
  const SimpleSample s = generate_simple(20000, 0.1, {0.9, 0.2}, {0.7, 0.1}, 6);
  CHECK(s.data.cells.total() == 20000);
  double cio = 0, f_cio = 0, n_non = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    cio += s.labels[i];
    if (s.labels[i]) f_cio += s.data.f[i];
    else n_non += s.data.n[i];
  }
  CHECK(std::abs(cio / 20000 - 0.1) < 0.01);
  CHECK(std::abs(f_cio / cio - 0.9) < 0.03);
  CHECK(std::abs(n_non / (20000 - cio) - 0.1) < 0.01);
  const SimpleSample again = generate_simple(20000, 0.1, {0.9, 0.2}, {0.7, 0.1}, 6);
  CHECK(again.data.f == s.data.f);
  CHECK_THROWS_AS(generate_simple(10, 1.5, {0.5, 0.5}, {0.5, 0.5}, 1), ConfigError);
}
