#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ciodetect/corpus.hpp"

namespace ciod {

inline constexpr std::array<std::string_view, 5> kBuiltinFlagNames = {"egg", "baby", "flood",
                                                                       "odd_client", "hyper"};
inline constexpr std::size_t kNumBuiltinFlags = kBuiltinFlagNames.size();

// Clients treated as ordinary; anything else sets the odd_client flag.
inline constexpr std::array<std::string_view, 4> kStandardClients = {
    "Twitter Web App", "Twitter for Android", "Twitter for iPhone", "Twitter for iPad"};

struct FlagThresholds {
  std::uint64_t baby_max_statuses = 100;  // baby iff statuses_count < this
  double hyper_per_day = 100.0;           // hyper iff rate > this
  double min_age_days = 1.0 / 24.0;
  std::size_t flood_min_tokens = 7;   // token count > 6
  std::size_t flood_min_copies = 11;  // > 10 non-retweet copies
  std::size_t flood_min_accounts = 3; // > 2 distinct accounts
};

// Binary flags in the order egg, baby, flood, odd_client, hyper, then any
// extra flags carried on the profile records.
using FlagVector = std::vector<std::uint8_t>;

// Sorted (column, count) pairs with count > 0.
using SparseCounts = std::vector<std::pair<std::uint32_t, std::uint32_t>>;

struct NarrativeVocabulary {
  std::vector<std::string> narratives;
  std::unordered_map<std::string, std::uint32_t> index;

  std::size_t size() const { return narratives.size(); }
  static NarrativeVocabulary from_list(std::vector<std::string> narratives);
};

struct AccountFeatures {
  std::string account_id;
  FlagVector flags;
  SparseCounts narrative_counts;
  std::uint32_t message_count = 0;
  double narrative_entropy = 0.0;

  std::uint32_t count(std::uint32_t column) const;
};

// Account-by-feature table shared by selection, modelling and export.
struct FeatureTable {
  std::vector<std::string> flag_names;
  std::vector<std::string> narratives;
  std::vector<AccountFeatures> accounts;

  std::size_t num_flags() const { return flag_names.size(); }
  std::size_t num_narratives() const { return narratives.size(); }

  // Keeps only the given narrative columns, in the given order, and
  // recomputes each account's entropy over the retained columns.
  FeatureTable select_columns(std::span<const std::uint32_t> columns) const;
  std::uint32_t column_of(const std::string& narrative) const;
};

std::set<std::string> detect_flood(const Corpus& corpus, const FlagThresholds& th = {});
std::map<std::string, FlagVector> compute_flags(const Corpus& corpus,
                                                const FlagThresholds& th = {});

// Unicode simple lowercase of a UTF-8 string.
std::string utf8_lower(std::string_view text);

// Normalized hashtags in order of appearance (duplicates retained).
std::vector<std::string> extract_hashtags(std::string_view text);

std::size_t count_tokens(std::string_view text);

NarrativeVocabulary build_vocabulary(const Corpus& corpus);

struct NarrativeCountResult {
  SparseCounts counts;
  std::uint32_t message_count = 0;
};
std::map<std::string, NarrativeCountResult> count_narratives(const Corpus& corpus,
                                                             const NarrativeVocabulary& vocab);

double narrative_entropy(std::span<const std::uint32_t> counts);
double narrative_entropy(const SparseCounts& counts);

struct ExtractResult {
  FeatureTable table;
  std::set<std::string> flood_texts;
  std::size_t skipped_silent_accounts = 0;  // profiles with no in-corpus message
};

// Full extraction: flags, vocabulary, narrative counts and entropy. Accounts
// without any in-corpus message are skipped (they carry no observations).
ExtractResult extract_features(const Corpus& corpus, const FlagThresholds& th = {});

// CSV with header account_id,M,<flags...>,entropy,<narratives...>.
void write_feature_csv(const FeatureTable& table, std::ostream& out);
FeatureTable read_feature_csv(std::istream& in);

}  // namespace ciod
