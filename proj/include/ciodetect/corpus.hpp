#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ciod {

struct Message {
  std::string message_id;
  std::string account_id;
  std::int64_t timestamp = 0;
  std::string text;
  std::string client;
  bool is_retweet = false;

  bool operator==(const Message&) const = default;
};

struct AccountProfile {
  std::string account_id;
  bool verified = false;
  std::string description;
  std::uint64_t statuses_count = 0;
  std::int64_t created_at = 0;
  std::int64_t collected_at = 0;
  // Analyst-defined flags appended after the five built-in ones.
  std::vector<int> extra_flags;

  bool operator==(const AccountProfile&) const = default;
};

// A validated message corpus. Immutable after loading; every message's
// account has exactly one profile.
struct Corpus {
  std::vector<Message> messages;
  std::map<std::string, AccountProfile> profiles;

  std::size_t num_accounts() const { return profiles.size(); }

  bool operator==(const Corpus&) const = default;
};

// Parses the line-delimited JSON corpus format. Throws IoError if the file
// cannot be read and SchemaError (with the 1-based line number) on any
// malformed record, duplicate id, or message without a profile.
Corpus load_corpus(const std::filesystem::path& path);
Corpus parse_corpus(std::istream& in);

// Writes profiles (in account order) and then messages (in corpus order).
void write_corpus(const Corpus& corpus, std::ostream& out);

}  // namespace ciod
