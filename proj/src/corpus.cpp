#include "ciodetect/corpus.hpp"

#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <unordered_set>

#include "ciodetect/error.hpp"
#include "json.hpp"

namespace ciod {
namespace {

using nlohmann::json;

const json& require(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(line, std::string("missing field \"") + key + "\"");
  return *it;
}

std::string require_string(const json& obj, const char* key, std::size_t line) {
  const json& v = require(obj, key, line);
  if (!v.is_string()) throw SchemaError(line, std::string("field \"") + key + "\" must be a string");
  return v.get<std::string>();
}

bool require_bool(const json& obj, const char* key, std::size_t line) {
  const json& v = require(obj, key, line);
  if (!v.is_boolean()) throw SchemaError(line, std::string("field \"") + key + "\" must be a boolean");
  return v.get<bool>();
}

std::int64_t require_int(const json& obj, const char* key, std::size_t line) {
  const json& v = require(obj, key, line);
  if (!v.is_number_integer()) {
    throw SchemaError(line, std::string("field \"") + key + "\" must be an integer");
  }
  return v.get<std::int64_t>();
}

std::uint64_t require_uint(const json& obj, const char* key, std::size_t line) {
  const json& v = require(obj, key, line);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    throw SchemaError(line, std::string("field \"") + key + "\" must be a nonnegative integer");
  }
  return v.get<std::uint64_t>();
}

Message parse_message(const json& obj, std::size_t line) {
  Message m;
  m.message_id = require_string(obj, "message_id", line);
  if (m.message_id.empty()) throw SchemaError(line, "message_id must be nonempty");
  m.account_id = require_string(obj, "account_id", line);
  m.timestamp = require_int(obj, "timestamp", line);
  if (m.timestamp < 0) throw SchemaError(line, "timestamp must be >= 0");
  m.text = require_string(obj, "text", line);
  m.client = require_string(obj, "client", line);
  m.is_retweet = require_bool(obj, "is_retweet", line);
  return m;
}

AccountProfile parse_profile(const json& obj, std::size_t line) {
  AccountProfile p;
  p.account_id = require_string(obj, "account_id", line);
  if (p.account_id.empty()) throw SchemaError(line, "account_id must be nonempty");
  p.verified = require_bool(obj, "verified", line);
  p.description = require_string(obj, "description", line);
  p.statuses_count = require_uint(obj, "statuses_count", line);
  p.created_at = require_int(obj, "created_at", line);
  p.collected_at = require_int(obj, "collected_at", line);
  if (p.collected_at < p.created_at) throw SchemaError(line, "collected_at precedes created_at");
  if (auto it = obj.find("extra_flags"); it != obj.end()) {
    if (!it->is_array()) throw SchemaError(line, "extra_flags must be an array");
    for (const json& v : *it) {
      if (!v.is_number_integer() || (v.get<int>() != 0 && v.get<int>() != 1)) {
        throw SchemaError(line, "extra_flags entries must be 0 or 1");
      }
      p.extra_flags.push_back(v.get<int>());
    }
  }
  return p;
}

}  // namespace

Corpus parse_corpus(std::istream& in) {
  Corpus corpus;
  std::unordered_set<std::string> message_ids;
  std::vector<std::size_t> message_lines;
  std::optional<std::size_t> extra_flag_count;

  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw SchemaError(line, std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw SchemaError(line, "record must be a JSON object");
    const std::string kind = require_string(obj, "kind", line);
    if (kind == "message") {
      Message m = parse_message(obj, line);
      if (!message_ids.insert(m.message_id).second) {
        throw SchemaError(line, "duplicate message_id \"" + m.message_id + "\"");
      }
      corpus.messages.push_back(std::move(m));
      message_lines.push_back(line);
    } else if (kind == "profile") {
      AccountProfile p = parse_profile(obj, line);
      if (extra_flag_count && *extra_flag_count != p.extra_flags.size()) {
        throw SchemaError(line, "extra_flags length differs from earlier profiles");
      }
      extra_flag_count = p.extra_flags.size();
      const std::string id = p.account_id;
      if (!corpus.profiles.emplace(id, std::move(p)).second) {
        throw SchemaError(line, "duplicate profile for account \"" + id + "\"");
      }
    } else {
      throw SchemaError(line, "unknown kind \"" + kind + "\"");
    }
  }
  if (in.bad()) throw IoError("read failure while parsing corpus");

  for (std::size_t i = 0; i < corpus.messages.size(); ++i) {
    if (!corpus.profiles.contains(corpus.messages[i].account_id)) {
      throw SchemaError(message_lines[i], "message references account \"" +
                                              corpus.messages[i].account_id +
                                              "\" which has no profile");
    }
  }
  return corpus;
}

Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  return parse_corpus(in);
}

void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const auto& [id, p] : corpus.profiles) {
    json obj = {{"kind", "profile"},
                {"account_id", p.account_id},
                {"verified", p.verified},
                {"description", p.description},
                {"statuses_count", p.statuses_count},
                {"created_at", p.created_at},
                {"collected_at", p.collected_at}};
    if (!p.extra_flags.empty()) obj["extra_flags"] = p.extra_flags;
    out << obj.dump() << '\n';
  }
  for (const Message& m : corpus.messages) {
    json obj = {{"kind", "message"},          {"message_id", m.message_id},
                {"account_id", m.account_id}, {"timestamp", m.timestamp},
                {"text", m.text},             {"client", m.client},
                {"is_retweet", m.is_retweet}};
    out << obj.dump() << '\n';
  }
}

}  // namespace ciod
