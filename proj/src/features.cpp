#include "ciodetect/features.hpp"

#include <wctype.h>
#include <locale.h>

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <unordered_set>

#include "ciodetect/csv.hpp"
#include "ciodetect/error.hpp"

namespace ciod {
namespace {

// C.UTF-8 character classes give Unicode-wide case mapping independent of the
// process-global locale. Falls back to ASCII rules when unavailable.
locale_t utf8_locale() {
  static const locale_t loc = newlocale(LC_CTYPE_MASK, "C.UTF-8", static_cast<locale_t>(nullptr));
  return loc;
}

// Decodes one code point; invalid bytes decode as themselves.
char32_t decode(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> char32_t {
    return i + k < s.size() ? (static_cast<unsigned char>(s[i + k]) & 0x3F) : 0;
  };
  if (b0 < 0x80) {
    i += 1;
    return b0;
  }
  if ((b0 >> 5) == 0x6 && i + 1 < s.size()) {
    char32_t cp = ((b0 & 0x1F) << 6) | cont(1);
    i += 2;
    return cp;
  }
  if ((b0 >> 4) == 0xE && i + 2 < s.size()) {
    char32_t cp = ((b0 & 0x0F) << 12) | (cont(1) << 6) | cont(2);
    i += 3;
    return cp;
  }
  if ((b0 >> 3) == 0x1E && i + 3 < s.size()) {
    char32_t cp = ((b0 & 0x07) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3);
    i += 4;
    return cp;
  }
  i += 1;
  return b0;
}

void encode(char32_t cp, std::string& out) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

char32_t lower(char32_t cp) {
  if (cp < 0x80) return (cp >= 'A' && cp <= 'Z') ? cp + 32 : cp;
  if (locale_t loc = utf8_locale()) return static_cast<char32_t>(towlower_l(static_cast<wint_t>(cp), loc));
  return cp;
}

bool is_space(char32_t cp) {
  if (cp < 0x80) return cp == ' ' || (cp >= 0x09 && cp <= 0x0D);
  if (locale_t loc = utf8_locale()) return iswspace_l(static_cast<wint_t>(cp), loc) != 0;
  return false;
}

// Characters that terminate a hashtag: whitespace, '#', and punctuation other
// than the underscore.
bool ends_hashtag(char32_t cp) {
  if (cp == '#') return true;
  if (cp == '_') return false;
  if (is_space(cp)) return true;
  if (cp < 0x80) return std::ispunct(static_cast<int>(cp)) != 0;
  if (cp == 0xA0) return true;
  if (locale_t loc = utf8_locale()) return iswpunct_l(static_cast<wint_t>(cp), loc) != 0;
  return false;
}

std::string trim_copy(std::string_view s) {
  std::size_t i = 0;
  std::size_t start = s.size();
  std::size_t end = 0;
  while (i < s.size()) {
    const std::size_t at = i;
    const char32_t cp = decode(s, i);
    if (!is_space(cp)) {
      start = std::min(start, at);
      end = i;
    }
  }
  return start < end ? std::string(s.substr(start, end - start)) : std::string();
}

}  // namespace

std::string utf8_lower(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) encode(lower(decode(text, i)), out);
  return out;
}

std::vector<std::string> extract_hashtags(std::string_view text) {
  std::vector<std::string> tags;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '#') {
      decode(text, i);
      continue;
    }
    ++i;
    const std::size_t start = i;
    std::size_t end = i;
    while (i < text.size()) {
      std::size_t next = i;
      const char32_t cp = decode(text, next);
      if (ends_hashtag(cp)) break;
      i = next;
      end = i;
    }
    if (end > start) tags.push_back(utf8_lower(text.substr(start, end - start)));
  }
  return tags;
}

std::size_t count_tokens(std::string_view text) {
  std::size_t tokens = 0;
  bool in_token = false;
  std::size_t i = 0;
  while (i < text.size()) {
    const bool space = is_space(decode(text, i));
    if (!space && !in_token) ++tokens;
    in_token = !space;
  }
  return tokens;
}

std::set<std::string> detect_flood(const Corpus& corpus, const FlagThresholds& th) {
  struct Usage {
    std::size_t copies = 0;
    std::set<std::string_view> accounts;
    bool verified_author = false;
  };
  std::unordered_map<std::string_view, Usage> usage;
  for (const Message& m : corpus.messages) {
    if (count_tokens(m.text) < th.flood_min_tokens) continue;
    Usage& u = usage[m.text];
    if (corpus.profiles.at(m.account_id).verified) u.verified_author = true;
    if (m.is_retweet) continue;
    ++u.copies;
    u.accounts.insert(m.account_id);
  }
  std::set<std::string> flood;
  for (const auto& [text, u] : usage) {
    if (!u.verified_author && u.copies >= th.flood_min_copies &&
        u.accounts.size() >= th.flood_min_accounts) {
      flood.emplace(text);
    }
  }
  return flood;
}

std::map<std::string, FlagVector> compute_flags(const Corpus& corpus, const FlagThresholds& th) {
  const std::set<std::string> flood = detect_flood(corpus, th);
  std::map<std::string, FlagVector> flags;
  for (const auto& [id, p] : corpus.profiles) {
    FlagVector f(kNumBuiltinFlags + p.extra_flags.size(), 0);
    f[0] = !p.verified && trim_copy(p.description).empty();
    f[1] = !p.verified && p.statuses_count < th.baby_max_statuses;
    const double age_days = static_cast<double>(p.collected_at - p.created_at) / 86400.0;
    f[4] = static_cast<double>(p.statuses_count) / std::max(age_days, th.min_age_days) >
           th.hyper_per_day;
    for (std::size_t e = 0; e < p.extra_flags.size(); ++e) f[kNumBuiltinFlags + e] = p.extra_flags[e];
    flags.emplace(id, std::move(f));
  }
  for (const Message& m : corpus.messages) {
    FlagVector& f = flags.at(m.account_id);
    if (std::find(kStandardClients.begin(), kStandardClients.end(), m.client) == kStandardClients.end()) {
      f[3] = 1;
    }
    if (flood.contains(m.text)) f[2] = 1;
  }
  return flags;
}

NarrativeVocabulary NarrativeVocabulary::from_list(std::vector<std::string> narratives) {
  NarrativeVocabulary v;
  v.narratives = std::move(narratives);
  for (std::size_t i = 0; i < v.narratives.size(); ++i) {
    if (!v.index.emplace(v.narratives[i], static_cast<std::uint32_t>(i)).second) {
      throw ConfigError("duplicate narrative \"" + v.narratives[i] + "\"");
    }
  }
  return v;
}

NarrativeVocabulary build_vocabulary(const Corpus& corpus) {
  std::unordered_map<std::string, std::unordered_set<std::string_view>> users;
  for (const Message& m : corpus.messages) {
    for (std::string& tag : extract_hashtags(m.text)) users[std::move(tag)].insert(m.account_id);
  }
  std::vector<std::string> kept;
  for (auto& [tag, accounts] : users) {
    if (accounts.size() >= 2) kept.push_back(tag);
  }
  std::sort(kept.begin(), kept.end());
  return NarrativeVocabulary::from_list(std::move(kept));
}

std::map<std::string, NarrativeCountResult> count_narratives(const Corpus& corpus,
                                                             const NarrativeVocabulary& vocab) {
  std::map<std::string, std::map<std::uint32_t, std::uint32_t>> dense;
  std::map<std::string, NarrativeCountResult> out;
  for (const auto& [id, p] : corpus.profiles) out[id];
  for (const Message& m : corpus.messages) {
    ++out[m.account_id].message_count;
    std::vector<std::uint32_t> cols;
    for (const std::string& tag : extract_hashtags(m.text)) {
      if (auto it = vocab.index.find(tag); it != vocab.index.end()) cols.push_back(it->second);
    }
    std::sort(cols.begin(), cols.end());
    cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
    auto& acc = dense[m.account_id];
    for (std::uint32_t c : cols) ++acc[c];
  }
  for (auto& [id, cols] : dense) {
    auto& counts = out[id].counts;
    counts.assign(cols.begin(), cols.end());
  }
  return out;
}

double narrative_entropy(std::span<const std::uint32_t> counts) {
  double total = 0.0;
  for (std::uint32_t c : counts) total += c;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (std::uint32_t c : counts) {
    if (c == 0) continue;
    const double p = c / total;
    h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

double narrative_entropy(const SparseCounts& counts) {
  std::vector<std::uint32_t> values;
  values.reserve(counts.size());
  for (const auto& [col, c] : counts) values.push_back(c);
  return narrative_entropy(values);
}

std::uint32_t AccountFeatures::count(std::uint32_t column) const {
  auto it = std::lower_bound(narrative_counts.begin(), narrative_counts.end(),
                             std::make_pair(column, std::uint32_t{0}));
  return (it != narrative_counts.end() && it->first == column) ? it->second : 0;
}

FeatureTable FeatureTable::select_columns(std::span<const std::uint32_t> columns) const {
  FeatureTable out;
  out.flag_names = flag_names;
  std::unordered_map<std::uint32_t, std::uint32_t> remap;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] >= narratives.size()) throw ConfigError("narrative column out of range");
    out.narratives.push_back(narratives[columns[i]]);
    remap.emplace(columns[i], static_cast<std::uint32_t>(i));
  }
  out.accounts.reserve(accounts.size());
  for (const AccountFeatures& a : accounts) {
    AccountFeatures b;
    b.account_id = a.account_id;
    b.flags = a.flags;
    b.message_count = a.message_count;
    for (const auto& [col, c] : a.narrative_counts) {
      if (auto it = remap.find(col); it != remap.end()) b.narrative_counts.emplace_back(it->second, c);
    }
    std::sort(b.narrative_counts.begin(), b.narrative_counts.end());
    b.narrative_entropy = narrative_entropy(b.narrative_counts);
    out.accounts.push_back(std::move(b));
  }
  return out;
}

std::uint32_t FeatureTable::column_of(const std::string& narrative) const {
  auto it = std::find(narratives.begin(), narratives.end(), narrative);
  if (it == narratives.end()) throw ConfigError("unknown narrative \"" + narrative + "\"");
  return static_cast<std::uint32_t>(it - narratives.begin());
}

ExtractResult extract_features(const Corpus& corpus, const FlagThresholds& th) {
  ExtractResult result;
  result.flood_texts = detect_flood(corpus, th);
  const auto flags = compute_flags(corpus, th);
  const NarrativeVocabulary vocab = build_vocabulary(corpus);
  const auto counts = count_narratives(corpus, vocab);

  FeatureTable& table = result.table;
  table.flag_names.assign(kBuiltinFlagNames.begin(), kBuiltinFlagNames.end());
  std::size_t extra = 0;
  if (!corpus.profiles.empty()) extra = corpus.profiles.begin()->second.extra_flags.size();
  for (std::size_t e = 0; e < extra; ++e) table.flag_names.push_back("extra_" + std::to_string(e));
  table.narratives = vocab.narratives;

  for (const auto& [id, nc] : counts) {
    if (nc.message_count == 0) {
      ++result.skipped_silent_accounts;
      continue;
    }
    AccountFeatures a;
    a.account_id = id;
    a.flags = flags.at(id);
    a.narrative_counts = nc.counts;
    a.message_count = nc.message_count;
    a.narrative_entropy = narrative_entropy(a.narrative_counts);
    table.accounts.push_back(std::move(a));
  }
  return result;
}

void write_feature_csv(const FeatureTable& table, std::ostream& out) {
  std::string line = "account_id,M";
  for (const auto& f : table.flag_names) line += "," + csv::escape(f);
  line += ",entropy";
  for (const auto& n : table.narratives) line += "," + csv::escape(n);
  line += '\n';
  out << line;

  const std::size_t width = table.num_narratives();
  for (const AccountFeatures& a : table.accounts) {
    line = csv::escape(a.account_id);
    line += ',';
    csv::append_int(line, a.message_count);
    for (std::uint8_t f : a.flags) {
      line += ',';
      line += static_cast<char>('0' + f);
    }
    line += ',';
    csv::append_double(line, a.narrative_entropy);
    std::size_t col = 0;
    for (const auto& [c, n] : a.narrative_counts) {
      for (; col < c; ++col) line += ",0";
      line += ',';
      csv::append_int(line, n);
      ++col;
    }
    for (; col < width; ++col) line += ",0";
    line += '\n';
    out << line;
  }
}

FeatureTable read_feature_csv(std::istream& in) {
  std::string text;
  if (!std::getline(in, text)) throw SchemaError(1, "feature CSV is empty");
  const auto header = csv::split_line(text);
  if (header.size() < 3 || header[0] != "account_id" || header[1] != "M") {
    throw SchemaError(1, "feature CSV header must start with account_id,M");
  }
  auto ent = std::find(header.begin(), header.end(), "entropy");
  if (ent == header.end()) throw SchemaError(1, "feature CSV header lacks the entropy column");
  FeatureTable table;
  table.flag_names.assign(header.begin() + 2, ent);
  table.narratives.assign(ent + 1, header.end());
  const std::size_t nf = table.flag_names.size();
  const std::size_t ncols = header.size();

  std::size_t line = 1;
  while (std::getline(in, text)) {
    ++line;
    if (text.empty() || text == "\r") continue;
    const auto fields = csv::split_line(text);
    if (fields.size() != ncols) {
      throw SchemaError(line, "expected " + std::to_string(ncols) + " fields, got " +
                                  std::to_string(fields.size()));
    }
    AccountFeatures a;
    a.account_id = fields[0];
    const std::int64_t m = csv::parse_int(fields[1], line);
    if (m < 0) throw SchemaError(line, "M must be nonnegative");
    a.message_count = static_cast<std::uint32_t>(m);
    a.flags.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
      const std::int64_t v = csv::parse_int(fields[2 + f], line);
      if (v != 0 && v != 1) throw SchemaError(line, "flags must be 0 or 1");
      a.flags[f] = static_cast<std::uint8_t>(v);
    }
    a.narrative_entropy = csv::parse_double(fields[2 + nf], line);
    for (std::size_t c = 0; c < table.narratives.size(); ++c) {
      const std::string& cell = fields[3 + nf + c];
      if (cell == "0") continue;
      const std::int64_t v = csv::parse_int(cell, line);
      if (v < 0 || v > m) throw SchemaError(line, "narrative count outside [0, M]");
      if (v > 0) a.narrative_counts.emplace_back(static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(v));
    }
    table.accounts.push_back(std::move(a));
  }
  return table;
}

}  // namespace ciod
