#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace ciod::csv {

// Shortest round-trip decimal form of a double.
inline std::string format_double(double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline void append_double(std::string& out, double x) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  out.append(buf, res.ptr);
}

template <typename Int>
inline void append_int(std::string& out, Int x) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof(buf), x);
  out.append(buf, res.ptr);
}

std::string escape(std::string_view field);

// Splits one CSV record (RFC 4180 quoting, no embedded newlines).
std::vector<std::string> split_line(std::string_view line);

double parse_double(std::string_view field, std::size_t line);
std::int64_t parse_int(std::string_view field, std::size_t line);

std::string join(const std::vector<std::string>& fields);

}  // namespace ciod::csv
