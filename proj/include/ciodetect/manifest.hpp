#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ciod {

std::string sha256_hex(std::string_view bytes);
// Throws IoError if the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

inline constexpr std::string_view kToolVersion = "0.1.0";

struct ManifestEntry {
  std::string path;
  std::string sha256;
};

// Run manifest: command, resolved config, input and output hashes. The
// timestamp is written but kept out of `content_hash`.
struct Manifest {
  std::string command;
  std::string config_json;  // resolved config (a JSON object)
  std::vector<ManifestEntry> inputs;
  std::vector<ManifestEntry> outputs;

  void add_input(const std::filesystem::path& p);
  void add_output(const std::filesystem::path& p);

  // SHA-256 over everything but the timestamp.
  std::string content_hash() const;
  std::string to_json(const std::string& timestamp) const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace ciod
