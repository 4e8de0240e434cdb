#include "ciodetect/manifest.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iterator>
#include "json.hpp"

#include "ciodetect/error.hpp"

namespace ciod {
namespace {

std::string to_hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (unsigned i = 0; i < n; ++i) {
    out[2 * i] = digits[d[i] >> 4];
    out[2 * i + 1] = digits[d[i] & 15];
  }
  return out;
}

nlohmann::ordered_json body(const Manifest& m) {
  nlohmann::ordered_json j;
  j["tool"] = "ciodetect";
  j["version"] = kToolVersion;
  j["command"] = m.command;
  j["config"] = m.config_json.empty() ? nlohmann::ordered_json::object() : nlohmann::ordered_json::parse(m.config_json);
  auto list = [](const std::vector<ManifestEntry>& v) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : v) arr.push_back({{"path", e.path}, {"sha256", e.sha256}});
    return arr;
  };
  j["inputs"] = list(m.inputs);
  j["outputs"] = list(m.outputs);
  return j;
}

}  // namespace

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("SHA-256 failed");
  }
  return to_hex(md, len);
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

void Manifest::add_input(const std::filesystem::path& p) { inputs.push_back({p.string(), sha256_file(p)}); }
void Manifest::add_output(const std::filesystem::path& p) { outputs.push_back({p.string(), sha256_file(p)}); }

std::string Manifest::content_hash() const { return sha256_hex(body(*this).dump()); }

std::string Manifest::to_json(const std::string& timestamp) const {
  auto j = body(*this);
  j["content_sha256"] = content_hash();
  j["timestamp"] = timestamp;
  return j.dump(2) + "\n";
}

void Manifest::write(const std::filesystem::path& path) const {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(buf);
}

}  // namespace ciod
