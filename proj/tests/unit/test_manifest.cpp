#include <filesystem>
#include <fstream>

#include "ciodetect/error.hpp"
#include "ciodetect/manifest.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace ciod;

TEST_CASE("sha256 known values") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK_THROWS_AS(sha256_file("/nonexistent/file"), IoError);
}

TEST_CASE("manifest hash ignores the timestamp") {
  const auto dir = std::filesystem::temp_directory_path() / "ciod_manifest_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "in.txt";
  std::ofstream(file) << "abc";
  Manifest m;
  m.command = "extract";
  m.config_json = R"({"seed":1})";
  m.add_input(file);
  CHECK(m.inputs[0].sha256 == sha256_hex("abc"));
  const auto a = nlohmann::json::parse(m.to_json("2020-01-01T00:00:00Z"));
  const auto b = nlohmann::json::parse(m.to_json("2030-01-01T00:00:00Z"));
  CHECK(a["content_sha256"] == b["content_sha256"]);
  CHECK(a["timestamp"] != b["timestamp"]);
  CHECK(a["config"]["seed"] == 1);
  m.config_json = R"({"seed":2})";
  CHECK(m.content_hash() != a["content_sha256"].get<std::string>());
  m.write(dir / "manifest.json");
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  std::filesystem::remove_all(dir);
}
