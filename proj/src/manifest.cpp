#include "samref/manifest.hpp"

#include "samref/error.hpp"
#include "samref/util.hpp"

namespace samref {

namespace {

nlohmann::json content_json(const RunManifest& m) {
  return {{"command", m.command},
          {"config", m.config},
          {"checkpoints", m.checkpoints},
          {"dataset_hash", m.dataset_hash},
          {"tool_version", m.tool_version}};
}

}  // namespace

const char* version_string() { return SAMREF_VERSION_STRING; }

std::string RunManifest::run_id() const {
  return command + "-" + sha256_hex(content_json(*this).dump()).substr(0, 12);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j = content_json(*this);
  j["run_id"] = run_id();
  return j;
}

void write_run_manifest(const std::filesystem::path& path, const RunManifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, m.to_json().dump(2) + "\n");
}

RunManifest read_run_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    RunManifest m;
    m.command = j.at("command");
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
    m.dataset_hash = j.at("dataset_hash");
    m.tool_version = j.at("tool_version");
    require(j.at("run_id") == m.run_id(), ErrorCode::Format,
            "manifest run id does not match its contents: " + path.string());
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, "bad run manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace samref
