#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace samref {

/// Library version, e.g. "0.1.0".
const char* version_string();

/// What a run consumed: enough to repeat it on the same platform. The id
/// is derived from the other fields, so equal inputs give equal manifests.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;       // effective settings
  std::map<std::string, std::string> checkpoints;  // role -> sha256
  std::string dataset_hash;
  std::string tool_version = version_string();

  std::string run_id() const;
  nlohmann::json to_json() const;
};

void write_run_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_run_manifest(const std::filesystem::path& path);

}  // namespace samref
