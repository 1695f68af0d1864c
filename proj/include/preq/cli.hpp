#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace preq::cli {

struct StageEntry {
  std::string stage;
  std::string started_at;
  std::string finished_at;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  nlohmann::json counters = nlohmann::json::object();
};

/// Provenance of a dataset file: the run it belongs to and every stage that produced it.
struct RunManifest {
  std::string run_id;
  std::string job_path;
  std::vector<StageEntry> stages;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static std::optional<RunManifest> load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// `<dataset>.manifest.json`
std::filesystem::path manifest_path_for(const std::filesystem::path& dataset);

/// Entry point. `args` excludes the program name. Returns the process exit code:
/// 0 ok, 1 usage, 2 config, 3 transport, 4 data integrity, 130 interrupted.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace preq::cli
