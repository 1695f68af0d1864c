#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "preq/annotate.hpp"
#include "preq/line_sink.hpp"
#include "preq/preference.hpp"
#include "preq/synthesis.hpp"

namespace preq {

inline constexpr int kSchemaVersion = 1;

/// One line of a dataset file: an instance, its annotations once computed, and any fields
/// this version does not know about (kept verbatim on rewrite).
struct DatasetRecord {
  Instance instance;
  std::optional<AnnotationRecord> annotations;
  nlohmann::json extra = nlohmann::json::object();
  nlohmann::json extra_annotations = nlohmann::json::object();
  int schema_version = kSchemaVersion;

  bool operator==(const DatasetRecord&) const = default;
};

DatasetRecord make_record(Instance inst);

nlohmann::json record_to_json(const DatasetRecord& r);
/// Throws DataIntegrityError for malformed objects and for schema versions above kSchemaVersion.
DatasetRecord record_from_json(const nlohmann::json& j);

struct BadLine {
  std::size_t line_number = 0;  // 1-based
  std::string error;
};

struct ReadReport {
  std::size_t lines = 0;
  std::vector<BadLine> bad_lines;
};

/// Streams every well-formed record of `path` to `fn`. Malformed lines are skipped and
/// reported; a record from a newer schema aborts with DataIntegrityError.
ReadReport for_each_record(const std::filesystem::path& path, const std::function<void(DatasetRecord)>& fn);

struct Dataset {
  std::vector<DatasetRecord> records;
  ReadReport report;
};
Dataset read_dataset(const std::filesystem::path& path);

/// Appends records, one whole line per write.
class DatasetWriter {
 public:
  explicit DatasetWriter(const std::filesystem::path& path, LineSink::Mode mode = LineSink::Mode::append);
  void append(const DatasetRecord& r);
  void append_json(const nlohmann::json& j);
  void flush() { sink_.flush(); }

 private:
  LineSink sink_;
};

/// Replaces `path` with `lines` through a temporary file and rename.
void write_lines_atomic(const std::filesystem::path& path, std::span<const std::string> lines);
void write_dataset(const std::filesystem::path& path, std::span<const DatasetRecord> records);

std::vector<PreferencePair> read_preferences(const std::filesystem::path& path, ReadReport* report = nullptr);
void write_preferences(const std::filesystem::path& path, std::span<const PreferencePair> pairs);

struct Tokenizer {
  std::string name;
  std::function<std::size_t(std::string_view)> count;
  bool approximate = true;
};
/// Whitespace-delimited tokens; an approximation of any subword tokenizer.
Tokenizer whitespace_tokenizer();

struct RewardSummary {
  std::int64_t count = 0;
  double min = 0;
  double mean = 0;
  double max = 0;
};

struct StatsReport {
  std::int64_t records = 0;
  std::int64_t turns = 0;
  double turns_per_conversation = 0;
  double tokens_per_turn_mean = 0;
  double tokens_per_turn_std = 0;  // population
  std::int64_t total_tokens = 0;
  std::string tokenizer;
  bool tokenizer_approximate = true;
  std::map<std::string, std::int64_t> quality_histogram;     // label or "unrated"
  std::map<std::string, std::int64_t> difficulty_histogram;  // label or "unrated"
  std::map<std::string, std::int64_t> category_distribution;
  std::map<std::string, std::int64_t> safety_breakdown;
  std::optional<RewardSummary> reward;

  nlohmann::json to_json() const;
};

/// Per-turn tokens are instruction plus response tokens.
StatsReport compute_stats(std::span<const DatasetRecord> records, const Tokenizer& tokenizer = whitespace_tokenizer());

/// Cost per 1,000 instances: hourly_rate * gpu_hours / (instances / 1000).
double estimate_cost(double gpu_hours, std::int64_t instances, double hourly_rate);

}  // namespace preq
