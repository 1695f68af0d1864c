#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "preq/annotate.hpp"

namespace preq {

/// Reward threshold (tau_1) and reward-difference threshold (tau_2) of the shipped configs.
inline constexpr double kRewardThreshold = -12.0;
inline constexpr double kRewardDiffThreshold = 0.0;

enum class RankOp { eq, ge, gt };

/// One stratum of a difficulty mix: records whose difficulty rank satisfies `op rank`.
struct DifficultyStratum {
  RankOp op = RankOp::eq;
  int rank = 1;
  double fraction = 1.0;
  bool matches(int difficulty_rank) const;
  bool operator==(const DifficultyStratum&) const = default;
};

/// Inclusive bounds.
struct LengthRange {
  std::optional<std::int64_t> min;
  std::optional<std::int64_t> max;
  bool contains(std::int64_t v) const;
  bool operator==(const LengthRange&) const = default;
};

struct FilterConfig {
  std::string name;
  std::int64_t target_count = 1;
  std::optional<int> min_quality_rank;
  std::optional<int> min_difficulty_rank;
  std::vector<DifficultyStratum> difficulty_mix;
  std::optional<double> min_neighbor_distance_gt;
  std::optional<double> reward_gt;
  std::optional<double> reward_diff_gt;
  std::optional<std::set<std::string>> category_whitelist;
  std::optional<LengthRange> input_length_range;
  std::optional<LengthRange> output_length_range;
  bool select_longest = false;
  std::uint64_t seed = 0;  // used when select_longest is false

  /// Throws ConfigError.
  void validate() const;
  bool operator==(const FilterConfig&) const = default;
};

nlohmann::json filter_config_to_json(const FilterConfig& cfg);
FilterConfig filter_config_from_json(const nlohmann::json& j);
FilterConfig load_filter_config(const std::filesystem::path& path);

/// The seven shipped configurations: Air-Filter, Pro-Filter, Pro-Filter2 ... Pro-Filter6.
std::vector<FilterConfig> builtin_configs();
/// Case-insensitive lookup among builtin_configs(). Throws LookupError.
FilterConfig builtin_config(std::string_view name);

enum class Predicate {
  input_length,
  output_length,
  task_category,
  quality,
  difficulty,
  difficulty_mix,
  min_neighbor_distance,
  reward,
  reward_diff,
};
std::string_view to_string(Predicate p);

/// Predicates of `cfg` that `rec` fails. A missing or unparsed metric fails its predicate.
std::vector<Predicate> failing_predicates(const AnnotationRecord& rec, const FilterConfig& cfg);
bool evaluate_predicates(const AnnotationRecord& rec, const FilterConfig& cfg);

struct FilterReport {
  std::string config_name;
  std::int64_t input_count = 0;
  std::int64_t survivors_after_predicates = 0;
  std::int64_t selected_count = 0;
  std::int64_t target_count = 0;
  std::int64_t shortfall = 0;
  std::map<std::string, std::int64_t> rejected_by;  // a record counts once per failed predicate
  std::vector<std::int64_t> stratum_quota;
  std::vector<std::int64_t> stratum_selected;
  std::optional<std::uint64_t> seed;

  nlohmann::json to_json() const;
};

struct FilterResult {
  std::vector<std::size_t> selected;  // indices into the input, ascending
  FilterReport report;
};

/// Stage 1: predicate conjunction. Stage 2: the longest target_count survivors (ties by
/// ascending id), or a seeded uniform sample. A difficulty mix splits the target into
/// per-stratum quotas by largest remainder and selects within each stratum.
FilterResult apply_filter(std::span<const AnnotationRecord> records, const FilterConfig& cfg, int workers = 1);

/// Largest-remainder split of `total` by `fractions`; ties go to the lower index.
std::vector<std::int64_t> largest_remainder(std::int64_t total, std::span<const double> fractions);

}  // namespace preq
