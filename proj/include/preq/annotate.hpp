#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "preq/llm_client.hpp"
#include "preq/synthesis.hpp"

namespace preq {

inline constexpr std::array<std::string_view, 12> kTaskCategories = {
    "Information seeking", "Reasoning",     "Planning",         "Editing",
    "Coding & Debugging",  "Math",          "Role playing",     "Data analysis",
    "Creative writing",    "Advice seeking", "Brainstorming",   "Others"};

inline constexpr std::array<std::string_view, 5> kQualityLabels = {"very poor", "poor", "average", "good",
                                                                   "excellent"};
inline constexpr std::array<std::string_view, 5> kDifficultyLabels = {"very easy", "easy", "medium", "hard",
                                                                      "very hard"};

/// Harm taxonomy of the guard model, in report order. "safe" is not part of it.
inline constexpr std::array<std::string_view, 12> kSafetyLabels = {
    "Violent Crimes", "Non-Violent Crimes", "Sex-Related Crimes", "Child Sexual Exploitation",
    "Specialized Advice", "Privacy", "Intellectual Property", "Indiscriminate Weapons",
    "Hate", "Suicide & Self-Harm", "Sexual Content", "Others"};

bool is_task_category(std::string_view label);
bool is_safety_label(std::string_view label);  // true for "safe" too

struct TaskCategory {
  std::string primary{"Others"};
  std::vector<std::string> other_tags;
  bool operator==(const TaskCategory&) const = default;
};

enum class RatingScale { quality, difficulty };

/// Label on a five-level scale. rank 0 marks "unrated" and never satisfies a filter.
struct OrdinalRating {
  std::string label;
  int rank = 0;
  bool rated() const { return rank > 0; }
  bool operator==(const OrdinalRating&) const = default;
};

std::span<const std::string_view> scale_labels(RatingScale scale);
/// Case-insensitive, whitespace-tolerant label lookup.
std::optional<OrdinalRating> parse_rating(RatingScale scale, std::string_view label);
OrdinalRating rating_from_rank(RatingScale scale, int rank);

struct AnnotationRecord {
  std::string instance_id;
  std::int64_t input_length = 0;
  std::int64_t output_length = 0;
  TaskCategory category;
  OrdinalRating quality;
  OrdinalRating difficulty;
  std::string intent;
  std::string knowledge;
  std::optional<double> reward;
  std::optional<double> reward_base;
  std::optional<double> reward_diff;
  std::optional<double> min_neighbor_distance;
  std::optional<std::string> safety;
  std::string judge_model;
  bool parse_ok = true;
  /// Metric names ("task_category", "quality", "difficulty", "safety") whose judge reply
  /// could not be parsed.
  std::vector<std::string> parse_failures;

  /// Sets reward and, when `base` is given, reward_base and reward_diff = reward - base.
  void set_rewards(double r_star, std::optional<double> base);
  void mark_parse_failure(std::string_view metric);
  bool metric_failed(std::string_view metric) const;
  bool operator==(const AnnotationRecord&) const = default;
};

/// (input_length, output_length) in Unicode scalar values over the first turn.
std::pair<std::int64_t, std::int64_t> measure_lengths(const Instance& inst);

// Judge prompts, rendered with str.format semantics ({input} substituted, {{ }} collapsed).
std::string render_category_prompt(std::string_view instruction);
std::string render_quality_prompt(std::string_view instruction);
std::string render_difficulty_prompt(std::string_view instruction);

/// First balanced {...} block in `reply` that parses as a JSON object. String literals are
/// respected when matching braces; code fences and surrounding prose are ignored.
std::optional<nlohmann::json> extract_json_object(std::string_view reply);

struct CategoryResult {
  TaskCategory category;
  bool parse_ok = false;
};
struct QualityResult {
  OrdinalRating rating;
  std::string explanation;
  bool parse_ok = false;
};
struct DifficultyResult {
  OrdinalRating rating;
  std::string intent;
  std::string knowledge;
  bool parse_ok = false;
};

// Parsers are total: any input yields a result, never an exception.
CategoryResult parse_category_reply(std::string_view reply) noexcept;
QualityResult parse_quality_reply(std::string_view reply) noexcept;
DifficultyResult parse_difficulty_reply(std::string_view reply) noexcept;

/// Sampling used for every judge call: greedy.
SamplingConfig judge_sampling();

CategoryResult tag_task_category(std::string_view instruction, Client& judge);
QualityResult rate_quality(std::string_view instruction, Client& judge);
DifficultyResult rate_difficulty(std::string_view instruction, Client& judge);

double score_reward(std::string_view instruction, std::string_view response, Client& reward);
/// Scores each pair; output order matches input order.
std::vector<double> score_rewards(std::span<const std::pair<std::string, std::string>> pairs, Client& reward,
                                  int workers = 0);

inline double compute_reward_difference(double r_star, double r_base) { return r_star - r_base; }

/// Guard output code -> taxonomy label. The default follows the guard's S1..S11 codes.
class GuardLabelMap {
 public:
  static GuardLabelMap builtin();
  static GuardLabelMap from_file(const std::filesystem::path& path);
  static GuardLabelMap from_json(const nlohmann::json& j);
  std::optional<std::string> lookup(std::string_view code) const;

 private:
  std::map<std::string, std::string, std::less<>> codes_;
};

struct SafetyResult {
  std::string label;
  bool parse_ok = false;
};

SafetyResult parse_guard_reply(std::string_view reply, const GuardLabelMap& labels) noexcept;
SafetyResult tag_safety(std::string_view instruction, std::optional<std::string_view> response, Client& guard,
                        const GuardLabelMap& labels);

/// Source of base-model responses for the reward difference.
class BaseResponseProvider {
 public:
  virtual ~BaseResponseProvider() = default;
  virtual std::optional<std::string> base_response(const Instance& inst) = 0;
};

/// Base responses supplied up front, keyed by instance id. File form: JSONL of {id, response}.
class MapBaseResponses final : public BaseResponseProvider {
 public:
  explicit MapBaseResponses(std::map<std::string, std::string> by_id) : by_id_(std::move(by_id)) {}
  static MapBaseResponses from_file(const std::filesystem::path& path);
  std::optional<std::string> base_response(const Instance& inst) override;

 private:
  std::map<std::string, std::string> by_id_;
};

/// Greedy completion from a base model. `prompt_template` is user-supplied text containing
/// `{instruction}`; generation stops at any of `stop`.
class CompletionBaseResponses final : public BaseResponseProvider {
 public:
  CompletionBaseResponses(Client& client, std::string prompt_template, std::vector<std::string> stop,
                          int max_new_tokens = 2048);
  std::optional<std::string> base_response(const Instance& inst) override;

 private:
  Client& client_;
  std::string prompt_template_;
  std::vector<std::string> stop_;
  int max_new_tokens_;
};

struct AnnotateOptions {
  Client* judge = nullptr;
  Client* reward = nullptr;
  Client* guard = nullptr;
  BaseResponseProvider* base = nullptr;
  GuardLabelMap guard_labels = GuardLabelMap::builtin();
  std::string judge_model;
  int workers = 0;
};

/// Fills every metric that has a backend in `opts`. `records[i]` belongs to `instances[i]`;
/// fields without a backend (e.g. min_neighbor_distance) are left as they were.
void annotate_instances(std::span<const Instance> instances, std::span<AnnotationRecord> records,
                        const AnnotateOptions& opts);

}  // namespace preq
