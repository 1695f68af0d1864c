#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stop_token>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "preq/line_sink.hpp"
#include "preq/llm_client.hpp"
#include "preq/templates.hpp"

namespace preq {

/// Deterministic per-request seed, below 2^53 so it survives JSON number handling.
std::uint64_t slot_seed(std::string_view run_id, int shard, std::int64_t slot, int attempt);
/// `s` with the template's stop sequences appended (no duplicates).
SamplingConfig with_template_stops(SamplingConfig s, const ChatTemplate& t);

/// A (sampling, count) block of the instruction budget.
struct Shard {
  SamplingConfig sampling;
  std::int64_t count = 1;
};

inline constexpr std::size_t kDefaultMaxInstructionChars = 10'000;
inline constexpr int kDefaultRejectionBudget = 3;

struct JobSpec {
  std::string run_id = "run";
  std::string model_id;
  std::string template_family = "llama-3";
  std::vector<Shard> shards;
  std::optional<std::string> system_prompt;
  SamplingConfig response_sampling = SamplingConfig::greedy();
  int target_turns = 1;
  std::string mt_system_prompt{kMultiTurnSystemPrompt};
  std::size_t max_instruction_chars = kDefaultMaxInstructionChars;
  /// Regenerations allowed per slot after a rejected draw.
  int rejection_budget = kDefaultRejectionBudget;

  void validate() const;
  std::int64_t total_count() const;
};

/// Parses a job file body. Recognized keys mirror JobSpec; `preset` + `scale` expand to shards,
/// `domain` selects a shipped system prompt. Missing shards default to one T=1.0, top-p=1.0
/// shard of `count` instances.
JobSpec job_from_json(const nlohmann::json& j);
nlohmann::json job_to_json(const JobSpec& job);
JobSpec load_job(const std::filesystem::path& path);

/// Shipped decoding-parameter shard sets ("air": 12 shards / 3M, "pro": 4 shards / 1M),
/// with counts multiplied by `scale` and rounded to nearest (minimum 1).
std::vector<Shard> shard_preset(std::string_view name, double scale = 1.0);

struct Turn {
  std::string instruction;
  std::optional<std::string> response;
  bool operator==(const Turn&) const = default;
};

/// One synthesized conversation.
struct Instance {
  std::string id;
  std::vector<Turn> turns;
  std::string model_id;
  int shard_index = 0;
  std::int64_t slot = 0;
  double temperature = 1.0;
  double top_p = 1.0;
  std::string created_at;
  std::optional<std::string> system_prompt_used;
  std::vector<std::string> flags;

  /// Throws DataIntegrityError when the turn invariants are broken.
  void validate() const;
  bool has_flag(std::string_view f) const;
  void add_flag(std::string_view f);
  bool operator==(const Instance&) const = default;
};

std::string instance_id(std::string_view run_id, int shard, std::int64_t slot);

/// Timestamp source for Instance::created_at.
using Clock = std::function<std::string()>;
Clock system_clock_utc();
Clock fixed_clock(std::string stamp = "1970-01-01T00:00:00Z");

enum class RejectReason { empty, template_token_leak, too_long };
std::string_view to_string(RejectReason r);

struct Sanitized {
  std::string text;
  std::optional<RejectReason> rejection;
  bool accepted() const { return !rejection.has_value(); }
};

/// Cuts at the first stop sequence, trims whitespace, then rejects empty text, leaked control
/// tokens, and text longer than `max_chars` characters.
Sanitized sanitize_instruction(std::string_view raw, const ChatTemplate& t,
                               std::size_t max_chars = kDefaultMaxInstructionChars);

struct ShardReport {
  int index = 0;
  double temperature = 0;
  double top_p = 0;
  std::int64_t requested = 0;
  std::int64_t accepted = 0;
  std::int64_t shortfall = 0;
  std::int64_t resumed = 0;  // slots satisfied by an earlier run
  std::map<std::string, std::int64_t> rejected;
};

struct RunReport {
  std::string run_id;
  std::vector<ShardReport> shards;
  double wall_clock_seconds = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  bool interrupted = false;

  std::int64_t accepted() const;
  std::int64_t shortfall() const;
  nlohmann::json to_json() const;
};

/// Append-only progress log of finished generation slots; one JSON object per line.
class Checkpoint {
 public:
  struct Entry {
    int shard = 0;
    std::int64_t slot = 0;
    bool accepted = false;
  };

  explicit Checkpoint(std::filesystem::path path);
  bool done(int shard, std::int64_t slot) const;
  std::optional<Entry> find(int shard, std::int64_t slot) const;
  void record(const Entry& e, const std::map<std::string, std::int64_t>& rejected);
  /// Marks a slot as finished without logging it (used when the output already holds it).
  void mark(const Entry& e);
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::pair<int, std::int64_t>, Entry> entries_;
  std::unique_ptr<LineSink> sink_;
};

struct GenerateOptions {
  Checkpoint* checkpoint = nullptr;
  std::stop_token stop;
  Clock clock;
  int workers = 0;  // 0: the client's in-flight bound
};

/// Step 1. Emits Σ shard.count accepted instances (minus shortfall), each with a single turn
/// lacking its response. `emit` is called from worker threads but never concurrently.
RunReport generate_instructions(const JobSpec& job, Client& client, const TemplateRegistry& templates,
                                const std::function<void(Instance)>& emit, GenerateOptions opts = {});

struct ResponseReport {
  std::int64_t completed = 0;
  std::int64_t empty_responses = 0;
  std::int64_t skipped = 0;  // last turn already answered
};

/// Step 2. Fills the response of each instance's last turn using job.response_sampling.
ResponseReport generate_responses(std::vector<Instance>& instances, const JobSpec& job, Client& client,
                                  const TemplateRegistry& templates, int workers = 0);

struct MultiTurnReport {
  std::int64_t extended = 0;
  std::int64_t turns_added = 0;
  std::int64_t shortfall = 0;
  std::int64_t incomplete = 0;  // skipped: a prior turn lacks its response
  std::map<std::string, std::int64_t> rejected;
};

/// Grows every instance to job.target_turns by alternately eliciting a follow-up instruction
/// under the multi-turn control prompt and answering it.
MultiTurnReport extend_multiturn(std::vector<Instance>& instances, const JobSpec& job, Client& client,
                                 const TemplateRegistry& templates, int workers = 0);

/// Registry of system prompts that steer generation toward a domain or language.
class DomainPrompts {
 public:
  static DomainPrompts builtin();
  void add(std::string domain, std::string prompt);
  const std::string& lookup(std::string_view domain) const;
  std::vector<std::string> domains() const;

 private:
  std::map<std::string, std::string, std::less<>> prompts_;
};

/// Shipped prompt for `domain` (math, code, translation, ja-math). Throws LookupError.
std::string domain_system_prompt(std::string_view domain);

}  // namespace preq
