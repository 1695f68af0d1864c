#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace preq {

/// String-level chat template of one aligned model family.
///
/// A response prompt is `bos + [system_open + S + system_close] + pre_query + q + post_query`;
/// an assistant reply is closed by `turn_glue` before the next `pre_query`.
struct ChatTemplate {
  std::string family_id;
  std::string bos;
  std::string pre_query;
  std::string post_query;
  std::string system_open;
  std::string system_close;
  std::vector<std::string> stop_sequences;
  std::string turn_glue;
  /// Tokens whose presence in a generated instruction means the template leaked.
  /// Derived from the other fields when left empty.
  std::vector<std::string> control_tokens;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool supports_system() const { return !system_open.empty(); }
  std::vector<std::string> effective_control_tokens() const;

  bool operator==(const ChatTemplate&) const = default;
};

void to_json(nlohmann::json& j, const ChatTemplate& t);
void from_json(const nlohmann::json& j, ChatTemplate& t);

enum class PromptPurpose { instruction_elicitation, response_generation, multiturn_elicitation };

struct RenderedPrompt {
  std::string text;
  std::string template_family;
  PromptPurpose purpose;
};

/// One completed user/assistant exchange.
struct Exchange {
  std::string instruction;
  std::string response;
};

/// Control prompt used when eliciting follow-up turns.
inline constexpr std::string_view kMultiTurnSystemPrompt =
    "You are a helpful Al assistant. The user will engage in a multi-round conversation with "
    "you, asking initial questions and following up with additional related questions. Your "
    "goal is to provide thorough, relevant and insightful responses to help the user with their "
    "queries.";

class TemplateRegistry {
 public:
  /// Registry holding only the compiled-in families (llama-3).
  static TemplateRegistry builtin();
  /// Built-ins plus every family in a JSON registry file; file entries override.
  static TemplateRegistry from_file(const std::filesystem::path& path);

  void add(ChatTemplate t);
  const ChatTemplate& lookup(std::string_view family_id) const;
  bool contains(std::string_view family_id) const;
  std::vector<std::string> families() const;

  void merge_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

 private:
  std::map<std::string, ChatTemplate, std::less<>> entries_;
};

/// Looks up `family_id` in the built-in registry. Throws LookupError naming the family.
ChatTemplate lookup_template(std::string_view family_id);

/// Throws ContractViolation unless `query` is non-blank and free of stop sequences and
/// control tokens of `t`.
void check_query(const ChatTemplate& t, std::string_view query);

RenderedPrompt render_instruction_prompt(const ChatTemplate& t,
                                         std::optional<std::string_view> system = std::nullopt);

RenderedPrompt render_response_prompt(const ChatTemplate& t, std::string_view instruction,
                                      std::optional<std::string_view> system = std::nullopt);

/// Renders the whole prior conversation and appends `pre_query` so the model writes the
/// next user turn.
RenderedPrompt render_multiturn_prompt(const ChatTemplate& t, std::span<const Exchange> transcript,
                                       std::string_view system = kMultiTurnSystemPrompt);

/// Response prompt for the next pending instruction after `transcript`. With an empty
/// transcript this equals render_response_prompt.
RenderedPrompt render_conversation_response_prompt(const ChatTemplate& t,
                                                   std::span<const Exchange> transcript,
                                                   std::string_view instruction,
                                                   std::optional<std::string_view> system);

}  // namespace preq
