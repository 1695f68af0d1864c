#include "preq/templates.hpp"

#include <algorithm>
#include <fstream>

#include "preq/error.hpp"
#include "preq/text.hpp"

namespace preq {
namespace {

ChatTemplate llama3() {
  ChatTemplate t;
  t.family_id = "llama-3";
  t.bos = "<|begin_of_text|>";
  t.pre_query = "<|start_header_id|>user<|end_header_id|>\n\n";
  t.post_query = "<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n";
  t.system_open = "<|start_header_id|>system<|end_header_id|>\n\n";
  t.system_close = "<|eot_id|>";
  t.stop_sequences = {"<|eot_id|>", "<|end_of_text|>"};
  t.turn_glue = "<|eot_id|>";
  return t;
}

// Collects every `<|...|>` atom in s.
void collect_special_atoms(std::string_view s, std::vector<std::string>& out) {
  std::size_t pos = 0;
  while ((pos = s.find("<|", pos)) != std::string_view::npos) {
    std::size_t end = s.find("|>", pos + 2);
    if (end == std::string_view::npos) break;
    out.emplace_back(s.substr(pos, end + 2 - pos));
    pos = end + 2;
  }
}

void append_system_block(std::string& out, const ChatTemplate& t, std::string_view system) {
  if (!t.supports_system()) {
    throw ConfigError("template family '" + t.family_id + "' has no system role");
  }
  out += t.system_open;
  out += system;
  out += t.system_close;
}

std::string render_prefix(const ChatTemplate& t, std::optional<std::string_view> system) {
  std::string out = t.bos;
  if (system) append_system_block(out, t, *system);
  return out;
}

}  // namespace

void ChatTemplate::validate() const {
  auto fail = [&](const std::string& why) {
    throw ConfigError("template '" + family_id + "': " + why);
  };
  if (family_id.empty()) fail("family_id is empty");
  if (pre_query.empty()) fail("pre_query is empty");
  if (post_query.empty()) fail("post_query is empty");
  if (system_open.empty() != system_close.empty()) {
    fail("system_open and system_close must both be set or both be empty");
  }
  for (std::size_t i = 0; i < stop_sequences.size(); ++i) {
    if (stop_sequences[i].empty()) fail("empty stop sequence");
    for (std::size_t j = 0; j < stop_sequences.size(); ++j) {
      if (i != j && stop_sequences[j].starts_with(stop_sequences[i])) {
        fail("stop sequence '" + stop_sequences[i] + "' is a prefix of '" + stop_sequences[j] + "'");
      }
    }
  }
  for (const auto& tok : control_tokens) {
    if (tok.empty()) fail("empty control token");
  }
}

std::vector<std::string> ChatTemplate::effective_control_tokens() const {
  if (!control_tokens.empty()) return control_tokens;
  std::vector<std::string> out(stop_sequences.begin(), stop_sequences.end());
  for (const std::string* s : {&bos, &pre_query, &post_query, &system_open, &system_close, &turn_glue}) {
    collect_special_atoms(*s, out);
  }
  bool has_atoms = out.size() > stop_sequences.size();
  if (!has_atoms) {
    for (const std::string* s : {&bos, &pre_query, &post_query, &system_open, &system_close}) {
      auto trimmed = text::trim(*s);
      if (!trimmed.empty()) out.emplace_back(trimmed);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void to_json(nlohmann::json& j, const ChatTemplate& t) {
  j = nlohmann::json{{"bos", t.bos},
                     {"pre_query", t.pre_query},
                     {"post_query", t.post_query},
                     {"system_open", t.system_open},
                     {"system_close", t.system_close},
                     {"stop_sequences", t.stop_sequences},
                     {"turn_glue", t.turn_glue}};
  if (!t.control_tokens.empty()) j["control_tokens"] = t.control_tokens;
}

void from_json(const nlohmann::json& j, ChatTemplate& t) {
  t.bos = j.value("bos", std::string{});
  t.pre_query = j.at("pre_query").get<std::string>();
  t.post_query = j.at("post_query").get<std::string>();
  t.system_open = j.value("system_open", std::string{});
  t.system_close = j.value("system_close", std::string{});
  t.stop_sequences = j.value("stop_sequences", std::vector<std::string>{});
  t.turn_glue = j.value("turn_glue", std::string{});
  t.control_tokens = j.value("control_tokens", std::vector<std::string>{});
}

TemplateRegistry TemplateRegistry::builtin() {
  TemplateRegistry r;
  r.add(llama3());
  return r;
}

TemplateRegistry TemplateRegistry::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open template registry " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("template registry " + path.string() + ": " + e.what());
  }
  TemplateRegistry r = builtin();
  r.merge_json(j);
  return r;
}

void TemplateRegistry::merge_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("template registry must be an object keyed by family id");
  for (const auto& [family, body] : j.items()) {
    ChatTemplate t;
    try {
      t = body.get<ChatTemplate>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("template '" + family + "': " + e.what());
    }
    t.family_id = family;
    add(std::move(t));
  }
}

nlohmann::json TemplateRegistry::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [family, t] : entries_) j[family] = t;
  return j;
}

void TemplateRegistry::add(ChatTemplate t) {
  t.validate();
  std::string key = t.family_id;
  entries_.insert_or_assign(std::move(key), std::move(t));
}

const ChatTemplate& TemplateRegistry::lookup(std::string_view family_id) const {
  auto it = entries_.find(family_id);
  if (it == entries_.end()) {
    throw LookupError("unknown template family '" + std::string(family_id) + "'");
  }
  return it->second;
}

bool TemplateRegistry::contains(std::string_view family_id) const {
  return entries_.find(family_id) != entries_.end();
}

std::vector<std::string> TemplateRegistry::families() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

ChatTemplate lookup_template(std::string_view family_id) {
  static const TemplateRegistry registry = TemplateRegistry::builtin();
  return registry.lookup(family_id);
}

void check_query(const ChatTemplate& t, std::string_view query) {
  if (text::trim(query).empty()) throw ContractViolation("instruction is empty");
  for (const auto& stop : t.stop_sequences) {
    if (query.find(stop) != std::string_view::npos) {
      throw ContractViolation("instruction contains stop sequence '" + stop + "'");
    }
  }
  for (const auto& tok : t.effective_control_tokens()) {
    if (query.find(tok) != std::string_view::npos) {
      throw ContractViolation("instruction contains control token '" + tok + "'");
    }
  }
}

RenderedPrompt render_instruction_prompt(const ChatTemplate& t,
                                         std::optional<std::string_view> system) {
  std::string out = render_prefix(t, system);
  out += t.pre_query;
  return {std::move(out), t.family_id, PromptPurpose::instruction_elicitation};
}

RenderedPrompt render_response_prompt(const ChatTemplate& t, std::string_view instruction,
                                      std::optional<std::string_view> system) {
  check_query(t, instruction);
  std::string out = render_instruction_prompt(t, system).text;
  out += instruction;
  out += t.post_query;
  return {std::move(out), t.family_id, PromptPurpose::response_generation};
}

namespace {

std::string render_transcript(const ChatTemplate& t, std::span<const Exchange> transcript,
                              std::optional<std::string_view> system) {
  std::string out = render_prefix(t, system);
  for (const auto& ex : transcript) {
    out += t.pre_query;
    out += ex.instruction;
    out += t.post_query;
    out += ex.response;
    out += t.turn_glue;
  }
  return out;
}

}  // namespace

RenderedPrompt render_multiturn_prompt(const ChatTemplate& t, std::span<const Exchange> transcript,
                                       std::string_view system) {
  if (transcript.empty()) throw ContractViolation("multi-turn prompt needs at least one completed turn");
  std::string out = render_transcript(t, transcript, system);
  out += t.pre_query;
  return {std::move(out), t.family_id, PromptPurpose::multiturn_elicitation};
}

RenderedPrompt render_conversation_response_prompt(const ChatTemplate& t,
                                                   std::span<const Exchange> transcript,
                                                   std::string_view instruction,
                                                   std::optional<std::string_view> system) {
  check_query(t, instruction);
  std::string out = render_transcript(t, transcript, system);
  out += t.pre_query;
  out += instruction;
  out += t.post_query;
  return {std::move(out), t.family_id, PromptPurpose::response_generation};
}

}  // namespace preq
