#include "preq/annotate.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>

#include "preq/error.hpp"
#include "preq/parallel.hpp"
#include "preq/text.hpp"

namespace preq {

using nlohmann::json;

namespace {

constexpr std::string_view kCategoryPromptTemplate = R"PROMPT(# Instruction
Please label the task tags for the user query.

## User Query
```{input}```

## Tagging the user input
Please label the task tags for the user query. You will need to analyze the user query and select the most relevant task tag from the list below.

all_task_tags = [
    "Information seeking",  # Users ask for specific information or facts about various topics.
    "Reasoning",  # Queries require logical thinking, problem-solving, or processing of complex ideas.
    "Planning",  # Users need assistance in creating plans or strategies for activities and projects.
    "Editing",  # Involves editing, rephrasing, proofreading, or other tasks related to the composition of general written content.
    "Coding & Debugging",  # Users seek help with writing, reviewing, or fixing code in programming.
    "Math",  # Queries related to mathematical concepts, problems, and calculations.
    "Role playing",  # Users engage in scenarios requiring ChatGPT to adopt a character or persona.
    "Data analysis",  # Requests involve interpreting data, statistics, or performing analytical tasks.
    "Creative writing",  # Users seek assistance with crafting stories, poems, or other creative texts. 
    "Advice seeking",  # Users ask for recommendations or guidance on various personal or professional issues.
    "Brainstorming",  # Involves generating ideas, creative thinking, or exploring possibilities. 
    "Others"  # Any queries that do not fit into the above categories or are of a miscellaneous nature.
]

## Output Format:
Note that you can only select a single primary tag. Other applicable tags can be added to the list of other tags. 
Now, please output your tags below in a json format by filling in the placeholders in <...>:
```
{{ 
    "primary_tag": "<primary tag>",
    "other_tags": ["<tag 1>", "<tag 2>", ... ]
}}
```)PROMPT";

constexpr std::string_view kQualityPromptTemplate = R"PROMPT(# Instruction
You need to rate the quality of the user query based on its clarity, specificity, and coherence.
The rating scale is as follows:

- very poor: The query is unclear, vague, or incoherent. It lacks essential information and context.
- poor: The query is somewhat unclear or lacks important details. It requires significant clarification.
- average: The query is moderately clear and specific. It may require some additional information for a complete understanding.
- good: The query is clear, specific, and mostly well-formed. It provides sufficient context for understanding the user's intent.
- excellent: The query is very clear, specific, and well-articulated. It contains all the necessary information and context for providing a comprehensive response.

## User Query
```{input}```

## Output Format
Given the user query, you first need to give an assessment, highlighting the strengths and/or weaknesses of the user query. Then, you need to output a rating from very poor to excellent by filling in the placeholders in [...]:
```
{{   
    "explanation": "[...]",
    "input_quality": "[very poor/poor/average/good/excellent]"
}}
```
''')PROMPT";

constexpr std::string_view kDifficultyPromptTemplate = R"PROMPT(# Instruction 
You first need to identify the given user intent and then label the difficulty level of the user query based on the content of the user query.

## User Query
```{input}```

## Output Format
Given the user query, in your output, you first need to identify the user intent and the knowledge needed to solve the task in the user query. Then, rate the difficulty level of the user query as `very easy`, `easy`, `medium`, `hard`, or `very hard`.

Now, please output the user intent and difficulty level below in a json format by filling in the placeholders in [...]:
```
{{   
    "intent": "The user wants to [....]",
    "knowledge": "To solve this problem, the models need to know [....]",
    "difficulty": "[very easy/easy/medium/hard/very hard]"
}}
```)PROMPT";

// str.format over a template whose only field is {input}.
std::string format_prompt(std::string_view tmpl, std::string_view input) {
  std::string out;
  out.reserve(tmpl.size() + input.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.compare(i, 2, "{{") == 0) {
      out += '{';
      i += 2;
    } else if (tmpl.compare(i, 2, "}}") == 0) {
      out += '}';
      i += 2;
    } else if (tmpl.compare(i, 7, "{input}") == 0) {
      out += input;
      i += 7;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

std::string normalize_label(std::string_view s) {
  std::string out(text::trim(s));
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::optional<std::string> string_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

std::string ask_judge(Client& judge, std::string prompt) {
  std::vector<ChatMessage> msgs{{Role::user, std::move(prompt)}};
  return judge.chat(msgs, judge_sampling()).text;
}

}  // namespace

bool is_task_category(std::string_view label) {
  return std::find(kTaskCategories.begin(), kTaskCategories.end(), label) != kTaskCategories.end();
}

bool is_safety_label(std::string_view label) {
  return label == "safe" || std::find(kSafetyLabels.begin(), kSafetyLabels.end(), label) != kSafetyLabels.end();
}

std::span<const std::string_view> scale_labels(RatingScale scale) {
  if (scale == RatingScale::quality) return kQualityLabels;
  return kDifficultyLabels;
}

std::optional<OrdinalRating> parse_rating(RatingScale scale, std::string_view label) {
  const std::string norm = normalize_label(label);
  const auto labels = scale_labels(scale);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == norm) return OrdinalRating{std::string(labels[i]), static_cast<int>(i) + 1};
  }
  return std::nullopt;
}

OrdinalRating rating_from_rank(RatingScale scale, int rank) {
  const auto labels = scale_labels(scale);
  if (rank < 1 || rank > static_cast<int>(labels.size())) return {};
  return {std::string(labels[static_cast<std::size_t>(rank - 1)]), rank};
}

void AnnotationRecord::set_rewards(double r_star, std::optional<double> base) {
  reward = r_star;
  reward_base = base;
  reward_diff = base ? std::optional<double>(compute_reward_difference(r_star, *base)) : std::nullopt;
}

void AnnotationRecord::mark_parse_failure(std::string_view metric) {
  if (!metric_failed(metric)) parse_failures.emplace_back(metric);
  parse_ok = false;
}

bool AnnotationRecord::metric_failed(std::string_view metric) const {
  return std::find(parse_failures.begin(), parse_failures.end(), metric) != parse_failures.end();
}

std::pair<std::int64_t, std::int64_t> measure_lengths(const Instance& inst) {
  if (inst.turns.empty()) throw ContractViolation("instance " + inst.id + " has no turns");
  const Turn& first = inst.turns.front();
  const auto in = static_cast<std::int64_t>(text::utf8_length(first.instruction));
  const auto out = first.response ? static_cast<std::int64_t>(text::utf8_length(*first.response)) : 0;
  return {in, out};
}

std::string render_category_prompt(std::string_view instruction) {
  return format_prompt(kCategoryPromptTemplate, instruction);
}
std::string render_quality_prompt(std::string_view instruction) {
  return format_prompt(kQualityPromptTemplate, instruction);
}
std::string render_difficulty_prompt(std::string_view instruction) {
  return format_prompt(kDifficultyPromptTemplate, instruction);
}

std::optional<json> extract_json_object(std::string_view reply) {
  for (std::size_t start = reply.find('{'); start != std::string_view::npos;
       start = reply.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = start; i < reply.size(); ++i) {
      const char c = reply[i];
      if (in_string) {
        if (escaped) {
          escaped = false;
        } else if (c == '\\') {
          escaped = true;
        } else if (c == '"') {
          in_string = false;
        }
        continue;
      }
      if (c == '"') {
        in_string = true;
      } else if (c == '{') {
        ++depth;
      } else if (c == '}') {
        if (--depth == 0) {
          json j = json::parse(reply.substr(start, i - start + 1), nullptr, /*allow_exceptions=*/false);
          if (j.is_object()) return j;
          break;
        }
      }
    }
  }
  return std::nullopt;
}

CategoryResult parse_category_reply(std::string_view reply) noexcept {
  CategoryResult out;
  try {
    auto j = extract_json_object(reply);
    if (!j) return out;
    auto primary = string_field(*j, "primary_tag");
    if (!primary) return out;
    const std::string p(text::trim(*primary));
    if (!is_task_category(p)) return out;
    TaskCategory cat;
    cat.primary = p;
    if (auto it = j->find("other_tags"); it != j->end() && it->is_array()) {
      for (const auto& tag : *it) {
        if (!tag.is_string()) continue;
        std::string t(text::trim(tag.get<std::string>()));
        if (!is_task_category(t) || t == cat.primary) continue;
        if (std::find(cat.other_tags.begin(), cat.other_tags.end(), t) == cat.other_tags.end()) {
          cat.other_tags.push_back(std::move(t));
        }
      }
    }
    out.category = std::move(cat);
    out.parse_ok = true;
  } catch (...) {
    out = CategoryResult{};
  }
  return out;
}

QualityResult parse_quality_reply(std::string_view reply) noexcept {
  QualityResult out;
  try {
    auto j = extract_json_object(reply);
    if (!j) return out;
    auto label = string_field(*j, "input_quality");
    if (!label) return out;
    auto rating = parse_rating(RatingScale::quality, *label);
    if (!rating) return out;
    out.rating = std::move(*rating);
    out.explanation = string_field(*j, "explanation").value_or("");
    out.parse_ok = true;
  } catch (...) {
    out = QualityResult{};
  }
  return out;
}

DifficultyResult parse_difficulty_reply(std::string_view reply) noexcept {
  DifficultyResult out;
  try {
    auto j = extract_json_object(reply);
    if (!j) return out;
    auto label = string_field(*j, "difficulty");
    auto intent = string_field(*j, "intent");
    auto knowledge = string_field(*j, "knowledge");
    if (!label || !intent || !knowledge) return out;
    auto rating = parse_rating(RatingScale::difficulty, *label);
    if (!rating) return out;
    out.rating = std::move(*rating);
    out.intent = std::move(*intent);
    out.knowledge = std::move(*knowledge);
    out.parse_ok = true;
  } catch (...) {
    out = DifficultyResult{};
  }
  return out;
}

SamplingConfig judge_sampling() { return SamplingConfig::greedy(1024); }

CategoryResult tag_task_category(std::string_view instruction, Client& judge) {
  if (text::trim(instruction).empty()) throw ContractViolation("cannot tag an empty instruction");
  return parse_category_reply(ask_judge(judge, render_category_prompt(instruction)));
}

QualityResult rate_quality(std::string_view instruction, Client& judge) {
  if (text::trim(instruction).empty()) throw ContractViolation("cannot rate an empty instruction");
  return parse_quality_reply(ask_judge(judge, render_quality_prompt(instruction)));
}

DifficultyResult rate_difficulty(std::string_view instruction, Client& judge) {
  if (text::trim(instruction).empty()) throw ContractViolation("cannot rate an empty instruction");
  return parse_difficulty_reply(ask_judge(judge, render_difficulty_prompt(instruction)));
}

double score_reward(std::string_view instruction, std::string_view response, Client& reward) {
  return reward.score(instruction, response);
}

std::vector<double> score_rewards(std::span<const std::pair<std::string, std::string>> pairs, Client& reward,
                                  int workers) {
  std::vector<double> out(pairs.size());
  parallel_for(pairs.size(), workers > 0 ? workers : reward.config().max_in_flight, [&](std::size_t i) {
    out[i] = score_reward(pairs[i].first, pairs[i].second, reward);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Safety

GuardLabelMap GuardLabelMap::builtin() {
  GuardLabelMap m;
  for (std::size_t i = 0; i + 1 < kSafetyLabels.size(); ++i) {
    m.codes_["S" + std::to_string(i + 1)] = std::string(kSafetyLabels[i]);
  }
  return m;
}

GuardLabelMap GuardLabelMap::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("guard label map must be an object of code -> label");
  GuardLabelMap m;
  for (const auto& [code, label] : j.items()) {
    if (!label.is_string() || !is_safety_label(label.get<std::string>()) || label == "safe") {
      throw ConfigError("guard label map: '" + code + "' maps to a label outside the taxonomy");
    }
    m.codes_[code] = label.get<std::string>();
  }
  return m;
}

GuardLabelMap GuardLabelMap::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open guard label map " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError("guard label map " + path.string() + ": " + e.what());
  }
}

std::optional<std::string> GuardLabelMap::lookup(std::string_view code) const {
  auto it = codes_.find(code);
  if (it == codes_.end()) return std::nullopt;
  return it->second;
}

SafetyResult parse_guard_reply(std::string_view reply, const GuardLabelMap& labels) noexcept {
  SafetyResult out{"Others", false};
  try {
    const std::string_view body = text::trim(reply);
    const std::string first = normalize_label(body.substr(0, body.find('\n')));
    if (first == "safe") return {"safe", true};
    // Look for the first S<digits> code anywhere in the reply.
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] != 'S' || (i > 0 && std::isalnum(static_cast<unsigned char>(body[i - 1])))) continue;
      std::size_t j = i + 1;
      while (j < body.size() && std::isdigit(static_cast<unsigned char>(body[j]))) ++j;
      if (j == i + 1) continue;
      if (auto label = labels.lookup(body.substr(i, j - i))) return {*label, true};
      return out;
    }
    // Bare taxonomy label, one per line.
    std::size_t pos = 0;
    while (pos <= body.size()) {
      const std::size_t nl = body.find('\n', pos);
      const auto line = text::trim(body.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
      if (!line.empty() && line != "safe" && is_safety_label(line)) return {std::string(line), true};
      if (nl == std::string_view::npos) break;
      pos = nl + 1;
    }
  } catch (...) {
  }
  return out;
}

SafetyResult tag_safety(std::string_view instruction, std::optional<std::string_view> response, Client& guard,
                        const GuardLabelMap& labels) {
  if (text::trim(instruction).empty()) throw ContractViolation("cannot tag an empty instruction");
  std::vector<ChatMessage> msgs{{Role::user, std::string(instruction)}};
  if (response && !response->empty()) msgs.push_back({Role::assistant, std::string(*response)});
  return parse_guard_reply(guard.chat(msgs, SamplingConfig::greedy(64)).text, labels);
}

// ---------------------------------------------------------------------------
// Base responses

MapBaseResponses MapBaseResponses::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open base responses " + path.string());
  std::map<std::string, std::string> by_id;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      by_id[j.at("id").get<std::string>()] = j.at("response").get<std::string>();
    } catch (const json::exception& e) {
      throw DataIntegrityError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return MapBaseResponses(std::move(by_id));
}

std::optional<std::string> MapBaseResponses::base_response(const Instance& inst) {
  auto it = by_id_.find(inst.id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

CompletionBaseResponses::CompletionBaseResponses(Client& client, std::string prompt_template,
                                                 std::vector<std::string> stop, int max_new_tokens)
    : client_(client),
      prompt_template_(std::move(prompt_template)),
      stop_(std::move(stop)),
      max_new_tokens_(max_new_tokens) {
  if (prompt_template_.find("{instruction}") == std::string::npos) {
    throw ConfigError("base-response prompt template must contain {instruction}");
  }
}

std::optional<std::string> CompletionBaseResponses::base_response(const Instance& inst) {
  SamplingConfig sc = SamplingConfig::greedy(max_new_tokens_);
  sc.stop = stop_;
  const std::string prompt = text::replace_all(prompt_template_, "{instruction}", inst.turns.front().instruction);
  std::string r(text::trim(client_.complete(prompt, sc).text));
  if (r.empty()) return std::nullopt;
  return r;
}

// ---------------------------------------------------------------------------
// Driver

void annotate_instances(std::span<const Instance> instances, std::span<AnnotationRecord> records,
                        const AnnotateOptions& opts) {
  if (instances.size() != records.size()) {
    throw ContractViolation("annotate: instance and record counts differ");
  }
  int workers = opts.workers;
  if (workers <= 0) {
    for (Client* c : {opts.judge, opts.reward, opts.guard}) {
      if (c) workers = std::max(workers, c->config().max_in_flight);
    }
  }
  parallel_for(instances.size(), workers, [&](std::size_t i) {
    const Instance& inst = instances[i];
    AnnotationRecord& rec = records[i];
    rec.instance_id = inst.id;
    std::tie(rec.input_length, rec.output_length) = measure_lengths(inst);
    const std::string& q = inst.turns.front().instruction;
    const std::optional<std::string>& r = inst.turns.front().response;

    auto reset = [&rec](std::string_view metric) {
      std::erase(rec.parse_failures, std::string(metric));
      rec.parse_ok = rec.parse_failures.empty();
    };
    if (opts.judge) {
      for (auto m : {"task_category", "quality", "difficulty"}) reset(m);
      rec.judge_model = opts.judge_model.empty() ? opts.judge->config().model : opts.judge_model;
      auto cat = tag_task_category(q, *opts.judge);
      rec.category = cat.category;
      if (!cat.parse_ok) rec.mark_parse_failure("task_category");
      auto quality = rate_quality(q, *opts.judge);
      rec.quality = quality.rating;
      if (!quality.parse_ok) rec.mark_parse_failure("quality");
      auto difficulty = rate_difficulty(q, *opts.judge);
      rec.difficulty = difficulty.rating;
      rec.intent = difficulty.intent;
      rec.knowledge = difficulty.knowledge;
      if (!difficulty.parse_ok) rec.mark_parse_failure("difficulty");
    }
    if (opts.reward && r && !r->empty()) {
      const double r_star = score_reward(q, *r, *opts.reward);
      std::optional<double> r_base;
      if (opts.base) {
        if (auto base = opts.base->base_response(inst); base && !base->empty()) {
          r_base = score_reward(q, *base, *opts.reward);
        }
      }
      rec.set_rewards(r_star, r_base);
    }
    if (opts.guard) {
      reset("safety");
      std::optional<std::string_view> resp;
      if (r) resp = *r;
      auto safety = tag_safety(q, resp, *opts.guard, opts.guard_labels);
      rec.safety = safety.label;
      if (!safety.parse_ok) rec.mark_parse_failure("safety");
    }
  });
}

}  // namespace preq
