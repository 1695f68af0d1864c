#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "preq/datastore.hpp"
#include "preq/llm_client.hpp"
#include "preq/mock_backend.hpp"

namespace testing {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("preq-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

inline std::string golden(const std::string& name) {
  return slurp(std::filesystem::path(PREQ_TEST_DATA) / "golden" / name);
}

/// Client over `backend` whose retry sleeps are skipped.
inline std::unique_ptr<preq::Client> client_for(std::shared_ptr<preq::Backend> backend, int max_in_flight = 4,
                                                std::string model = "mock") {
  preq::ClientConfig cfg;
  cfg.base_url = "mock://";
  cfg.model = std::move(model);
  cfg.max_in_flight = max_in_flight;
  return std::make_unique<preq::Client>(cfg, std::move(backend), [](std::chrono::milliseconds) {});
}

/// Python str.format for a single `{input}` field: fields are replaced, doubled braces collapse.
inline std::string str_format_input(const std::string& fmt, const std::string& value) {
  std::string out;
  for (std::size_t i = 0; i < fmt.size(); ++i) {
    if (fmt.compare(i, 2, "{{") == 0 || fmt.compare(i, 2, "}}") == 0) {
      out += fmt[i];
      ++i;
    } else if (fmt.compare(i, 7, "{input}") == 0) {
      out += value;
      i += 6;
    } else {
      out += fmt[i];
    }
  }
  return out;
}

/// Fully populated record with awkward text: quotes, newlines, non-ASCII, braces.
inline preq::DatasetRecord random_record(std::mt19937_64& rng, int i) {
  static const char* const pieces[] = {"plain", "quote \"x\"", "new\nline", "tab\there", "caf\u00e9",
                                       "\u65e5\u672c\u8a9e", "{braces}", "back\\slash", "emoji \U0001F600"};
  auto text = [&](int words) {
    std::string s;
    for (int w = 0; w < words; ++w) s += std::string(w ? " " : "") + pieces[rng() % std::size(pieces)];
    return s;
  };
  preq::Instance in;
  in.id = "run-s" + std::to_string(i % 12) + "-" + std::to_string(i);
  in.model_id = "model-" + std::to_string(rng() % 3);
  in.shard_index = i % 12;
  in.slot = i;
  in.temperature = 0.5 + 0.1 * static_cast<double>(rng() % 6);
  in.top_p = 0.9 + 0.01 * static_cast<double>(rng() % 10);
  in.created_at = "2024-06-0" + std::to_string(1 + rng() % 9) + "T12:00:00Z";
  if (rng() % 2) in.system_prompt_used = text(3);
  const int turns = 1 + static_cast<int>(rng() % 3);
  for (int t = 0; t < turns; ++t) {
    preq::Turn turn{text(1 + static_cast<int>(rng() % 8)), text(1 + static_cast<int>(rng() % 20))};
    if (t + 1 == turns && rng() % 4 == 0) turn.response.reset();
    in.turns.push_back(turn);
  }
  if (rng() % 5 == 0) in.add_flag("empty_response");
  auto rec = preq::make_record(std::move(in));
  if (rng() % 4 != 0) {
    preq::AnnotationRecord a;
    a.instance_id = rec.instance.id;
    a.input_length = static_cast<std::int64_t>(rng() % 500);
    a.output_length = static_cast<std::int64_t>(rng() % 5000);
    a.category.primary = rng() % 2 ? "Math" : "Coding & Debugging";
    if (rng() % 2) a.category.other_tags = {"Reasoning"};
    a.quality = preq::rating_from_rank(preq::RatingScale::quality, static_cast<int>(rng() % 6));
    a.difficulty = preq::rating_from_rank(preq::RatingScale::difficulty, static_cast<int>(rng() % 6));
    a.intent = text(4);
    a.knowledge = text(4);
    std::uniform_real_distribution<double> u(-20.0, 5.0);
    if (rng() % 3) a.set_rewards(u(rng), rng() % 2 ? std::optional<double>(u(rng)) : std::nullopt);
    if (rng() % 3) a.min_neighbor_distance = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (rng() % 2) a.safety = rng() % 2 ? "Safe" : "Unsafe";
    a.judge_model = "judge";
    if (rng() % 7 == 0) a.mark_parse_failure("quality");
    rec.annotations = a;
  }
  return rec;
}


// Candidate j of an instruction is the text "<q>#j"; its reward is rewards[q][j].
// Candidates of one instruction are generated and scored in order on one thread.
class ScriptedRewards final : public preq::Backend {
 public:
  explicit ScriptedRewards(std::map<std::string, std::vector<double>> rewards) : rewards_(std::move(rewards)) {}

  preq::CompletionResult complete(const std::string& prompt, const preq::SamplingConfig&) override {
    std::lock_guard lk(mu_);
    const auto q = query_of(prompt);
    preq::CompletionResult r;
    r.text = same_text_.count(q) ? q + "#same" : q + "#" + std::to_string(gen_count_[q]++);
    return r;
  }
  preq::CompletionResult chat(std::span<const preq::ChatMessage>, const preq::SamplingConfig&) override { return {}; }
  Eigen::MatrixXd embed(std::span<const std::string>) override { return {}; }
  double score(std::string_view instruction, std::string_view) override {
    std::lock_guard lk(mu_);
    const std::string q(instruction);
    return rewards_.at(q).at(score_count_[q]++);
  }

  void same_text(const std::string& q) { same_text_[q] = true; }

 private:
  // Without a system prompt the query sits between the user header and the first <|eot_id|>.
  static std::string query_of(const std::string& prompt) {
    const std::string open = "<|end_header_id|>\n\n";
    const auto a = prompt.find(open) + open.size();
    return prompt.substr(a, prompt.find("<|eot_id|>", a) - a);
  }

  std::mutex mu_;
  std::map<std::string, std::vector<double>> rewards_;
  std::map<std::string, int> gen_count_;
  std::map<std::string, int> score_count_;
  std::map<std::string, bool> same_text_;
};

/// Judge replies that must degrade to parse_ok=false for every metric.
inline std::vector<std::string> malformed_judge_replies() {
  return {
      "",
      "I cannot help with that.",
      "{",
      "}{",
      "```json\n{\"input_quality\": \"good\"\n```",
      R"({"input_quality": 5})",
      R"({"input_quality": "superb"})",
      R"(["good"])",
      R"({"difficulty": "hard"})",
      R"({"intent": 1, "knowledge": "k", "difficulty": "hard"})",
      "{\"input_quality\": \"go\\od\"}",
      std::string("\xff\xfe{\"a\":1}"),
      std::string(10000, '{'),
      std::string(10000, '}'),
      "null",
      R"({"primary_tag": null})",
      R"({"primary_tag": ["Math"]})",
      "```\n```",
      R"({"input_quality": "good",})",
      R"({'input_quality': 'good'})",
  };
}

}  // namespace testing
