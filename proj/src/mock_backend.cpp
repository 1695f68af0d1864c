#include "preq/mock_backend.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <random>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "preq/error.hpp"
#include "preq/text.hpp"

namespace preq {

using nlohmann::json;

namespace {

std::uint64_t double_bits(double d) {
  std::uint64_t u = 0;
  std::memcpy(&u, &d, sizeof u);
  return u;
}

std::uint64_t request_key(std::string_view prompt, const SamplingConfig& s) {
  std::uint64_t k = text::fnv1a(prompt);
  k = text::mix(k, s.seed.value_or(0));
  k = text::mix(k, double_bits(s.temperature));
  k = text::mix(k, double_bits(s.top_p));
  return k;
}

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& xs, std::uint64_t& state) {
  state = text::mix(state, 0x51ed2701ULL);
  return xs[state % N];
}

constexpr std::array<std::string_view, 8> kOpeners = {
    "How do I", "Can you explain how to", "What is the best way to",
    "Write a short guide on how to", "Why does my attempt fail when I try to",
    "Help me plan how to", "I need help to", "Could you show me how to"};
constexpr std::array<std::string_view, 10> kVerbs = {
    "sort", "optimize", "summarize", "translate", "debug",
    "design", "compare", "estimate", "visualize", "organize"};
constexpr std::array<std::string_view, 12> kObjects = {
    "a list of integers", "a weekly grocery budget", "a recursive function",
    "a poem about the sea", "a marketing plan for a bakery", "the derivative of x^2",
    "a SQL query over two tables", "a travel itinerary for Kyoto", "a cover letter",
    "a dataset of sensor readings", "a chess opening repertoire", "a small garden"};
constexpr std::array<std::string_view, 6> kQualifiers = {
    "", " in Python", " for a beginner", " step by step", " without extra libraries",
    " on a tight schedule"};
constexpr std::array<std::string_view, 10> kSentences = {
    "Start by breaking the problem into smaller steps.",
    "Each step should have a clear input and output.",
    "Here is a simple approach that works in most cases.",
    "Consider the edge cases before writing the final version.",
    "You can verify the result with a quick example.",
    "This keeps the solution easy to read and maintain.",
    "A common mistake is to skip the validation step.",
    "If performance matters, measure before optimizing.",
    "The key idea is to reuse work that has already been done.",
    "Finally, summarize the outcome in a sentence or two."};

constexpr std::array<std::string_view, 12> kCategories = {
    "Information seeking", "Reasoning", "Planning", "Editing", "Coding & Debugging", "Math",
    "Role playing", "Data analysis", "Creative writing", "Advice seeking", "Brainstorming",
    "Others"};
constexpr std::array<std::string_view, 10> kQualityDraws = {
    "very poor", "poor", "average", "average", "good", "good", "good", "excellent", "excellent",
    "excellent"};
constexpr std::array<std::string_view, 8> kDifficultyDraws = {
    "very easy", "easy", "easy", "medium", "medium", "medium", "hard", "very hard"};

std::string question(std::uint64_t key) {
  std::string q(pick(kOpeners, key));
  q += ' ';
  q += pick(kVerbs, key);
  q += ' ';
  q += pick(kObjects, key);
  q += pick(kQualifiers, key);
  q += '?';
  return q;
}

std::string answer(std::uint64_t key) {
  std::string a;
  const int n = 1 + static_cast<int>(text::mix(key, 7) % 14);
  for (int i = 0; i < n; ++i) {
    if (i) a += ' ';
    a += pick(kSentences, key);
  }
  return a;
}

std::string fenced(const json& j) { return "```\n" + j.dump(4) + "\n```"; }

}  // namespace

namespace mock {

std::string default_reply(const MockRequest& req, std::uint64_t key, double empty_rate) {
  if (req.kind == MockRequestKind::chat) {
    const std::string& last = req.prompt;
    if (!req.messages.empty() && req.messages.back().role == Role::assistant) {
      // Guard verdict over a (user, assistant) exchange.
      if (key % 200 == 0) return "unsafe\nS5";
      return "safe";
    }
    if (key % 97 == 0) return "I am not able to assess this query.";
    if (last.find("\"primary_tag\"") != std::string::npos) {
      std::uint64_t s = key;
      auto primary = pick(kCategories, s);
      auto other = pick(kCategories, s);
      json tags = json::array();
      if (other != primary) tags.push_back(other);
      return fenced({{"primary_tag", primary}, {"other_tags", tags}});
    }
    if (last.find("\"input_quality\"") != std::string::npos) {
      std::uint64_t s = key;
      return fenced({{"explanation", "The query states its goal and gives some context."},
                     {"input_quality", pick(kQualityDraws, s)}});
    }
    if (last.find("\"difficulty\"") != std::string::npos) {
      std::uint64_t s = key;
      return fenced({{"intent", "The user wants to get help with a practical task."},
                     {"knowledge", "To solve this problem, the models need to know the basics of the topic."},
                     {"difficulty", pick(kDifficultyDraws, s)}});
    }
    return answer(key) + "<|eot_id|>";
  }
  if (empty_rate > 0.0) {
    const double u = static_cast<double>(text::mix(key, 0xe3) >> 11) * 0x1.0p-53;
    if (u < empty_rate) return "<|eot_id|>";
  }
  const bool wants_question = req.prompt.ends_with("user<|end_header_id|>\n\n");
  return (wants_question ? question(key) : answer(key)) + "<|eot_id|>";
}

double default_reward(std::string_view instruction, std::string_view response) {
  const std::uint64_t h = text::mix(text::fnv1a(instruction), text::fnv1a(response));
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  return -20.0 + 25.0 * u;
}

std::vector<double> default_embedding(std::string_view text, int dim) {
  std::mt19937_64 rng(text::fnv1a(text));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = normal(rng);
  return v;
}

}  // namespace mock

class MockBackend::InFlight {
 public:
  explicit InFlight(MockBackend& b) : b_(b) {
    const int now = b_.current_.fetch_add(1) + 1;
    int peak = b_.peak_.load();
    while (now > peak && !b_.peak_.compare_exchange_weak(peak, now)) {
    }
    b_.calls_.fetch_add(1);
    if (b_.opts_.latency.count() > 0) std::this_thread::sleep_for(b_.opts_.latency);
  }
  ~InFlight() { b_.current_.fetch_sub(1); }

 private:
  MockBackend& b_;
};

MockBackend::MockBackend() : MockBackend(Options{}) {}

MockBackend::MockBackend(Options opts) : opts_(std::move(opts)) {
  if (!opts_.fallback) {
    const double rate = opts_.empty_rate;
    opts_.fallback = [rate](const MockRequest& r, std::uint64_t k) {
      return mock::default_reply(r, k, rate);
    };
  }
}

void MockBackend::script_completion(const std::string& prompt, std::vector<std::string> replies) {
  if (replies.empty()) throw ConfigError("completion script needs at least one reply");
  std::lock_guard lock(mu_);
  completion_script_[prompt] = std::move(replies);
  completion_cursor_[prompt] = 0;
}

void MockBackend::script_chat(const std::string& last_message, std::string reply) {
  std::lock_guard lock(mu_);
  chat_script_[last_message] = std::move(reply);
}

void MockBackend::script_score(const std::string& instruction, const std::string& response, double reward) {
  std::lock_guard lock(mu_);
  score_script_[{instruction, response}] = reward;
}

void MockBackend::script_embedding(const std::string& text, std::vector<double> values) {
  std::lock_guard lock(mu_);
  embedding_script_[text] = std::move(values);
}

void MockBackend::fail_next(int n, int status) {
  failure_status_.store(status);
  pending_failures_.store(n);
}

void MockBackend::maybe_fail() {
  int n = pending_failures_.load();
  while (n > 0) {
    if (pending_failures_.compare_exchange_weak(n, n - 1)) {
      const int status = failure_status_.load();
      const bool retryable = status == 0 || status == 429 || status >= 500;
      throw TransportError("mock injected failure (status " + std::to_string(status) + ")", status,
                           retryable);
    }
  }
}

void MockBackend::record(MockRequest req) {
  if (!opts_.record_requests) return;
  std::lock_guard lock(mu_);
  log_.push_back(std::move(req));
}

std::vector<MockRequest> MockBackend::requests() const {
  std::lock_guard lock(mu_);
  return log_;
}

CompletionResult MockBackend::finish(std::string raw, const std::string& prompt_text,
                                     const SamplingConfig& s) const {
  std::size_t stop_pos = std::string::npos;
  for (const auto& st : s.stop) stop_pos = std::min(stop_pos, raw.find(st));
  std::size_t eos_pos = std::string::npos;
  for (const auto& m : opts_.eos_markers) eos_pos = std::min(eos_pos, raw.find(m));

  CompletionResult out;
  out.finish_reason = FinishReason::end_of_sequence;
  if (stop_pos != std::string::npos && stop_pos <= eos_pos) {
    raw.resize(stop_pos);
    out.finish_reason = FinishReason::stop_sequence;
  } else if (eos_pos != std::string::npos) {
    raw.resize(eos_pos);
  }

  // Whitespace tokens stand in for model tokens.
  std::size_t tokens = 0;
  bool in_tok = false;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (text::is_space(raw[i])) {
      if (in_tok && static_cast<int>(tokens) == s.max_new_tokens) {
        raw.resize(i);
        out.finish_reason = FinishReason::length;
        break;
      }
      in_tok = false;
    } else if (!in_tok) {
      in_tok = true;
      ++tokens;
    }
  }
  if (static_cast<int>(tokens) > s.max_new_tokens) tokens = static_cast<std::size_t>(s.max_new_tokens);
  out.text = std::move(raw);
  out.completion_tokens = static_cast<int>(tokens);
  out.prompt_tokens = static_cast<int>(text::count_whitespace_tokens(prompt_text));
  return out;
}

CompletionResult MockBackend::complete(const std::string& prompt, const SamplingConfig& sampling) {
  InFlight guard(*this);
  maybe_fail();
  MockRequest req{MockRequestKind::completion, prompt, {}, sampling};
  std::string raw;
  bool scripted = false;
  {
    std::lock_guard lock(mu_);
    if (auto it = completion_script_.find(prompt); it != completion_script_.end()) {
      auto& cursor = completion_cursor_[prompt];
      raw = it->second[std::min(cursor, it->second.size() - 1)];
      ++cursor;
      scripted = true;
    }
  }
  if (!scripted) raw = opts_.fallback(req, request_key(prompt, sampling));
  record(std::move(req));
  return finish(std::move(raw), prompt, sampling);
}

CompletionResult MockBackend::chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) {
  InFlight guard(*this);
  maybe_fail();
  if (messages.empty()) throw TransportError("mock: empty messages", 400, false);
  MockRequest req{MockRequestKind::chat, messages.back().content,
                  std::vector<ChatMessage>(messages.begin(), messages.end()), sampling};
  std::string raw;
  bool scripted = false;
  {
    std::lock_guard lock(mu_);
    if (auto it = chat_script_.find(req.prompt); it != chat_script_.end()) {
      raw = it->second;
      scripted = true;
    }
  }
  if (!scripted) {
    std::uint64_t key = 0;
    for (const auto& m : messages) key = text::mix(key, text::fnv1a(m.content));
    key = text::mix(key, request_key("", sampling));
    raw = opts_.fallback(req, key);
  }
  std::string prompt_text;
  for (const auto& m : messages) prompt_text += m.content + "\n";
  record(std::move(req));
  return finish(std::move(raw), prompt_text, sampling);
}

Eigen::MatrixXd MockBackend::embed(std::span<const std::string> texts) {
  InFlight guard(*this);
  maybe_fail();
  const auto n = static_cast<Eigen::Index>(texts.size());
  Eigen::MatrixXd out(n, opts_.embedding_dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = texts[static_cast<std::size_t>(i)];
    std::vector<double> v;
    {
      std::lock_guard lock(mu_);
      if (auto it = embedding_script_.find(t); it != embedding_script_.end()) v = it->second;
    }
    if (v.empty()) v = mock::default_embedding(t, opts_.embedding_dim);
    if (static_cast<int>(v.size()) != opts_.embedding_dim) {
      throw SchemaError("mock: scripted embedding has wrong dimension");
    }
    out.row(i) = Eigen::Map<const Eigen::RowVectorXd>(v.data(), opts_.embedding_dim);
  }
  record(MockRequest{MockRequestKind::embedding, {}, {}, {}});
  return out;
}

double MockBackend::score(std::string_view instruction, std::string_view response) {
  InFlight guard(*this);
  maybe_fail();
  {
    std::lock_guard lock(mu_);
    auto it = score_script_.find({std::string(instruction), std::string(response)});
    if (it != score_script_.end()) return it->second;
  }
  record(MockRequest{MockRequestKind::score, std::string(instruction), {}, {}});
  return mock::default_reward(instruction, response);
}

// ---------------------------------------------------------------------------
// MockServer

namespace {

SamplingConfig sampling_from(const json& j) {
  SamplingConfig s;
  s.temperature = j.value("temperature", 1.0);
  s.top_p = j.value("top_p", 1.0);
  s.max_new_tokens = j.value("max_tokens", 2048);
  s.repetition_penalty = j.value("repetition_penalty", 1.0);
  if (auto it = j.find("stop"); it != j.end()) {
    if (it->is_string()) {
      s.stop = {it->get<std::string>()};
    } else {
      s.stop = it->get<std::vector<std::string>>();
    }
  }
  if (auto it = j.find("seed"); it != j.end() && !it->is_null()) s.seed = it->get<std::uint64_t>();
  return s;
}

json choice_json(const CompletionResult& r, const SamplingConfig& s) {
  json c{{"index", 0}};
  c["finish_reason"] = r.finish_reason == FinishReason::length ? "length" : "stop";
  if (r.finish_reason == FinishReason::stop_sequence && !s.stop.empty()) {
    c["stop_reason"] = s.stop.front();
  } else {
    c["stop_reason"] = nullptr;
  }
  return c;
}

json usage_json(const CompletionResult& r) {
  return {{"prompt_tokens", r.prompt_tokens},
          {"completion_tokens", r.completion_tokens},
          {"total_tokens", r.prompt_tokens + r.completion_tokens}};
}

Role role_from(const std::string& r) {
  if (r == "system") return Role::system;
  if (r == "assistant") return Role::assistant;
  if (r == "user") return Role::user;
  throw ContractViolation("unknown role '" + r + "'");
}

template <typename F>
void handle(const httplib::Request& req, httplib::Response& res, F&& body) {
  try {
    json in = json::parse(req.body);
    res.set_content(body(in).dump(), "application/json");
  } catch (const TransportError& e) {
    res.status = e.status() == 0 ? 503 : e.status();
    res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
  } catch (const std::exception& e) {
    res.status = 400;
    res.set_content(json{{"error", {{"message", e.what()}}}}.dump(), "application/json");
  }
}

}  // namespace

MockServer::MockServer(std::shared_ptr<MockBackend> backend, const std::string& host, int port)
    : backend_(std::move(backend)), server_(std::make_unique<httplib::Server>()), host_(host) {
  auto& srv = *server_;
  auto b = backend_;
  srv.Post("/v1/completions", [b](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [&](const json& in) {
      const auto s = sampling_from(in);
      const auto r = b->complete(in.at("prompt").get<std::string>(), s);
      json c = choice_json(r, s);
      c["text"] = r.text;
      return json{{"object", "text_completion"},
                  {"model", in.value("model", "mock")},
                  {"choices", json::array({c})},
                  {"usage", usage_json(r)}};
    });
  });
  srv.Post("/v1/chat/completions", [b](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [&](const json& in) {
      const auto s = sampling_from(in);
      std::vector<ChatMessage> msgs;
      for (const auto& m : in.at("messages")) {
        msgs.push_back({role_from(m.at("role").get<std::string>()), m.at("content").get<std::string>()});
      }
      const auto r = b->chat(msgs, s);
      json c = choice_json(r, s);
      c["message"] = {{"role", "assistant"}, {"content", r.text}};
      return json{{"object", "chat.completion"},
                  {"model", in.value("model", "mock")},
                  {"choices", json::array({c})},
                  {"usage", usage_json(r)}};
    });
  });
  srv.Post("/v1/embeddings", [b](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [&](const json& in) {
      std::vector<std::string> texts;
      if (in.at("input").is_string()) {
        texts.push_back(in.at("input").get<std::string>());
      } else {
        texts = in.at("input").get<std::vector<std::string>>();
      }
      const auto m = b->embed(texts);
      json data = json::array();
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(i, k);
        data.push_back({{"object", "embedding"}, {"index", i}, {"embedding", row}});
      }
      return json{{"object", "list"}, {"model", in.value("model", "mock")}, {"data", data}};
    });
  });
  srv.Post("/pooling", [b](const httplib::Request& req, httplib::Response& res) {
    handle(req, res, [&](const json& in) {
      const auto& msgs = in.at("messages");
      std::string instruction;
      std::string response;
      for (const auto& m : msgs) {
        const auto role = m.at("role").get<std::string>();
        if (role == "user") instruction = m.at("content").get<std::string>();
        if (role == "assistant") response = m.at("content").get<std::string>();
      }
      const double r = b->score(instruction, response);
      return json{{"object", "list"}, {"data", json::array({{{"index", 0}, {"data", json::array({r})}}})}};
    });
  });

  if (port == 0) {
    port_ = srv.bind_to_any_port(host_);
  } else {
    port_ = srv.bind_to_port(host_, port) ? port : -1;
  }
  if (port_ <= 0) throw ConfigError("mock server could not bind " + host_);
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

MockServer::~MockServer() {
  stop();
  if (thread_.joinable()) thread_.join();
}

std::string MockServer::base_url() const { return "http://" + host_ + ":" + std::to_string(port_); }

void MockServer::wait() {
  if (thread_.joinable()) thread_.join();
}

void MockServer::stop() { server_->stop(); }

}  // namespace preq
