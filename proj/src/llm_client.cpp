#include "preq/llm_client.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "preq/error.hpp"

namespace preq {

using nlohmann::json;

std::string_view to_string(FinishReason r) {
  switch (r) {
    case FinishReason::stop_sequence: return "stop_sequence";
    case FinishReason::length: return "length";
    case FinishReason::end_of_sequence: return "end_of_sequence";
  }
  return "end_of_sequence";
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "user";
}

void SamplingConfig::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("temperature must be a finite non-negative number");
  }
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  if (!(repetition_penalty > 0.0)) throw ConfigError("repetition_penalty must be positive");
  for (const auto& s : stop) {
    if (s.empty()) throw ConfigError("empty stop sequence");
  }
}

std::chrono::milliseconds RetryPolicy::backoff(int attempt) const {
  if (attempt < 1) attempt = 1;
  // Saturate before shifting so large attempt counts do not overflow.
  const int shift = std::min(attempt - 1, 30);
  const long long base = base_backoff.count();
  long long delay = base << shift;
  if (shift >= 30 || delay > max_backoff.count() || delay < base) delay = max_backoff.count();
  return std::chrono::milliseconds(std::max(delay, 0LL));
}

void ClientConfig::validate() const {
  if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
  if (retry.max_attempts < 1) throw ConfigError("retry.max_attempts must be >= 1");
  if (retry.base_backoff.count() < 0) throw ConfigError("retry.base_backoff must be >= 0");
  if (request_timeout.count() <= 0) throw ConfigError("request_timeout must be positive");
}

bool truncate_at_stop(std::string& text, std::span<const std::string> stops) {
  std::size_t cut = std::string::npos;
  for (const auto& s : stops) {
    if (s.empty()) continue;
    cut = std::min(cut, text.find(s));
  }
  if (cut == std::string::npos) return false;
  text.resize(cut);
  return true;
}

// ---------------------------------------------------------------------------
// HttpBackend

namespace {

json sampling_fields(const SamplingConfig& s) {
  json j{{"temperature", s.temperature},
         {"top_p", s.top_p},
         {"max_tokens", s.max_new_tokens}};
  if (s.repetition_penalty != 1.0) j["repetition_penalty"] = s.repetition_penalty;
  if (!s.stop.empty()) j["stop"] = s.stop;
  if (s.seed) j["seed"] = *s.seed;
  return j;
}

bool is_retryable_status(int status) { return status == 429 || status >= 500; }

FinishReason parse_finish(const json& choice) {
  const auto reason = choice.value("finish_reason", std::string{"stop"});
  if (reason == "length") return FinishReason::length;
  // vLLM reports the matched stop string in stop_reason; null means the model's EOS token.
  auto sr = choice.find("stop_reason");
  if (sr != choice.end() && sr->is_string()) return FinishReason::stop_sequence;
  return FinishReason::end_of_sequence;
}

template <typename F>
auto schema_guard(std::string_view what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw SchemaError("malformed " + std::string(what) + " response: " + e.what());
  }
}

void read_usage(const json& body, CompletionResult& out) {
  if (auto u = body.find("usage"); u != body.end() && u->is_object()) {
    out.prompt_tokens = u->value("prompt_tokens", 0);
    out.completion_tokens = u->value("completion_tokens", 0);
  }
}

}  // namespace

HttpBackend::HttpBackend(ClientConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::string url = cfg_.base_url;
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base_url needs a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  // Accept both "http://host:port" and "http://host:port/v1".
  if (path_prefix_.ends_with("/v1")) path_prefix_.resize(path_prefix_.size() - 3);
}

std::string HttpBackend::post(const std::string& path, const std::string& body) {
  httplib::Client cli(scheme_host_port_);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(cfg_.request_timeout);
  cli.set_connection_timeout(timeout);
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  httplib::Headers headers;
  if (cfg_.auth_token) headers.emplace("Authorization", "Bearer " + *cfg_.auth_token);
  auto res = cli.Post(path_prefix_ + path, headers, body, "application/json");
  if (!res) {
    throw TransportError("request to " + scheme_host_port_ + path_prefix_ + path +
                             " failed: " + httplib::to_string(res.error()),
                         0, true);
  }
  if (res->status < 200 || res->status >= 300) {
    throw TransportError("HTTP " + std::to_string(res->status) + " from " + path + ": " +
                             res->body.substr(0, 512),
                         res->status, is_retryable_status(res->status));
  }
  return res->body;
}

CompletionResult HttpBackend::complete(const std::string& prompt, const SamplingConfig& sampling) {
  json req = sampling_fields(sampling);
  req["model"] = cfg_.model;
  req["prompt"] = prompt;
  const std::string raw = post("/v1/completions", req.dump());
  return schema_guard("completion", [&] {
    json body = json::parse(raw);
    const json& choice = body.at("choices").at(0);
    CompletionResult out;
    out.text = choice.at("text").get<std::string>();
    out.finish_reason = parse_finish(choice);
    read_usage(body, out);
    return out;
  });
}

CompletionResult HttpBackend::chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) {
  json req = sampling_fields(sampling);
  req["model"] = cfg_.model;
  json msgs = json::array();
  for (const auto& m : messages) msgs.push_back({{"role", to_string(m.role)}, {"content", m.content}});
  req["messages"] = std::move(msgs);
  const std::string raw = post("/v1/chat/completions", req.dump());
  return schema_guard("chat", [&] {
    json body = json::parse(raw);
    const json& choice = body.at("choices").at(0);
    CompletionResult out;
    out.text = choice.at("message").at("content").get<std::string>();
    out.finish_reason = parse_finish(choice);
    read_usage(body, out);
    return out;
  });
}

Eigen::MatrixXd HttpBackend::embed(std::span<const std::string> texts) {
  if (texts.empty()) return {};
  json req{{"model", cfg_.model}, {"input", json::array()}};
  for (const auto& t : texts) req["input"].push_back(t);
  const std::string raw = post("/v1/embeddings", req.dump());
  return schema_guard("embedding", [&] {
    json body = json::parse(raw);
    const json& data = body.at("data");
    if (!data.is_array() || data.size() != texts.size()) {
      throw SchemaError("embedding response has " + std::to_string(data.size()) + " items for " +
                        std::to_string(texts.size()) + " inputs");
    }
    Eigen::MatrixXd out;
    for (std::size_t k = 0; k < data.size(); ++k) {
      const json& item = data[k];
      const auto row = item.value("index", k);
      const auto values = item.at("embedding").get<std::vector<double>>();
      if (k == 0) out.resize(static_cast<Eigen::Index>(texts.size()), static_cast<Eigen::Index>(values.size()));
      if (static_cast<Eigen::Index>(values.size()) != out.cols()) {
        throw SchemaError("embedding dimension mismatch within batch");
      }
      if (row >= texts.size()) throw SchemaError("embedding index out of range");
      out.row(static_cast<Eigen::Index>(row)) =
          Eigen::Map<const Eigen::RowVectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    }
    return out;
  });
}

double HttpBackend::score(std::string_view instruction, std::string_view response) {
  json req{{"model", cfg_.model},
           {"messages",
            json::array({{{"role", "user"}, {"content", instruction}},
                         {{"role", "assistant"}, {"content", response}}})}};
  const std::string raw = post("/pooling", req.dump());
  return schema_guard("reward", [&] {
    json body = json::parse(raw);
    const json* v = &body.at("data").at(0).at("data");
    while (v->is_array()) {
      if (v->empty()) throw SchemaError("empty reward payload");
      v = &v->front();
    }
    return v->get<double>();
  });
}

// ---------------------------------------------------------------------------
// Client

Client::Client(ClientConfig cfg, std::shared_ptr<Backend> backend, Sleeper sleeper)
    : cfg_(std::move(cfg)),
      backend_(std::move(backend)),
      sleeper_(std::move(sleeper)),
      in_flight_(cfg_.max_in_flight) {
  cfg_.validate();
  if (!backend_) throw ConfigError("client needs a backend");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

template <typename F>
auto Client::with_retry(F&& attempt) -> decltype(attempt()) {
  requests_.fetch_add(1, std::memory_order_relaxed);
  for (int n = 1;; ++n) {
    attempts_.fetch_add(1, std::memory_order_relaxed);
    try {
      in_flight_.acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{in_flight_};
      return attempt();
    } catch (const SchemaError&) {
      throw;
    } catch (const TransportError& e) {
      if (!e.retryable() || n >= cfg_.retry.max_attempts) throw;
    }
    retries_.fetch_add(1, std::memory_order_relaxed);
    sleeper_(cfg_.retry.backoff(n));
  }
}

namespace {

void finish_text(CompletionResult& r, const SamplingConfig& sampling) {
  if (truncate_at_stop(r.text, sampling.stop)) r.finish_reason = FinishReason::stop_sequence;
}

}  // namespace

CompletionResult Client::complete(const std::string& prompt, const SamplingConfig& sampling) {
  if (prompt.empty()) throw ContractViolation("completion prompt is empty");
  sampling.validate();
  auto r = with_retry([&] { return backend_->complete(prompt, sampling); });
  finish_text(r, sampling);
  prompt_tokens_.fetch_add(static_cast<std::uint64_t>(std::max(r.prompt_tokens, 0)));
  completion_tokens_.fetch_add(static_cast<std::uint64_t>(std::max(r.completion_tokens, 0)));
  return r;
}

CompletionResult Client::chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) {
  if (messages.empty()) throw ContractViolation("chat needs at least one message");
  sampling.validate();
  // Optional leading system message, then user/assistant alternation starting with user.
  std::size_t i = messages.front().role == Role::system ? 1 : 0;
  if (i == messages.size()) throw ContractViolation("chat needs at least one user message");
  for (std::size_t k = i; k < messages.size(); ++k) {
    const Role expected = (k - i) % 2 == 0 ? Role::user : Role::assistant;
    if (messages[k].role != expected) {
      throw ContractViolation("chat roles must alternate user/assistant starting with user");
    }
  }
  auto r = with_retry([&] { return backend_->chat(messages, sampling); });
  finish_text(r, sampling);
  prompt_tokens_.fetch_add(static_cast<std::uint64_t>(std::max(r.prompt_tokens, 0)));
  completion_tokens_.fetch_add(static_cast<std::uint64_t>(std::max(r.completion_tokens, 0)));
  return r;
}

Eigen::MatrixXd Client::embed(std::span<const std::string> texts) {
  if (texts.empty()) return {};
  for (const auto& t : texts) {
    if (t.empty()) throw ContractViolation("cannot embed empty text");
  }
  auto m = with_retry([&] { return backend_->embed(texts); });
  if (m.rows() != static_cast<Eigen::Index>(texts.size())) {
    throw SchemaError("embedding backend returned " + std::to_string(m.rows()) + " rows for " +
                      std::to_string(texts.size()) + " inputs");
  }
  if (!m.allFinite()) throw SchemaError("embedding contains non-finite values");
  return m;
}

double Client::score(std::string_view instruction, std::string_view response) {
  if (instruction.empty() || response.empty()) {
    throw ContractViolation("reward scoring needs non-empty instruction and response");
  }
  return with_retry([&] { return backend_->score(instruction, response); });
}

ClientStats Client::stats() const {
  return {requests_.load(), attempts_.load(), retries_.load(), prompt_tokens_.load(),
          completion_tokens_.load()};
}

}  // namespace preq
