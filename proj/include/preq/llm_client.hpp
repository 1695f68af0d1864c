#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace preq {

/// Decoding parameters. temperature == 0 means greedy decoding.
struct SamplingConfig {
  double temperature = 1.0;
  double top_p = 1.0;
  int max_new_tokens = 2048;
  double repetition_penalty = 1.0;
  std::vector<std::string> stop;
  std::optional<std::uint64_t> seed;

  void validate() const;
  bool is_greedy() const { return temperature == 0.0; }

  static SamplingConfig greedy(int max_new_tokens = 4096) {
    SamplingConfig s;
    s.temperature = 0.0;
    s.top_p = 1.0;
    s.max_new_tokens = max_new_tokens;
    return s;
  }
};

enum class FinishReason { stop_sequence, length, end_of_sequence };
std::string_view to_string(FinishReason r);

struct CompletionResult {
  std::string text;
  FinishReason finish_reason = FinishReason::end_of_sequence;
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

enum class Role { system, user, assistant };
std::string_view to_string(Role r);

struct ChatMessage {
  Role role;
  std::string content;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_backoff{500};
  std::chrono::milliseconds max_backoff{30'000};

  /// Delay before attempt `attempt + 1`, for attempt >= 1. Non-decreasing in `attempt`.
  std::chrono::milliseconds backoff(int attempt) const;
};

struct ClientConfig {
  std::string base_url;
  std::optional<std::string> auth_token;
  std::string model;
  int max_in_flight = 8;
  RetryPolicy retry;
  std::chrono::milliseconds request_timeout{120'000};

  void validate() const;
};

/// One wire attempt against an inference server. Implementations throw TransportError
/// (with retryable() set for transient failures) or SchemaError.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual CompletionResult complete(const std::string& prompt, const SamplingConfig& sampling) = 0;
  virtual CompletionResult chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) = 0;
  /// Row i is the embedding of texts[i].
  virtual Eigen::MatrixXd embed(std::span<const std::string> texts) = 0;
  /// Scalar reward of an (instruction, response) pair.
  virtual double score(std::string_view instruction, std::string_view response) = 0;
};

/// OpenAI-style HTTP+JSON transport: /v1/completions, /v1/chat/completions, /v1/embeddings,
/// plus /pooling for reward models.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(ClientConfig cfg);
  CompletionResult complete(const std::string& prompt, const SamplingConfig& sampling) override;
  CompletionResult chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) override;
  Eigen::MatrixXd embed(std::span<const std::string> texts) override;
  double score(std::string_view instruction, std::string_view response) override;

 private:
  std::string post(const std::string& path, const std::string& body);

  ClientConfig cfg_;
  std::string scheme_host_port_;
  std::string path_prefix_;
};

struct ClientStats {
  std::uint64_t requests = 0;
  std::uint64_t attempts = 0;
  std::uint64_t retries = 0;
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
};

/// Retrying, concurrency-bounded front end over a Backend. Thread-safe.
///
/// Transient failures (network errors, HTTP 429, HTTP 5xx) are retried with exponential
/// backoff; other 4xx and schema violations surface immediately. Completion text never
/// contains a configured stop sequence.
class Client {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  Client(ClientConfig cfg, std::shared_ptr<Backend> backend, Sleeper sleeper = {});

  CompletionResult complete(const std::string& prompt, const SamplingConfig& sampling);
  CompletionResult chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling);
  Eigen::MatrixXd embed(std::span<const std::string> texts);
  double score(std::string_view instruction, std::string_view response);

  const ClientConfig& config() const { return cfg_; }
  ClientStats stats() const;

 private:
  template <typename F>
  auto with_retry(F&& attempt) -> decltype(attempt());

  ClientConfig cfg_;
  std::shared_ptr<Backend> backend_;
  Sleeper sleeper_;
  std::counting_semaphore<> in_flight_;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> attempts_{0};
  std::atomic<std::uint64_t> retries_{0};
  std::atomic<std::uint64_t> prompt_tokens_{0};
  std::atomic<std::uint64_t> completion_tokens_{0};
};

/// Cuts `text` at the earliest occurrence of any stop sequence. Returns true when cut.
bool truncate_at_stop(std::string& text, std::span<const std::string> stops);

}  // namespace preq
