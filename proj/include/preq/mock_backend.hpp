#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "preq/llm_client.hpp"

namespace httplib {
class Server;
}

namespace preq {

enum class MockRequestKind { completion, chat, embedding, score };

struct MockRequest {
  MockRequestKind kind;
  std::string prompt;                 // completion prompt, or last message for chat
  std::vector<ChatMessage> messages;  // chat only
  SamplingConfig sampling;
};

/// Deterministic in-process inference server.
///
/// Replies come from an exact-prompt script when one matches, otherwise from a generator
/// keyed by (seed, prompt, sampling). Stop sequences and EOS markers are applied the way a
/// serving stack would, and max_new_tokens truncates on whitespace tokens.
class MockBackend final : public Backend {
 public:
  using Generator = std::function<std::string(const MockRequest&, std::uint64_t key)>;

  struct Options {
    std::vector<std::string> eos_markers{"<|eot_id|>", "<|end_of_text|>"};
    std::chrono::microseconds latency{0};
    int embedding_dim = 64;
    /// Probability that the default generator answers a completion with nothing.
    double empty_rate = 0.0;
    Generator fallback;  // defaults to mock::default_reply
    bool record_requests = false;
  };

  MockBackend();
  explicit MockBackend(Options opts);

  /// Exact-prompt script. A list of replies is served in order; the last one repeats.
  void script_completion(const std::string& prompt, std::vector<std::string> replies);
  /// Keyed by the content of the final chat message.
  void script_chat(const std::string& last_message, std::string reply);
  void script_score(const std::string& instruction, const std::string& response, double reward);
  void script_embedding(const std::string& text, std::vector<double> values);
  /// The next `n` attempts fail with `status` (0 = connection failure).
  void fail_next(int n, int status);

  CompletionResult complete(const std::string& prompt, const SamplingConfig& sampling) override;
  CompletionResult chat(std::span<const ChatMessage> messages, const SamplingConfig& sampling) override;
  Eigen::MatrixXd embed(std::span<const std::string> texts) override;
  double score(std::string_view instruction, std::string_view response) override;

  int peak_in_flight() const { return peak_.load(); }
  std::uint64_t calls() const { return calls_.load(); }
  std::vector<MockRequest> requests() const;
  const Options& options() const { return opts_; }

 private:
  class InFlight;
  CompletionResult finish(std::string raw, const std::string& prompt_text, const SamplingConfig& s) const;
  void maybe_fail();
  void record(MockRequest req);

  Options opts_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<std::string>> completion_script_;
  std::map<std::string, std::size_t> completion_cursor_;
  std::map<std::string, std::string> chat_script_;
  std::map<std::pair<std::string, std::string>, double> score_script_;
  std::map<std::string, std::vector<double>> embedding_script_;
  std::vector<MockRequest> log_;
  std::atomic<int> pending_failures_{0};
  std::atomic<int> failure_status_{503};
  std::atomic<int> current_{0};
  std::atomic<int> peak_{0};
  std::atomic<std::uint64_t> calls_{0};
};

namespace mock {

/// Default generator. Completions yield a short question or a longer answer-like paragraph
/// followed by "<|eot_id|>". Chat requests that carry one of the judge rubrics get a fenced
/// JSON verdict; a chat ending in an assistant turn gets a guard verdict.
std::string default_reply(const MockRequest& req, std::uint64_t key, double empty_rate);

/// Reward assigned to an unscripted pair: a hash of the pair mapped into [-20, 5).
double default_reward(std::string_view instruction, std::string_view response);

/// Hash-seeded Gaussian vector; identical texts map to identical vectors.
std::vector<double> default_embedding(std::string_view text, int dim);

}  // namespace mock

/// Loopback HTTP server exposing a MockBackend over the same wire protocol as HttpBackend.
class MockServer {
 public:
  explicit MockServer(std::shared_ptr<MockBackend> backend, const std::string& host = "127.0.0.1",
                      int port = 0);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  int port() const { return port_; }
  std::string base_url() const;
  /// Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  std::shared_ptr<MockBackend> backend_;
  std::unique_ptr<httplib::Server> server_;
  std::string host_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace preq
