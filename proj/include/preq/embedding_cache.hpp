#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "preq/line_sink.hpp"
#include "preq/llm_client.hpp"

namespace preq {

/// Hex SHA-256 of `text`.
std::string sha256_hex(std::string_view text);

/// On-disk embedding cache keyed by (embedding model, SHA-256 of the text). JSONL, one
/// {"model", "sha256", "embedding"} object per line; later lines win.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(std::filesystem::path path);

  std::optional<Eigen::VectorXd> get(std::string_view model, std::string_view text) const;
  void put(std::string_view model, std::string_view text, const Eigen::VectorXd& embedding);
  std::size_t size() const;

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, std::vector<double>> rows_;
  std::unique_ptr<LineSink> sink_;
};

/// Embeds `texts` in batches, serving cached rows and caching fresh ones when `cache` is set.
Eigen::MatrixXd embed_cached(std::span<const std::string> texts, Client& client, EmbeddingCache* cache,
                             std::size_t batch_size = 64);

}  // namespace preq
