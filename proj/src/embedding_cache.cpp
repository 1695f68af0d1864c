#include "preq/embedding_cache.hpp"

#include <fstream>

#include <openssl/evp.h>

#include <json.hpp>

#include "preq/error.hpp"

namespace preq {

namespace {

std::string cache_key(std::string_view model, std::string_view text) {
  std::string k(model);
  k += '\x1f';
  k += sha256_hex(text);
  return k;
}

}  // namespace

std::string sha256_hex(std::string_view text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw DataIntegrityError("SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  LineSink::repair_tail(path_);
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) continue;
    try {
      std::string key = j.at("model").get<std::string>();
      key += '\x1f';
      key += j.at("sha256").get<std::string>();
      rows_[std::move(key)] = j.at("embedding").get<std::vector<double>>();
    } catch (const nlohmann::json::exception&) {
      continue;
    }
  }
}

std::optional<Eigen::VectorXd> EmbeddingCache::get(std::string_view model, std::string_view text) const {
  std::lock_guard lock(mu_);
  auto it = rows_.find(cache_key(model, text));
  if (it == rows_.end()) return std::nullopt;
  return Eigen::Map<const Eigen::VectorXd>(it->second.data(), static_cast<Eigen::Index>(it->second.size()));
}

void EmbeddingCache::put(std::string_view model, std::string_view text, const Eigen::VectorXd& embedding) {
  std::vector<double> values(embedding.data(), embedding.data() + embedding.size());
  const std::string digest = sha256_hex(text);
  nlohmann::json j{{"model", model}, {"sha256", digest}, {"embedding", values}};
  std::lock_guard lock(mu_);
  if (!sink_) sink_ = std::make_unique<LineSink>(path_);
  sink_->write_line(j.dump());
  rows_[cache_key(model, text)] = std::move(values);
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mu_);
  return rows_.size();
}

Eigen::MatrixXd embed_cached(std::span<const std::string> texts, Client& client, EmbeddingCache* cache,
                             std::size_t batch_size) {
  if (batch_size == 0) batch_size = 1;
  const std::string& model = client.config().model;
  std::vector<std::optional<Eigen::VectorXd>> rows(texts.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (cache) rows[i] = cache->get(model, texts[i]);
    if (!rows[i]) missing.push_back(i);
  }
  for (std::size_t b = 0; b < missing.size(); b += batch_size) {
    const std::size_t e = std::min(missing.size(), b + batch_size);
    std::vector<std::string> batch;
    for (std::size_t k = b; k < e; ++k) batch.push_back(texts[missing[k]]);
    const Eigen::MatrixXd got = client.embed(batch);
    for (std::size_t k = b; k < e; ++k) {
      Eigen::VectorXd v = got.row(static_cast<Eigen::Index>(k - b)).transpose();
      if (cache) cache->put(model, texts[missing[k]], v);
      rows[missing[k]] = std::move(v);
    }
  }
  if (texts.empty()) return {};
  const Eigen::Index dim = rows.front()->size();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(texts.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i]->size() != dim) {
      throw DataIntegrityError("embedding dimension mismatch for text " + std::to_string(i));
    }
    out.row(static_cast<Eigen::Index>(i)) = rows[i]->transpose();
  }
  return out;
}

}  // namespace preq
