#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "preq/llm_client.hpp"
#include "preq/synthesis.hpp"
#include "preq/templates.hpp"

namespace preq {

enum class PairSource { k_sample, base_contrast };
std::string_view to_string(PairSource s);

struct Candidate {
  std::string text;
  double reward = 0;
  bool operator==(const Candidate&) const = default;
};

struct PreferencePair {
  std::string id;
  std::string instruction;
  std::string chosen;
  std::string rejected;
  double chosen_reward = 0;
  double rejected_reward = 0;
  std::vector<Candidate> candidates;
  int k = 0;
  double sampling_temperature = 0;
  PairSource source = PairSource::k_sample;
  bool operator==(const PreferencePair&) const = default;
};

nlohmann::json pair_to_json(const PreferencePair& p);
/// Throws DataIntegrityError on a malformed object.
PreferencePair pair_from_json(const nlohmann::json& j);

struct KSampleConfig {
  int k = 5;
  double temperature = 0.8;
  double top_p = 1.0;
  int max_new_tokens = 2048;
  std::string run_id = "dpo";
  std::string template_family = "llama-3";
  int workers = 0;

  /// Throws ConfigError unless k >= 2 and 0 < temperature < 1.
  void validate() const;
};

struct KSampleReport {
  std::int64_t instructions = 0;
  std::int64_t emitted = 0;
  std::int64_t skipped_ties = 0;       // every candidate scored the same
  std::int64_t skipped_same_text = 0;  // argmax and argmin share their text
  std::int64_t skipped_empty = 0;      // some candidate came back empty
  nlohmann::json to_json() const;
};

struct KSampleResult {
  std::vector<PreferencePair> pairs;  // in input order
  KSampleReport report;
};

/// Samples k responses per instance instruction (first turn) at cfg.temperature, scores
/// each, and pairs the highest-reward response (chosen) with the lowest (rejected). Ties
/// go to the lowest candidate index.
KSampleResult build_ksample_pairs(std::span<const Instance> instances, const KSampleConfig& cfg, Client& gen,
                                  Client& reward, const TemplateRegistry& templates);

/// Pairs the instruct response (chosen) with the base response (rejected) iff
/// r_instruct - r_base > 0.
std::optional<PreferencePair> build_base_contrast_pair(std::string_view instruction,
                                                       std::string_view instruct_response,
                                                       std::string_view base_response, Client& reward);

}  // namespace preq
