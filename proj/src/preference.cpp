#include "preq/preference.hpp"

#include <algorithm>
#include <mutex>

#include "preq/error.hpp"
#include "preq/parallel.hpp"
#include "preq/text.hpp"

namespace preq {

using nlohmann::json;

std::string_view to_string(PairSource s) {
  return s == PairSource::k_sample ? "k_sample" : "base_contrast";
}

json pair_to_json(const PreferencePair& p) {
  json cands = json::array();
  for (const auto& c : p.candidates) cands.push_back({{"text", c.text}, {"reward", c.reward}});
  json j{{"instruction", p.instruction},
         {"chosen", p.chosen},
         {"rejected", p.rejected},
         {"chosen_reward", p.chosen_reward},
         {"rejected_reward", p.rejected_reward},
         {"k", p.k},
         {"temperature", p.sampling_temperature},
         {"source", to_string(p.source)},
         {"candidates", cands}};
  if (!p.id.empty()) j["id"] = p.id;
  return j;
}

PreferencePair pair_from_json(const json& j) {
  try {
    PreferencePair p;
    p.id = j.value("id", std::string{});
    p.instruction = j.at("instruction").get<std::string>();
    p.chosen = j.at("chosen").get<std::string>();
    p.rejected = j.at("rejected").get<std::string>();
    p.chosen_reward = j.at("chosen_reward").get<double>();
    p.rejected_reward = j.at("rejected_reward").get<double>();
    p.k = j.at("k").get<int>();
    p.sampling_temperature = j.at("temperature").get<double>();
    const auto src = j.at("source").get<std::string>();
    if (src == "k_sample") {
      p.source = PairSource::k_sample;
    } else if (src == "base_contrast") {
      p.source = PairSource::base_contrast;
    } else {
      throw DataIntegrityError("unknown preference source '" + src + "'");
    }
    if (j.contains("candidates")) {
      for (const auto& c : j.at("candidates")) {
        p.candidates.push_back({c.at("text").get<std::string>(), c.at("reward").get<double>()});
      }
    }
    return p;
  } catch (const json::exception& e) {
    throw DataIntegrityError(std::string("malformed preference record: ") + e.what());
  }
}

void KSampleConfig::validate() const {
  if (k < 2) throw ConfigError("k must be >= 2");
  if (!(temperature > 0.0 && temperature < 1.0)) throw ConfigError("temperature must lie in (0, 1)");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
}

json KSampleReport::to_json() const {
  return {{"instructions", instructions},
          {"emitted", emitted},
          {"skipped_ties", skipped_ties},
          {"skipped_same_text", skipped_same_text},
          {"skipped_empty", skipped_empty}};
}

KSampleResult build_ksample_pairs(std::span<const Instance> instances, const KSampleConfig& cfg, Client& gen,
                                  Client& reward, const TemplateRegistry& templates) {
  cfg.validate();
  const ChatTemplate& tmpl = templates.lookup(cfg.template_family);
  SamplingConfig base;
  base.temperature = cfg.temperature;
  base.top_p = cfg.top_p;
  base.max_new_tokens = cfg.max_new_tokens;
  base = with_template_stops(base, tmpl);

  enum class Outcome { emitted, tie, same_text, empty };
  std::vector<std::optional<PreferencePair>> slots(instances.size());
  std::vector<Outcome> outcome(instances.size(), Outcome::emitted);
  const int workers = cfg.workers > 0 ? cfg.workers : gen.config().max_in_flight;

  parallel_for(instances.size(), workers, [&](std::size_t i) {
    const Instance& inst = instances[i];
    if (inst.turns.empty()) throw DataIntegrityError("instance " + inst.id + " has no turns");
    const std::string& q = inst.turns.front().instruction;
    const std::string prompt = render_response_prompt(tmpl, q, inst.system_prompt_used).text;

    std::vector<Candidate> cands;
    for (int j = 0; j < cfg.k; ++j) {
      SamplingConfig sc = base;
      sc.seed = slot_seed(cfg.run_id + "/" + inst.id, 0, j, 0);
      std::string text(text::trim(gen.complete(prompt, sc).text));
      if (text.empty()) {
        outcome[i] = Outcome::empty;
        return;
      }
      cands.push_back({std::move(text), 0.0});
    }
    for (auto& c : cands) c.reward = reward.score(q, c.text);

    std::size_t hi = 0;
    std::size_t lo = 0;
    for (std::size_t j = 1; j < cands.size(); ++j) {
      if (cands[j].reward > cands[hi].reward) hi = j;
      if (cands[j].reward < cands[lo].reward) lo = j;
    }
    if (!(cands[hi].reward > cands[lo].reward)) {
      outcome[i] = Outcome::tie;
      return;
    }
    if (cands[hi].text == cands[lo].text) {
      outcome[i] = Outcome::same_text;
      return;
    }
    PreferencePair p;
    p.id = inst.id;
    p.instruction = q;
    p.chosen = cands[hi].text;
    p.rejected = cands[lo].text;
    p.chosen_reward = cands[hi].reward;
    p.rejected_reward = cands[lo].reward;
    p.k = cfg.k;
    p.sampling_temperature = cfg.temperature;
    p.source = PairSource::k_sample;
    p.candidates = std::move(cands);
    slots[i] = std::move(p);
  });

  KSampleResult res;
  res.report.instructions = static_cast<std::int64_t>(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    switch (outcome[i]) {
      case Outcome::emitted:
        res.pairs.push_back(std::move(*slots[i]));
        ++res.report.emitted;
        break;
      case Outcome::tie:
        ++res.report.skipped_ties;
        break;
      case Outcome::same_text:
        ++res.report.skipped_same_text;
        break;
      case Outcome::empty:
        ++res.report.skipped_empty;
        break;
    }
  }
  return res;
}

std::optional<PreferencePair> build_base_contrast_pair(std::string_view instruction,
                                                       std::string_view instruct_response,
                                                       std::string_view base_response, Client& reward) {
  if (text::trim(instruct_response).empty() || text::trim(base_response).empty()) {
    throw ContractViolation("base contrast needs two non-empty responses");
  }
  const double r_star = reward.score(instruction, instruct_response);
  const double r_base = reward.score(instruction, base_response);
  if (!(r_star - r_base > 0)) return std::nullopt;
  PreferencePair p;
  p.instruction = std::string(instruction);
  p.chosen = std::string(instruct_response);
  p.rejected = std::string(base_response);
  p.chosen_reward = r_star;
  p.rejected_reward = r_base;
  p.candidates = {{p.chosen, r_star}, {p.rejected, r_base}};
  p.k = 2;
  p.sampling_temperature = 0.0;
  p.source = PairSource::base_contrast;
  return p;
}

}  // namespace preq
