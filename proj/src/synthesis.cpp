#include "preq/synthesis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

#include "preq/error.hpp"
#include "preq/line_sink.hpp"
#include "preq/parallel.hpp"
#include "preq/text.hpp"

namespace preq {

using nlohmann::json;

namespace {

json sampling_to_json(const SamplingConfig& s) {
  json j{{"temperature", s.temperature},
         {"top_p", s.top_p},
         {"max_new_tokens", s.max_new_tokens},
         {"repetition_penalty", s.repetition_penalty}};
  if (!s.stop.empty()) j["stop"] = s.stop;
  return j;
}

SamplingConfig sampling_from_json(const json& j, SamplingConfig base) {
  base.temperature = j.value("temperature", base.temperature);
  base.top_p = j.value("top_p", base.top_p);
  base.max_new_tokens = j.value("max_new_tokens", base.max_new_tokens);
  base.repetition_penalty = j.value("repetition_penalty", base.repetition_penalty);
  if (j.contains("stop")) base.stop = j.at("stop").get<std::vector<std::string>>();
  return base;
}

std::vector<Exchange> completed_exchanges(const Instance& inst, std::size_t count) {
  std::vector<Exchange> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back({inst.turns[i].instruction, inst.turns[i].response.value_or("")});
  }
  return out;
}

int resolve_workers(int workers, const Client& client) {
  return workers > 0 ? workers : client.config().max_in_flight;
}

}  // namespace

// Seeds stay below 2^53 so they survive JSON number handling in any server.
std::uint64_t slot_seed(std::string_view run_id, int shard, std::int64_t slot, int attempt) {
  std::uint64_t h = text::fnv1a(run_id);
  h = text::mix(h, static_cast<std::uint64_t>(shard));
  h = text::mix(h, static_cast<std::uint64_t>(slot));
  h = text::mix(h, static_cast<std::uint64_t>(attempt));
  return h & ((1ULL << 53) - 1);
}

SamplingConfig with_template_stops(SamplingConfig s, const ChatTemplate& t) {
  for (const auto& stop : t.stop_sequences) {
    if (std::find(s.stop.begin(), s.stop.end(), stop) == s.stop.end()) s.stop.push_back(stop);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Job spec

void JobSpec::validate() const {
  if (run_id.empty()) throw ConfigError("job: run_id is empty");
  if (template_family.empty()) throw ConfigError("job: template_family is empty");
  if (shards.empty()) throw ConfigError("job: at least one shard is required");
  for (std::size_t i = 0; i < shards.size(); ++i) {
    if (shards[i].count < 1) throw ConfigError("job: shard " + std::to_string(i) + " has count < 1");
    shards[i].sampling.validate();
  }
  response_sampling.validate();
  if (target_turns < 1) throw ConfigError("job: target_turns must be >= 1");
  if (rejection_budget < 0) throw ConfigError("job: rejection_budget must be >= 0");
  if (max_instruction_chars == 0) throw ConfigError("job: max_instruction_chars must be positive");
}

std::int64_t JobSpec::total_count() const {
  std::int64_t n = 0;
  for (const auto& s : shards) n += s.count;
  return n;
}

std::vector<Shard> shard_preset(std::string_view name, double scale) {
  struct Row {
    double temperature;
    double top_p;
    std::int64_t count;
  };
  static const std::vector<Row> air = {
      {1.0, 1.00, 300'000}, {1.0, 0.995, 300'000}, {1.0, 0.990, 300'000},
      {1.1, 1.00, 300'000}, {1.1, 0.995, 300'000}, {1.1, 0.990, 300'000},
      {1.2, 1.00, 300'000}, {1.2, 0.995, 300'000}, {1.2, 0.990, 300'000},
      {1.25, 1.00, 100'000}, {1.25, 0.995, 100'000}, {1.25, 0.990, 100'000}};
  static const std::vector<Row> pro = {
      {1.0, 1.00, 300'000}, {1.1, 0.995, 300'000}, {1.2, 0.995, 300'000}, {1.25, 0.990, 100'000}};
  const std::vector<Row>* rows = nullptr;
  if (name == "air") rows = &air;
  if (name == "pro") rows = &pro;
  if (!rows) throw LookupError("unknown shard preset '" + std::string(name) + "' (known: air, pro)");
  if (!(scale > 0.0)) throw ConfigError("shard preset scale must be positive");
  std::vector<Shard> out;
  for (const auto& r : *rows) {
    Shard s;
    s.sampling.temperature = r.temperature;
    s.sampling.top_p = r.top_p;
    s.count = std::max<std::int64_t>(1, std::llround(static_cast<double>(r.count) * scale));
    out.push_back(std::move(s));
  }
  return out;
}

JobSpec job_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("job file must hold a JSON object");
  JobSpec job;
  try {
    job.run_id = j.value("run_id", job.run_id);
    job.model_id = j.value("model_id", job.model_id);
    job.template_family = j.value("template_family", job.template_family);
    SamplingConfig instruction_defaults;
    if (j.contains("instruction_sampling")) {
      instruction_defaults = sampling_from_json(j.at("instruction_sampling"), instruction_defaults);
    }
    if (j.contains("shards")) {
      for (const auto& s : j.at("shards")) {
        Shard shard;
        shard.sampling = sampling_from_json(s, instruction_defaults);
        shard.count = s.at("count").get<std::int64_t>();
        job.shards.push_back(std::move(shard));
      }
    } else if (j.contains("preset")) {
      job.shards = shard_preset(j.at("preset").get<std::string>(), j.value("scale", 1.0));
      for (auto& s : job.shards) {
        s.sampling.max_new_tokens = instruction_defaults.max_new_tokens;
        s.sampling.repetition_penalty = instruction_defaults.repetition_penalty;
        s.sampling.stop = instruction_defaults.stop;
      }
    } else {
      Shard s;
      s.sampling = instruction_defaults;
      s.sampling.temperature = 1.0;
      s.sampling.top_p = 1.0;
      s.count = j.value("count", std::int64_t{1000});
      job.shards.push_back(std::move(s));
    }
    if (j.contains("domain") && j.contains("system_prompt")) {
      throw ConfigError("job: set either domain or system_prompt, not both");
    }
    if (j.contains("domain")) job.system_prompt = domain_system_prompt(j.at("domain").get<std::string>());
    if (j.contains("system_prompt") && !j.at("system_prompt").is_null()) {
      job.system_prompt = j.at("system_prompt").get<std::string>();
    }
    if (j.contains("response_sampling")) {
      job.response_sampling = sampling_from_json(j.at("response_sampling"), SamplingConfig::greedy());
    }
    job.target_turns = j.value("target_turns", job.target_turns);
    job.mt_system_prompt = j.value("mt_system_prompt", job.mt_system_prompt);
    job.max_instruction_chars = j.value("max_instruction_chars", job.max_instruction_chars);
    job.rejection_budget = j.value("rejection_budget", job.rejection_budget);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("job file: ") + e.what());
  }
  job.validate();
  return job;
}

json job_to_json(const JobSpec& job) {
  json shards = json::array();
  for (const auto& s : job.shards) {
    json sj = sampling_to_json(s.sampling);
    sj["count"] = s.count;
    shards.push_back(std::move(sj));
  }
  json j{{"run_id", job.run_id},
         {"model_id", job.model_id},
         {"template_family", job.template_family},
         {"shards", shards},
         {"response_sampling", sampling_to_json(job.response_sampling)},
         {"target_turns", job.target_turns},
         {"mt_system_prompt", job.mt_system_prompt},
         {"max_instruction_chars", job.max_instruction_chars},
         {"rejection_budget", job.rejection_budget}};
  j["system_prompt"] = job.system_prompt ? json(*job.system_prompt) : json(nullptr);
  return j;
}

JobSpec load_job(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open job file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("job file " + path.string() + ": " + e.what());
  }
  return job_from_json(j);
}

// ---------------------------------------------------------------------------
// Instances

void Instance::validate() const {
  if (id.empty()) throw DataIntegrityError("instance without id");
  if (turns.empty()) throw DataIntegrityError("instance " + id + " has no turns");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (turns[i].instruction.empty()) {
      throw DataIntegrityError("instance " + id + " turn " + std::to_string(i + 1) + " has an empty instruction");
    }
    if (!turns[i].response && i + 1 != turns.size()) {
      throw DataIntegrityError("instance " + id + " turn " + std::to_string(i + 1) + " lacks a response");
    }
  }
}

bool Instance::has_flag(std::string_view f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

void Instance::add_flag(std::string_view f) {
  if (!has_flag(f)) flags.emplace_back(f);
}

std::string instance_id(std::string_view run_id, int shard, std::int64_t slot) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "-%02d-%07lld", shard, static_cast<long long>(slot));
  return std::string(run_id) + buf;
}

Clock system_clock_utc() {
  return [] {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return std::string(buf);
  };
}

Clock fixed_clock(std::string stamp) {
  return [stamp = std::move(stamp)] { return stamp; };
}

// ---------------------------------------------------------------------------
// Sanitation

std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::empty: return "empty";
    case RejectReason::template_token_leak: return "template_token_leak";
    case RejectReason::too_long: return "too_long";
  }
  return "empty";
}

Sanitized sanitize_instruction(std::string_view raw, const ChatTemplate& t, std::size_t max_chars) {
  std::string s(raw);
  truncate_at_stop(s, t.stop_sequences);
  Sanitized out;
  out.text = std::string(text::trim(s));
  if (out.text.empty()) {
    out.rejection = RejectReason::empty;
  } else if (const auto tokens = t.effective_control_tokens();
             std::any_of(tokens.begin(), tokens.end(),
                         [&](const std::string& tok) { return out.text.find(tok) != std::string::npos; })) {
    out.rejection = RejectReason::template_token_leak;
  } else if (text::utf8_length(out.text) > max_chars) {
    out.rejection = RejectReason::too_long;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports and checkpoint

std::int64_t RunReport::accepted() const {
  std::int64_t n = 0;
  for (const auto& s : shards) n += s.accepted;
  return n;
}

std::int64_t RunReport::shortfall() const {
  std::int64_t n = 0;
  for (const auto& s : shards) n += s.shortfall;
  return n;
}

json RunReport::to_json() const {
  json sj = json::array();
  for (const auto& s : shards) {
    sj.push_back({{"index", s.index},
                  {"temperature", s.temperature},
                  {"top_p", s.top_p},
                  {"requested", s.requested},
                  {"accepted", s.accepted},
                  {"shortfall", s.shortfall},
                  {"resumed", s.resumed},
                  {"rejected", s.rejected}});
  }
  return {{"run_id", run_id},
          {"shards", sj},
          {"accepted", accepted()},
          {"shortfall", shortfall()},
          {"wall_clock_seconds", wall_clock_seconds},
          {"prompt_tokens", prompt_tokens},
          {"completion_tokens", completion_tokens},
          {"interrupted", interrupted}};
}

Checkpoint::Checkpoint(std::filesystem::path path) : path_(std::move(path)) {
  if (!std::filesystem::exists(path_)) return;
  LineSink::repair_tail(path_);
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    try {
      const json j = json::parse(line);
      Entry e{j.at("shard").get<int>(), j.at("slot").get<std::int64_t>(), j.at("accepted").get<bool>()};
      entries_[{e.shard, e.slot}] = e;
    } catch (const json::exception&) {
      // torn or foreign line; the slot is simply redone
    }
  }
}

bool Checkpoint::done(int shard, std::int64_t slot) const { return find(shard, slot).has_value(); }

std::optional<Checkpoint::Entry> Checkpoint::find(int shard, std::int64_t slot) const {
  std::lock_guard lock(mu_);
  auto it = entries_.find({shard, slot});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void Checkpoint::record(const Entry& e, const std::map<std::string, std::int64_t>& rejected) {
  json j{{"shard", e.shard}, {"slot", e.slot}, {"accepted", e.accepted}};
  if (!rejected.empty()) j["rejected"] = rejected;
  {
    std::lock_guard lock(mu_);
    if (!sink_) sink_ = std::make_unique<LineSink>(path_);
  }
  sink_->write_line(j.dump());
  mark(e);
}

void Checkpoint::mark(const Entry& e) {
  std::lock_guard lock(mu_);
  entries_[{e.shard, e.slot}] = e;
}

std::size_t Checkpoint::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Step 1

RunReport generate_instructions(const JobSpec& job, Client& client, const TemplateRegistry& templates,
                                const std::function<void(Instance)>& emit, GenerateOptions opts) {
  job.validate();
  const ChatTemplate& tmpl = templates.lookup(job.template_family);
  const std::string prompt = render_instruction_prompt(tmpl, job.system_prompt).text;
  const Clock clock = opts.clock ? opts.clock : system_clock_utc();
  const auto started = std::chrono::steady_clock::now();
  const ClientStats before = client.stats();

  RunReport report;
  report.run_id = job.run_id;
  std::vector<std::pair<int, std::int64_t>> pending;
  for (std::size_t s = 0; s < job.shards.size(); ++s) {
    ShardReport sr;
    sr.index = static_cast<int>(s);
    sr.temperature = job.shards[s].sampling.temperature;
    sr.top_p = job.shards[s].sampling.top_p;
    sr.requested = job.shards[s].count;
    for (std::int64_t slot = 0; slot < job.shards[s].count; ++slot) {
      std::optional<Checkpoint::Entry> prior;
      if (opts.checkpoint) prior = opts.checkpoint->find(sr.index, slot);
      if (prior) {
        ++sr.resumed;
        (prior->accepted ? sr.accepted : sr.shortfall) += 1;
      } else {
        pending.emplace_back(sr.index, slot);
      }
    }
    report.shards.push_back(std::move(sr));
  }

  std::mutex mu;
  parallel_for(
      pending.size(), resolve_workers(opts.workers, client),
      [&](std::size_t i) {
        const auto [shard, slot] = pending[i];
        const Shard& sh = job.shards[static_cast<std::size_t>(shard)];
        std::map<std::string, std::int64_t> rejected;
        std::optional<std::string> accepted;
        for (int attempt = 0; attempt <= job.rejection_budget && !accepted; ++attempt) {
          SamplingConfig sc = with_template_stops(sh.sampling, tmpl);
          sc.seed = slot_seed(job.run_id, shard, slot, attempt);
          const auto result = client.complete(prompt, sc);
          auto clean = sanitize_instruction(result.text, tmpl, job.max_instruction_chars);
          if (clean.accepted()) {
            accepted = std::move(clean.text);
          } else {
            ++rejected[std::string(to_string(*clean.rejection))];
          }
        }

        std::lock_guard lock(mu);
        ShardReport& sr = report.shards[static_cast<std::size_t>(shard)];
        for (const auto& [reason, n] : rejected) sr.rejected[reason] += n;
        if (accepted) {
          Instance inst;
          inst.id = instance_id(job.run_id, shard, slot);
          inst.turns.push_back({std::move(*accepted), std::nullopt});
          inst.model_id = job.model_id;
          inst.shard_index = shard;
          inst.slot = slot;
          inst.temperature = sh.sampling.temperature;
          inst.top_p = sh.sampling.top_p;
          inst.created_at = clock();
          inst.system_prompt_used = job.system_prompt;
          emit(std::move(inst));
          ++sr.accepted;
        } else {
          ++sr.shortfall;
        }
        if (opts.checkpoint) opts.checkpoint->record({shard, slot, accepted.has_value()}, rejected);
      },
      opts.stop);

  const ClientStats after = client.stats();
  report.prompt_tokens = after.prompt_tokens - before.prompt_tokens;
  report.completion_tokens = after.completion_tokens - before.completion_tokens;
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  report.interrupted = opts.stop.stop_requested();
  return report;
}

// ---------------------------------------------------------------------------
// Step 2

ResponseReport generate_responses(std::vector<Instance>& instances, const JobSpec& job, Client& client,
                                  const TemplateRegistry& templates, int workers) {
  const ChatTemplate& tmpl = templates.lookup(job.template_family);
  job.response_sampling.validate();
  ResponseReport report;
  std::mutex mu;
  parallel_for(instances.size(), resolve_workers(workers, client), [&](std::size_t i) {
    Instance& inst = instances[i];
    inst.validate();
    if (inst.turns.back().response) {
      std::lock_guard lock(mu);
      ++report.skipped;
      return;
    }
    const std::size_t prior = inst.turns.size() - 1;
    const auto transcript = completed_exchanges(inst, prior);
    std::optional<std::string_view> system;
    if (prior == 0) {
      if (inst.system_prompt_used) system = *inst.system_prompt_used;
    } else {
      system = job.mt_system_prompt;
    }
    const auto prompt =
        render_conversation_response_prompt(tmpl, transcript, inst.turns.back().instruction, system);
    SamplingConfig sc = with_template_stops(job.response_sampling, tmpl);
    if (!sc.is_greedy()) sc.seed = text::mix(text::fnv1a(inst.id), prior) & ((1ULL << 53) - 1);
    const auto result = client.complete(prompt.text, sc);
    std::string response(text::trim(result.text));
    const bool empty = response.empty();
    inst.turns.back().response = std::move(response);
    if (empty) inst.add_flag("empty_response");
    std::lock_guard lock(mu);
    ++report.completed;
    if (empty) ++report.empty_responses;
  });
  return report;
}

// ---------------------------------------------------------------------------
// Multi-turn

MultiTurnReport extend_multiturn(std::vector<Instance>& instances, const JobSpec& job, Client& client,
                                 const TemplateRegistry& templates, int workers) {
  job.validate();
  const ChatTemplate& tmpl = templates.lookup(job.template_family);
  MultiTurnReport report;
  std::mutex mu;
  parallel_for(instances.size(), resolve_workers(workers, client), [&](std::size_t i) {
    Instance& inst = instances[i];
    inst.validate();
    if (static_cast<int>(inst.turns.size()) >= job.target_turns) return;
    if (!inst.turns.back().response) {
      std::lock_guard lock(mu);
      ++report.incomplete;
      return;
    }
    SamplingConfig instruction_sampling;
    if (inst.shard_index >= 0 && static_cast<std::size_t>(inst.shard_index) < job.shards.size()) {
      instruction_sampling = job.shards[static_cast<std::size_t>(inst.shard_index)].sampling;
    }
    instruction_sampling.temperature = inst.temperature;
    instruction_sampling.top_p = inst.top_p;
    instruction_sampling = with_template_stops(instruction_sampling, tmpl);

    std::map<std::string, std::int64_t> rejected;
    std::int64_t added = 0;
    bool shortfall = false;
    while (static_cast<int>(inst.turns.size()) < job.target_turns) {
      const auto transcript = completed_exchanges(inst, inst.turns.size());
      const auto elicit = render_multiturn_prompt(tmpl, transcript, job.mt_system_prompt);
      std::optional<std::string> next;
      for (int attempt = 0; attempt <= job.rejection_budget && !next; ++attempt) {
        SamplingConfig sc = instruction_sampling;
        std::uint64_t seed = text::mix(text::fnv1a(inst.id), inst.turns.size());
        sc.seed = text::mix(seed, static_cast<std::uint64_t>(attempt)) & ((1ULL << 53) - 1);
        auto clean = sanitize_instruction(client.complete(elicit.text, sc).text, tmpl, job.max_instruction_chars);
        if (clean.accepted()) {
          next = std::move(clean.text);
        } else {
          ++rejected[std::string(to_string(*clean.rejection))];
        }
      }
      if (!next) {
        shortfall = true;
        inst.add_flag("mt_shortfall");
        break;
      }
      // The response prompt extends the elicitation prompt verbatim.
      std::string prompt = elicit.text + *next + tmpl.post_query;
      SamplingConfig rs = with_template_stops(job.response_sampling, tmpl);
      if (!rs.is_greedy()) rs.seed = text::mix(text::fnv1a(inst.id), 1000 + inst.turns.size()) & ((1ULL << 53) - 1);
      std::string response(text::trim(client.complete(prompt, rs).text));
      const bool empty = response.empty();
      inst.turns.push_back({std::move(*next), std::move(response)});
      ++added;
      if (empty) {
        inst.add_flag("empty_response");
        break;
      }
    }
    std::lock_guard lock(mu);
    for (const auto& [reason, n] : rejected) report.rejected[reason] += n;
    if (added > 0) ++report.extended;
    report.turns_added += added;
    if (shortfall) ++report.shortfall;
  });
  return report;
}

// ---------------------------------------------------------------------------
// Domain prompts

DomainPrompts DomainPrompts::builtin() {
  DomainPrompts d;
  d.add("math",
     "You are an AI assistant designed to provide helpful, step-by-step guidance on "
     "solving math problems. The user will ask you a wide range of complex mathematical "
     "questions. Your purpose is to assist users in understanding mathematical "
     "concepts, working through equations, and arriving at the correct solutions.");
  d.add("code",
     "You are an AI assistant designed to provide helpful, step-by-step guidance on "
     "coding problems. The user will ask you a wide range of coding questions. Your "
     "purpose is to assist users in understanding coding concepts, working through "
     "code, and arriving at the correct solutions.");
  d.add("translation",
     "You are an AI assistant designed to provide accurate and contextually appropriate "
     "translations. Users will ask you to translate text between various languages. "
     "Your purpose is to assist users in understanding and conveying meaning across "
     "languages, maintaining the original context and nuances.");
  d.add("ja-math",
     "あなたはAIアシスタントで、数学の問題を解くために役立つ、ステップバイステップのガイダンスを提供するように設計されています。");
  return d;
}

void DomainPrompts::add(std::string domain, std::string prompt) {
  if (domain.empty() || prompt.empty()) throw ConfigError("domain prompt needs a name and a text");
  prompts_.insert_or_assign(std::move(domain), std::move(prompt));
}

const std::string& DomainPrompts::lookup(std::string_view domain) const {
  auto it = prompts_.find(domain);
  if (it == prompts_.end()) {
    std::string known;
    for (const auto& [k, _] : prompts_) known += (known.empty() ? "" : ", ") + k;
    throw LookupError("unknown domain '" + std::string(domain) + "' (known: " + known + ")");
  }
  return it->second;
}

std::vector<std::string> DomainPrompts::domains() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : prompts_) out.push_back(k);
  return out;
}

std::string domain_system_prompt(std::string_view domain) {
  static const DomainPrompts prompts = DomainPrompts::builtin();
  return prompts.lookup(domain);
}

}  // namespace preq
