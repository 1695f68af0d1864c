#include "preq/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "preq/error.hpp"
#include "preq/text.hpp"

namespace preq {

using nlohmann::json;

namespace {

const std::set<std::string, std::less<>> kKnownTop = {"id",      "model",         "system_prompt", "turns",
                                                      "shard",   "annotations",   "schema_version",
                                                      "shard_index", "slot",      "created_at",    "flags"};
const std::set<std::string, std::less<>> kKnownAnn = {
    "input_length", "output_length", "task_category", "other_tags", "quality",   "difficulty",
    "intent",       "knowledge",     "reward",        "reward_base", "reward_diff", "min_neighbor_distance",
    "safety",       "judge_model",   "parse_ok",      "parse_failures"};

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

json rating_json(const OrdinalRating& r) { return r.rated() ? json(r.label) : json(nullptr); }

OrdinalRating rating_from(const json& j, const char* key, RatingScale scale) {
  if (!j.contains(key) || j[key].is_null()) return {};
  const auto label = j[key].get<std::string>();
  auto r = parse_rating(scale, label);
  if (!r) throw DataIntegrityError(std::string(key) + ": unknown label '" + label + "'");
  return *r;
}

json annotations_json(const AnnotationRecord& a, const json& extra) {
  json j = extra.is_object() ? extra : json::object();
  j["input_length"] = a.input_length;
  j["output_length"] = a.output_length;
  j["task_category"] = a.category.primary;
  j["other_tags"] = a.category.other_tags;
  j["quality"] = rating_json(a.quality);
  j["difficulty"] = rating_json(a.difficulty);
  j["intent"] = a.intent;
  j["knowledge"] = a.knowledge;
  j["reward"] = opt(a.reward);
  j["reward_base"] = opt(a.reward_base);
  j["reward_diff"] = opt(a.reward_diff);
  j["min_neighbor_distance"] = opt(a.min_neighbor_distance);
  j["safety"] = a.safety ? json(*a.safety) : json(nullptr);
  j["judge_model"] = a.judge_model;
  j["parse_ok"] = a.parse_ok;
  if (!a.parse_failures.empty()) j["parse_failures"] = a.parse_failures;
  return j;
}

AnnotationRecord annotations_from(const json& j, const std::string& id) {
  AnnotationRecord a;
  a.instance_id = id;
  a.input_length = j.value("input_length", std::int64_t{0});
  a.output_length = j.value("output_length", std::int64_t{0});
  a.category.primary = j.value("task_category", std::string{"Others"});
  if (j.contains("other_tags")) a.category.other_tags = j["other_tags"].get<std::vector<std::string>>();
  a.quality = rating_from(j, "quality", RatingScale::quality);
  a.difficulty = rating_from(j, "difficulty", RatingScale::difficulty);
  a.intent = j.value("intent", std::string{});
  a.knowledge = j.value("knowledge", std::string{});
  a.reward = opt_double(j, "reward");
  a.reward_base = opt_double(j, "reward_base");
  a.reward_diff = opt_double(j, "reward_diff");
  a.min_neighbor_distance = opt_double(j, "min_neighbor_distance");
  if (j.contains("safety") && !j["safety"].is_null()) a.safety = j["safety"].get<std::string>();
  a.judge_model = j.value("judge_model", std::string{});
  a.parse_ok = j.value("parse_ok", true);
  if (j.contains("parse_failures")) a.parse_failures = j["parse_failures"].get<std::vector<std::string>>();
  return a;
}

template <typename Fn>
ReadReport for_each_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  ReadReport rep;
  std::string line;
  while (std::getline(in, line)) {
    ++rep.lines;
    if (text::trim(line).empty()) continue;
    auto j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      rep.bad_lines.push_back({rep.lines, "not a JSON object"});
      continue;
    }
    try {
      fn(std::move(j));
    } catch (const DataIntegrityError& e) {
      if (std::string_view(e.what()).starts_with("schema_version")) throw;
      rep.bad_lines.push_back({rep.lines, e.what()});
    }
  }
  if (in.bad()) throw DataIntegrityError("read error on " + path.string());
  return rep;
}

}  // namespace

DatasetRecord make_record(Instance inst) {
  DatasetRecord r;
  r.instance = std::move(inst);
  return r;
}

json record_to_json(const DatasetRecord& r) {
  const Instance& in = r.instance;
  json j = r.extra.is_object() ? r.extra : json::object();
  j["id"] = in.id;
  j["model"] = in.model_id;
  j["system_prompt"] = in.system_prompt_used ? json(*in.system_prompt_used) : json(nullptr);
  json turns = json::array();
  for (const auto& t : in.turns) {
    turns.push_back({{"instruction", t.instruction}, {"response", t.response ? json(*t.response) : json(nullptr)}});
  }
  j["turns"] = std::move(turns);
  j["shard"] = {{"temperature", in.temperature}, {"top_p", in.top_p}};
  j["shard_index"] = in.shard_index;
  j["slot"] = in.slot;
  j["created_at"] = in.created_at;
  j["flags"] = in.flags;
  if (r.annotations) j["annotations"] = annotations_json(*r.annotations, r.extra_annotations);
  j["schema_version"] = r.schema_version;
  return j;
}

DatasetRecord record_from_json(const json& j) {
  if (!j.is_object()) throw DataIntegrityError("record is not a JSON object");
  const int version = j.value("schema_version", kSchemaVersion);
  if (version > kSchemaVersion) {
    throw DataIntegrityError("schema_version " + std::to_string(version) + " is newer than supported (" +
                             std::to_string(kSchemaVersion) + ")");
  }
  DatasetRecord r;
  r.schema_version = version;
  try {
    Instance& in = r.instance;
    in.id = j.at("id").get<std::string>();
    in.model_id = j.value("model", std::string{});
    if (j.contains("system_prompt") && !j["system_prompt"].is_null()) {
      in.system_prompt_used = j["system_prompt"].get<std::string>();
    }
    for (const auto& t : j.at("turns")) {
      Turn turn;
      turn.instruction = t.at("instruction").get<std::string>();
      if (t.contains("response") && !t["response"].is_null()) turn.response = t["response"].get<std::string>();
      in.turns.push_back(std::move(turn));
    }
    if (j.contains("shard")) {
      in.temperature = j["shard"].value("temperature", 1.0);
      in.top_p = j["shard"].value("top_p", 1.0);
    }
    in.shard_index = j.value("shard_index", 0);
    in.slot = j.value("slot", std::int64_t{0});
    in.created_at = j.value("created_at", std::string{});
    if (j.contains("flags")) in.flags = j["flags"].get<std::vector<std::string>>();
    in.validate();
    if (j.contains("annotations") && !j["annotations"].is_null()) {
      const json& a = j["annotations"];
      if (!a.is_object()) throw DataIntegrityError("annotations is not an object");
      r.annotations = annotations_from(a, in.id);
      for (auto it = a.begin(); it != a.end(); ++it) {
        if (!kKnownAnn.contains(it.key())) r.extra_annotations[it.key()] = it.value();
      }
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!kKnownTop.contains(it.key())) r.extra[it.key()] = it.value();
    }
  } catch (const json::exception& e) {
    throw DataIntegrityError(std::string("malformed record: ") + e.what());
  }
  return r;
}

ReadReport for_each_record(const std::filesystem::path& path, const std::function<void(DatasetRecord)>& fn) {
  return for_each_line(path, [&](json j) { fn(record_from_json(j)); });
}

Dataset read_dataset(const std::filesystem::path& path) {
  Dataset d;
  d.report = for_each_record(path, [&](DatasetRecord r) { d.records.push_back(std::move(r)); });
  return d;
}

DatasetWriter::DatasetWriter(const std::filesystem::path& path, LineSink::Mode mode) : sink_(path, mode) {}

void DatasetWriter::append(const DatasetRecord& r) { sink_.write_line(record_to_json(r).dump()); }

void DatasetWriter::append_json(const json& j) { sink_.write_line(j.dump()); }

void write_lines_atomic(const std::filesystem::path& path, std::span<const std::string> lines) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    LineSink sink(tmp, LineSink::Mode::truncate);
    for (const auto& l : lines) sink.write_line(l);
    sink.flush();
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataIntegrityError("cannot replace " + path.string() + ": " + ec.message());
}

void write_dataset(const std::filesystem::path& path, std::span<const DatasetRecord> records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(record_to_json(r).dump());
  write_lines_atomic(path, lines);
}

std::vector<PreferencePair> read_preferences(const std::filesystem::path& path, ReadReport* report) {
  std::vector<PreferencePair> out;
  auto rep = for_each_line(path, [&](json j) { out.push_back(pair_from_json(j)); });
  if (report) *report = std::move(rep);
  return out;
}

void write_preferences(const std::filesystem::path& path, std::span<const PreferencePair> pairs) {
  std::vector<std::string> lines;
  lines.reserve(pairs.size());
  for (const auto& p : pairs) lines.push_back(pair_to_json(p).dump());
  write_lines_atomic(path, lines);
}

Tokenizer whitespace_tokenizer() {
  return {"whitespace (approximate)", [](std::string_view s) { return text::count_whitespace_tokens(s); }, true};
}

json StatsReport::to_json() const {
  json j{{"records", records},
         {"turns", turns},
         {"turns_per_conversation", turns_per_conversation},
         {"tokens_per_turn", {{"mean", tokens_per_turn_mean}, {"std", tokens_per_turn_std}}},
         {"total_tokens", total_tokens},
         {"tokenizer", tokenizer},
         {"tokenizer_approximate", tokenizer_approximate},
         {"quality", quality_histogram},
         {"difficulty", difficulty_histogram},
         {"task_category", category_distribution},
         {"safety", safety_breakdown}};
  j["reward"] = reward ? json{{"count", reward->count}, {"min", reward->min}, {"mean", reward->mean}, {"max", reward->max}}
                       : json(nullptr);
  return j;
}

StatsReport compute_stats(std::span<const DatasetRecord> records, const Tokenizer& tokenizer) {
  StatsReport s;
  s.tokenizer = tokenizer.name;
  s.tokenizer_approximate = tokenizer.approximate;
  s.records = static_cast<std::int64_t>(records.size());
  // Integer accumulators keep the result independent of record order.
  __int128 sum = 0;
  __int128 sumsq = 0;
  std::vector<double> rewards;
  for (const auto& r : records) {
    for (const auto& t : r.instance.turns) {
      const auto n = static_cast<std::int64_t>(tokenizer.count(t.instruction) +
                                               (t.response ? tokenizer.count(*t.response) : 0));
      sum += n;
      sumsq += static_cast<__int128>(n) * n;
      ++s.turns;
    }
    const AnnotationRecord* a = r.annotations ? &*r.annotations : nullptr;
    auto bin = [&](const OrdinalRating& rating, std::string_view metric) {
      return a && rating.rated() && !a->metric_failed(metric) ? rating.label : std::string("unrated");
    };
    ++s.quality_histogram[bin(a ? a->quality : OrdinalRating{}, "quality")];
    ++s.difficulty_histogram[bin(a ? a->difficulty : OrdinalRating{}, "difficulty")];
    ++s.category_distribution[a && !a->metric_failed("task_category") ? a->category.primary : "unrated"];
    ++s.safety_breakdown[a && a->safety ? *a->safety : "unrated"];
    if (a && a->reward && std::isfinite(*a->reward)) rewards.push_back(*a->reward);
  }
  s.total_tokens = static_cast<std::int64_t>(sum);
  if (s.records > 0) s.turns_per_conversation = static_cast<double>(s.turns) / static_cast<double>(s.records);
  if (s.turns > 0) {
    const auto n = static_cast<__int128>(s.turns);
    s.tokens_per_turn_mean = static_cast<double>(sum) / static_cast<double>(s.turns);
    const __int128 num = n * sumsq - sum * sum;
    s.tokens_per_turn_std = std::sqrt(static_cast<double>(num) / (static_cast<double>(n) * static_cast<double>(n)));
  }
  if (!rewards.empty()) {
    std::sort(rewards.begin(), rewards.end());
    RewardSummary rs;
    rs.count = static_cast<std::int64_t>(rewards.size());
    rs.min = rewards.front();
    rs.max = rewards.back();
    double total = 0;
    for (double v : rewards) total += v;
    rs.mean = total / static_cast<double>(rewards.size());
    s.reward = rs;
  }
  return s;
}

double estimate_cost(double gpu_hours, std::int64_t instances, double hourly_rate) {
  if (instances < 1) throw ContractViolation("estimate_cost needs at least one instance");
  return hourly_rate * gpu_hours / (static_cast<double>(instances) / 1000.0);
}

}  // namespace preq
