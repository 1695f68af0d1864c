#include "preq/filtering.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "preq/error.hpp"
#include "preq/parallel.hpp"

namespace preq {

namespace {

constexpr std::int64_t kK = 1000;

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view op_symbol(RankOp op) {
  switch (op) {
    case RankOp::eq:
      return "==";
    case RankOp::ge:
      return ">=";
    case RankOp::gt:
      return ">";
  }
  return "==";
}

RankOp parse_op(const std::string& s) {
  if (s == "==" || s == "=") return RankOp::eq;
  if (s == ">=") return RankOp::ge;
  if (s == ">") return RankOp::gt;
  throw ConfigError("unknown difficulty_mix op '" + s + "' (expected ==, >=, >)");
}

int rank_field(const nlohmann::json& v, RatingScale scale, std::string_view key) {
  if (v.is_number_integer()) {
    const int r = v.get<int>();
    if (r < 1 || r > 5) throw ConfigError(std::string(key) + " rank must be in 1..5");
    return r;
  }
  if (v.is_string()) {
    auto r = parse_rating(scale, v.get<std::string>());
    if (!r) throw ConfigError(std::string(key) + ": unknown label '" + v.get<std::string>() + "'");
    return r->rank;
  }
  throw ConfigError(std::string(key) + " must be a label or a rank");
}

nlohmann::json range_to_json(const LengthRange& r) {
  nlohmann::json j = nlohmann::json::object();
  if (r.min) j["min"] = *r.min;
  if (r.max) j["max"] = *r.max;
  return j;
}

LengthRange range_from_json(const nlohmann::json& j) {
  LengthRange r;
  if (j.contains("min")) r.min = j.at("min").get<std::int64_t>();
  if (j.contains("max")) r.max = j.at("max").get<std::int64_t>();
  return r;
}

// Uniform integer in [0, n) from raw 64-bit draws; fixed across standard libraries.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t threshold = (0 - n) % n;
  while (true) {
    const std::uint64_t r = rng();
    if (r >= threshold) return r % n;
  }
}

std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::int64_t quota, bool longest,
                              std::uint64_t seed, std::span<const AnnotationRecord> records) {
  const auto k = static_cast<std::size_t>(std::max<std::int64_t>(quota, 0));
  if (pool.size() <= k) return pool;
  if (longest) {
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k), pool.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (records[a].output_length != records[b].output_length) {
                          return records[a].output_length > records[b].output_length;
                        }
                        if (records[a].instance_id != records[b].instance_id) {
                          return records[a].instance_id < records[b].instance_id;
                        }
                        return a < b;
                      });
  } else {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(bounded(rng, pool.size() - i));
      std::swap(pool[i], pool[j]);
    }
  }
  pool.resize(k);
  return pool;
}

}  // namespace

bool DifficultyStratum::matches(int r) const {
  if (r < 1) return false;
  switch (op) {
    case RankOp::eq:
      return r == rank;
    case RankOp::ge:
      return r >= rank;
    case RankOp::gt:
      return r > rank;
  }
  return false;
}

bool LengthRange::contains(std::int64_t v) const {
  return (!min || v >= *min) && (!max || v <= *max);
}

void FilterConfig::validate() const {
  if (name.empty()) throw ConfigError("filter config needs a name");
  if (target_count < 1) throw ConfigError("filter '" + name + "': target_count must be >= 1");
  auto rank_ok = [](const std::optional<int>& r) { return !r || (*r >= 1 && *r <= 5); };
  if (!rank_ok(min_quality_rank) || !rank_ok(min_difficulty_rank)) {
    throw ConfigError("filter '" + name + "': ranks must be in 1..5");
  }
  if (!difficulty_mix.empty()) {
    double sum = 0;
    for (const auto& s : difficulty_mix) {
      if (!(s.fraction > 0) || s.fraction > 1) throw ConfigError("filter '" + name + "': mix fractions must be in (0, 1]");
      if (s.rank < 1 || s.rank > 5) throw ConfigError("filter '" + name + "': mix ranks must be in 1..5");
      sum += s.fraction;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("filter '" + name + "': mix fractions must sum to 1");
  }
  for (const auto* r : {&input_length_range, &output_length_range}) {
    if (*r && (*r)->min && (*r)->max && *(*r)->min > *(*r)->max) {
      throw ConfigError("filter '" + name + "': empty length range");
    }
  }
}

nlohmann::json filter_config_to_json(const FilterConfig& c) {
  nlohmann::json j{{"name", c.name}, {"target_count", c.target_count}, {"select_longest", c.select_longest}};
  if (c.min_quality_rank) j["min_quality"] = rating_from_rank(RatingScale::quality, *c.min_quality_rank).label;
  if (c.min_difficulty_rank) {
    j["min_difficulty"] = rating_from_rank(RatingScale::difficulty, *c.min_difficulty_rank).label;
  }
  if (!c.difficulty_mix.empty()) {
    auto& mix = j["difficulty_mix"] = nlohmann::json::array();
    for (const auto& s : c.difficulty_mix) {
      mix.push_back({{"op", op_symbol(s.op)},
                     {"difficulty", rating_from_rank(RatingScale::difficulty, s.rank).label},
                     {"fraction", s.fraction}});
    }
  }
  if (c.min_neighbor_distance_gt) j["min_neighbor_distance_gt"] = *c.min_neighbor_distance_gt;
  if (c.reward_gt) j["reward_gt"] = *c.reward_gt;
  if (c.reward_diff_gt) j["reward_diff_gt"] = *c.reward_diff_gt;
  if (c.category_whitelist) j["category_whitelist"] = *c.category_whitelist;
  if (c.input_length_range) j["input_length_range"] = range_to_json(*c.input_length_range);
  if (c.output_length_range) j["output_length_range"] = range_to_json(*c.output_length_range);
  if (!c.select_longest) j["seed"] = c.seed;
  return j;
}

FilterConfig filter_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("filter config must be a JSON object");
  FilterConfig c;
  try {
    c.name = j.value("name", std::string{});
    c.target_count = j.at("target_count").get<std::int64_t>();
    c.select_longest = j.value("select_longest", false);
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("min_quality")) c.min_quality_rank = rank_field(j["min_quality"], RatingScale::quality, "min_quality");
    if (j.contains("min_difficulty")) {
      c.min_difficulty_rank = rank_field(j["min_difficulty"], RatingScale::difficulty, "min_difficulty");
    }
    if (j.contains("difficulty_mix")) {
      for (const auto& s : j.at("difficulty_mix")) {
        DifficultyStratum st;
        st.op = parse_op(s.value("op", std::string{"=="}));
        st.rank = rank_field(s.contains("difficulty") ? s.at("difficulty") : s.at("rank"), RatingScale::difficulty,
                             "difficulty_mix");
        st.fraction = s.at("fraction").get<double>();
        c.difficulty_mix.push_back(st);
      }
    }
    if (j.contains("min_neighbor_distance_gt")) c.min_neighbor_distance_gt = j["min_neighbor_distance_gt"].get<double>();
    if (j.contains("reward_gt")) c.reward_gt = j["reward_gt"].get<double>();
    if (j.contains("reward_diff_gt")) c.reward_diff_gt = j["reward_diff_gt"].get<double>();
    if (j.contains("category_whitelist")) {
      c.category_whitelist = j["category_whitelist"].get<std::set<std::string>>();
      for (const auto& cat : *c.category_whitelist) {
        if (!is_task_category(cat)) throw ConfigError("unknown task category '" + cat + "' in whitelist");
      }
    }
    if (j.contains("input_length_range")) c.input_length_range = range_from_json(j["input_length_range"]);
    if (j.contains("output_length_range")) c.output_length_range = range_from_json(j["output_length_range"]);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad filter config: ") + e.what());
  }
  c.validate();
  return c;
}

FilterConfig load_filter_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read filter config " + path.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("filter config " + path.string() + " is not valid JSON");
  return filter_config_from_json(j);
}

std::vector<FilterConfig> builtin_configs() {
  constexpr int kEasy = 2, kMedium = 3, kAverage = 3, kGood = 4;
  auto base = [](std::string name, std::int64_t target) {
    FilterConfig c;
    c.name = std::move(name);
    c.target_count = target;
    c.min_neighbor_distance_gt = 0.0;
    c.select_longest = true;
    return c;
  };
  std::vector<FilterConfig> out;

  auto air = base("Air-Filter", 300 * kK);
  air.min_quality_rank = kGood;
  air.min_difficulty_rank = kMedium;
  air.reward_diff_gt = kRewardDiffThreshold;
  out.push_back(air);

  auto pro = base("Pro-Filter", 300 * kK);
  pro.min_quality_rank = kAverage;
  pro.reward_gt = kRewardThreshold;
  out.push_back(pro);

  auto f2 = base("Pro-Filter2", 300 * kK);
  f2.min_quality_rank = kGood;
  f2.min_difficulty_rank = kEasy;
  f2.reward_gt = kRewardThreshold;
  out.push_back(f2);

  auto f3 = base("Pro-Filter3", 300 * kK);
  f3.reward_gt = kRewardThreshold;
  out.push_back(f3);

  auto f4 = base("Pro-Filter4", 300 * kK);
  f4.min_quality_rank = kGood;
  f4.min_difficulty_rank = kEasy;
  f4.reward_diff_gt = kRewardDiffThreshold;
  out.push_back(f4);

  auto f5 = base("Pro-Filter5", 338 * kK);
  f5.min_quality_rank = kGood;
  f5.min_difficulty_rank = kEasy;
  f5.reward_gt = kRewardThreshold;
  f5.select_longest = false;
  out.push_back(f5);

  auto f6 = base("Pro-Filter6", 200 * kK);
  f6.difficulty_mix = {{RankOp::eq, kEasy, 0.5}, {RankOp::gt, kEasy, 0.5}};
  f6.reward_gt = kRewardThreshold;
  out.push_back(f6);
  return out;
}

FilterConfig builtin_config(std::string_view name) {
  const std::string want = lower(name);
  std::vector<std::string> names;
  for (auto& c : builtin_configs()) {
    if (lower(c.name) == want) return c;
    names.push_back(c.name);
  }
  std::string msg = "unknown filter config '" + std::string(name) + "' (built-ins:";
  for (const auto& n : names) msg += " " + n;
  throw LookupError(msg + ")");
}

std::string_view to_string(Predicate p) {
  switch (p) {
    case Predicate::input_length:
      return "input_length";
    case Predicate::output_length:
      return "output_length";
    case Predicate::task_category:
      return "task_category";
    case Predicate::quality:
      return "quality";
    case Predicate::difficulty:
      return "difficulty";
    case Predicate::difficulty_mix:
      return "difficulty_mix";
    case Predicate::min_neighbor_distance:
      return "min_neighbor_distance";
    case Predicate::reward:
      return "reward";
    case Predicate::reward_diff:
      return "reward_diff";
  }
  return "?";
}

std::vector<Predicate> failing_predicates(const AnnotationRecord& r, const FilterConfig& c) {
  std::vector<Predicate> out;
  if (c.input_length_range && !c.input_length_range->contains(r.input_length)) out.push_back(Predicate::input_length);
  if (c.output_length_range && !c.output_length_range->contains(r.output_length)) {
    out.push_back(Predicate::output_length);
  }
  if (c.category_whitelist &&
      (r.metric_failed("task_category") || !c.category_whitelist->contains(r.category.primary))) {
    out.push_back(Predicate::task_category);
  }
  if (c.min_quality_rank &&
      (r.metric_failed("quality") || !r.quality.rated() || r.quality.rank < *c.min_quality_rank)) {
    out.push_back(Predicate::quality);
  }
  const bool difficulty_ok = !r.metric_failed("difficulty") && r.difficulty.rated();
  if (c.min_difficulty_rank && (!difficulty_ok || r.difficulty.rank < *c.min_difficulty_rank)) {
    out.push_back(Predicate::difficulty);
  }
  if (!c.difficulty_mix.empty()) {
    const bool any = difficulty_ok && std::any_of(c.difficulty_mix.begin(), c.difficulty_mix.end(),
                                                  [&](const auto& s) { return s.matches(r.difficulty.rank); });
    if (!any) out.push_back(Predicate::difficulty_mix);
  }
  auto gt = [](const std::optional<double>& v, double t) { return v && std::isfinite(*v) && *v > t; };
  if (c.min_neighbor_distance_gt && !gt(r.min_neighbor_distance, *c.min_neighbor_distance_gt)) {
    out.push_back(Predicate::min_neighbor_distance);
  }
  if (c.reward_gt && !gt(r.reward, *c.reward_gt)) out.push_back(Predicate::reward);
  if (c.reward_diff_gt && !gt(r.reward_diff, *c.reward_diff_gt)) out.push_back(Predicate::reward_diff);
  return out;
}

bool evaluate_predicates(const AnnotationRecord& r, const FilterConfig& c) { return failing_predicates(r, c).empty(); }

std::vector<std::int64_t> largest_remainder(std::int64_t total, std::span<const double> fractions) {
  std::vector<std::int64_t> out(fractions.size(), 0);
  std::vector<double> rem(fractions.size(), 0);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(total);
    out[i] = static_cast<std::int64_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::vector<std::size_t> order(fractions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < total && !order.empty(); k = (k + 1) % order.size()) {
    ++out[order[k]];
    ++assigned;
  }
  return out;
}

nlohmann::json FilterReport::to_json() const {
  nlohmann::json j{{"config", config_name},
                   {"input_count", input_count},
                   {"survivors_after_predicates", survivors_after_predicates},
                   {"selected_count", selected_count},
                   {"target_count", target_count},
                   {"shortfall", shortfall},
                   {"rejected_by", rejected_by}};
  if (!stratum_quota.empty()) {
    j["stratum_quota"] = stratum_quota;
    j["stratum_selected"] = stratum_selected;
  }
  if (seed) j["seed"] = *seed;
  return j;
}

FilterResult apply_filter(std::span<const AnnotationRecord> records, const FilterConfig& cfg, int workers) {
  cfg.validate();
  FilterResult res;
  auto& rep = res.report;
  rep.config_name = cfg.name;
  rep.input_count = static_cast<std::int64_t>(records.size());
  rep.target_count = cfg.target_count;
  if (!cfg.select_longest) rep.seed = cfg.seed;

  std::vector<std::vector<Predicate>> failed(records.size());
  parallel_for(records.size(), workers, [&](std::size_t i) { failed[i] = failing_predicates(records[i], cfg); });

  const std::size_t strata = std::max<std::size_t>(cfg.difficulty_mix.size(), 1);
  std::vector<std::vector<std::size_t>> pools(strata);
  for (std::size_t i = 0; i < records.size(); ++i) {
    for (Predicate p : failed[i]) ++rep.rejected_by[std::string(to_string(p))];
    if (!failed[i].empty()) continue;
    ++rep.survivors_after_predicates;
    std::size_t s = 0;
    if (!cfg.difficulty_mix.empty()) {
      while (!cfg.difficulty_mix[s].matches(records[i].difficulty.rank)) ++s;
    }
    pools[s].push_back(i);
  }

  std::vector<std::int64_t> quota{cfg.target_count};
  if (!cfg.difficulty_mix.empty()) {
    std::vector<double> fr;
    for (const auto& s : cfg.difficulty_mix) fr.push_back(s.fraction);
    quota = largest_remainder(cfg.target_count, fr);
    rep.stratum_quota = quota;
  }
  for (std::size_t s = 0; s < strata; ++s) {
    auto got = pick(std::move(pools[s]), quota[s], cfg.select_longest, cfg.seed + s, records);
    if (!cfg.difficulty_mix.empty()) rep.stratum_selected.push_back(static_cast<std::int64_t>(got.size()));
    res.selected.insert(res.selected.end(), got.begin(), got.end());
  }
  std::sort(res.selected.begin(), res.selected.end());
  rep.selected_count = static_cast<std::int64_t>(res.selected.size());
  rep.shortfall = std::max<std::int64_t>(0, cfg.target_count - rep.selected_count);
  return res;
}

}  // namespace preq
