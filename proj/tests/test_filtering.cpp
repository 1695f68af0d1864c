#include <doctest.h>

#include <algorithm>

#include "preq/error.hpp"
#include "preq/filtering.hpp"
#include "support.hpp"

using namespace preq;

namespace {

AnnotationRecord rec(std::string id, int quality, int difficulty, double dist, double reward,
                     std::int64_t out_len, std::optional<double> diff = std::nullopt) {
  AnnotationRecord r;
  r.instance_id = std::move(id);
  r.quality = rating_from_rank(RatingScale::quality, quality);
  r.difficulty = rating_from_rank(RatingScale::difficulty, difficulty);
  r.min_neighbor_distance = dist;
  r.reward = reward;
  r.reward_diff = diff;
  r.output_length = out_len;
  r.input_length = 10;
  return r;
}

}  // namespace

TEST_SUITE("filtering") {
  TEST_CASE("ordinal predicates compare ranks") {
    FilterConfig c = builtin_config("Pro-Filter");
    CHECK(evaluate_predicates(rec("a", 4, 1, 0.2, 0.0, 10), c));
    CHECK_FALSE(evaluate_predicates(rec("a", 2, 1, 0.2, 0.0, 10), c));
  }

  TEST_CASE("thresholds are strict") {
    FilterConfig c = builtin_config("Pro-Filter");
    CHECK_FALSE(evaluate_predicates(rec("a", 4, 3, 0.2, -13.0, 10), c));
    CHECK_FALSE(evaluate_predicates(rec("a", 4, 3, 0.2, -12.0, 10), c));
    CHECK(evaluate_predicates(rec("a", 4, 3, 0.2, std::nextafter(-12.0, 0.0), 10), c));
    CHECK_FALSE(evaluate_predicates(rec("a", 4, 3, 0.0, 0.0, 10), c));

    FilterConfig air = builtin_config("Air-Filter");
    CHECK_FALSE(evaluate_predicates(rec("a", 4, 3, 0.2, 0.0, 10, 0.0), air));
    CHECK(evaluate_predicates(rec("a", 4, 3, 0.2, 0.0, 10, 1e-9), air));
  }

  TEST_CASE("missing or failed metrics fail their predicate") {
    FilterConfig c = builtin_config("Air-Filter");
    auto r = rec("a", 5, 5, 0.5, 0.0, 10, 1.0);
    CHECK(evaluate_predicates(r, c));
    auto no_diff = r;
    no_diff.reward_diff.reset();
    CHECK(failing_predicates(no_diff, c) == std::vector<Predicate>{Predicate::reward_diff});
    auto failed = r;
    failed.mark_parse_failure("quality");
    CHECK(failing_predicates(failed, c) == std::vector<Predicate>{Predicate::quality});
    auto unrated = r;
    unrated.difficulty = {};
    CHECK(failing_predicates(unrated, c) == std::vector<Predicate>{Predicate::difficulty});
    auto no_dist = r;
    no_dist.min_neighbor_distance.reset();
    CHECK_FALSE(evaluate_predicates(no_dist, c));
  }

  TEST_CASE("the seven shipped configurations") {
    const auto all = builtin_configs();
    REQUIRE(all.size() == 7);
    std::map<std::string, FilterConfig> by;
    for (const auto& c : all) by[c.name] = c;
    CHECK(by.at("Air-Filter").target_count == 300'000);
    CHECK(by.at("Air-Filter").min_quality_rank == 4);
    CHECK(by.at("Air-Filter").min_difficulty_rank == 3);
    CHECK(by.at("Air-Filter").reward_diff_gt == 0.0);
    CHECK_FALSE(by.at("Air-Filter").reward_gt);
    CHECK(by.at("Pro-Filter").min_quality_rank == 3);
    CHECK(by.at("Pro-Filter").reward_gt == -12.0);
    CHECK(by.at("Pro-Filter2").min_difficulty_rank == 2);
    CHECK_FALSE(by.at("Pro-Filter3").min_quality_rank);
    CHECK(by.at("Pro-Filter4").reward_diff_gt == 0.0);
    CHECK(by.at("Pro-Filter5").target_count == 338'000);
    CHECK_FALSE(by.at("Pro-Filter5").select_longest);
    const auto& f6 = by.at("Pro-Filter6");
    CHECK(f6.target_count == 200'000);
    REQUIRE(f6.difficulty_mix.size() == 2);
    CHECK(f6.difficulty_mix[0] == DifficultyStratum{RankOp::eq, 2, 0.5});
    CHECK(f6.difficulty_mix[1] == DifficultyStratum{RankOp::gt, 2, 0.5});
    for (const auto& c : all) {
      CHECK(c.min_neighbor_distance_gt == 0.0);
      CHECK_NOTHROW(c.validate());
      CHECK(filter_config_from_json(filter_config_to_json(c)) == c);
    }
    CHECK(builtin_config("pro-filter6").name == "Pro-Filter6");
    CHECK_THROWS_AS(builtin_config("Mega-Filter"), LookupError);
  }

  TEST_CASE("six records, target two: the two longest of three survivors") {
    std::vector<AnnotationRecord> rs{
        rec("r1", 4, 3, 0.1, 0.0, 500),   // survivor
        rec("r2", 1, 3, 0.1, 0.0, 9000),  // quality too low
        rec("r3", 4, 3, 0.0, 0.0, 8000),  // repeated
        rec("r4", 4, 3, 0.1, 0.0, 700),   // survivor
        rec("r5", 4, 3, 0.1, -20.0, 900), // reward too low
        rec("r6", 3, 3, 0.1, 0.0, 600),   // survivor
    };
    FilterConfig c = builtin_config("Pro-Filter");
    c.target_count = 2;
    const auto res = apply_filter(rs, c);
    CHECK(res.selected == std::vector<std::size_t>{3, 5});
    CHECK(res.report.survivors_after_predicates == 3);
    CHECK(res.report.selected_count == 2);
    CHECK(res.report.rejected_by.at("quality") == 1);
    CHECK(res.report.rejected_by.at("min_neighbor_distance") == 1);
    CHECK(res.report.rejected_by.at("reward") == 1);
  }

  TEST_CASE("equal lengths break ties by ascending id") {
    std::vector<AnnotationRecord> rs{rec("c", 4, 3, 0.1, 0, 5), rec("a", 4, 3, 0.1, 0, 5), rec("b", 4, 3, 0.1, 0, 5)};
    FilterConfig c = builtin_config("Pro-Filter");
    c.target_count = 2;
    CHECK(apply_filter(rs, c).selected == std::vector<std::size_t>{1, 2});
  }

  TEST_CASE("saturation returns every survivor and notes the shortfall") {
    std::vector<AnnotationRecord> rs{rec("a", 4, 3, 0.1, 0, 5), rec("b", 1, 3, 0.1, 0, 5)};
    const auto res = apply_filter(rs, builtin_config("Pro-Filter"));
    CHECK(res.selected == std::vector<std::size_t>{0});
    CHECK(res.report.shortfall == 300'000 - 1);
  }

  TEST_CASE("random selection is seeded and reproducible") {
    std::vector<AnnotationRecord> rs;
    for (int i = 0; i < 200; ++i) rs.push_back(rec("r" + std::to_string(i), 5, 3, 0.1, 0, i));
    FilterConfig c = builtin_config("Pro-Filter5");
    c.target_count = 50;
    const auto a = apply_filter(rs, c);
    const auto b = apply_filter(rs, c);
    CHECK(a.selected == b.selected);
    CHECK(a.selected.size() == 50);
    CHECK(a.report.seed == c.seed);
    c.seed = 99;
    CHECK(apply_filter(rs, c).selected != a.selected);
  }

  TEST_CASE("largest remainder") {
    const std::vector<double> half{0.5, 0.5};
    CHECK(largest_remainder(7, half) == std::vector<std::int64_t>{4, 3});
    const std::vector<double> thirds{1.0 / 3, 1.0 / 3, 1.0 / 3};
    CHECK(largest_remainder(10, thirds) == std::vector<std::int64_t>{4, 3, 3});
    const std::vector<double> skew{0.25, 0.75};
    CHECK(largest_remainder(10, skew) == std::vector<std::int64_t>{3, 7});
  }

  TEST_CASE("difficulty mix selects per stratum, longest first") {
    std::vector<AnnotationRecord> rs;
    for (int i = 0; i < 20; ++i) rs.push_back(rec("e" + std::to_string(i), 3, 2, 0.1, 0, 100 + i));
    for (int i = 0; i < 20; ++i) rs.push_back(rec("h" + std::to_string(i), 3, 4, 0.1, 0, 1000 + i));
    for (int i = 0; i < 5; ++i) rs.push_back(rec("v" + std::to_string(i), 3, 1, 0.1, 0, 5000));
    FilterConfig c = builtin_config("Pro-Filter6");
    c.target_count = 9;
    const auto res = apply_filter(rs, c);
    CHECK(res.report.stratum_quota == std::vector<std::int64_t>{5, 4});
    CHECK(res.report.stratum_selected == std::vector<std::int64_t>{5, 4});
    CHECK(res.report.rejected_by.at("difficulty_mix") == 5);
    std::vector<std::string> got;
    for (auto i : res.selected) got.push_back(rs[i].instance_id);
    std::sort(got.begin(), got.end());
    CHECK(got == std::vector<std::string>{"e15", "e16", "e17", "e18", "e19", "h16", "h17", "h18", "h19"});
  }

  TEST_CASE("category whitelist and length ranges") {
    FilterConfig c;
    c.name = "custom";
    c.target_count = 10;
    c.category_whitelist = std::set<std::string>{"Math"};
    c.output_length_range = LengthRange{10, 20};
    auto r = rec("a", 3, 3, 0.1, 0, 15);
    r.category.primary = "Math";
    CHECK(evaluate_predicates(r, c));
    r.output_length = 21;
    CHECK_FALSE(evaluate_predicates(r, c));
    r.output_length = 10;
    r.category.primary = "Planning";
    CHECK_FALSE(evaluate_predicates(r, c));
  }

  TEST_CASE("config validation and files") {
    FilterConfig c;
    c.name = "bad";
    c.target_count = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.target_count = 1;
    c.difficulty_mix = {{RankOp::eq, 2, 0.5}, {RankOp::gt, 2, 0.4}};
    CHECK_THROWS_AS(c.validate(), ConfigError);

    testing::TempDir dir;
    testing::spit(dir / "f.json", R"({"name": "mine", "target_count": 5, "min_quality": "good",
      "difficulty_mix": [{"op": "==", "difficulty": "easy", "fraction": 0.5}, {"op": ">", "rank": 2, "fraction": 0.5}],
      "reward_gt": -3.5, "select_longest": true})");
    const auto f = load_filter_config(dir / "f.json");
    CHECK(f.min_quality_rank == 4);
    CHECK(f.reward_gt == -3.5);
    CHECK(f.difficulty_mix.size() == 2);
    testing::spit(dir / "g.json", R"({"name": "x", "target_count": 5, "min_quality": "superb"})");
    CHECK_THROWS_AS(load_filter_config(dir / "g.json"), ConfigError);
  }
}
