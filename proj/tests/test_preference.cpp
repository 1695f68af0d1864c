#include <doctest.h>

#include "preq/error.hpp"
#include "preq/preference.hpp"
#include "support.hpp"

using namespace preq;

namespace {

Instance inst(const std::string& id, const std::string& q) {
  Instance i;
  i.id = id;
  i.turns = {{q, std::nullopt}};
  return i;
}

}  // namespace

TEST_SUITE("preference") {
  TEST_CASE("defaults and validation") {
    KSampleConfig c;
    CHECK(c.k == 5);
    CHECK(c.temperature == 0.8);
    CHECK_NOTHROW(c.validate());
    c.k = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.k = 5;
    for (double t : {0.0, 1.0, 1.5, -0.1}) {
      c.temperature = t;
      CHECK_THROWS_AS(c.validate(), ConfigError);
    }
  }

  TEST_CASE("k = 3 picks argmax as chosen and argmin as rejected") {
    auto backend = std::make_shared<testing::ScriptedRewards>(std::map<std::string, std::vector<double>>{{"q", {0.3, 0.8, 0.5}}});
    auto client = testing::client_for(backend);
    KSampleConfig c;
    c.k = 3;
    const std::vector<Instance> in{inst("i1", "q")};
    const auto res = build_ksample_pairs(in, c, *client, *client, TemplateRegistry::builtin());
    REQUIRE(res.pairs.size() == 1);
    const auto& p = res.pairs[0];
    CHECK(p.chosen == "q#1");
    CHECK(p.rejected == "q#0");
    CHECK(p.chosen_reward == 0.8);
    CHECK(p.rejected_reward == 0.3);
    CHECK(p.k == 3);
    CHECK(p.sampling_temperature == 0.8);
    CHECK(p.candidates.size() == 3);
    CHECK(p.id == "i1");
    CHECK(pair_from_json(pair_to_json(p)) == p);
  }

  TEST_CASE("ties go to the lowest index; all-equal rewards are skipped") {
    auto backend = std::make_shared<testing::ScriptedRewards>(std::map<std::string, std::vector<double>>{
        {"a", {0.5, 0.9, 0.1, 0.9, 0.1}}, {"b", {0.2, 0.2, 0.2, 0.2, 0.2}}, {"c", {1, 2, 3, 4, 5}}});
    backend->same_text("c");
    auto client = testing::client_for(backend);
    const std::vector<Instance> in{inst("1", "a"), inst("2", "b"), inst("3", "c")};
    const auto res = build_ksample_pairs(in, KSampleConfig{}, *client, *client, TemplateRegistry::builtin());
    REQUIRE(res.pairs.size() == 1);
    CHECK(res.pairs[0].chosen == "a#1");
    CHECK(res.pairs[0].rejected == "a#2");
    CHECK(res.report.emitted == 1);
    CHECK(res.report.skipped_ties == 1);
    CHECK(res.report.skipped_same_text == 1);
  }

  TEST_CASE("every emitted pair has chosen strictly above rejected") {
    auto mock = std::make_shared<MockBackend>();
    auto client = testing::client_for(mock);
    std::vector<Instance> in;
    for (int i = 0; i < 20; ++i) in.push_back(inst("id" + std::to_string(i), "Question number " + std::to_string(i) + "?"));
    KSampleConfig c;
    c.k = 4;
    const auto a = build_ksample_pairs(in, c, *client, *client, TemplateRegistry::builtin());
    for (const auto& p : a.pairs) {
      CHECK(p.chosen_reward > p.rejected_reward);
      double mx = -1e300, mn = 1e300;
      for (const auto& cand : p.candidates) {
        mx = std::max(mx, cand.reward);
        mn = std::min(mn, cand.reward);
      }
      CHECK(p.chosen_reward == mx);
      CHECK(p.rejected_reward == mn);
    }
    c.workers = 1;
    const auto b = build_ksample_pairs(in, c, *client, *client, TemplateRegistry::builtin());
    CHECK(a.pairs == b.pairs);
  }

  TEST_CASE("base contrast emits only on a strictly positive difference") {
    auto mock = std::make_shared<MockBackend>();
    mock->script_score("q", "good", 1.0);
    mock->script_score("q", "bad", -2.0);
    mock->script_score("q", "same", 1.0);
    auto client = testing::client_for(mock);
    const auto p = build_base_contrast_pair("q", "good", "bad", *client);
    REQUIRE(p);
    CHECK(p->chosen == "good");
    CHECK(p->rejected == "bad");
    CHECK(p->source == PairSource::base_contrast);
    CHECK(p->k == 2);
    CHECK_FALSE(build_base_contrast_pair("q", "bad", "good", *client));
    CHECK_FALSE(build_base_contrast_pair("q", "good", "same", *client));
    CHECK_THROWS_AS(build_base_contrast_pair("q", "good", "  ", *client), ContractViolation);
  }

  TEST_CASE("malformed pair json") {
    CHECK_THROWS_AS(pair_from_json(nlohmann::json{{"instruction", "x"}}), DataIntegrityError);
    auto j = pair_to_json(PreferencePair{});
    j["source"] = "elsewhere";
    CHECK_THROWS_AS(pair_from_json(j), DataIntegrityError);
  }
}
