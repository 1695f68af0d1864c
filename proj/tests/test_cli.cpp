#include <doctest.h>

#include <iostream>
#include <sstream>

#include "preq/cli.hpp"
#include "preq/datastore.hpp"
#include "support.hpp"

namespace {

// Runs the CLI in-process with stdout captured.
struct Invocation {
  int code = -1;
  std::string out;
};

Invocation invoke(const std::vector<std::string>& args) {
  std::ostringstream captured;
  auto* old = std::cout.rdbuf(captured.rdbuf());
  Invocation r;
  try {
    r.code = preq::cli::run(args);
  } catch (...) {
    std::cout.rdbuf(old);
    throw;
  }
  std::cout.rdbuf(old);
  r.out = captured.str();
  return r;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("exit codes by error class") {
    testing::TempDir dir;
    CHECK(invoke({}).code == 1);
    CHECK(invoke({"no-such-command"}).code == 1);
    CHECK(invoke({"gen"}).code == 1);
    CHECK(invoke({"--help"}).code == 0);
    CHECK(invoke({"filter", "--in", (dir / "missing.jsonl").string(), "--out", (dir / "o.jsonl").string(),
                  "--config", "Pro-Filter"})
              .code == 2);
    testing::spit(dir / "a.jsonl", "");
    CHECK(invoke({"filter", "--in", (dir / "a.jsonl").string(), "--out", (dir / "o.jsonl").string(), "--config",
                  "No-Such-Filter"})
              .code == 2);
    testing::spit(dir / "new.jsonl", R"({"id": "x", "turns": [{"instruction": "q"}], "schema_version": 99})" "\n");
    CHECK(invoke({"stats", "--in", (dir / "new.jsonl").string()}).code == 4);
  }

  TEST_CASE("credentials are not accepted as flags") {
    testing::TempDir dir;
    CHECK(invoke({"gen", "--mock", "--count", "2", "--out", (dir / "g.jsonl").string(), "--api-key", "secret"}).code == 1);
  }

  TEST_CASE("help footer names the environment variables and exit codes") {
    std::ostringstream captured;
    auto* old = std::cout.rdbuf(captured.rdbuf());
    preq::cli::run({"--help"});
    std::cout.rdbuf(old);
    const auto text = captured.str();
    CHECK(text.find("PREQ_ENDPOINT") != std::string::npos);
    CHECK(text.find("PREQ_API_KEY") != std::string::npos);
    CHECK(text.find("130 interrupted") != std::string::npos);
  }

  TEST_CASE("gen reports accepted plus shortfall equal to requested") {
    testing::TempDir dir;
    const auto out = (dir / "g.jsonl").string();
    const auto r = invoke({"gen", "--mock", "--count", "40", "--out", out, "--run-id", "acc", "--mock-empty-rate", "0.2"});
    REQUIRE(r.code == 0);
    const auto report = nlohmann::json::parse(r.out);
    std::int64_t accepted = 0, shortfall = 0;
    for (const auto& s : report["shards"]) {
      accepted += s["accepted"].get<std::int64_t>();
      shortfall += s["shortfall"].get<std::int64_t>();
    }
    CHECK(accepted + shortfall == 40);
    const auto ds = preq::read_dataset(out);
    CHECK(static_cast<std::int64_t>(ds.records.size()) == accepted);
    const auto manifest = preq::cli::RunManifest::load(preq::cli::manifest_path_for(out));
    REQUIRE(manifest);
    CHECK(manifest->run_id == "acc");
    CHECK(manifest->stages.back().stage == "gen");

    // A second run over the same output is a no-op resume.
    const auto again = invoke({"gen", "--mock", "--count", "40", "--out", out, "--run-id", "acc", "--mock-empty-rate", "0.2"});
    CHECK(again.code == 0);
    CHECK(preq::read_dataset(out).records == ds.records);
    // A different run id over the same file is refused.
    CHECK(invoke({"gen", "--mock", "--count", "40", "--out", out, "--run-id", "other"}).code == 2);
  }

  TEST_CASE("separate stage invocations match the pipeline subcommand") {
    testing::TempDir dir;
    const auto p = [&](const char* n) { return (dir / n).string(); };
    const std::vector<std::string> common{"--mock", "--workers", "3"};
    auto with = [&](std::vector<std::string> args) {
      args.insert(args.end(), common.begin(), common.end());
      return invoke(args).code;
    };
    REQUIRE(with({"gen", "--count", "30", "--run-id", "comp", "--out", p("raw.jsonl")}) == 0);
    REQUIRE(with({"respond", "--in", p("raw.jsonl"), "--out", p("responded.jsonl")}) == 0);
    REQUIRE(with({"annotate", "--in", p("responded.jsonl"), "--out", p("annotated.jsonl"), "--metrics",
                  "judge,reward,guard"}) == 0);
    REQUIRE(with({"embed-dedup", "--in", p("annotated.jsonl"), "--out", p("dedup.jsonl")}) == 0);
    REQUIRE(with({"filter", "--in", p("dedup.jsonl"), "--out", p("filtered.jsonl"), "--config", "Pro-Filter",
                  "--target", "10"}) == 0);

    std::filesystem::create_directories(dir / "pipe");
    REQUIRE(with({"pipeline", "--count", "30", "--run-id", "comp", "--dir", p("pipe"), "--config", "Pro-Filter",
                  "--target", "10"}) == 0);
    for (const char* name : {"raw.jsonl", "responded.jsonl", "annotated.jsonl", "dedup.jsonl", "filtered.jsonl"}) {
      CAPTURE(name);
      const auto a = testing::slurp(dir / name);
      CHECK_FALSE(a.empty());
      CHECK(a == testing::slurp(dir / "pipe" / name));
    }
  }

  TEST_CASE("dpo and stats and cost run end to end") {
    testing::TempDir dir;
    const auto p = [&](const char* n) { return (dir / n).string(); };
    REQUIRE(invoke({"gen", "--mock", "--count", "8", "--out", p("raw.jsonl")}).code == 0);
    REQUIRE(invoke({"dpo", "--mock", "--in", p("raw.jsonl"), "--out", p("pairs.jsonl"), "--k", "3"}).code == 0);
    for (const auto& pr : preq::read_preferences(p("pairs.jsonl"))) CHECK(pr.chosen_reward > pr.rejected_reward);
    const auto s = invoke({"stats", "--in", p("raw.jsonl")});
    REQUIRE(s.code == 0);
    CHECK(nlohmann::json::parse(s.out)["records"] == 8);
    const auto c = invoke({"cost", "--gpu-hours", "51.55", "--instances", "3000000", "--rate", "6.98"});
    REQUIRE(c.code == 0);
    CHECK(nlohmann::json::parse(c.out)["cost_per_1k"].get<double>() == doctest::Approx(0.12).epsilon(0.1));
  }
}
