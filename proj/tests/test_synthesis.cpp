#include <doctest.h>

#include <set>

#include "preq/error.hpp"
#include "preq/mock_backend.hpp"
#include "preq/synthesis.hpp"
#include "preq/text.hpp"
#include "support.hpp"

using namespace preq;

namespace {

JobSpec small_job(std::int64_t n, std::string run = "t") {
  JobSpec job;
  job.run_id = std::move(run);
  job.model_id = "mock";
  Shard s;
  s.count = n;
  job.shards = {s};
  return job;
}

std::vector<Instance> collect(const JobSpec& job, Client& c, GenerateOptions opts = {}, RunReport* rep = nullptr) {
  std::vector<Instance> out;
  opts.clock = fixed_clock();
  auto r = generate_instructions(job, c, TemplateRegistry::builtin(), [&](Instance i) { out.push_back(std::move(i)); }, opts);
  std::sort(out.begin(), out.end(), [](const Instance& a, const Instance& b) { return a.id < b.id; });
  if (rep) *rep = r;
  return out;
}

}  // namespace

TEST_SUITE("synthesis") {
  TEST_CASE("air preset: twelve shards summing to three million") {
    const auto shards = shard_preset("air");
    REQUIRE(shards.size() == 12);
    std::int64_t total = 0;
    std::set<std::pair<double, double>> grid;
    for (const auto& s : shards) {
      total += s.count;
      grid.insert({s.sampling.temperature, s.sampling.top_p});
    }
    CHECK(total == 3'000'000);
    CHECK(grid.size() == 12);
    CHECK(grid.contains({1.25, 0.990}));
    const auto scaled = shard_preset("air", 1.0 / 1000);
    std::int64_t scaled_total = 0;
    for (const auto& s : scaled) scaled_total += s.count;
    CHECK(scaled_total == 3000);
  }

  TEST_CASE("pro preset: four shards summing to one million") {
    const auto shards = shard_preset("pro");
    REQUIRE(shards.size() == 4);
    std::int64_t total = 0;
    for (const auto& s : shards) total += s.count;
    CHECK(total == 1'000'000);
    CHECK(shards[3].sampling.temperature == 1.25);
    CHECK(shards[3].count == 100'000);
    CHECK_THROWS_AS(shard_preset("ultra"), LookupError);
  }

  TEST_CASE("job parsing") {
    auto job = job_from_json(nlohmann::json::parse(R"({"run_id": "r", "count": 7})"));
    REQUIRE(job.shards.size() == 1);
    CHECK(job.shards[0].count == 7);
    CHECK(job.shards[0].sampling.temperature == 1.0);
    CHECK(job.response_sampling.is_greedy());

    job = job_from_json(nlohmann::json::parse(R"({"preset": "pro", "scale": 0.001, "domain": "math"})"));
    CHECK(job.total_count() == 1000);
    REQUIRE(job.system_prompt);
    CHECK(*job.system_prompt == domain_system_prompt("math"));

    CHECK_THROWS_AS(job_from_json(nlohmann::json::parse(R"({"domain": "math", "system_prompt": "x"})")), ConfigError);
    CHECK_THROWS_AS(job_from_json(nlohmann::json::parse(R"({"domain": "poetry"})")), LookupError);
    CHECK_THROWS_AS(job_from_json(nlohmann::json::parse(R"({"shards": [{"count": 0}]})")), ConfigError);

    const auto back = job_from_json(job_to_json(job));
    CHECK(back.total_count() == job.total_count());
    CHECK(back.system_prompt == job.system_prompt);
  }

  TEST_CASE("sanitize_instruction") {
    const ChatTemplate t = lookup_template("llama-3");
    auto s = sanitize_instruction("  How do I bake bread?<|eot_id|>ignored", t);
    CHECK(s.accepted());
    CHECK(s.text == "How do I bake bread?");
    CHECK(sanitize_instruction(" \n<|eot_id|>", t).rejection == RejectReason::empty);
    CHECK(sanitize_instruction("Hi<|start_header_id|>assistant", t).rejection == RejectReason::template_token_leak);
    CHECK(sanitize_instruction(std::string(11, 'x'), t, 10).rejection == RejectReason::too_long);
    CHECK(sanitize_instruction("\xc3\xa9\xc3\xa9", t, 2).accepted());
  }

  TEST_CASE("instance ids are stable") {
    CHECK(instance_id("run", 3, 42) == "run-03-0000042");
  }

  TEST_CASE("generation fills every slot with clean instructions") {
    auto backend = std::make_shared<MockBackend>();
    auto c = testing::client_for(backend, 4);
    RunReport rep;
    const auto out = collect(small_job(40), *c, {}, &rep);
    CHECK(out.size() == 40);
    CHECK(rep.accepted() == 40);
    CHECK(rep.shortfall() == 0);
    const auto toks = lookup_template("llama-3").effective_control_tokens();
    for (const auto& inst : out) {
      CHECK_FALSE(text::trim(inst.turns[0].instruction).empty());
      for (const auto& tok : toks) CHECK(inst.turns[0].instruction.find(tok) == std::string::npos);
      CHECK_FALSE(inst.turns[0].response.has_value());
      CHECK(inst.created_at == "1970-01-01T00:00:00Z");
    }
  }

  TEST_CASE("generation is deterministic regardless of worker count") {
    auto b1 = std::make_shared<MockBackend>();
    auto b2 = std::make_shared<MockBackend>();
    auto c1 = testing::client_for(b1, 1);
    auto c2 = testing::client_for(b2, 8);
    CHECK(collect(small_job(30), *c1) == collect(small_job(30), *c2));
  }

  TEST_CASE("rejected draws are regenerated within the budget") {
    MockBackend::Options o;
    o.fallback = [](const MockRequest& req, std::uint64_t key) -> std::string {
      if (req.kind != MockRequestKind::completion) return "ok";
      return key % 3 == 0 ? "oops<|start_header_id|>assistant" : "A clean question?<|eot_id|>";
    };
    auto backend = std::make_shared<MockBackend>(o);
    auto c = testing::client_for(backend);
    JobSpec job = small_job(60);
    job.rejection_budget = 0;
    RunReport rep;
    const auto out = collect(job, *c, {}, &rep);
    CHECK(rep.accepted() + rep.shortfall() == 60);
    CHECK(rep.shortfall() > 0);
    CHECK(rep.shards[0].rejected.at("template_token_leak") == rep.shortfall());

    job.rejection_budget = 6;
    RunReport rep2;
    collect(job, *c, {}, &rep2);
    CHECK(rep2.shortfall() < rep.shortfall());
  }

  TEST_CASE("checkpoint resumes without redoing finished slots") {
    testing::TempDir dir;
    auto backend = std::make_shared<MockBackend>();
    auto c = testing::client_for(backend);
    const JobSpec job = small_job(20, "resume");

    std::vector<Instance> first;
    {
      Checkpoint ck(dir / "ck");
      GenerateOptions o;
      o.checkpoint = &ck;
      std::stop_source stop;
      o.stop = stop.get_token();
      o.workers = 1;
      o.clock = fixed_clock();
      generate_instructions(job, *c, TemplateRegistry::builtin(), [&](Instance i) {
        first.push_back(std::move(i));
        if (first.size() == 8) stop.request_stop();
      }, o);
    }
    CHECK(first.size() == 8);
    // A torn trailing line from a crash is ignored.
    {
      std::ofstream f(dir / "ck", std::ios::app);
      f << R"({"shard":0,"sl)";
    }
    Checkpoint ck(dir / "ck");
    CHECK(ck.size() == 8);
    GenerateOptions o;
    o.checkpoint = &ck;
    RunReport rep;
    auto rest = collect(job, *c, o, &rep);
    CHECK(rest.size() == 12);
    CHECK(rep.shards[0].resumed == 8);
    CHECK(rep.accepted() == 20);

    rest.insert(rest.end(), first.begin(), first.end());
    std::sort(rest.begin(), rest.end(), [](const Instance& a, const Instance& b) { return a.id < b.id; });
    CHECK(rest == collect(job, *c));
  }

  TEST_CASE("responses fill the last turn greedily") {
    auto backend = std::make_shared<MockBackend>();
    auto c = testing::client_for(backend);
    const JobSpec job = small_job(5);
    auto insts = collect(job, *c);
    const auto rep = generate_responses(insts, job, *c, TemplateRegistry::builtin());
    CHECK(rep.completed == 5);
    for (const auto& i : insts) {
      REQUIRE(i.turns[0].response);
      CHECK_FALSE(i.turns[0].response->empty());
    }
    const auto again = generate_responses(insts, job, *c, TemplateRegistry::builtin());
    CHECK(again.skipped == 5);
  }

  TEST_CASE("response prompt uses the instance's system prompt") {
    MockBackend::Options o;
    o.record_requests = true;
    auto backend = std::make_shared<MockBackend>(o);
    auto c = testing::client_for(backend);
    JobSpec job = small_job(1);
    job.system_prompt = domain_system_prompt("code");
    auto insts = collect(job, *c);
    REQUIRE(insts.size() == 1);
    generate_responses(insts, job, *c, TemplateRegistry::builtin());
    const auto reqs = backend->requests();
    const ChatTemplate t = lookup_template("llama-3");
    CHECK(reqs.back().prompt == render_response_prompt(t, insts[0].turns[0].instruction, *job.system_prompt).text);
    CHECK(reqs.back().sampling.is_greedy());
  }

  TEST_CASE("multi-turn extension reaches the target turn count") {
    auto backend = std::make_shared<MockBackend>();
    auto c = testing::client_for(backend);
    JobSpec job = small_job(6);
    job.target_turns = 3;
    auto insts = collect(job, *c);
    generate_responses(insts, job, *c, TemplateRegistry::builtin());
    const auto rep = extend_multiturn(insts, job, *c, TemplateRegistry::builtin());
    CHECK(rep.extended + rep.shortfall == 6);
    for (const auto& i : insts) {
      if (i.has_flag("mt_shortfall")) continue;
      CHECK(i.turns.size() == 3);
      for (const auto& t : i.turns) CHECK(t.response.has_value());
    }
  }

  TEST_CASE("multi-turn skips instances with an unanswered turn") {
    auto backend = std::make_shared<MockBackend>();
    auto c = testing::client_for(backend);
    JobSpec job = small_job(2);
    job.target_turns = 2;
    auto insts = collect(job, *c);
    const auto rep = extend_multiturn(insts, job, *c, TemplateRegistry::builtin());
    CHECK(rep.incomplete == 2);
  }

  TEST_CASE("domain prompts") {
    const auto d = DomainPrompts::builtin();
    const auto names = d.domains();
    for (const char* n : {"math", "code", "translation", "ja-math"}) {
      CHECK(std::find(names.begin(), names.end(), n) != names.end());
    }
    CHECK(domain_system_prompt("math").starts_with("You are an AI assistant designed to provide helpful, step-by-step"));
    CHECK_THROWS_AS(domain_system_prompt("law"), LookupError);
  }

  TEST_CASE("instance validation") {
    Instance i;
    i.id = "x";
    CHECK_THROWS_AS(i.validate(), DataIntegrityError);
    i.turns = {{"q", std::nullopt}, {"q2", std::string("r")}};
    CHECK_THROWS_AS(i.validate(), DataIntegrityError);
    i.turns = {{"q", std::string("r")}, {"q2", std::nullopt}};
    CHECK_NOTHROW(i.validate());
  }
}
