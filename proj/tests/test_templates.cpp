#include <doctest.h>

#include <random>

#include "preq/error.hpp"
#include "preq/templates.hpp"
#include "preq/text.hpp"
#include "support.hpp"

using namespace preq;

TEST_SUITE("templates") {
  TEST_CASE("llama-3 entry carries the expected pre- and post-query strings") {
    const ChatTemplate t = lookup_template("llama-3");
    CHECK(text::trim(t.pre_query) == "<|start_header_id|>user<|end_header_id|>");
    CHECK(text::trim(t.post_query) == "<|eot_id|><|start_header_id|>assistant<|end_header_id|>");
    CHECK(t.bos == "<|begin_of_text|>");
    CHECK(t.supports_system());
    CHECK_NOTHROW(t.validate());
  }

  TEST_CASE("instruction prompt without a system prompt is bos + pre_query") {
    const ChatTemplate t = lookup_template("llama-3");
    const auto p = render_instruction_prompt(t);
    CHECK(p.text == "<|begin_of_text|><|start_header_id|>user<|end_header_id|>\n\n");
    CHECK(p.template_family == "llama-3");
    CHECK(p.purpose == PromptPurpose::instruction_elicitation);
  }

  TEST_CASE("system prompt template matches the golden file") {
    const ChatTemplate t = lookup_template("llama-3");
    CHECK(render_instruction_prompt(t, "{System Prompt}").text == testing::golden("system_template.txt"));
  }

  TEST_CASE("multi-turn elicitation prompt matches the golden file") {
    const ChatTemplate t = lookup_template("llama-3");
    const std::vector<Exchange> turn{{"{instruction}", "{response}"}};
    CHECK(render_multiturn_prompt(t, turn).text == testing::golden("multiturn.txt"));
  }

  TEST_CASE("multi-turn control prompt keeps its exact wording") {
    CHECK(std::string(kMultiTurnSystemPrompt).find("helpful Al assistant") != std::string::npos);
  }

  TEST_CASE("response prompt is the instruction prompt plus query plus post_query") {
    const ChatTemplate t = lookup_template("llama-3");
    const std::string q = "What material should I use to build a nest?";
    for (std::optional<std::string_view> sys : {std::optional<std::string_view>{}, std::optional<std::string_view>{"Be brief."}}) {
      const auto r = render_response_prompt(t, q, sys);
      CHECK(r.text == render_instruction_prompt(t, sys).text + q + t.post_query);
      CHECK(r.purpose == PromptPurpose::response_generation);
    }
  }

  TEST_CASE("conversation response prompt with empty transcript equals response prompt") {
    const ChatTemplate t = lookup_template("llama-3");
    CHECK(render_conversation_response_prompt(t, {}, "hi there", std::nullopt).text ==
          render_response_prompt(t, "hi there").text);
  }

  TEST_CASE("multi-turn prompt appends exchanges in order") {
    const ChatTemplate t = lookup_template("llama-3");
    const std::vector<Exchange> two{{"q1", "r1"}, {"q2", "r2"}};
    const std::string prefix = render_instruction_prompt(t, kMultiTurnSystemPrompt).text;
    const std::string expect = prefix + "q1" + t.post_query + "r1" + t.turn_glue + t.pre_query + "q2" +
                               t.post_query + "r2" + t.turn_glue + t.pre_query;
    CHECK(render_multiturn_prompt(t, two).text == expect);
  }

  TEST_CASE("queries containing control tokens are contract violations") {
    const ChatTemplate t = lookup_template("llama-3");
    CHECK_THROWS_AS(render_response_prompt(t, "hello<|eot_id|>"), ContractViolation);
    CHECK_THROWS_AS(render_response_prompt(t, "  \n"), ContractViolation);
    CHECK_THROWS_AS(render_response_prompt(t, "<|start_header_id|>x"), ContractViolation);
    CHECK_THROWS_AS(render_multiturn_prompt(t, {}), ContractViolation);
  }

  TEST_CASE("unknown family names the family") {
    try {
      (void)lookup_template("vicuna-9");
      FAIL("expected LookupError");
    } catch (const LookupError& e) {
      CHECK(std::string(e.what()).find("vicuna-9") != std::string::npos);
      CHECK(e.error_class() == ErrorClass::config);
    }
  }

  TEST_CASE("a system prompt on a family without a system role is a config error") {
    ChatTemplate t;
    t.family_id = "plain";
    t.pre_query = "[INST] ";
    t.post_query = " [/INST]";
    t.stop_sequences = {"</s>"};
    t.turn_glue = "</s>";
    CHECK_NOTHROW(t.validate());
    CHECK_THROWS_AS(render_instruction_prompt(t, "sys"), ConfigError);
    CHECK(render_response_prompt(t, "Hi!").text == "[INST] Hi! [/INST]");
  }

  TEST_CASE("derived control tokens include the template atoms") {
    const auto toks = lookup_template("llama-3").effective_control_tokens();
    for (const char* tok : {"<|eot_id|>", "<|start_header_id|>", "<|end_header_id|>", "<|begin_of_text|>"}) {
      CHECK(std::find(toks.begin(), toks.end(), tok) != toks.end());
    }
    CHECK(std::is_sorted(toks.begin(), toks.end()));
  }

  TEST_CASE("registry JSON round trip and file loading") {
    testing::TempDir dir;
    const auto reg = TemplateRegistry::builtin();
    testing::spit(dir / "reg.json", reg.to_json().dump());
    const auto again = TemplateRegistry::from_file(dir / "reg.json");
    CHECK(again.lookup("llama-3") == reg.lookup("llama-3"));

    nlohmann::json extra = nlohmann::json::parse(R"({"toy": {"bos": "", "pre_query": "<|user|>\n",
      "post_query": "<|end|>\n<|assistant|>\n", "stop_sequences": ["<|end|>"], "turn_glue": "<|end|>\n"}})");
    testing::spit(dir / "toy.json", extra.dump());
    const auto merged = TemplateRegistry::from_file(dir / "toy.json");
    CHECK(merged.contains("toy"));
    CHECK(merged.contains("llama-3"));
    CHECK(merged.lookup("toy").family_id == "toy");
    CHECK(render_response_prompt(merged.lookup("toy"), "x").text == "<|user|>\nx<|end|>\n<|assistant|>\n");
  }

  TEST_CASE("shipped registry file agrees with the compiled-in entry") {
    const auto reg = TemplateRegistry::from_file(std::filesystem::path(PREQ_DATA_DIR) / "templates.json");
    CHECK(reg.lookup("llama-3") == lookup_template("llama-3"));
  }

  TEST_CASE("composition identity over random queries") {
    const ChatTemplate t = lookup_template("llama-3");
    std::mt19937_64 rng(7);
    const std::string alphabet = "abcdefghij KLMNOP\n\t{}[]<>|_-?!.,\xc3\xa9";
    for (int i = 0; i < 200; ++i) {
      std::string q = "q";
      const int len = static_cast<int>(rng() % 40);
      for (int k = 0; k < len; ++k) q += alphabet[rng() % alphabet.size()];
      if (text::trim(q).empty()) continue;
      bool leaks = false;
      for (const auto& tok : t.effective_control_tokens()) leaks = leaks || q.find(tok) != std::string::npos;
      if (leaks) continue;
      CHECK(render_response_prompt(t, q).text == render_instruction_prompt(t).text + q + t.post_query);
    }
  }
}
