#include <cstdlib>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "sense/prompting.hpp"
#include "sense/rng.hpp"
#include "support/fixtures.hpp"
#include "support/mock_llm.hpp"

using namespace sense;

namespace {

PrivacyContext random_context(Rng& rng, std::size_t dim = 512) {
  PrivacyContext ctx;
  for (std::size_t i = 0; i < dim; ++i) ctx.raw_embedding.push_back(static_cast<float>(0.05 * rng.normal()));
  for (std::size_t i = 0; i < dim; ++i) ctx.latent.push_back(static_cast<float>(rng.normal()));
  return ctx;
}

std::string body_of(const std::string& prompt) { return chat_request_body(prompt, LLMConfig{}); }

LLMConfig mock_config(const support::MockLLM& mock) {
  LLMConfig cfg;
  cfg.endpoint = mock.endpoint();
  cfg.backoff_initial_seconds = 0.01;
  cfg.timeout_seconds = 5;
  return cfg;
}

class WithCredential : public ::testing::Test {
 protected:
  void SetUp() override { ::setenv("SENSE_LLM_API_KEY", "test-key", 1); }
  void TearDown() override { ::unsetenv("SENSE_LLM_API_KEY"); }
};

}  // namespace

TEST(FormatFixed4, RoundsAndPads) {
  EXPECT_EQ(format_fixed4(0.9132), "0.9132");
  EXPECT_EQ(format_fixed4(0.5), "0.5000");
  EXPECT_EQ(format_fixed4(0.12345678), "0.1235");
  EXPECT_EQ(format_fixed4(-0.25), "-0.2500");
  EXPECT_EQ(format_fixed4(1.0), "1.0000");
}

TEST(RenderPrompt, WithObjMatchesGoldenA) {
  const auto p = render_prompt_with_obj({"piano", 0.9132, support::piano_bow()});
  EXPECT_EQ(p.text, support::read_golden("with_obj_piano.txt"));
  EXPECT_NE(p.text.find("Object label: piano (prob: 0.9132)"), std::string::npos);
  EXPECT_FALSE(p.empty_bow);
}

TEST(RenderPrompt, WithoutObjMatchesGoldenB) {
  const auto p = render_prompt_without_obj(support::piano_bow15());
  EXPECT_EQ(p.text, support::read_golden("without_obj_bow15.txt"));
  EXPECT_EQ(p.text.find("Object label"), std::string::npos);
}

TEST(RenderPrompt, WithObjNestsTheWithoutObjBowBlock) {
  const auto bow = support::piano_bow15();
  const auto with = render_prompt_with_obj({"piano", 0.5, bow}).text;
  const auto without = render_prompt_without_obj(bow).text;
  const std::string block = without.substr(without.find("BoW tokens with scores:"));
  EXPECT_NE(with.find(block), std::string::npos);
  EXPECT_TRUE(with.ends_with(block));
}

TEST(RenderPrompt, EmptyBowRendersFlagged) {
  const auto a = render_prompt_with_obj({"piano", 0.9, {}});
  EXPECT_TRUE(a.empty_bow);
  EXPECT_TRUE(a.text.ends_with("BoW tokens with scores:\n"));
  const auto b = render_prompt_without_obj({});
  EXPECT_TRUE(b.empty_bow);
  EXPECT_TRUE(b.text.ends_with("BoW tokens with scores:\n"));
}

TEST(RenderPrompt, PlaceholderLikeTokensAreNotExpanded) {
  const auto p = render_prompt_with_obj({"{words_str}", 0.5, support::make_bow({{"{pred_obj}", 0.5}})});
  EXPECT_NE(p.text.find("Object label: {words_str} (prob: 0.5000)"), std::string::npos);
  EXPECT_TRUE(p.text.ends_with("{pred_obj} (0.5000)"));
}

TEST(RenderPrompt, DeterministicAcrossRuns) {
  Rng rng(7);
  BagOfWords bow;
  double score = 0.9;
  for (std::size_t i = 0; i < 15; ++i) bow.entries.push_back({"w" + std::to_string(i), i, score -= rng.uniform() * 0.05});
  const PromptInput in{"lamp", rng.uniform(), bow};
  EXPECT_EQ(render_prompt_with_obj(in).text, render_prompt_with_obj(in).text);
  EXPECT_EQ(render_prompt(PromptVariant::without_obj, in).text, render_prompt_without_obj(bow).text);
}

TEST(RenderPrompt, RejectsBadInput) {
  EXPECT_THROW(render_prompt_with_obj({"piano", 1.5, {}}), UsageError);
  BagOfWords big;
  for (std::size_t i = 0; i < 16; ++i) big.entries.push_back({"w" + std::to_string(i), i, 0.1});
  EXPECT_THROW(render_prompt_without_obj(big), UsageError);
  EXPECT_THROW(parse_prompt_variant("with"), UsageError);
}

TEST(Privacy, LegitimateRequestsPass) {
  Rng rng(1);
  const auto ctx = random_context(rng);
  const auto with = assert_privacy(body_of(render_prompt_with_obj({"piano", 0.9132, support::piano_bow15()}).text), ctx);
  EXPECT_TRUE(with.ok());
  EXPECT_EQ(with.float_literals, 16u);
  const auto without = assert_privacy(body_of(render_prompt_without_obj(support::piano_bow15()).text), ctx);
  EXPECT_TRUE(without.ok());
  EXPECT_EQ(without.float_literals, 15u);
}

TEST(Privacy, PlantedLatentLeakIsNamed) {
  Rng rng(2);
  const auto ctx = random_context(rng);
  std::string prompt = render_prompt_without_obj(support::piano_bow()).text;
  prompt += "\n" + format_fixed4(ctx.latent[40]) + " " + format_fixed4(ctx.latent[41]) + " " + format_fixed4(ctx.latent[42]);
  const auto r = assert_privacy(body_of(prompt), ctx);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.violations.front().field, "latent z");
}

TEST(Privacy, PlantedRawEmbeddingLeakIsNamedEvenAtHigherPrecision) {
  Rng rng(3);
  const auto ctx = random_context(rng);
  std::string prompt = render_prompt_without_obj(support::piano_bow()).text + "\n";
  for (int i = 7; i < 10; ++i) prompt += std::to_string(ctx.raw_embedding[i]) + ", ";
  const auto r = assert_privacy(body_of(prompt), ctx);
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.violations.front().field, "raw embedding x");
}

TEST(Privacy, TooManyLiteralsViolatesTheBudget) {
  Rng rng(4);
  std::string prompt = render_prompt_without_obj(support::piano_bow15()).text + "\nextra (0.1234) (0.2345)";
  const auto r = assert_privacy(body_of(prompt), random_context(rng));
  ASSERT_FALSE(r.ok());
  EXPECT_EQ(r.violations.front().field, "float literal budget");
  EXPECT_EQ(r.float_literals, 17u);
}

TEST(CountWords, SplitsOnWhitespace) {
  EXPECT_EQ(count_words("A black grand piano on a wooden floor."), 8u);
  EXPECT_EQ(count_words("  two\twords \n"), 2u);
  EXPECT_EQ(count_words(""), 0u);
}

TEST(LLMConfigCheck, TemperatureIsPinned) {
  LLMConfig cfg;
  cfg.temperature = 0.7;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg.allow_temperature_override = true;
  EXPECT_NO_THROW(cfg.validate());
}

TEST_F(WithCredential, EightWordCaptionIsInRange) {
  support::MockLLM mock([](const auto&, auto& res, int) {
    support::reply_caption(res, "  A black grand piano on a wooden floor.\n", "mock-4");
  });
  const auto out = generate_caption("prompt", mock_config(mock), {});
  EXPECT_EQ(out.text, "A black grand piano on a wooden floor.");
  EXPECT_EQ(out.word_count, 8u);
  EXPECT_TRUE(out.length_ok);
  EXPECT_EQ(out.model, "mock-4");
  EXPECT_EQ(out.attempts, 1);
}

TEST_F(WithCredential, ShortCaptionIsKeptButFlagged) {
  support::MockLLM mock([](const auto&, auto& res, int) { support::reply_caption(res, "A black piano"); });
  const auto out = generate_caption("prompt", mock_config(mock), {});
  EXPECT_EQ(out.text, "A black piano");
  EXPECT_FALSE(out.length_ok);
}

TEST_F(WithCredential, RateLimitIsRetriedOnce) {
  support::MockLLM mock([](const auto&, auto& res, int call) {
    if (call == 0) {
      res.status = 429;
      res.set_header("Retry-After", "0");
      return;
    }
    support::reply_caption(res, "A black grand piano standing alone in a bright living room");
  });
  const auto out = generate_caption("prompt", mock_config(mock), {});
  EXPECT_EQ(out.attempts, 2);
  EXPECT_EQ(out.retried_statuses, (std::vector<int>{429}));
  EXPECT_EQ(mock.calls(), 2);
}

TEST_F(WithCredential, ServerErrorsExhaustRetries) {
  support::MockLLM mock([](const auto&, auto& res, int) { res.status = 503; });
  auto cfg = mock_config(mock);
  cfg.max_retries = 2;
  EXPECT_THROW(generate_caption("prompt", cfg, {}), NetworkError);
  EXPECT_EQ(mock.calls(), 3);
}

TEST_F(WithCredential, AuthFailureIsNotRetried) {
  support::MockLLM mock([](const auto&, auto& res, int) { res.status = 401; });
  EXPECT_THROW(generate_caption("prompt", mock_config(mock), {}), AuthError);
  EXPECT_EQ(mock.calls(), 1);
}

TEST_F(WithCredential, MalformedResponse) {
  support::MockLLM mock([](const auto&, auto& res, int) { res.set_content(R"({"choices": []})", "application/json"); });
  EXPECT_THROW(generate_caption("prompt", mock_config(mock), {}), MalformedResponseError);
}

TEST_F(WithCredential, RequestShapeAndBearerToken) {
  support::MockLLM mock;
  const std::string prompt = render_prompt_with_obj({"piano", 0.9132, support::piano_bow()}).text;
  (void)generate_caption(prompt, mock_config(mock), {});
  ASSERT_EQ(mock.bodies().size(), 1u);
  const auto body = nlohmann::json::parse(mock.bodies()[0]);
  EXPECT_EQ(body["model"], "gpt-4o-mini");
  EXPECT_EQ(body["temperature"].get<double>(), 0.2);
  EXPECT_EQ(body["messages"][0]["role"], "user");
  EXPECT_EQ(body["messages"][0]["content"], prompt);
  EXPECT_EQ(mock.auth_headers()[0], "Bearer test-key");
}

TEST_F(WithCredential, PrivacyViolationBlocksTheSend) {
  support::MockLLM mock;
  PrivacyContext ctx{{0.1f, 0.2f, 0.3f, 0.4f}, {}};
  try {
    (void)generate_caption("coords 0.2000 0.3000 0.4000", mock_config(mock), ctx);
    FAIL();
  } catch (const PrivacyViolationError& e) {
    EXPECT_EQ(e.report().violations.front().field, "raw embedding x");
  }
  EXPECT_EQ(mock.calls(), 0);
}

TEST(GenerateCaption, MissingCredentialIsAuthError) {
  ::unsetenv("SENSE_LLM_API_KEY");
  support::MockLLM mock;
  EXPECT_THROW(generate_caption("prompt", mock_config(mock), {}), AuthError);
  EXPECT_EQ(mock.calls(), 0);
}

TEST_F(WithCredential, ConcurrentRequestsKeepInputOrder) {
  support::MockLLM mock([](const httplib::Request& req, httplib::Response& res, int) {
    const auto body = nlohmann::json::parse(req.body);
    const std::string prompt = body["messages"][0]["content"];
    std::this_thread::sleep_for(std::chrono::milliseconds(prompt.size() % 7 * 5));
    support::reply_caption(res, "caption for " + prompt);
  });
  std::vector<CaptionRequest> reqs;
  for (int i = 0; i < 12; ++i) reqs.push_back({"p" + std::to_string(i * 37), {}});
  const auto out = generate_captions(reqs, mock_config(mock));
  ASSERT_EQ(out.size(), 12u);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(out[i].text, "caption for p" + std::to_string(i * 37));
}

TEST(CaptionRecordFile, JsonShape) {
  const CaptionRecordOut r{"img1", PromptVariant::without_obj, "p", "a caption", 2, "m"};
  const auto j = to_json(r);
  EXPECT_EQ(j["prompt_variant"], "without_obj");
  const auto back = caption_record_from_json(j);
  EXPECT_EQ(back.id, "img1");
  EXPECT_EQ(back.variant, PromptVariant::without_obj);
  EXPECT_EQ(back.word_count, 2u);
}
