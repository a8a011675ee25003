// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "sense/gradcheck.hpp"
#include "sense/losses.hpp"
#include "sense/metrics.hpp"
#include "sense/prompting.hpp"
#include "sense/refiner.hpp"
#include "sense/retrieval.hpp"
#include "sense/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/mock_llm.hpp"
#include "support/pipeline.hpp"

using namespace sense;

namespace {

// Tolerances and thresholds.
constexpr std::size_t kExpectedParams = 1'052'161;
constexpr double kGradTolerance = 1e-4;
constexpr int kGradSeeds = 20;
constexpr double kLnVTolerance = 1e-4;
constexpr double kLn2Tolerance = 1e-6;
constexpr double kFocalBceTolerance = 1e-6;
constexpr double kMinLift = 0.15;
constexpr double kRankingSlack = 0.02;
// Final-epoch val recall@15 of focal training on the default synthetic set.
// Pinned below the first oracle run (0.8950); see the notes in the README.
constexpr double kTrainerOracleRecall = 0.88;
constexpr int kPrivacyRecords = 1000;
constexpr int kPlantedLeaks = 100;
constexpr double kMetricTolerance = 1e-12;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Outcome param_count_exact() {
  const std::size_t n = param_count(init_params<float>(1));
  return {n == kExpectedParams, "count " + std::to_string(n)};
}

Outcome gradient_fidelity() {
  double worst = 0;
  for (LossVariant v : {LossVariant::bce, LossVariant::contrastive, LossVariant::focal})
    for (int s = 0; s < kGradSeeds; ++s) worst = std::max(worst, gradient_check(v, s).max_rel_error);
  return {worst <= kGradTolerance, fmt("max rel error %.3g over 3 losses x 20 seeds", worst)};
}

Outcome loss_anchors() {
  const std::vector<double> uniform(1210, 0.0);
  TargetVector one(1210);
  one.set(0);
  const double lnv = contrastive_multilabel<double>(uniform, one).value;
  const std::vector<double> zero(50, 0.0);
  TargetVector some(50);
  some.set(3);
  const double ln2 = bce_scaled<double>(zero, 10.0, some).value;
  Rng rng(2024);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t v = 2 + rng.below(60);
    std::vector<double> l(v);
    for (double& x : l) x = rng.uniform(-1, 1);
    TargetVector t(v);
    for (std::size_t k = 0, n = rng.below(4); k < n; ++k) t.set(rng.below(v));
    const double s = rng.uniform(0.5, 20);
    worst = std::max(worst, std::abs(focal<double>(l, s, t, 0.0, 0.5).value - 0.5 * bce_scaled<double>(l, s, t).value));
  }
  const bool pass = std::abs(lnv - std::log(1210.0)) <= kLnVTolerance && std::abs(ln2 - std::numbers::ln2) <= kLn2Tolerance &&
                    worst <= kFocalBceTolerance;
  return {pass, fmt("ln1210 err %.2g, ln2 err %.2g, focal/bce err %.2g", std::abs(lnv - std::log(1210.0)),
                    std::abs(ln2 - std::numbers::ln2), worst)};
}

Outcome synthetic_lift() {
  SynthConfig cfg;  // V=200, dim=512, n=2000, active=5, sigma=1, seed=1
  const auto sv = synth_vocab_embeddings(cfg);
  const auto samples = synth_dataset(cfg, sv.embeddings);
  const VocabEmbeddings vocab(sv.embeddings);
  const auto test = select_split(samples, Split::test);
  const double naive = evaluate_naive(test, vocab).overall.recall_at_k;

  TrainConfig tc;
  tc.seed = cfg.seed;
  tc.loss.variant = LossVariant::focal;
  const auto focal_fit = fit(samples, vocab, tc);
  const double focal_recall = evaluate(focal_fit.checkpoint.params, test, vocab).overall.recall_at_k;
  const double focal_val = *focal_fit.report.epochs.back().val_recall;
  tc.loss.variant = LossVariant::bce;
  const auto bce_fit = fit(samples, vocab, tc);
  const double bce_recall = evaluate(bce_fit.checkpoint.params, test, vocab).overall.recall_at_k;

  const bool pass = focal_recall - naive >= kMinLift && focal_recall >= bce_recall - kRankingSlack &&
                    focal_val >= kTrainerOracleRecall;
  char buf[256];
  std::snprintf(buf, sizeof buf, "test recall@15 naive %.4f focal %.4f bce %.4f; focal val %.4f", naive, focal_recall,
                bce_recall, focal_val);
  return {pass, buf};
}

Outcome retrieval_determinism() {
  std::vector<std::string> tokens;
  for (int i = 0; i < 40; ++i) tokens.push_back("t" + std::to_string(100 + i));
  const Vocabulary vocab(tokens);
  bool ok = true;
  // Fixtures: all tied, and a tie straddling the cut-off.
  ok &= top_k_bow<double>(std::vector<double>(40, 0.5), vocab, 15).indices() ==
        [] { std::vector<std::size_t> v(15); std::iota(v.begin(), v.end(), std::size_t{0}); return v; }();
  ok &= top_k_bow<double>(std::vector<double>{0.9, 0.1, 0.8, 0.9}, Vocabulary({"a", "b", "c", "d"}), 2).indices() ==
        std::vector<std::size_t>{0, 3};
  // Permuting positions of tied values never changes the returned score sequence,
  // and equal inputs give equal outputs.
  Rng rng(5);
  for (int trial = 0; trial < 200 && ok; ++trial) {
    std::vector<double> l(40);
    for (double& x : l) x = std::round(rng.uniform() * 5) / 5;
    std::vector<double> shuffled = l;
    rng.shuffle(std::span<double>(shuffled));
    const auto a = top_k_bow<double>(l, vocab, 15), b = top_k_bow<double>(shuffled, vocab, 15);
    for (std::size_t i = 0; i < 15; ++i) ok &= a.entries[i].score == b.entries[i].score;
    ok &= top_k_bow<double>(l, vocab, 15) == a;
    for (std::size_t i = 1; i < 15; ++i)
      if (a.entries[i].score == a.entries[i - 1].score) ok &= a.entries[i].index > a.entries[i - 1].index;
  }
  return {ok, "tie fixtures and 200 permuted tie-heavy inputs"};
}

Outcome prompt_fidelity() {
  const auto a = render_prompt_with_obj({"piano", 0.9132, support::piano_bow()}).text;
  const auto b = render_prompt_without_obj(support::piano_bow15()).text;
  const bool pass = a == support::read_golden("with_obj_piano.txt") &&
                    b == support::read_golden("without_obj_bow15.txt") && b.find("Object label") == std::string::npos;
  return {pass, "golden A " + std::to_string(a.size()) + " bytes, golden B " + std::to_string(b.size()) + " bytes"};
}

Outcome privacy_boundary() {
  Rng rng(77);
  int false_alarms = 0, detected = 0;
  auto record = [&] {
    PrivacyContext ctx;
    for (int i = 0; i < 512; ++i) ctx.raw_embedding.push_back(static_cast<float>(0.05 * rng.normal()));
    for (int i = 0; i < 512; ++i) ctx.latent.push_back(static_cast<float>(rng.normal()));
    BagOfWords bow;
    double score = rng.uniform(0.3, 1.0);
    for (std::size_t i = 0; i < 15; ++i) {
      bow.entries.push_back({"tok" + std::to_string(i), i, score});
      score -= rng.uniform(0.0, 0.04);
    }
    return std::pair{ctx, PromptInput{"obj", rng.uniform(), bow}};
  };
  for (int i = 0; i < kPrivacyRecords; ++i) {
    const auto [ctx, in] = record();
    const auto v = i % 2 ? PromptVariant::with_obj : PromptVariant::without_obj;
    if (!assert_privacy(chat_request_body(render_prompt(v, in).text, LLMConfig{}), ctx).ok()) ++false_alarms;
  }
  for (int i = 0; i < kPlantedLeaks; ++i) {
    const auto [ctx, in] = record();
    const bool latent = i % 2 == 0;
    const auto& src = latent ? ctx.latent : ctx.raw_embedding;
    const std::size_t at = rng.below(src.size() - 2);
    std::string prompt = render_prompt(PromptVariant::without_obj, in).text + "\n";
    for (std::size_t k = at; k < at + 3; ++k) prompt += format_fixed4(src[k]) + (k + 1 < at + 3 ? ", " : "");
    const auto report = assert_privacy(chat_request_body(prompt, LLMConfig{}), ctx);
    for (const auto& viol : report.violations)
      if (viol.field == (latent ? "latent z" : "raw embedding x")) {
        ++detected;
        break;
      }
  }
  return {false_alarms == 0 && detected == kPlantedLeaks,
          std::to_string(false_alarms) + " violations on " + std::to_string(kPrivacyRecords) + " legitimate, " +
              std::to_string(detected) + "/" + std::to_string(kPlantedLeaks) + " leaks caught"};
}

Outcome metric_oracles() {
  const char* mc = "a yellow mushroom in grass";
  const char* mr = "a yellow mushroom growing in the green grass";
  const char* pc = "A black grand piano on a wooden floor.";
  const char* pr = "A black grand piano in a living room.";
  struct Check {
    double got, want;
  };
  const std::vector<Check> checks = {
      {bleu_n(pr, pr, 1), 1.0},
      {bleu_n(pr, pr, 4), 1.0},
      {rouge_n(pr, pr, 1), 1.0},
      {rouge_n(pr, pr, 2), 1.0},
      {rouge_l(pr, pr), 1.0},
      {bleu_n("red bus", "green tree", 1), 0.0},
      {bleu_n("red bus", "green tree", 4), 0.0},
      {rouge_n("red bus", "green tree", 1), 0.0},
      {rouge_n("red bus", "green tree", 2), 0.0},
      {rouge_l("red bus", "green tree"), 0.0},
      {bleu_n(mc, mr, 1), std::exp(1.0 - 8.0 / 5.0)},
      {bleu_n(mc, mr, 4), 0.0},
      {rouge_n(mc, mr, 1), 10.0 / 13.0},
      {rouge_n(mc, mr, 2), 4.0 / 11.0},
      {rouge_l(mc, mr), 10.0 / 13.0},
      {bleu_n(pc, pr, 1), 5.0 / 8.0},
      {bleu_n(pc, pr, 4), std::pow(5.0 / 8 * 3.0 / 7 * 2.0 / 6 * 1.0 / 5, 0.25)},
      {rouge_n(pc, pr, 2), 3.0 / 7.0},
      {rouge_n("the cat sat", "the cat", 1), 0.8},
      {rouge_l("a b c d", "a x c y"), 0.5},
      {rouge_l("", pr), 0.0},
  };
  double worst = 0;
  for (const auto& c : checks) worst = std::max(worst, std::abs(c.got - c.want));
  return {worst <= kMetricTolerance, fmt("%.0f fixtures, max deviation %.2g", double(checks.size()), worst)};
}

Outcome end_to_end() {
  const auto dir = support::scratch_dir("acceptance_e2e");
  support::MockLLM mock;
  support::PipelineConfig cfg;
  cfg.v = "200";
  cfg.n = "400";
  cfg.dim = "64";
  cfg.epochs = "5";
  const auto first = support::run_pipeline(dir, mock, cfg);
  if (!first.all_ok()) return {false, "first run failed: " + first.log};
  const auto second = support::run_pipeline(dir, mock, cfg);
  if (!second.all_ok()) return {false, "second run failed: " + second.log};
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first.files) {
    auto it = second.files.find(name);
    if (it == second.files.end() || it->second != bytes) ++differing;
  }
  const bool pass = differing == 0 && first.files.size() == second.files.size() && first.manifests.size() == 7 &&
                    second.manifests.size() == 7;
  return {pass, std::to_string(first.files.size()) + " outputs compared, " + std::to_string(differing) +
                    " differ; " + std::to_string(first.manifests.size()) + " manifests"};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"parameter-count exactness", param_count_exact},
      {"gradient fidelity", gradient_fidelity},
      {"closed-form loss anchors", loss_anchors},
      {"synthetic refiner lift", synthetic_lift},
      {"retrieval determinism", retrieval_determinism},
      {"prompt fidelity", prompt_fidelity},
      {"privacy boundary", privacy_boundary},
      {"metric oracles", metric_oracles},
      {"end-to-end dry run", end_to_end},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s  %-28s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
