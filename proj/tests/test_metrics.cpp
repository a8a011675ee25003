#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "sense/metrics.hpp"
#include "sense/rng.hpp"

using namespace sense;

namespace {

constexpr const char* kMushroomCand = "a yellow mushroom in grass";
constexpr const char* kMushroomRef = "a yellow mushroom growing in the green grass";
constexpr const char* kPianoCand = "A black grand piano on a wooden floor.";
constexpr const char* kPianoRef = "A black grand piano in a living room.";

std::string random_sentence(Rng& rng, std::size_t max_words) {
  static const std::vector<std::string> words{"a", "the", "cat", "dog", "sat", "on", "mat", "red", "piano", "in"};
  std::string s;
  for (std::size_t i = 0, n = rng.below(max_words + 1); i < n; ++i) s += words[rng.below(words.size())] + " ";
  return s;
}

}  // namespace

TEST(Tokenize, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(tokenize("A Black, grand-piano!"), (std::vector<std::string>{"a", "black", "grandpiano"}));
  EXPECT_EQ(tokenize("A Black,", Tokenization::raw), (std::vector<std::string>{"A", "Black,"}));
  EXPECT_TRUE(tokenize("  ... ").empty());
}

TEST(Bleu, MushroomHandTrace) {
  // Unigrams 5/5, candidate 5 tokens vs reference 8: BP = e^(1 - 8/5).
  EXPECT_NEAR(bleu_n(kMushroomCand, kMushroomRef, 1), std::exp(1.0 - 8.0 / 5.0), 1e-12);
  // No 4-gram survives clipping.
  EXPECT_EQ(bleu_n(kMushroomCand, kMushroomRef, 4), 0.0);
}

TEST(Bleu, PianoHandTrace) {
  // Clipped precisions 5/8, 3/7, 2/6, 1/5; equal lengths so BP = 1.
  EXPECT_NEAR(bleu_n(kPianoCand, kPianoRef, 1), 5.0 / 8.0, 1e-12);
  EXPECT_NEAR(bleu_n(kPianoCand, kPianoRef, 4), std::pow(5.0 / 8 * 3.0 / 7 * 2.0 / 6 * 1.0 / 5, 0.25), 1e-12);
}

TEST(Bleu, ClippingLimitsRepeatedWords) {
  // "the the the the" vs "the cat": clipped unigram 1/4, BP = 1.
  EXPECT_NEAR(bleu_n("the the the the", "the cat", 1), 0.25, 1e-12);
}

TEST(Bleu, IdentityDisjointAndEmpty) {
  EXPECT_DOUBLE_EQ(bleu_n(kPianoRef, kPianoRef, 1), 1.0);
  EXPECT_DOUBLE_EQ(bleu_n(kPianoRef, kPianoRef, 4), 1.0);
  EXPECT_EQ(bleu_n("red bus", "green tree", 1), 0.0);
  EXPECT_EQ(bleu_n("", kPianoRef, 1), 0.0);
  EXPECT_EQ(bleu_n("...", kPianoRef, 4), 0.0);
}

TEST(Bleu, ShortCandidateUsesOnlyItsOrders) {
  // Two tokens: orders 1 and 2 only, both perfect, BP = e^(1 - 3/2).
  EXPECT_NEAR(bleu_n("the cat", "the cat sat", 4), std::exp(1.0 - 1.5), 1e-12);
}

TEST(Rouge, HandComputedValues) {
  EXPECT_NEAR(rouge_n("the cat sat", "the cat", 1), 0.8, 1e-12);
  EXPECT_NEAR(rouge_l("a b c d", "a x c y"), 0.5, 1e-12);
  EXPECT_NEAR(rouge_n(kMushroomCand, kMushroomRef, 1), 10.0 / 13.0, 1e-12);
  EXPECT_NEAR(rouge_n(kMushroomCand, kMushroomRef, 2), 4.0 / 11.0, 1e-12);
  EXPECT_NEAR(rouge_l(kMushroomCand, kMushroomRef), 10.0 / 13.0, 1e-12);
  EXPECT_NEAR(rouge_n(kPianoCand, kPianoRef, 1), 0.625, 1e-12);
  EXPECT_NEAR(rouge_n(kPianoCand, kPianoRef, 2), 3.0 / 7.0, 1e-12);
  EXPECT_NEAR(rouge_l(kPianoCand, kPianoRef), 0.625, 1e-12);
}

TEST(Rouge, IdentityDisjointAndEmpty) {
  for (std::size_t n : {1u, 2u}) {
    EXPECT_DOUBLE_EQ(rouge_n(kPianoRef, kPianoRef, n), 1.0);
    EXPECT_EQ(rouge_n("red bus", "green tree", n), 0.0);
  }
  EXPECT_DOUBLE_EQ(rouge_l(kPianoRef, kPianoRef), 1.0);
  EXPECT_EQ(rouge_l("", kPianoRef), 0.0);
  EXPECT_EQ(rouge_n("cat", "cat", 2), 0.0);  // no bigrams on either side
}

TEST(MetricProperties, RangeIdentityAndOrdering) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::string c = random_sentence(rng, 12), r = random_sentence(rng, 12);
    const auto row = score_caption("x", 1, "v", c, r);
    for (double m : {row.bleu1, row.bleu4, row.rouge1, row.rouge2, row.rougeL}) {
      EXPECT_GE(m, 0.0);
      EXPECT_LE(m, 1.0 + 1e-12);
    }
    EXPECT_GE(row.bleu1 + 1e-12, row.bleu4) << c << " | " << r;
    if (!tokenize(c).empty()) {
      const auto self = score_caption("x", 1, "v", c, c);
      EXPECT_NEAR(self.bleu1, 1.0, 1e-12);
      EXPECT_NEAR(self.bleu4, 1.0, 1e-12);
      EXPECT_NEAR(self.rouge1, 1.0, 1e-12);
      EXPECT_NEAR(self.rougeL, 1.0, 1e-12);
      if (tokenize(c).size() >= 2) EXPECT_NEAR(self.rouge2, 1.0, 1e-12);
    }
  }
}

TEST(CorpusBleu, SinglePairMatchesSentenceLevel) {
  EXPECT_NEAR(corpus_bleu({kPianoCand}, {kPianoRef}, 4), bleu_n(kPianoCand, kPianoRef, 4), 1e-12);
  EXPECT_THROW(corpus_bleu({"a"}, {}, 4), UsageError);
}

TEST(Aggregate, MeansPerGroup) {
  std::vector<MetricRow> rows(2);
  rows[0] = {"a", 1, "focal", 0.2, 0.1, 0.2, 0.2, 0.2};
  rows[1] = {"b", 1, "focal", 0.4, 0.3, 0.4, 0.4, 0.4};
  const auto out = aggregate(rows, {GroupKey::subject});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].group, "subject=1");
  EXPECT_NEAR(out[0].bleu1, 0.3, 1e-15);
  EXPECT_NEAR(out[1].bleu4, 0.2, 1e-15);
  EXPECT_EQ(out[1].group, "overall");
  EXPECT_EQ(aggregate({rows[0]}, {})[0].rouge2, 0.2);
  EXPECT_THROW(aggregate({}, {}), UsageError);
}

TEST(Aggregate, SixSubjectsGiveSevenRows) {
  std::vector<MetricRow> rows;
  for (int i = 0; i < 60; ++i) rows.push_back({"s" + std::to_string(i), i % 6 + 1, "focal", 0.5, 0.1, 0.4, 0.2, 0.3});
  const auto out = aggregate(rows, {GroupKey::subject});
  ASSERT_EQ(out.size(), 7u);
  for (const auto& a : out) EXPECT_EQ(a.count, a.group == "overall" ? 60u : 10u);
}

TEST(MetricCsv, HeaderAndRows) {
  std::ostringstream os;
  write_metric_csv(os, {{"img,1", 2, "focal", 0.5, 0.25, 1.0, 0.0, 0.125}});
  const std::string csv = os.str();
  EXPECT_TRUE(csv.starts_with("id,subject,variant,bleu1,bleu4,rouge1,rouge2,rougeL\n"));
  EXPECT_NE(csv.find("\"img,1\",2,focal,0.500000,0.250000,1.000000,0.000000,0.125000"), std::string::npos);
}

TEST(MetricJson, RoundTrip) {
  const MetricRow r{"a", 3, "v", 0.1, 0.2, 0.3, 0.4, 0.5};
  const auto back = metric_row_from_json(to_json(r));
  EXPECT_EQ(back.id, "a");
  EXPECT_EQ(back.subject, 3);
  EXPECT_EQ(back.rougeL, 0.5);
}
