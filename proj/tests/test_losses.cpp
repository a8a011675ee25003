#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "sense/losses.hpp"
#include "sense/rng.hpp"

using namespace sense;

namespace {

TargetVector targets(std::size_t v, std::initializer_list<std::size_t> on) {
  TargetVector t(v);
  for (std::size_t i : on) t.set(i);
  return t;
}

std::vector<double> random_logits(Rng& rng, std::size_t v) {
  std::vector<double> l(v);
  for (double& x : l) x = rng.uniform(-1.0, 1.0);
  return l;
}

TargetVector random_target(Rng& rng, std::size_t v) {
  TargetVector t(v);
  for (std::size_t i = 0, n = 1 + rng.below(3); i < n; ++i) t.set(rng.below(v));
  return t;
}

using LossFn = std::function<LossOutput(std::span<const double>, double)>;

void expect_gradients_match(const LossFn& loss, std::vector<double> logits, double scale, double tol) {
  const LossOutput out = loss(logits, scale);
  const auto numeric = finite_diff_grad([&](std::span<const double> l) { return loss(l, scale).value; }, logits, 1e-6);
  // Floor at 1e-3: coordinates far below that are round-off dominated.
  EXPECT_LT(max_relative_error(out.d_logits, numeric, 1e-3), tol);
  const double h = 1e-6;
  const double ds = (loss(logits, scale + h).value - loss(logits, scale - h).value) / (2 * h);
  EXPECT_NEAR(out.d_scale, ds, tol * std::max(1.0, std::abs(ds)));
}

}  // namespace

TEST(BceScaled, ZeroLogitsGiveLn2) {
  const std::vector<double> zero(7, 0.0);
  EXPECT_NEAR(bce_scaled<double>(zero, 10.0, targets(7, {1, 4})).value, std::numbers::ln2, 1e-12);
  EXPECT_NEAR(bce_scaled<double>(zero, 3.0, targets(7, {})).value, std::numbers::ln2, 1e-12);
}

TEST(BceScaled, ScalarOracle) {
  const std::vector<double> l{0.5, -0.2, 0.9};
  const double s = 4.0;
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const double want = -(std::log(sig(s * 0.5)) + std::log(1 - sig(s * -0.2)) + std::log(sig(s * 0.9))) / 3.0;
  EXPECT_NEAR(bce_scaled<double>(l, s, targets(3, {0, 2})).value, want, 1e-12);
}

TEST(BceScaled, StableForExtremeArguments) {
  const std::vector<double> l{1.0, -1.0};
  const auto out = bce_scaled<double>(l, 1e4, targets(2, {1}));
  EXPECT_TRUE(std::isfinite(out.value));
  // Both terms are 1e4 in magnitude: the negative sits at +1e4, the positive at -1e4.
  EXPECT_NEAR(out.value, 1e4, 1e-6);
}

TEST(Contrastive, UniformLogitsOverProductionVocabularyGiveLnV) {
  const std::vector<double> l(1210, 0.3);
  EXPECT_NEAR(contrastive_multilabel<double>(l, targets(1210, {17})).value, std::log(1210.0), 1e-4);
  EXPECT_NEAR(contrastive_multilabel<double>(l, targets(1210, {1, 2, 3})).value, std::log(1210.0), 1e-4);
}

TEST(Contrastive, TwoPositiveScalarOracle) {
  const std::vector<double> l{0.4, -0.1, 0.7, 0.2, -0.5};
  const double tau = 0.07;
  double denom = 0;
  for (double x : l) denom += std::exp(x / tau);
  const double want = 0.5 * (-std::log(std::exp(0.4 / tau) / denom) - std::log(std::exp(0.2 / tau) / denom));
  EXPECT_NEAR(contrastive_multilabel<double>(l, targets(5, {0, 3})).value, want, 1e-9);
}

TEST(Contrastive, SinglePositiveIsSoftmaxCrossEntropy) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto l = random_logits(rng, 9);
    const std::size_t p = rng.below(9);
    double denom = 0;
    for (double x : l) denom += std::exp(x / 0.07);
    EXPECT_NEAR(contrastive_multilabel<double>(l, targets(9, {p})).value, std::log(denom) - l[p] / 0.07, 1e-9);
  }
}

TEST(Contrastive, NoPositivesIsSkippedNotAnError) {
  const std::vector<double> l{0.1, 0.2};
  const auto out = contrastive_multilabel<double>(l, targets(2, {}));
  EXPECT_TRUE(out.skipped);
  EXPECT_EQ(out.value, 0.0);
  EXPECT_EQ(out.d_logits, (std::vector<double>{0.0, 0.0}));
}

TEST(Contrastive, IgnoresScale) {
  const std::vector<double> l{0.1, 0.2, -0.3};
  EXPECT_EQ(contrastive_multilabel<double>(l, targets(3, {1})).d_scale, 0.0);
}

TEST(Focal, GammaZeroHalfAlphaIsHalfBce) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t v = 2 + rng.below(30);
    const auto l = random_logits(rng, v);
    const auto t = random_target(rng, v);
    const double s = rng.uniform(0.5, 20.0);
    EXPECT_NEAR(focal<double>(l, s, t, 0.0, 0.5).value, 0.5 * bce_scaled<double>(l, s, t).value, 1e-6);
  }
}

TEST(Focal, ScalarOracleAtDefaults) {
  const std::vector<double> l{0.3, -0.4};
  const double s = 5.0;
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  const double p0 = sig(s * 0.3), p1 = sig(s * -0.4);
  const double want = (-0.25 * std::pow(1 - p0, 2) * std::log(p0) - 0.75 * std::pow(p1, 2) * std::log(1 - p1)) / 2;
  EXPECT_NEAR(focal<double>(l, s, targets(2, {0})).value, want, 1e-12);
}

TEST(Focal, RejectsBadHyperparameters) {
  const std::vector<double> l{0.3};
  EXPECT_THROW(focal<double>(l, 5.0, targets(1, {0}), -1.0), UsageError);
  EXPECT_THROW(focal<double>(l, 5.0, targets(1, {0}), 2.0, 1.0), UsageError);
  EXPECT_THROW(focal<double>(l, 0.0, targets(1, {0})), UsageError);
}

TEST(LossProperties, NonNegativeAndMonotoneInPositiveLogits) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t v = 3 + rng.below(20);
    auto l = random_logits(rng, v);
    const auto t = random_target(rng, v);
    const double s = rng.uniform(1.0, 15.0);
    const double before[3] = {bce_scaled<double>(l, s, t).value, focal<double>(l, s, t).value,
                              contrastive_multilabel<double>(l, t).value};
    for (std::size_t p : t.positives()) l[p] += 0.1;
    const double after[3] = {bce_scaled<double>(l, s, t).value, focal<double>(l, s, t).value,
                             contrastive_multilabel<double>(l, t).value};
    for (int i = 0; i < 3; ++i) {
      EXPECT_GE(before[i], 0.0);
      EXPECT_LE(after[i], before[i] + 1e-12) << "loss " << i;
    }
  }
}

TEST(LossProperties, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t v = 3 + rng.below(12);
    const auto l = random_logits(rng, v);
    const auto t = random_target(rng, v);
    const double s = rng.uniform(1.0, 12.0);
    expect_gradients_match([&](auto x, double sc) { return bce_scaled<double>(x, sc, t); }, l, s, 1e-6);
    expect_gradients_match([&](auto x, double sc) { return focal<double>(x, sc, t); }, l, s, 1e-6);
    expect_gradients_match([&](auto x, double) { return contrastive_multilabel<double>(x, t); }, l, s, 1e-5);
  }
}

TEST(BatchLoss, AveragesOverCountedSamples) {
  Matrix<double> logits{{0.2, 0.1, -0.3}, {0.5, 0.5, 0.5}};
  const TargetVector a = targets(3, {0}), empty = targets(3, {});
  const std::vector<const TargetVector*> t{&a, &empty};
  const LossConfig cfg{LossVariant::contrastive};
  const auto out = batch_loss<double>(cfg, logits, 10.0, t);
  EXPECT_EQ(out.counted, 1u);
  EXPECT_NEAR(out.value, contrastive_multilabel<double>(logits.row(0), a).value, 1e-12);
  for (double g : out.d_logits.row(1)) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(batch_loss<double>(LossConfig{LossVariant::naive}, logits, 10.0, t), UsageError);
}
