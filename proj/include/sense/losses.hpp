#pragma once

// Training objectives over one sample's cosine logits. Each returns the loss
// and its gradients with respect to the logits and the sigmoid scale.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "sense/errors.hpp"
#include "sense/numerics.hpp"
#include "sense/refiner.hpp"
#include "sense/vocabulary.hpp"

namespace sense {

inline constexpr double kContrastiveTau = 0.07;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;

struct LossOutput {
  double value = 0.0;
  std::vector<double> d_logits;
  double d_scale = 0.0;
  // Set when the sample has no positives and contributes nothing.
  bool skipped = false;
};

namespace detail {

// log(1 + e^a) without overflow.
inline double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

template <typename T>
void check_sigmoid_inputs(std::span<const T> logits, double scale, const TargetVector& target) {
  if (!(scale > 0.0)) throw UsageError("sigmoid loss: scale must be positive");
  if (logits.size() != target.size()) throw UsageError("loss: logits/target size mismatch");
}

}  // namespace detail

// Mean over the vocabulary of binary cross-entropy on sigmoid(scale * logit).
template <typename T>
LossOutput bce_scaled(std::span<const T> logits, double scale, const TargetVector& target) {
  detail::check_sigmoid_inputs(logits, scale, target);
  const std::size_t v = logits.size();
  LossOutput out{0.0, std::vector<double>(v), 0.0, false};
  double d_scale = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    const double s = scale * logits[j];
    const bool positive = target.test(j);
    // -log p = softplus(-s); -log(1 - p) = softplus(s)
    out.value += positive ? detail::softplus(-s) : detail::softplus(s);
    const double ds = detail::sigmoid(s) - (positive ? 1.0 : 0.0);
    out.d_logits[j] = ds * scale / static_cast<double>(v);
    d_scale += ds * logits[j];
  }
  out.value /= static_cast<double>(v);
  out.d_scale = d_scale / static_cast<double>(v);
  return out;
}

// Multi-label InfoNCE: mean over positives of -log softmax(logits / tau).
// No positives yields a skipped output rather than an error.
template <typename T>
LossOutput contrastive_multilabel(std::span<const T> logits, const TargetVector& target,
                                  double tau = kContrastiveTau) {
  if (!(tau > 0.0)) throw UsageError("contrastive: tau must be positive");
  if (logits.size() != target.size()) throw UsageError("loss: logits/target size mismatch");
  const std::size_t v = logits.size();
  LossOutput out{0.0, std::vector<double>(v, 0.0), 0.0, false};
  const auto& positives = target.positives();
  if (positives.empty()) {
    out.skipped = true;
    return out;
  }
  double max_a = -INFINITY;
  for (T l : logits) max_a = std::max(max_a, l / tau);
  double sum = 0.0;
  for (T l : logits) sum += std::exp(l / tau - max_a);
  const double lse = max_a + std::log(sum);

  const double inv_p = 1.0 / static_cast<double>(positives.size());
  for (std::size_t j : positives) out.value += lse - logits[j] / tau;
  out.value *= inv_p;
  for (std::size_t k = 0; k < v; ++k) {
    const double softmax = std::exp(logits[k] / tau - lse);
    out.d_logits[k] = (softmax - (target.test(k) ? inv_p : 0.0)) / tau;
  }
  return out;
}

// Focal loss on sigmoid(scale * logit), mean over the vocabulary. alpha
// weights positives, 1 - alpha negatives.
template <typename T>
LossOutput focal(std::span<const T> logits, double scale, const TargetVector& target, double gamma = kFocalGamma,
                 double alpha = kFocalAlpha) {
  detail::check_sigmoid_inputs(logits, scale, target);
  if (!(gamma >= 0.0)) throw UsageError("focal: gamma must be non-negative");
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("focal: alpha must lie in (0, 1)");
  const std::size_t v = logits.size();
  LossOutput out{0.0, std::vector<double>(v), 0.0, false};
  double d_scale = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    const bool positive = target.test(j);
    const double s = scale * logits[j];
    // u is the margin of the true class: p_t = sigmoid(u).
    const double u = positive ? s : -s;
    const double alpha_t = positive ? alpha : 1.0 - alpha;
    const double q = detail::sigmoid(-u);  // 1 - p_t
    const double nll = detail::softplus(-u);  // -log p_t
    const double modulator = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    out.value += alpha_t * modulator * nll;
    // d/du [alpha_t q^gamma softplus(-u)] = -alpha_t q^gamma (gamma p_t softplus(-u) + q)
    const double du = -alpha_t * modulator * (gamma * detail::sigmoid(u) * nll + q);
    const double ds = positive ? du : -du;
    out.d_logits[j] = ds * scale / static_cast<double>(v);
    d_scale += ds * logits[j];
  }
  out.value /= static_cast<double>(v);
  out.d_scale = d_scale / static_cast<double>(v);
  return out;
}

struct LossConfig {
  LossVariant variant = LossVariant::focal;
  double tau = kContrastiveTau;
  double gamma = kFocalGamma;
  double alpha = kFocalAlpha;
};

template <typename T>
LossOutput sample_loss(const LossConfig& cfg, std::span<const T> logits, double scale, const TargetVector& target) {
  switch (cfg.variant) {
    case LossVariant::bce: return bce_scaled(logits, scale, target);
    case LossVariant::contrastive: return contrastive_multilabel(logits, target, cfg.tau);
    case LossVariant::focal: return focal(logits, scale, target, cfg.gamma, cfg.alpha);
    case LossVariant::naive: break;
  }
  throw UsageError("the naive baseline has no training loss");
}

template <typename T>
struct BatchLoss {
  double value = 0.0;
  Matrix<T> d_logits;
  double d_scale = 0.0;
  std::size_t counted = 0;  // samples that contributed
};

// Mean over the non-skipped samples of a batch.
template <typename T>
BatchLoss<T> batch_loss(const LossConfig& cfg, const Matrix<T>& logits, double scale,
                        std::span<const TargetVector* const> targets) {
  if (targets.size() != logits.rows()) throw UsageError("batch_loss: target count mismatch");
  BatchLoss<T> out{0.0, Matrix<T>(logits.rows(), logits.cols()), 0.0, 0};
  std::vector<LossOutput> per_sample;
  per_sample.reserve(logits.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    per_sample.push_back(sample_loss<T>(cfg, logits.row(b), scale, *targets[b]));
    if (!per_sample.back().skipped) ++out.counted;
  }
  if (out.counted == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.counted);
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    const LossOutput& l = per_sample[b];
    if (l.skipped) continue;
    out.value += l.value * inv;
    out.d_scale += l.d_scale * inv;
    auto row = out.d_logits.row(b);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = static_cast<T>(l.d_logits[j] * inv);
  }
  return out;
}

}  // namespace sense
