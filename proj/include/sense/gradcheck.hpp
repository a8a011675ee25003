#pragma once

// Analytic-vs-finite-difference check of loss(refiner(x)) on a tiny instance,
// run in double precision.

#include <array>
#include <cstdint>
#include <vector>

#include "sense/losses.hpp"
#include "sense/numerics.hpp"
#include "sense/refiner.hpp"
#include "sense/rng.hpp"

namespace sense {

struct GradCheckConfig {
  RefinerShape shape{4, 8, 4};
  std::size_t vocab_size = 6;
  std::size_t batch = 3;
  double step = 1e-5;
};

struct GradCheckResult {
  LossVariant loss = LossVariant::focal;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::array<double, kParamBlockCount> block_error{};
  std::size_t checked = 0;
  std::size_t excluded = 0;  // coordinates whose perturbation crossed a ReLU kink
};

namespace detail {

inline std::vector<double> flatten(const RefinerParams<double>& p) {
  std::vector<double> out;
  for (auto block : p.blocks()) out.insert(out.end(), block.begin(), block.end());
  return out;
}

inline void unflatten(std::span<const double> flat, RefinerParams<double>& p) {
  std::size_t at = 0;
  for (auto block : p.blocks()) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
              flat.begin() + static_cast<std::ptrdiff_t>(at + block.size()), block.begin());
    at += block.size();
  }
}

}  // namespace detail

inline GradCheckResult gradient_check(LossVariant variant, std::uint64_t seed, const GradCheckConfig& cfg = {}) {
  if (variant == LossVariant::naive) throw UsageError("gradcheck: the naive baseline has no loss");
  const RefinerShape& s = cfg.shape;
  RefinerParams<double> params = init_params<double>(seed, s, {InitScheme::he_uniform, 1.0, kInitSigmoidScale});
  Rng rng(seed ^ 0xA5A5A5A5ull);
  // Move every block off its trivial init so each gradient is exercised.
  for (double& v : params.b1) v = 0.1 * rng.normal();
  for (double& v : params.b2) v = 0.1 * rng.normal();
  for (double& v : params.ln_gamma) v = 1.0 + 0.1 * rng.normal();
  for (double& v : params.ln_beta) v = 0.1 * rng.normal();
  params.sigmoid_scale = 5.0 + 5.0 * rng.uniform();

  Matrix<double> e(cfg.vocab_size, s.out_dim);
  for (double& v : e.flat()) v = rng.normal();
  const UnitRows<double> vocab(e);
  Matrix<double> x(cfg.batch, s.in_dim);
  for (double& v : x.flat()) v = rng.normal();
  std::vector<TargetVector> targets;
  for (std::size_t b = 0; b < cfg.batch; ++b) {
    TargetVector t(cfg.vocab_size);
    t.set(static_cast<std::size_t>(rng.below(cfg.vocab_size)));
    if (rng.uniform() < 0.5) t.set(static_cast<std::size_t>(rng.below(cfg.vocab_size)));
    targets.push_back(std::move(t));
  }
  std::vector<const TargetVector*> target_ptrs;
  for (const auto& t : targets) target_ptrs.push_back(&t);
  const LossConfig loss_cfg{variant};

  const auto base = forward_batch(params, x, vocab);
  const auto loss = batch_loss<double>(loss_cfg, base.logits, params.sigmoid_scale, target_ptrs);
  auto grads = backward_batch(params, base.cache, loss.d_logits, vocab);
  grads.params.sigmoid_scale = loss.d_scale;
  const std::vector<double> analytic = detail::flatten(grads.params);

  std::vector<bool> same_mask;
  RefinerParams<double> probe = params;
  auto f = [&](std::span<const double> theta) {
    detail::unflatten(theta, probe);
    const auto out = forward_batch(probe, x, vocab);
    same_mask.push_back(out.cache.mask == base.cache.mask);
    return batch_loss<double>(loss_cfg, out.logits, probe.sigmoid_scale, target_ptrs).value;
  };
  const std::vector<double> theta = detail::flatten(params);
  const std::vector<double> numeric = finite_diff_grad(f, theta, cfg.step);

  GradCheckResult result;
  result.loss = variant;
  result.seed = seed;
  std::size_t at = 0;
  std::size_t block_index = 0;
  for (auto block : params.blocks()) {
    double worst = 0.0;
    for (std::size_t i = at; i < at + block.size(); ++i) {
      if (!same_mask[2 * i] || !same_mask[2 * i + 1]) {
        ++result.excluded;
        continue;
      }
      ++result.checked;
      worst = std::max(worst, max_relative_error(std::span(&analytic[i], 1), std::span(&numeric[i], 1)));
    }
    result.block_error[block_index++] = worst;
    result.max_rel_error = std::max(result.max_rel_error, worst);
    at += block.size();
  }
  return result;
}

}  // namespace sense
