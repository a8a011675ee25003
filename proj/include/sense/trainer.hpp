#pragma once

// AdamW with cosine annealing, the epoch loop and retrieval evaluation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sense/datagen.hpp"
#include "sense/embedding_io.hpp"
#include "sense/errors.hpp"
#include "sense/losses.hpp"
#include "sense/refiner.hpp"
#include "sense/retrieval.hpp"
#include "sense/rng.hpp"

namespace sense {

struct TrainConfig {
  double lr_max = 1e-4;
  double weight_decay = 1e-2;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  LossConfig loss{};
  double eta_min = 0.0;
  // When false, decay applies to W1 and W2 only.
  bool decay_norms_and_biases = true;
  std::size_t top_k = kDefaultTopK;
  InitConfig init{};

  // 100 epochs for contrastive, 50 otherwise.
  static std::size_t default_epochs(LossVariant v) { return v == LossVariant::contrastive ? 100 : 50; }

  void validate() const {
    if (!(lr_max >= 0.0)) throw UsageError("train: lr_max must be non-negative");
    if (epochs < 1) throw UsageError("train: epochs must be at least 1");
    if (batch_size < 1) throw UsageError("train: batch_size must be at least 1");
    if (loss.variant == LossVariant::naive) throw UsageError("train: the naive baseline is not trainable");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr_max", c.lr_max},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"loss_variant", std::string(to_string(c.loss.variant))},
          {"tau", c.loss.tau},
          {"gamma", c.loss.gamma},
          {"alpha", c.loss.alpha},
          {"eta_min", c.eta_min},
          {"decay_norms_and_biases", c.decay_norms_and_biases},
          {"top_k", c.top_k},
          {"init_scheme", std::string(to_string(c.init.scheme))},
          {"init_perturbation", c.init.perturbation},
          {"init_sigmoid_scale", c.init.sigmoid_scale}};
}

// ------------------------------------------------------------------ AdamW

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  RefinerParams<T> m;
  RefinerParams<T> v;
  std::uint64_t step = 0;
  AdamWHyper hyper{};

  static OptimizerState for_params(const RefinerParams<T>& p) {
    return {RefinerParams<T>::zeros(p.shape()), RefinerParams<T>::zeros(p.shape()), 0, {}};
  }
};

// Decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// `decay_mask[b]` selects which parameter blocks are decayed.
template <typename T>
void adamw_step(RefinerParams<T>& params, const RefinerParams<T>& grads, OptimizerState<T>& state, double lr,
                double weight_decay, const std::array<bool, kParamBlockCount>& decay_mask) {
  if (params.shape() != grads.shape() || params.shape() != state.m.shape()) {
    throw UsageError("adamw_step: shape mismatch");
  }
  if (!(lr >= 0.0)) throw UsageError("adamw_step: lr must be non-negative");
  const auto& h = state.hyper;
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  auto p = params.blocks();
  auto g = grads.blocks();
  auto m = state.m.blocks();
  auto v = state.v.blocks();
  // Elementwise work runs in the storage type; it is not a reduction.
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2), eps = static_cast<T>(h.eps);
  const T one_minus_b1 = static_cast<T>(1.0 - h.beta1), one_minus_b2 = static_cast<T>(1.0 - h.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  for (std::size_t b = 0; b < kParamBlockCount; ++b) {
    const T decay = static_cast<T>(lr * (decay_mask[b] ? weight_decay : 0.0));
    T* pp = p[b].data();
    const T* gp = g[b].data();
    T* mp = m[b].data();
    T* vp = v[b].data();
    const std::size_t n = p[b].size();
    for (std::size_t i = 0; i < n; ++i) {
      const T gi = gp[i];
      const T mi = b1 * mp[i] + one_minus_b1 * gi;
      const T vi = b2 * vp[i] + one_minus_b2 * gi * gi;
      mp[i] = mi;
      vp[i] = vi;
      // lr * m_hat / (sqrt(v_hat) + eps), with m_hat = m / bc1 and v_hat = v / bc2
      const T theta = pp[i];
      pp[i] = theta - step_size * mi / (std::sqrt(vi) * inv_sqrt_bc2 + eps) - decay * theta;
    }
  }
}

template <typename T>
void adamw_step(RefinerParams<T>& params, const RefinerParams<T>& grads, OptimizerState<T>& state, double lr,
                double weight_decay) {
  std::array<bool, kParamBlockCount> all;
  all.fill(true);
  adamw_step(params, grads, state, lr, weight_decay, all);
}

inline std::array<bool, kParamBlockCount> decay_mask(bool decay_norms_and_biases) {
  if (decay_norms_and_biases) return {true, true, true, true, true, true, true};
  return {true, false, false, false, true, false, false};
}

inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr_max, double eta_min = 0.0) {
  if (total_epochs == 0 || epoch > total_epochs) throw UsageError("cosine_lr: epoch out of range");
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return eta_min + 0.5 * (lr_max - eta_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ------------------------------------------------------------- Evaluation

struct RetrievalAggregate {
  double precision_at_k = 0.0;
  double recall_at_k = 0.0;
  double mean_rank = 0.0;
  std::size_t samples = 0;  // samples with at least one positive
};

struct EvalResult {
  RetrievalAggregate overall;
  std::map<int, RetrievalAggregate> by_subject;
  std::size_t k = kDefaultTopK;
};

inline nlohmann::json to_json(const RetrievalAggregate& a) {
  return {{"precision_at_k", a.precision_at_k},
          {"recall_at_k", a.recall_at_k},
          {"mean_rank", a.mean_rank},
          {"samples", a.samples}};
}

inline nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json subjects = nlohmann::json::object();
  for (const auto& [s, a] : r.by_subject) subjects[std::to_string(s)] = to_json(a);
  return {{"k", r.k}, {"overall", to_json(r.overall)}, {"by_subject", subjects}};
}

inline Matrix<float> stack_inputs(std::span<const Sample* const> samples) {
  if (samples.empty()) return {};
  Matrix<float> x(samples.size(), samples.front()->x.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->x.size() != x.cols()) throw DataError(DataErrc::dim_mismatch, "sample " + samples[i]->id);
    std::copy(samples[i]->x.begin(), samples[i]->x.end(), x.row(i).begin());
  }
  return x;
}

// Scores every sample with `score_fn` (batched input -> B x V logits) and
// aggregates precision/recall@k and mean positive rank, overall and per
// subject. Samples without positives are left out of the means.
template <typename ScoreFn>
EvalResult evaluate_with(std::span<const Sample* const> samples, std::size_t k, ScoreFn&& score_fn,
                         std::size_t chunk = 256) {
  struct Acc {
    double p = 0, r = 0, rank = 0;
    std::size_t n = 0;
  };
  Acc overall;
  std::map<int, Acc> subjects;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const auto part = samples.subspan(start, std::min(chunk, samples.size() - start));
    const Matrix<float> logits = score_fn(stack_inputs(part));
    for (std::size_t i = 0; i < part.size(); ++i) {
      const Sample& s = *part[i];
      auto row = logits.row(i);
      const std::size_t kk = std::min(k, row.size());
      // Ranking alone; token names are irrelevant here.
      std::vector<std::size_t> order(row.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(),
                        [&](std::size_t a, std::size_t b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
      order.resize(kk);
      const RetrievalScore rs = retrieval_metrics(order, s.target, k);
      if (!rs.has_positives) {
        subjects[s.subject];  // subject still listed
        continue;
      }
      const double rank = mean_positive_rank<float>(row, s.target);
      for (Acc* a : {&overall, &subjects[s.subject]}) {
        a->p += rs.precision;
        a->r += rs.recall;
        a->rank += rank;
        ++a->n;
      }
    }
  }
  auto finish = [](const Acc& a) {
    RetrievalAggregate out;
    out.samples = a.n;
    if (a.n) {
      out.precision_at_k = a.p / static_cast<double>(a.n);
      out.recall_at_k = a.r / static_cast<double>(a.n);
      out.mean_rank = a.rank / static_cast<double>(a.n);
    }
    return out;
  };
  EvalResult result;
  result.k = k;
  result.overall = finish(overall);
  for (const auto& [s, a] : subjects) result.by_subject[s] = finish(a);
  return result;
}

inline EvalResult evaluate(const RefinerParams<float>& params, std::span<const Sample* const> samples,
                           const VocabEmbeddings& vocab, std::size_t k = kDefaultTopK) {
  if (samples.empty()) throw UsageError("evaluate: empty split");
  return evaluate_with(samples, k, [&](const Matrix<float>& x) {
    return forward_batch(params, x, vocab.unit_rows()).logits;
  });
}

inline EvalResult evaluate_naive(std::span<const Sample* const> samples, const VocabEmbeddings& vocab,
                                 std::size_t k = kDefaultTopK) {
  if (samples.empty()) throw UsageError("evaluate: empty split");
  return evaluate_with(samples, k,
                       [&](const Matrix<float>& x) { return naive_logits_batch(x, vocab.unit_rows()); });
}

inline std::vector<const Sample*> select_split(std::span<const Sample> samples, Split split) {
  std::vector<const Sample*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

// ------------------------------------------------------------------ fit

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_precision;
  std::optional<double> val_recall;
  double lr = 0.0;
};

struct TrainReport {
  TrainConfig config;
  std::vector<EpochRecord> epochs;
  double wall_clock_seconds = 0.0;
  std::string checkpoint_path;
  std::string rng_algorithm = Rng::kAlgorithm;
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t param_count = 0;
};

// `include_timing` false drops the wall-clock field so reruns compare equal.
inline nlohmann::json to_json(const TrainReport& r, bool include_timing = true) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_precision_at_k", e.val_precision ? nlohmann::json(*e.val_precision) : nlohmann::json()},
                      {"val_recall_at_k", e.val_recall ? nlohmann::json(*e.val_recall) : nlohmann::json()},
                      {"lr", e.lr}});
  }
  nlohmann::json j = {{"config", to_json(r.config)},
                      {"epochs", epochs},
                      {"checkpoint_path", r.checkpoint_path},
                      {"rng_algorithm", r.rng_algorithm},
                      {"train_samples", r.train_samples},
                      {"val_samples", r.val_samples},
                      {"param_count", r.param_count}};
  if (include_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

struct FitResult {
  Checkpoint checkpoint;
  TrainReport report;
};

// Trains a fresh refiner on the train split for config.epochs, stepping the
// learning rate once per epoch and scoring the val split after each epoch.
// Subject ids are never read.
inline FitResult fit(std::span<const Sample> dataset, const VocabEmbeddings& vocab, const TrainConfig& config,
                     RefinerShape shape = {}) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto train = select_split(dataset, Split::train);
  const auto val = select_split(dataset, Split::val);
  if (train.empty()) throw UsageError("fit: empty train split");
  if (shape.out_dim != vocab.dim()) throw UsageError("fit: refiner output dim differs from vocabulary dim");

  FitResult result;
  result.checkpoint.seed = config.seed;
  result.checkpoint.loss = config.loss.variant;
  RefinerParams<float>& params = result.checkpoint.params;
  params = init_params<float>(config.seed, shape, config.init);
  auto state = OptimizerState<float>::for_params(params);
  const auto mask = decay_mask(config.decay_norms_and_biases);
  Rng shuffle_rng(config.seed);
  std::vector<const Sample*> order(train.begin(), train.end());

  TrainReport& report = result.report;
  report.config = config;
  report.train_samples = train.size();
  report.val_samples = val.size();
  report.param_count = param_count(params);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, config.epochs, config.lr_max, config.eta_min);
    shuffle_rng.shuffle(std::span<const Sample*>(order));
    double loss_sum = 0.0;
    std::size_t loss_batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const auto batch = std::span<const Sample* const>(order).subspan(b0, std::min(config.batch_size, order.size() - b0));
      const Matrix<float> x = stack_inputs(batch);
      std::vector<const TargetVector*> targets;
      for (const Sample* s : batch) targets.push_back(&s->target);
      auto fwd = forward_batch(params, x, vocab.unit_rows());
      auto loss = batch_loss<float>(config.loss, fwd.logits, params.sigmoid_scale, targets);
      if (!std::isfinite(loss.value) || !std::isfinite(loss.d_scale)) {
        throw DataError(DataErrc::non_finite, "fit: non-finite loss at epoch " + std::to_string(epoch) +
                                                  ", batch starting " + std::to_string(b0));
      }
      if (loss.counted == 0) continue;
      auto grads = backward_batch(params, fwd.cache, loss.d_logits, vocab.unit_rows());
      grads.params.sigmoid_scale = static_cast<float>(loss.d_scale);
      adamw_step(params, grads.params, state, lr, config.weight_decay, mask);
      loss_sum += loss.value;
      ++loss_batches;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_batches ? loss_sum / static_cast<double>(loss_batches) : 0.0;
    if (!val.empty()) {
      const EvalResult ev = evaluate(params, val, vocab, config.top_k);
      rec.val_precision = ev.overall.precision_at_k;
      rec.val_recall = ev.overall.recall_at_k;
    }
    report.epochs.push_back(rec);
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace sense
