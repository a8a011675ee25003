#pragma once

// Synthetic vocabulary embeddings and (embedding, target) datasets standing in
// for real Stage-1 outputs at desk scale.
//
// Signal model: x = normalize(sum of active rows [+ one distractor row]) + noise.
// The noise is Gaussian with covariance
//   sigma^2 * (iso_gain^2 / dim * I + nuisance_gain^2 / rank * U U^T)
// where U spans a fixed, seeded `nuisance_rank`-dimensional subspace. The
// low-rank part is the modality mismatch a refiner can learn to remove; raw
// cosine retrieval cannot.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "sense/embedding_io.hpp"
#include "sense/numerics.hpp"
#include "sense/rng.hpp"
#include "sense/vocabulary.hpp"

namespace sense {

struct SynthConfig {
  std::size_t vocab_size = 200;
  std::size_t dim = kEmbeddingDim;
  std::size_t n_samples = 2000;
  std::size_t active_per_sample = 5;
  double noise_sigma = 1.0;
  double distractor_rate = 0.0;
  std::uint64_t seed = 1;
  int subjects = 6;
  std::size_t nuisance_rank = 16;
  double nuisance_gain = 8.0;
  double iso_gain = 1.0;
};

struct Sample {
  std::string id;
  Vector<float> x;
  TargetVector target;
  int subject = 1;
  Split split = Split::train;
};

struct SyntheticVocab {
  Vocabulary vocab;
  Matrix<float> embeddings;  // V x dim, unit rows
};

inline std::string synth_token_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "tok%04zu", i);
  return buf;
}

inline void validate(const SynthConfig& cfg) {
  if (cfg.vocab_size == 0) throw UsageError("synth: vocabulary size must be at least 1");
  if (cfg.dim == 0) throw UsageError("synth: dim must be at least 1");
  if (cfg.active_per_sample > cfg.vocab_size) throw UsageError("synth: active_per_sample exceeds V");
  if (!(cfg.noise_sigma >= 0.0)) throw UsageError("synth: noise_sigma must be non-negative");
  if (!(cfg.distractor_rate >= 0.0 && cfg.distractor_rate <= 1.0)) throw UsageError("synth: distractor_rate in [0,1]");
  if (cfg.subjects < 1) throw UsageError("synth: subjects must be at least 1");
  if (cfg.nuisance_rank > cfg.dim) throw UsageError("synth: nuisance_rank exceeds dim");
}

// Seeded isotropic Gaussian rows, each scaled to unit norm.
inline SyntheticVocab synth_vocab_embeddings(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  Matrix<float> e(cfg.vocab_size, cfg.dim);
  std::vector<double> row(cfg.dim);
  for (std::size_t r = 0; r < cfg.vocab_size; ++r) {
    double norm2 = 0.0;
    for (double& v : row) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t c = 0; c < cfg.dim; ++c) e(r, c) = static_cast<float>(row[c] * inv);
  }
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < cfg.vocab_size; ++i) tokens.push_back(synth_token_name(i));
  return {Vocabulary(std::move(tokens)), std::move(e)};
}

namespace detail {

// Orthonormal basis (rows) of a random subspace, by Gram-Schmidt.
inline std::vector<std::vector<double>> random_orthonormal_rows(Rng& rng, std::size_t rank, std::size_t dim) {
  std::vector<std::vector<double>> basis;
  while (basis.size() < rank) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& b : basis) {
      double p = 0.0;
      for (std::size_t i = 0; i < dim; ++i) p += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * b[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

}  // namespace detail

// Per sample: `active_per_sample` tokens drawn without replacement, the noisy
// composite embedding, its N-hot target, a round-robin subject and an
// 80/10/10 split assigned by seeded shuffle.
inline std::vector<Sample> synth_dataset(const SynthConfig& cfg, const Matrix<float>& embeddings) {
  validate(cfg);
  if (embeddings.rows() != cfg.vocab_size || embeddings.cols() != cfg.dim) {
    throw UsageError("synth_dataset: embedding matrix does not match config");
  }
  // Separate streams so changing one knob leaves the others' draws intact.
  Rng nuisance_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  Rng rng(cfg.seed + 1);
  Rng split_rng(cfg.seed + 2);
  const auto nuisance = detail::random_orthonormal_rows(nuisance_rng, cfg.nuisance_rank, cfg.dim);
  const double iso_std = cfg.noise_sigma * cfg.iso_gain / std::sqrt(static_cast<double>(cfg.dim));
  const double nuisance_std =
      cfg.nuisance_rank ? cfg.noise_sigma * cfg.nuisance_gain / std::sqrt(static_cast<double>(cfg.nuisance_rank)) : 0.0;

  std::vector<Sample> samples(cfg.n_samples);
  std::vector<std::size_t> pool(cfg.vocab_size);
  std::vector<double> signal(cfg.dim);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    Sample& s = samples[i];
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%06zu", i);
    s.id = buf;
    s.subject = static_cast<int>(i % static_cast<std::size_t>(cfg.subjects)) + 1;

    // Partial Fisher-Yates picks distinct tokens.
    for (std::size_t j = 0; j < pool.size(); ++j) pool[j] = j;
    s.target = TargetVector(cfg.vocab_size);
    std::fill(signal.begin(), signal.end(), 0.0);
    for (std::size_t a = 0; a < cfg.active_per_sample; ++a) {
      const std::size_t pick = a + static_cast<std::size_t>(rng.below(pool.size() - a));
      std::swap(pool[a], pool[pick]);
      s.target.set(pool[a]);
      auto row = embeddings.row(pool[a]);
      for (std::size_t c = 0; c < cfg.dim; ++c) signal[c] += row[c];
    }
    const bool distract = cfg.distractor_rate > 0.0 && rng.uniform() < cfg.distractor_rate &&
                          cfg.active_per_sample < cfg.vocab_size;
    if (distract) {
      const std::size_t a = cfg.active_per_sample;
      const std::size_t pick = a + static_cast<std::size_t>(rng.below(pool.size() - a));
      auto row = embeddings.row(pool[pick]);
      for (std::size_t c = 0; c < cfg.dim; ++c) signal[c] += row[c];
    }
    double norm = 0.0;
    for (double v : signal) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& v : signal) v /= norm;
    }

    s.x.assign(cfg.dim, 0.0f);
    for (std::size_t c = 0; c < cfg.dim; ++c) {
      const double iso = cfg.noise_sigma > 0.0 ? iso_std * rng.normal() : 0.0;
      s.x[c] = static_cast<float>(signal[c] + iso);
    }
    if (cfg.noise_sigma > 0.0) {
      for (const auto& u : nuisance) {
        const double coef = nuisance_std * rng.normal();
        for (std::size_t c = 0; c < cfg.dim; ++c) s.x[c] = static_cast<float>(s.x[c] + coef * u[c]);
      }
    }
  }

  std::vector<std::size_t> order(cfg.n_samples);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  split_rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n_train = cfg.n_samples * 8 / 10;
  const std::size_t n_val = cfg.n_samples / 10;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    samples[order[rank]].split = rank < n_train ? Split::train : rank < n_train + n_val ? Split::val : Split::test;
  }
  return samples;
}

// Caption records for synthetic samples: the caption lists the active tokens,
// the object label is one of them and the confidence is a seeded draw in
// [0.5, 1). Lets the text side of the pipeline run on synthetic data.
inline std::vector<CaptionRecord> synth_corpus(std::span<const Sample> samples, const Vocabulary& vocab,
                                               std::uint64_t seed) {
  Rng rng(seed + 3);
  std::vector<CaptionRecord> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    CaptionRecord r;
    r.id = s.id;
    r.subject = s.subject;
    r.split = s.split;
    std::vector<std::string> tokens;
    for (std::size_t i : s.target.positives()) tokens.push_back(vocab.token(i));
    for (const auto& t : tokens) r.caption += (r.caption.empty() ? "" : " ") + t;
    if (!tokens.empty()) r.object_label = tokens[static_cast<std::size_t>(rng.below(tokens.size()))];
    r.object_confidence = 0.5 + 0.5 * rng.uniform();
    r.lemmas = std::move(tokens);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace sense
