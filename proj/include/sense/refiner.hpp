#pragma once

// Similarity refiner: z = W2 ReLU(LayerNorm(W1 x + b1)) + b2, scored against
// the frozen vocabulary by cosine similarity.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sense/embedding_io.hpp"
#include "sense/errors.hpp"
#include "sense/numerics.hpp"
#include "sense/rng.hpp"

namespace sense {

struct RefinerShape {
  std::size_t in_dim = 512;
  std::size_t hidden = 1024;
  std::size_t out_dim = 512;

  bool operator==(const RefinerShape&) const = default;
};

inline constexpr double kInitSigmoidScale = 10.0;

// Checkpoint provenance tag.
enum class LossVariant : std::uint8_t { naive = 0, bce = 1, contrastive = 2, focal = 3 };

inline std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::naive: return "naive";
    case LossVariant::bce: return "bce";
    case LossVariant::contrastive: return "contrastive";
    case LossVariant::focal: return "focal";
  }
  return "naive";
}

inline LossVariant parse_loss_variant(std::string_view s) {
  if (s == "naive") return LossVariant::naive;
  if (s == "bce") return LossVariant::bce;
  if (s == "contrastive") return LossVariant::contrastive;
  if (s == "focal") return LossVariant::focal;
  throw UsageError("unknown loss variant '" + std::string(s) + "'");
}

inline constexpr std::size_t kParamBlockCount = 7;
inline constexpr std::array<std::string_view, kParamBlockCount> kParamBlockNames = {
    "W1", "b1", "ln_gamma", "ln_beta", "W2", "b2", "sigmoid_scale"};

// Every trainable tensor, including the sigmoid scale the losses consume.
// Also used as the gradient container.
template <typename T>
struct RefinerParams {
  Matrix<T> w1;
  Vector<T> b1;
  Vector<T> ln_gamma;
  Vector<T> ln_beta;
  Matrix<T> w2;
  Vector<T> b2;
  T sigmoid_scale{};

  static RefinerParams zeros(const RefinerShape& s) {
    RefinerParams p;
    p.w1 = Matrix<T>(s.hidden, s.in_dim);
    p.b1.assign(s.hidden, T{0});
    p.ln_gamma.assign(s.hidden, T{0});
    p.ln_beta.assign(s.hidden, T{0});
    p.w2 = Matrix<T>(s.out_dim, s.hidden);
    p.b2.assign(s.out_dim, T{0});
    p.sigmoid_scale = T{0};
    return p;
  }

  RefinerShape shape() const { return {w1.cols(), w1.rows(), w2.rows()}; }

  // Fixed order: W1, b1, ln_gamma, ln_beta, W2, b2, sigmoid_scale.
  std::array<std::span<T>, kParamBlockCount> blocks() {
    return {w1.flat(), std::span<T>(b1), std::span<T>(ln_gamma), std::span<T>(ln_beta),
            w2.flat(), std::span<T>(b2), std::span<T>(&sigmoid_scale, 1)};
  }
  std::array<std::span<const T>, kParamBlockCount> blocks() const {
    return {w1.flat(), std::span<const T>(b1), std::span<const T>(ln_gamma), std::span<const T>(ln_beta),
            w2.flat(), std::span<const T>(b2), std::span<const T>(&sigmoid_scale, 1)};
  }

  bool operator==(const RefinerParams&) const = default;
};

template <typename T>
std::size_t param_count(const RefinerParams<T>& p) {
  std::size_t n = 0;
  for (auto b : p.blocks()) n += b.size();
  return n;
}

template <typename To, typename From>
RefinerParams<To> cast_params(const RefinerParams<From>& p) {
  RefinerParams<To> out = RefinerParams<To>::zeros(p.shape());
  auto src = p.blocks();
  auto dst = out.blocks();
  for (std::size_t b = 0; b < kParamBlockCount; ++b)
    for (std::size_t i = 0; i < src[b].size(); ++i) dst[b][i] = static_cast<To>(src[b][i]);
  return out;
}

enum class InitScheme : std::uint8_t {
  // W1, W2 ~ U(-a, a), a = sqrt(6 / fan_in).
  he_uniform,
  // W1 = [I; -I] and W2 = [I, -I], so ReLU(LayerNorm(W1 x)) splits x into its
  // positive and negative parts and W2 recombines them: z = x / std(x) and
  // the refiner starts out ranking exactly like raw cosine retrieval. A
  // He-uniform draw scaled by `perturbation` is added on top. Needs
  // hidden == 2 * in_dim and out_dim == in_dim.
  identity_pair,
};

inline std::string_view to_string(InitScheme s) {
  return s == InitScheme::he_uniform ? "he_uniform" : "identity_pair";
}

inline InitScheme parse_init_scheme(std::string_view s) {
  if (s == "he_uniform") return InitScheme::he_uniform;
  if (s == "identity_pair") return InitScheme::identity_pair;
  throw UsageError("unknown init scheme '" + std::string(s) + "'");
}

struct InitConfig {
  InitScheme scheme = InitScheme::identity_pair;
  double perturbation = 0.1;
  double sigmoid_scale = kInitSigmoidScale;
};

// Zero biases, unit LayerNorm gain, zero LayerNorm shift; weights per scheme.
// Deterministic in `seed`.
template <typename T = float>
RefinerParams<T> init_params(std::uint64_t seed, const RefinerShape& shape = {}, const InitConfig& init = {}) {
  const bool identity = init.scheme == InitScheme::identity_pair;
  if (identity && (shape.hidden != 2 * shape.in_dim || shape.out_dim != shape.in_dim)) {
    throw UsageError("identity_pair init needs hidden == 2 * in_dim and out_dim == in_dim");
  }
  Rng rng(seed);
  auto p = RefinerParams<T>::zeros(shape);
  const double noise = identity ? init.perturbation : 1.0;
  const double a1 = noise * std::sqrt(6.0 / static_cast<double>(shape.in_dim));
  for (T& w : p.w1.flat()) w = static_cast<T>(rng.uniform(-a1, a1));
  const double a2 = noise * std::sqrt(6.0 / static_cast<double>(shape.hidden));
  for (T& w : p.w2.flat()) w = static_cast<T>(rng.uniform(-a2, a2));
  if (identity) {
    for (std::size_t i = 0; i < shape.in_dim; ++i) {
      p.w1(i, i) += T{1};
      p.w1(shape.in_dim + i, i) -= T{1};
      p.w2(i, i) += T{1};
      p.w2(i, shape.in_dim + i) -= T{1};
    }
  }
  std::fill(p.ln_gamma.begin(), p.ln_gamma.end(), T{1});
  p.sigmoid_scale = static_cast<T>(init.sigmoid_scale);
  return p;
}

template <typename T>
struct RefinerCache {
  Matrix<T> x;
  std::vector<LayerNormCache<T>> ln;
  std::vector<ReluMask> mask;
  Matrix<T> h;
  NormalizedRows<T> z_unit;
};

template <typename T>
struct RefinerOutput {
  Matrix<T> z;       // B x out_dim refined latents
  Matrix<T> logits;  // B x V cosine scores
  RefinerCache<T> cache;
};

namespace detail {

template <typename T>
void add_row_bias(Matrix<T>& m, std::span<const T> bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = static_cast<T>(static_cast<double>(row[c]) + bias[c]);
  }
}

template <typename T>
Vector<T> column_sums(const Matrix<T>& m) {
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
  }
  return Vector<T>(acc.begin(), acc.end());
}

}  // namespace detail

// Batched forward pass; row b of `x` is one sample. A refined latent below the
// norm floor raises DegenerateInputError naming its row.
template <typename T>
RefinerOutput<T> forward_batch(const RefinerParams<T>& params, const Matrix<T>& x, const UnitRows<T>& vocab) {
  const RefinerShape s = params.shape();
  if (x.cols() != s.in_dim) throw UsageError("refiner forward: input dim mismatch");
  if (vocab.dim() != s.out_dim) throw UsageError("refiner forward: vocabulary dim mismatch");
  if (!all_finite(x.flat())) throw DataError(DataErrc::non_finite, "refiner forward: non-finite input");

  RefinerOutput<T> out;
  RefinerCache<T>& c = out.cache;
  c.x = x;
  // x W1^T computed as (W1 x^T)^T keeps the large weight matrix untransposed.
  Matrix<T> pre = transpose(matmul(params.w1, transpose(x)));
  detail::add_row_bias<T>(pre, params.b1);

  c.h = Matrix<T>(x.rows(), s.hidden);
  c.ln.reserve(x.rows());
  c.mask.reserve(x.rows());
  for (std::size_t b = 0; b < x.rows(); ++b) {
    auto [normed, ln_cache] = layer_norm<T>(pre.row(b), params.ln_gamma, params.ln_beta);
    auto [hidden, mask] = relu<T>(normed);
    std::copy(hidden.begin(), hidden.end(), c.h.row(b).begin());
    c.ln.push_back(std::move(ln_cache));
    c.mask.push_back(std::move(mask));
  }

  out.z = transpose(matmul(params.w2, transpose(c.h)));
  detail::add_row_bias<T>(out.z, params.b2);
  c.z_unit = normalize_rows(out.z);
  out.logits = unit_similarity(c.z_unit.unit, vocab);
  return out;
}

template <typename T>
RefinerOutput<T> forward(const RefinerParams<T>& params, std::span<const T> x, const UnitRows<T>& vocab) {
  return forward_batch(params, Matrix<T>(1, x.size(), std::vector<T>(x.begin(), x.end())), vocab);
}

template <typename T>
struct RefinerGrads {
  RefinerParams<T> params;  // sigmoid_scale slot left at 0; the loss owns it
  std::optional<Matrix<T>> d_x;
};

// Gradients summed over the batch rows of `d_logits`. The vocabulary matrix
// is frozen and receives none.
template <typename T>
RefinerGrads<T> backward_batch(const RefinerParams<T>& params, const RefinerCache<T>& cache,
                               const Matrix<T>& d_logits, const UnitRows<T>& vocab, bool want_dx = false) {
  const RefinerShape s = params.shape();
  const std::size_t batch = cache.x.rows();
  if (d_logits.rows() != batch || d_logits.cols() != vocab.count()) {
    throw UsageError("refiner backward: d_logits shape mismatch");
  }
  RefinerGrads<T> g{RefinerParams<T>::zeros(s), std::nullopt};

  // Through the cosine: d(unit z) = d_logits * E_unit, then the L2 Jacobian.
  Matrix<T> d_zunit = matmul(d_logits, vocab.rows());
  Matrix<T> d_z(batch, s.out_dim);
  for (std::size_t b = 0; b < batch; ++b) {
    auto unit = cache.z_unit.unit.row(b);
    auto dzu = d_zunit.row(b);
    const double proj = dot<T>(unit, dzu);
    const double norm = cache.z_unit.norms[b];
    auto dz = d_z.row(b);
    for (std::size_t i = 0; i < s.out_dim; ++i) dz[i] = static_cast<T>((dzu[i] - unit[i] * proj) / norm);
  }

  g.params.b2 = detail::column_sums(d_z);
  g.params.w2 = matmul(transpose(d_z), cache.h);
  Matrix<T> d_h = matmul(d_z, params.w2);

  Matrix<T> d_pre(batch, s.hidden);
  std::vector<double> d_gamma(s.hidden, 0.0), d_beta(s.hidden, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const Vector<T> d_ln = relu_backward<T>(cache.mask[b], d_h.row(b));
    const auto ln = layer_norm_backward<T>(cache.ln[b], d_ln);
    std::copy(ln.d_x.begin(), ln.d_x.end(), d_pre.row(b).begin());
    for (std::size_t i = 0; i < s.hidden; ++i) {
      d_gamma[i] += ln.d_gamma[i];
      d_beta[i] += ln.d_beta[i];
    }
  }
  g.params.ln_gamma.assign(d_gamma.begin(), d_gamma.end());
  g.params.ln_beta.assign(d_beta.begin(), d_beta.end());
  g.params.b1 = detail::column_sums(d_pre);
  g.params.w1 = matmul(transpose(d_pre), cache.x);
  if (want_dx) g.d_x = matmul(d_pre, params.w1);
  return g;
}

// ---------------------------------------------------------------- Checkpoint

inline constexpr std::string_view kCheckpointMagic = "SENSECKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RefinerParams<float> params;
  std::uint64_t seed = 0;
  LossVariant loss = LossVariant::naive;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic);
  le::put_u32(out, kCheckpointVersion);
  le::put_u64(out, ck.seed);
  le::put_u8(out, static_cast<std::uint8_t>(ck.loss));
  for (auto block : ck.params.blocks()) {
    le::put_u32(out, static_cast<std::uint32_t>(block.size()));
    for (float v : block) le::put_f32(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    if (bytes.size() < kCheckpointMagic.size() && kCheckpointMagic.substr(0, bytes.size()) == bytes) {
      throw DataError(DataErrc::truncated, what + ": truncated header");
    }
    throw DataError(DataErrc::bad_magic, what + ": missing SENSECKPT1 header");
  }
  le::Reader r(bytes, what);
  r.take(kCheckpointMagic.size());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError(DataErrc::version_mismatch, what + ": format version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.seed = r.u64();
  const std::uint8_t tag = r.u8();
  if (tag > 3) throw DataError(DataErrc::parse, what + ": unknown loss tag " + std::to_string(tag));
  ck.loss = static_cast<LossVariant>(tag);

  std::array<std::vector<float>, kParamBlockCount> raw;
  for (std::size_t b = 0; b < kParamBlockCount; ++b) {
    const std::uint32_t len = r.u32();
    if (r.remaining() < std::uint64_t{len} * 4) {
      throw DataError(DataErrc::truncated, what + ": block " + std::string(kParamBlockNames[b]) + " truncated");
    }
    raw[b].resize(len);
    for (auto& v : raw[b]) {
      v = r.f32();
      if (!std::isfinite(v)) {
        throw DataError(DataErrc::non_finite, what + ": non-finite value in " + std::string(kParamBlockNames[b]));
      }
    }
  }
  if (r.remaining() != 0) throw DataError(DataErrc::parse, what + ": trailing bytes");

  const std::size_t hidden = raw[1].size();
  const std::size_t out_dim = raw[5].size();
  if (hidden == 0 || out_dim == 0 || raw[0].size() % hidden != 0 || raw[2].size() != hidden ||
      raw[3].size() != hidden || raw[4].size() != out_dim * hidden || raw[6].size() != 1) {
    throw DataError(DataErrc::dim_mismatch, what + ": inconsistent parameter block sizes");
  }
  const std::size_t in_dim = raw[0].size() / hidden;
  ck.params.w1 = Matrix<float>(hidden, in_dim, std::move(raw[0]));
  ck.params.b1 = std::move(raw[1]);
  ck.params.ln_gamma = std::move(raw[2]);
  ck.params.ln_beta = std::move(raw[3]);
  ck.params.w2 = Matrix<float>(out_dim, hidden, std::move(raw[4]));
  ck.params.b2 = std::move(raw[5]);
  ck.params.sigmoid_scale = raw[6][0];
  if (!(ck.params.sigmoid_scale > 0.0f)) throw DataError(DataErrc::parse, what + ": sigmoid_scale must be positive");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path), path);
}

}  // namespace sense
