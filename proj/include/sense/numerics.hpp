#pragma once

// Dense linear algebra and the differentiable primitives of the refiner.
//
// Storage is templated (float in production, double in gradient checks);
// every reduction accumulates in double, sequentially along the contraction
// axis, so a given build produces bit-identical results run to run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sense/errors.hpp"

namespace sense {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormFloor = 1e-8;

template <typename T>
using Vector = std::vector<T>;

template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw UsageError("Matrix: data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw UsageError("Matrix: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

template <typename T>
double l2_norm(std::span<const T> v) {
  return std::sqrt(dot(v, v));
}

// Tiled so both the reads and the writes stay within a few cache lines.
template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
  constexpr std::size_t kTile = 32;
  Matrix<T> t(a.cols(), a.rows());
  for (std::size_t i0 = 0; i0 < a.rows(); i0 += kTile) {
    const std::size_t i1 = std::min(i0 + kTile, a.rows());
    for (std::size_t j0 = 0; j0 < a.cols(); j0 += kTile) {
      const std::size_t j1 = std::min(j0 + kTile, a.cols());
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
    }
  }
  return t;
}

// C = A * B. Each output accumulates in double over k = 0..K-1 in order; the
// inner loop runs over output columns so it vectorizes without reordering the
// reduction.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw UsageError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " disagree");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix<T> c(m, n);
  constexpr std::size_t kBlock = 4;
  std::vector<double> acc(kBlock * n);
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    const std::size_t ib = std::min(kBlock, m - i0);
    std::fill(acc.begin(), acc.begin() + ib * n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b.row(p).data();
      for (std::size_t ii = 0; ii < ib; ++ii) {
        const double av = a(i0 + ii, p);
        if (av == 0.0) continue;
        double* arow = acc.data() + ii * n;
        for (std::size_t j = 0; j < n; ++j) arow[j] += av * static_cast<double>(brow[j]);
      }
    }
    for (std::size_t ii = 0; ii < ib; ++ii) {
      T* crow = c.row(i0 + ii).data();
      const double* arow = acc.data() + ii * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(arow[j]);
    }
  }
  return c;
}

// ---------------------------------------------------------------- LayerNorm

template <typename T>
struct LayerNormCache {
  std::vector<double> xhat;
  std::vector<T> gamma;
  double inv_std = 0.0;
};

template <typename T>
std::pair<Vector<T>, LayerNormCache<T>> layer_norm(std::span<const T> x, std::span<const T> gamma,
                                                   std::span<const T> beta,
                                                   double eps = kLayerNormEps) {
  const std::size_t d = x.size();
  if (d == 0 || gamma.size() != d || beta.size() != d) throw UsageError("layer_norm: shape mismatch");
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  double mean = 0.0;
  for (T v : x) mean += v;
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(d);

  LayerNormCache<T> cache;
  cache.inv_std = 1.0 / std::sqrt(var + eps);
  cache.xhat.resize(d);
  cache.gamma.assign(gamma.begin(), gamma.end());
  Vector<T> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    cache.xhat[i] = (x[i] - mean) * cache.inv_std;
    out[i] = static_cast<T>(gamma[i] * cache.xhat[i] + beta[i]);
  }
  return {std::move(out), std::move(cache)};
}

template <typename T>
struct LayerNormGrads {
  Vector<T> d_x;
  Vector<T> d_gamma;
  Vector<T> d_beta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const LayerNormCache<T>& cache, std::span<const T> d_out) {
  const std::size_t d = cache.xhat.size();
  if (d_out.size() != d) throw UsageError("layer_norm_backward: shape mismatch");
  LayerNormGrads<T> g{Vector<T>(d), Vector<T>(d), Vector<T>(d_out.begin(), d_out.end())};
  double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dxhat = static_cast<double>(d_out[i]) * cache.gamma[i];
    g.d_gamma[i] = static_cast<T>(d_out[i] * cache.xhat[i]);
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * cache.xhat[i];
  }
  mean_dxhat /= static_cast<double>(d);
  mean_dxhat_xhat /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double dxhat = static_cast<double>(d_out[i]) * cache.gamma[i];
    g.d_x[i] = static_cast<T>(cache.inv_std * (dxhat - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat));
  }
  return g;
}

// --------------------------------------------------------------------- ReLU

using ReluMask = std::vector<std::uint8_t>;

template <typename T>
std::pair<Vector<T>, ReluMask> relu(std::span<const T> x) {
  Vector<T> out(x.size());
  ReluMask mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = x[i] > T{0};
    out[i] = mask[i] ? x[i] : T{0};
  }
  return {std::move(out), std::move(mask)};
}

template <typename T>
Vector<T> relu_backward(const ReluMask& mask, std::span<const T> d_out) {
  if (mask.size() != d_out.size()) throw UsageError("relu_backward: shape mismatch");
  Vector<T> d_x(d_out.size());
  for (std::size_t i = 0; i < d_out.size(); ++i) d_x[i] = mask[i] ? d_out[i] : T{0};
  return d_x;
}

// ------------------------------------------------------------- L2 normalize

template <typename T>
struct L2Cache {
  Vector<T> unit;
  double norm = 0.0;
};

template <typename T>
std::pair<Vector<T>, L2Cache<T>> l2_normalize(std::span<const T> v, double norm_floor = kNormFloor) {
  const double norm = l2_norm(v);
  if (!(norm >= norm_floor)) {
    throw DegenerateInputError("l2_normalize: norm " + std::to_string(norm) + " below floor");
  }
  Vector<T> unit(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) unit[i] = static_cast<T>(v[i] / norm);
  L2Cache<T> cache{unit, norm};
  return {std::move(unit), std::move(cache)};
}

// d_v = (d_out - u <u, d_out>) / ||v||
template <typename T>
Vector<T> l2_normalize_backward(const L2Cache<T>& cache, std::span<const T> d_out) {
  if (d_out.size() != cache.unit.size()) throw UsageError("l2_normalize_backward: shape mismatch");
  const double proj = dot(std::span<const T>(cache.unit), d_out);
  Vector<T> d_v(d_out.size());
  for (std::size_t i = 0; i < d_out.size(); ++i) {
    d_v[i] = static_cast<T>((d_out[i] - cache.unit[i] * proj) / cache.norm);
  }
  return d_v;
}

// -------------------------------------------------------- Cosine similarity

template <typename T>
struct NormalizedRows {
  Matrix<T> unit;
  std::vector<double> norms;
};

// Divides every row by its L2 norm; a row below the floor is an error naming it.
template <typename T>
NormalizedRows<T> normalize_rows(const Matrix<T>& m, double norm_floor = kNormFloor) {
  NormalizedRows<T> out{Matrix<T>(m.rows(), m.cols()), std::vector<double>(m.rows())};
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double norm = l2_norm(m.row(r));
    if (!(norm >= norm_floor)) {
      throw DegenerateInputError("normalize_rows: norm " + std::to_string(norm) + " below floor", r);
    }
    out.norms[r] = norm;
    auto src = m.row(r);
    auto dst = out.unit.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] = static_cast<T>(src[c] / norm);
  }
  return out;
}

// A frozen set of unit-norm reference rows, stored transposed (dim x V) so
// similarity against it is a single matmul.
template <typename T>
class UnitRows {
 public:
  UnitRows() = default;
  explicit UnitRows(const Matrix<T>& rows) {
    auto n = normalize_rows(rows);
    unit_ = std::move(n.unit);
    unit_t_ = transpose(unit_);
  }
  std::size_t count() const noexcept { return unit_.rows(); }
  std::size_t dim() const noexcept { return unit_.cols(); }
  const Matrix<T>& rows() const noexcept { return unit_; }
  const Matrix<T>& transposed() const noexcept { return unit_t_; }

 private:
  Matrix<T> unit_;
  Matrix<T> unit_t_;
};

// The one similarity kernel: rows of `unit_queries` are already unit norm.
// Both the naive baseline and the refiner go through here.
template <typename T>
Matrix<T> unit_similarity(const Matrix<T>& unit_queries, const UnitRows<T>& refs) {
  if (unit_queries.cols() != refs.dim()) throw UsageError("cosine: dimension mismatch");
  Matrix<T> s = matmul(unit_queries, refs.transposed());
  for (T& v : s.flat()) v = std::clamp(v, T{-1}, T{1});
  return s;
}

template <typename T>
Matrix<T> cosine_logits(const Matrix<T>& queries, const UnitRows<T>& refs) {
  return unit_similarity(normalize_rows(queries).unit, refs);
}

template <typename T>
Matrix<T> cosine_logits(const Matrix<T>& queries, const Matrix<T>& refs) {
  return cosine_logits(queries, UnitRows<T>(refs));
}

// ------------------------------------------------------ Finite differences

inline constexpr double kFiniteDiffStep = 1e-3;

// Central-difference gradient of a scalar function at theta.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> theta,
                                            double h = kFiniteDiffStep) {
  if (!(h > 0.0)) throw UsageError("finite_diff_grad: step must be positive");
  std::vector<double> point(theta.begin(), theta.end());
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double saved = point[i];
    point[i] = saved + h;
    const double up = f(point);
    point[i] = saved - h;
    const double down = f(point);
    point[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Largest |a - n| / max(|a|, |n|, floor) over the coordinates. The floor keeps
// coordinates whose true gradient is ~0 from dominating through round-off.
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace sense
