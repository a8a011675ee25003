#pragma once

// SENSEEMB1 embedding files and the frozen vocabulary matrix.
//
// Layout: "SENSEEMB1" | u32 rows | u32 dim | rows*dim f32, all little-endian,
// row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sense/errors.hpp"
#include "sense/numerics.hpp"
#include "sense/vocabulary.hpp"

namespace sense {

inline constexpr std::string_view kEmbeddingMagic = "SENSEEMB1";
inline constexpr std::size_t kEmbeddingDim = 512;

namespace le {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

// Bounds-checked cursor over a byte buffer; running off the end is a
// truncation error.
class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) {
      throw DataError(DataErrc::truncated, what_ + ": unexpected end of file at byte " + std::to_string(pos_));
    }
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace le

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrc::parse, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(DataErrc::parse, "write failed for " + path);
}

inline std::string encode_embeddings(const Matrix<float>& m) {
  std::string out(kEmbeddingMagic);
  out.reserve(out.size() + 8 + 4 * m.size());
  le::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  le::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  for (float v : m.flat()) le::put_f32(out, v);
  return out;
}

// Parses a SENSEEMB1 buffer. `expected_dim` is enforced; 0 accepts any dim.
inline Matrix<float> decode_embeddings(std::string_view bytes, std::size_t expected_dim = kEmbeddingDim,
                                       const std::string& what = "embeddings") {
  le::Reader r(bytes, what);
  if (bytes.size() < kEmbeddingMagic.size() || bytes.substr(0, kEmbeddingMagic.size()) != kEmbeddingMagic) {
    throw DataError(DataErrc::bad_magic, what + ": missing SENSEEMB1 header");
  }
  r.take(kEmbeddingMagic.size());
  const std::uint32_t rows = r.u32();
  const std::uint32_t dim = r.u32();
  if (expected_dim != 0 && dim != expected_dim) {
    throw DataError(DataErrc::dim_mismatch,
                    what + ": dim " + std::to_string(dim) + ", expected " + std::to_string(expected_dim));
  }
  const std::uint64_t count = std::uint64_t{rows} * dim;
  if (r.remaining() != count * 4) {
    if (r.remaining() < count * 4) {
      throw DataError(DataErrc::truncated, what + ": payload shorter than " + std::to_string(rows) + "x" +
                                               std::to_string(dim) + " floats");
    }
    throw DataError(DataErrc::parse, what + ": trailing bytes after payload");
  }
  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    data[i] = r.f32();
    if (!std::isfinite(data[i])) {
      throw DataError(DataErrc::non_finite, what + ": non-finite value at row " + std::to_string(i / dim) +
                                                ", col " + std::to_string(i % dim));
    }
  }
  return Matrix<float>(rows, dim, std::move(data));
}

inline void save_embeddings(const std::string& path, const Matrix<float>& m) {
  write_file_bytes(path, encode_embeddings(m));
}

inline Matrix<float> load_embeddings(const std::string& path, std::size_t expected_dim = kEmbeddingDim) {
  return decode_embeddings(read_file_bytes(path), expected_dim, path);
}

// Frozen V x dim matrix E plus its unit-row form. Nothing mutates it after
// construction, and it has no gradient slot.
class VocabEmbeddings {
 public:
  VocabEmbeddings(Matrix<float> matrix, std::string source_tag = {})
      : matrix_(std::move(matrix)), unit_(matrix_), source_tag_(std::move(source_tag)) {}

  std::size_t size() const noexcept { return matrix_.rows(); }
  std::size_t dim() const noexcept { return matrix_.cols(); }
  const Matrix<float>& matrix() const noexcept { return matrix_; }
  const UnitRows<float>& unit_rows() const noexcept { return unit_; }
  const std::string& source_tag() const noexcept { return source_tag_; }

 private:
  Matrix<float> matrix_;
  UnitRows<float> unit_;
  std::string source_tag_;
};

inline VocabEmbeddings load_vocab_embeddings(const std::string& path, const Vocabulary& vocab,
                                             std::size_t expected_dim = kEmbeddingDim) {
  Matrix<float> m = load_embeddings(path, expected_dim);
  if (m.rows() != vocab.size()) {
    throw DataError(DataErrc::row_count_mismatch, path + ": " + std::to_string(m.rows()) +
                                                      " rows for a vocabulary of " + std::to_string(vocab.size()));
  }
  // UnitRows validates every row against the norm floor.
  return VocabEmbeddings(std::move(m), path);
}

// Sidecar listing the sample id of each row of a dataset embedding file.
inline std::vector<std::string> read_id_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open id sidecar " + path);
  try {
    return nlohmann::json::parse(in).get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::parse, path + ": " + e.what());
  }
}

inline void write_id_sidecar(const std::string& path, const std::vector<std::string>& ids) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write " + path);
  out << nlohmann::json(ids).dump() << '\n';
}

}  // namespace sense
