#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sense {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a precondition (bad shape, bad flag, empty split).
class UsageError : public Error {
 public:
  using Error::Error;
};

enum class DataErrc {
  bad_magic,
  version_mismatch,
  dim_mismatch,
  row_count_mismatch,
  non_finite,
  truncated,
  degenerate,
  parse,
};

inline const char* to_string(DataErrc c) {
  switch (c) {
    case DataErrc::bad_magic: return "bad_magic";
    case DataErrc::version_mismatch: return "version_mismatch";
    case DataErrc::dim_mismatch: return "dim_mismatch";
    case DataErrc::row_count_mismatch: return "row_count_mismatch";
    case DataErrc::non_finite: return "non_finite";
    case DataErrc::truncated: return "truncated";
    case DataErrc::degenerate: return "degenerate";
    case DataErrc::parse: return "parse";
  }
  return "unknown";
}

// Malformed or inconsistent input data. The code distinguishes failure kinds.
class DataError : public Error {
 public:
  DataError(DataErrc code, const std::string& what)
      : Error(std::string(to_string(code)) + ": " + what), code_(code) {}
  DataErrc code() const noexcept { return code_; }

 private:
  DataErrc code_;
};

// A vector whose L2 norm is below the floor. `row` is the offending row of a
// batched input, or npos for a single vector.
class DegenerateInputError : public DataError {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  explicit DegenerateInputError(const std::string& what, std::size_t row = npos)
      : DataError(DataErrc::degenerate,
                  row == npos ? what : what + " (row " + std::to_string(row) + ")"),
        row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

// Transport-level failure talking to the LLM endpoint.
class NetworkError : public Error {
 public:
  using Error::Error;
};

class AuthError : public NetworkError {
 public:
  using NetworkError::NetworkError;
};

class MalformedResponseError : public NetworkError {
 public:
  using NetworkError::NetworkError;
};

}  // namespace sense
