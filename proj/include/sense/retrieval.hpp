#pragma once

// Naive zero-shot retrieval, top-k Bag-of-Words extraction and retrieval
// quality metrics.

#include <algorithm>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sense/errors.hpp"
#include "sense/numerics.hpp"
#include "sense/vocabulary.hpp"

namespace sense {

inline constexpr std::size_t kDefaultTopK = 15;

// Cosine scores of the raw embeddings against the vocabulary, with no refiner.
// Same kernel as the refiner's output layer.
template <typename T>
Matrix<T> naive_logits_batch(const Matrix<T>& x, const UnitRows<T>& vocab) {
  return cosine_logits(x, vocab);
}

template <typename T>
Vector<T> naive_logits(std::span<const T> x, const UnitRows<T>& vocab) {
  const Matrix<T> s = naive_logits_batch(Matrix<T>(1, x.size(), Vector<T>(x.begin(), x.end())), vocab);
  return s.values();
}

struct BowEntry {
  std::string token;
  std::size_t index = 0;
  double score = 0.0;

  bool operator==(const BowEntry&) const = default;
};

struct BagOfWords {
  std::vector<BowEntry> entries;
  bool clamped = false;  // requested k exceeded the vocabulary size

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.index);
    return out;
  }

  // Throws if scores increase anywhere, tokens repeat, or a score leaves [-1, 1].
  void validate() const {
    std::set<std::string> seen;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (i > 0 && entries[i].score > entries[i - 1].score) {
        throw DataError(DataErrc::parse, "BagOfWords: scores not non-increasing at " + std::to_string(i));
      }
      if (!seen.insert(entries[i].token).second) {
        throw DataError(DataErrc::parse, "BagOfWords: duplicate token '" + entries[i].token + "'");
      }
      if (!(entries[i].score >= -1.0 && entries[i].score <= 1.0)) {
        throw DataError(DataErrc::parse, "BagOfWords: score out of [-1, 1]");
      }
    }
  }

  bool operator==(const BagOfWords&) const = default;
};

// Wire form: [{"token": str, "score": float}, ...]
inline nlohmann::json bow_to_json(const BagOfWords& bow) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : bow.entries) arr.push_back({{"token", e.token}, {"score", e.score}});
  return arr;
}

inline BagOfWords bow_from_json(const nlohmann::json& j, const Vocabulary* vocab = nullptr) {
  BagOfWords bow;
  for (const auto& item : j) {
    BowEntry e;
    e.token = item.at("token").get<std::string>();
    e.score = item.at("score").get<double>();
    if (vocab) {
      if (auto idx = vocab->find(e.token)) e.index = *idx;
    }
    bow.entries.push_back(std::move(e));
  }
  bow.validate();
  return bow;
}

// The k highest logits, descending, ties broken by ascending vocabulary index.
template <typename T>
BagOfWords top_k_bow(std::span<const T> logits, const Vocabulary& vocab, std::size_t k = kDefaultTopK) {
  if (k == 0) throw UsageError("top_k_bow: k must be at least 1");
  if (logits.size() != vocab.size()) throw UsageError("top_k_bow: logits/vocabulary size mismatch");
  BagOfWords bow;
  if (k > logits.size()) {
    k = logits.size();
    bow.clamped = true;
  }
  std::vector<std::size_t> order(logits.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
  for (std::size_t i = 0; i < k; ++i) {
    bow.entries.push_back({vocab.token(order[i]), order[i], static_cast<double>(logits[order[i]])});
  }
  bow.validate();
  return bow;
}

struct RetrievalScore {
  double precision = 0.0;
  double recall = 0.0;
  bool has_positives = false;  // false: exclude from aggregates
};

inline RetrievalScore retrieval_metrics(std::span<const std::size_t> bow_indices, const TargetVector& target,
                                        std::size_t k = kDefaultTopK) {
  if (k == 0) throw UsageError("retrieval_metrics: k must be at least 1");
  if (bow_indices.size() > k) throw UsageError("retrieval_metrics: more indices than k");
  RetrievalScore s;
  const std::size_t positives = target.active_count();
  if (positives == 0) return s;
  s.has_positives = true;
  std::set<std::size_t> unique(bow_indices.begin(), bow_indices.end());
  std::size_t hits = 0;
  for (std::size_t i : unique) hits += (i < target.size() && target.test(i)) ? 1 : 0;
  s.precision = static_cast<double>(hits) / static_cast<double>(k);
  s.recall = static_cast<double>(hits) / static_cast<double>(positives);
  return s;
}

// Mean 1-based rank of the positives under the same ordering as top_k_bow.
template <typename T>
double mean_positive_rank(std::span<const T> logits, const TargetVector& target) {
  if (target.active_count() == 0) return 0.0;
  double total = 0.0;
  for (std::size_t p : target.positives()) {
    std::size_t rank = 1;
    for (std::size_t j = 0; j < logits.size(); ++j) {
      if (logits[j] > logits[p] || (logits[j] == logits[p] && j < p)) ++rank;
    }
    total += static_cast<double>(rank);
  }
  return total / static_cast<double>(target.active_count());
}

}  // namespace sense
