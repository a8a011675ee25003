#pragma once

// Sentence-level BLEU-1/4 and ROUGE-1/2/L against a single reference, plus
// grouped aggregation and CSV/JSON output.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sense/errors.hpp"
#include "sense/prompting.hpp"

namespace sense {

enum class Tokenization { normalized, raw };

// normalized: lowercase, drop ASCII punctuation, split on whitespace.
// raw: split on whitespace only.
inline std::vector<std::string> tokenize(std::string_view text, Tokenization mode = Tokenization::normalized) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (mode == Tokenization::normalized) {
      if (std::ispunct(c)) continue;
      cur += static_cast<char>(std::tolower(c));
    } else {
      cur += ch;
    }
  }
  flush();
  return out;
}

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts counts;
  if (toks.size() < n) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++counts[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                      toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

// Matches clipped by the reference count.
inline std::size_t clipped_overlap(const NgramCounts& cand, const NgramCounts& ref) {
  std::size_t hits = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) hits += std::min(c, it->second);
  }
  return hits;
}

inline double brevity_penalty(std::size_t cand_len, std::size_t ref_len) {
  if (cand_len == 0) return 0.0;
  if (cand_len >= ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
}

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace detail

// Geometric mean of clipped 1..n-gram precisions times the brevity penalty.
// Orders longer than the candidate have no n-grams at all and are left out of
// the mean; an order with n-grams but no matches gives 0.
inline double bleu_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref, std::size_t n) {
  if (n < 1) throw UsageError("bleu: n must be at least 1");
  if (cand.empty() || ref.empty()) return 0.0;
  const std::size_t orders = std::min(n, cand.size());
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= orders; ++k) {
    const auto c = detail::ngram_counts(cand, k);
    const std::size_t hits = detail::clipped_overlap(c, detail::ngram_counts(ref, k));
    if (hits == 0) return 0.0;
    log_sum += std::log(static_cast<double>(hits) / static_cast<double>(cand.size() - k + 1));
  }
  return detail::brevity_penalty(cand.size(), ref.size()) * std::exp(log_sum / static_cast<double>(orders));
}

inline double bleu_n(std::string_view candidate, std::string_view reference, std::size_t n,
                     Tokenization mode = Tokenization::normalized) {
  return bleu_tokens(tokenize(candidate, mode), tokenize(reference, mode), n);
}

inline double rouge_n_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref, std::size_t n) {
  if (n < 1) throw UsageError("rouge: n must be at least 1");
  if (cand.size() < n || ref.size() < n) return 0.0;
  const std::size_t hits = detail::clipped_overlap(detail::ngram_counts(cand, n), detail::ngram_counts(ref, n));
  const double p = static_cast<double>(hits) / static_cast<double>(cand.size() - n + 1);
  const double r = static_cast<double>(hits) / static_cast<double>(ref.size() - n + 1);
  return detail::f1(p, r);
}

inline double rouge_n(std::string_view candidate, std::string_view reference, std::size_t n,
                      Tokenization mode = Tokenization::normalized) {
  return rouge_n_tokens(tokenize(candidate, mode), tokenize(reference, mode), n);
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(cand, ref));
  return detail::f1(lcs / static_cast<double>(cand.size()), lcs / static_cast<double>(ref.size()));
}

inline double rouge_l(std::string_view candidate, std::string_view reference,
                      Tokenization mode = Tokenization::normalized) {
  return rouge_l_tokens(tokenize(candidate, mode), tokenize(reference, mode));
}

// Corpus-level BLEU: n-gram hits and lengths summed over all pairs before
// taking precisions and the brevity penalty.
inline double corpus_bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                          std::size_t n, Tokenization mode = Tokenization::normalized) {
  if (candidates.size() != references.size()) throw UsageError("corpus_bleu: candidate/reference count mismatch");
  std::vector<std::size_t> hits(n + 1, 0), totals(n + 1, 0);
  std::size_t cand_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = tokenize(candidates[i], mode);
    const auto r = tokenize(references[i], mode);
    cand_len += c.size();
    ref_len += r.size();
    for (std::size_t k = 1; k <= n; ++k) {
      hits[k] += detail::clipped_overlap(detail::ngram_counts(c, k), detail::ngram_counts(r, k));
      totals[k] += c.size() >= k ? c.size() - k + 1 : 0;
    }
  }
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (totals[k] == 0) continue;
    if (hits[k] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(hits[k]) / static_cast<double>(totals[k]));
    ++orders;
  }
  if (orders == 0) return 0.0;
  return detail::brevity_penalty(cand_len, ref_len) * std::exp(log_sum / static_cast<double>(orders));
}

struct MetricRow {
  std::string id;
  int subject = 0;
  std::string variant;
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

inline MetricRow score_caption(std::string id, int subject, std::string variant, std::string_view candidate,
                               std::string_view reference, Tokenization mode = Tokenization::normalized) {
  const auto c = tokenize(candidate, mode);
  const auto r = tokenize(reference, mode);
  return {std::move(id),           subject,
          std::move(variant),      bleu_tokens(c, r, 1),
          bleu_tokens(c, r, 4),    rouge_n_tokens(c, r, 1),
          rouge_n_tokens(c, r, 2), rouge_l_tokens(c, r)};
}

enum class GroupKey { subject, variant };

struct AggregateRow {
  std::string group;  // "overall" or e.g. "subject=3,variant=focal/with_obj"
  std::size_t count = 0;
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
};

namespace detail {

inline std::string group_label(const MetricRow& row, const std::vector<GroupKey>& keys) {
  std::string label;
  for (GroupKey k : keys) {
    if (!label.empty()) label += ',';
    label += k == GroupKey::subject ? "subject=" + std::to_string(row.subject) : "variant=" + row.variant;
  }
  return label;
}

inline void accumulate(AggregateRow& a, const MetricRow& r) {
  ++a.count;
  a.bleu1 += r.bleu1;
  a.bleu4 += r.bleu4;
  a.rouge1 += r.rouge1;
  a.rouge2 += r.rouge2;
  a.rougeL += r.rougeL;
}

inline void finish(AggregateRow& a) {
  const double n = static_cast<double>(a.count);
  a.bleu1 /= n;
  a.bleu4 /= n;
  a.rouge1 /= n;
  a.rouge2 /= n;
  a.rougeL /= n;
}

}  // namespace detail

// Means per group (sorted by label) followed by one "overall" row.
inline std::vector<AggregateRow> aggregate(const std::vector<MetricRow>& rows, const std::vector<GroupKey>& keys) {
  if (rows.empty()) throw UsageError("aggregate: no rows");
  std::map<std::string, AggregateRow> groups;
  AggregateRow overall{"overall"};
  for (const auto& r : rows) {
    detail::accumulate(overall, r);
    if (keys.empty()) continue;
    const std::string label = detail::group_label(r, keys);
    auto& g = groups[label];
    g.group = label;
    detail::accumulate(g, r);
  }
  std::vector<AggregateRow> out;
  for (auto& [label, g] : groups) {
    detail::finish(g);
    out.push_back(g);
  }
  detail::finish(overall);
  out.push_back(overall);
  return out;
}

inline constexpr std::string_view kMetricCsvHeader = "id,subject,variant,bleu1,bleu4,rouge1,rouge2,rougeL";

namespace detail {

inline std::string fixed6(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 6);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + '"';
}

}  // namespace detail

inline void write_metric_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << kMetricCsvHeader << '\n';
  for (const auto& r : rows) {
    os << detail::csv_field(r.id) << ',' << r.subject << ',' << detail::csv_field(r.variant) << ','
       << detail::fixed6(r.bleu1) << ',' << detail::fixed6(r.bleu4) << ',' << detail::fixed6(r.rouge1) << ','
       << detail::fixed6(r.rouge2) << ',' << detail::fixed6(r.rougeL) << '\n';
  }
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRow>& rows) {
  os << "group,count,bleu1,bleu4,rouge1,rouge2,rougeL\n";
  for (const auto& a : rows) {
    os << detail::csv_field(a.group) << ',' << a.count << ',' << detail::fixed6(a.bleu1) << ','
       << detail::fixed6(a.bleu4) << ',' << detail::fixed6(a.rouge1) << ',' << detail::fixed6(a.rouge2) << ','
       << detail::fixed6(a.rougeL) << '\n';
  }
}

inline nlohmann::json to_json(const MetricRow& r) {
  return {{"id", r.id},         {"subject", r.subject}, {"variant", r.variant}, {"bleu1", r.bleu1},
          {"bleu4", r.bleu4},   {"rouge1", r.rouge1},   {"rouge2", r.rouge2},   {"rougeL", r.rougeL}};
}

inline nlohmann::json to_json(const AggregateRow& a) {
  return {{"group", a.group},   {"count", a.count},   {"bleu1", a.bleu1},  {"bleu4", a.bleu4},
          {"rouge1", a.rouge1}, {"rouge2", a.rouge2}, {"rougeL", a.rougeL}};
}

inline MetricRow metric_row_from_json(const nlohmann::json& j) {
  MetricRow r;
  r.id = j.at("id").get<std::string>();
  r.subject = j.at("subject").get<int>();
  r.variant = j.at("variant").get<std::string>();
  r.bleu1 = j.at("bleu1").get<double>();
  r.bleu4 = j.at("bleu4").get<double>();
  r.rouge1 = j.at("rouge1").get<double>();
  r.rouge2 = j.at("rouge2").get<double>();
  r.rougeL = j.at("rougeL").get<double>();
  return r;
}

}  // namespace sense
