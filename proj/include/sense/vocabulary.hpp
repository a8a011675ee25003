#pragma once

// Concept vocabulary, N-hot targets and the caption corpus format.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sense/errors.hpp"

namespace sense {

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError(DataErrc::parse, "unknown split label '" + std::string(s) + "'");
}

// One line of the caption corpus (JSON-lines).
struct CaptionRecord {
  std::string id;
  int subject = 1;
  Split split = Split::train;
  std::string caption;
  std::string object_label;
  double object_confidence = 1.0;  // Stage-1 probability of object_label
  std::optional<std::vector<std::string>> lemmas;
};

inline void to_json(nlohmann::json& j, const CaptionRecord& r) {
  j = nlohmann::json{{"id", r.id},
                     {"subject", r.subject},
                     {"split", std::string(to_string(r.split))},
                     {"caption", r.caption},
                     {"object_label", r.object_label},
                     {"object_confidence", r.object_confidence}};
  if (r.lemmas) j["lemmas"] = *r.lemmas;
}

inline void from_json(const nlohmann::json& j, CaptionRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.subject = j.at("subject").get<int>();
  r.split = parse_split(j.at("split").get<std::string>());
  r.caption = j.at("caption").get<std::string>();
  r.object_label = j.value("object_label", std::string{});
  r.object_confidence = j.value("object_confidence", 1.0);
  if (!(r.object_confidence >= 0.0 && r.object_confidence <= 1.0)) {
    throw DataError(DataErrc::parse, "record " + r.id + ": object_confidence outside [0, 1]");
  }
  if (j.contains("lemmas") && !j.at("lemmas").is_null()) {
    r.lemmas = j.at("lemmas").get<std::vector<std::string>>();
  } else {
    r.lemmas.reset();
  }
}

inline std::vector<CaptionRecord> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open corpus " + path);
  std::vector<CaptionRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<CaptionRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataErrc::parse, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_corpus(const std::string& path, std::span<const CaptionRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write corpus " + path);
  for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
}

// ------------------------------------------------------ fallback lemmatizer

namespace detail {

inline const std::set<std::string_view>& stopwords() {
  static const std::set<std::string_view> words = {
      "a",       "about",   "above",   "across", "after",   "again",  "against", "all",
      "also",    "among",   "an",      "and",    "another", "any",    "are",     "around",
      "as",      "at",      "be",      "been",   "before",  "behind", "being",   "below",
      "beneath", "beside",  "between", "both",   "but",     "by",     "can",     "could",
      "did",     "do",      "does",    "doing",  "down",    "during", "each",    "either",
      "else",    "etc",     "every",   "few",    "for",     "from",   "further", "had",
      "has",     "have",    "having",  "he",     "her",     "here",   "hers",    "him",
      "his",     "how",     "into",    "is",     "its",     "itself", "just",    "like",
      "many",    "may",     "might",   "more",   "most",    "much",   "must",    "near",
      "next",    "nor",     "not",     "now",    "off",     "once",   "one",     "only",
      "onto",    "other",   "our",     "out",    "over",    "own",    "same",    "she",
      "should",  "some",    "such",    "than",   "that",    "the",    "their",   "them",
      "then",    "there",   "these",   "they",   "this",    "those",  "three",   "through",
      "too",     "toward",  "towards", "two",    "under",   "until",  "upon",    "very",
      "was",     "were",    "what",    "when",   "where",   "which",  "while",   "who",
      "whom",    "whose",   "why",     "will",   "with",    "within", "without", "would",
      "you",     "your",    "it",      "of",     "in",      "on",     "to",      "or",
      "we",      "us",      "via",     "its",    "inside",  "outside"};
  return words;
}

inline const std::map<std::string_view, std::string_view>& irregular_lemmas() {
  static const std::map<std::string_view, std::string_view> table = {
      {"men", "man"},         {"women", "woman"},   {"children", "child"}, {"people", "person"},
      {"mice", "mouse"},      {"geese", "goose"},   {"feet", "foot"},      {"teeth", "tooth"},
      {"leaves", "leaf"},     {"knives", "knife"},  {"wolves", "wolf"},    {"shelves", "shelf"},
      {"loaves", "loaf"},     {"lying", "lie"},     {"sat", "sit"},        {"ran", "run"},
      {"flew", "fly"},        {"ate", "eat"},       {"held", "hold"},      {"worn", "wear"},
      {"fish", "fish"},       {"sheep", "sheep"},   {"glasses", "glass"},  {"series", "series"},
      {"species", "species"}, {"news", "news"},     {"lens", "lens"},      {"cactus", "cactus"},
      {"bus", "bus"},         {"octopus", "octopus"}, {"dice", "die"},     {"axes", "axe"},
      {"making", "make"},     {"riding", "ride"},   {"driving", "drive"},  {"smiling", "smile"},
      {"taking", "take"},     {"using", "use"},     {"used", "use"},       {"racing", "race"},
      {"skating", "skate"},   {"diving", "dive"},   {"grazing", "graze"},  {"dancing", "dance"},
      {"parked", "park"},     {"perched", "perch"}, {"wooden", "wooden"},  {"golden", "golden"},
  };
  return table;
}

// -ing / -ed forms that are themselves base nouns or adjectives.
inline const std::set<std::string_view>& keep_as_is() {
  static const std::set<std::string_view> words = {
      "living",  "building", "ceiling", "morning",  "evening",  "clothing", "painting",
      "king",    "ring",     "thing",   "string",   "wing",     "spring",   "swing",
      "something", "nothing", "railing", "wedding", "bed",      "red",      "shed",
      "sled",    "seed",     "speed",   "weed",     "need",     "feed",     "steed",
      "hundred", "sacred",   "naked",   "wicked",   "rugged",   "bread",    "thread",
      "head",    "lead",     "striped", "spotted",  "crowded",  "pointed",  "curved"};
  return words;
}

inline bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

inline std::string undouble(std::string s) {
  const std::size_t n = s.size();
  if (n >= 3 && s[n - 1] == s[n - 2] && !is_vowel(s[n - 1]) && s[n - 1] != 'l' && s[n - 1] != 's' &&
      s[n - 1] != 'z') {
    s.pop_back();
  }
  return s;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace detail

// Suffix-stripping lemmatizer used when a record carries no explicit lemmas.
inline std::string fallback_lemma(std::string_view word) {
  std::string w(word);
  for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (auto it = detail::irregular_lemmas().find(w); it != detail::irregular_lemmas().end()) {
    return std::string(it->second);
  }
  if (detail::keep_as_is().count(w)) return w;
  using detail::ends_with;
  const std::size_t n = w.size();
  if (ends_with(w, "ies") && n > 4) return w.substr(0, n - 3) + "y";
  if (ends_with(w, "sses")) return w.substr(0, n - 2);
  if (ends_with(w, "ss") || ends_with(w, "us") || ends_with(w, "is")) return w;
  if (ends_with(w, "es") && n > 4) {
    const std::string stem = w.substr(0, n - 2);
    if (ends_with(stem, "s") || ends_with(stem, "x") || ends_with(stem, "z") ||
        ends_with(stem, "ch") || ends_with(stem, "sh")) {
      return stem;
    }
  }
  if (ends_with(w, "s") && n > 3) return w.substr(0, n - 1);
  if (ends_with(w, "ing") && n >= 6) return detail::undouble(w.substr(0, n - 3));
  if (ends_with(w, "ed") && n >= 5) {
    if (ends_with(w, "ied")) return w.substr(0, n - 3) + "y";
    return detail::undouble(w.substr(0, n - 2));
  }
  return w;
}

// Content lemmas of free text: alphabetic runs, lowercased, lemmatized, with
// stopwords and tokens shorter than 3 characters dropped. Order of first
// appearance, duplicates removed.
inline std::vector<std::string> extract_content_lemmas(std::string_view text) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::string word;
  auto flush = [&] {
    if (word.size() >= 3) {
      std::string lower = word;
      for (char& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      if (!detail::stopwords().count(lower)) {
        std::string lemma = fallback_lemma(lower);
        if (lemma.size() >= 3 && !detail::stopwords().count(lemma) && seen.insert(lemma).second) {
          out.push_back(std::move(lemma));
        }
      }
    }
    word.clear();
  };
  for (char c : text) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      word.push_back(c);
    } else {
      flush();
    }
  }
  flush();
  return out;
}

inline std::vector<std::string> content_lemmas(const CaptionRecord& r) {
  if (r.lemmas) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (std::string l : *r.lemmas) {
      for (char& c : l) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      if (!l.empty() && seen.insert(l).second) out.push_back(std::move(l));
    }
    return out;
  }
  return extract_content_lemmas(r.caption);
}

// ---------------------------------------------------------------- Vocabulary

class Vocabulary {
 public:
  Vocabulary() = default;

  // Tokens must be unique; their order defines the indices.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw UsageError("vocabulary must contain at least one token");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], i).second) {
        throw DataError(DataErrc::parse, "duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(std::size_t i) const { return tokens_.at(i); }

  std::optional<std::size_t> find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Deduplicated, lexicographically sorted content lemmas of the training split.
inline Vocabulary build_vocabulary(std::span<const CaptionRecord> records) {
  std::set<std::string> lemmas;
  bool any_train = false;
  for (const auto& r : records) {
    if (r.split != Split::train) continue;
    any_train = true;
    for (auto& l : content_lemmas(r)) lemmas.insert(std::move(l));
  }
  if (!any_train) throw UsageError("build_vocabulary: no training-split captions");
  if (lemmas.empty()) throw UsageError("build_vocabulary: training captions contain no content words");
  return Vocabulary(std::vector<std::string>(lemmas.begin(), lemmas.end()));
}

inline Vocabulary build_vocabulary(std::span<const std::pair<std::string, Split>> captions) {
  std::vector<CaptionRecord> records;
  records.reserve(captions.size());
  for (const auto& [text, split] : captions) {
    CaptionRecord r;
    r.caption = text;
    r.split = split;
    records.push_back(std::move(r));
  }
  return build_vocabulary(records);
}

inline Vocabulary read_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open vocabulary " + path);
  try {
    return Vocabulary(nlohmann::json::parse(in).get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::parse, path + ": " + e.what());
  }
}

inline void write_vocabulary(const std::string& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write vocabulary " + path);
  out << nlohmann::json(vocab.tokens()).dump() << '\n';
}

// ------------------------------------------------------------- TargetVector

class TargetVector {
 public:
  TargetVector() = default;
  explicit TargetVector(std::size_t size) : bits_(size, 0) {}

  static TargetVector from_indices(std::size_t size, std::span<const std::size_t> indices) {
    TargetVector t(size);
    for (std::size_t i : indices) t.set(i);
    return t;
  }

  void set(std::size_t i) {
    if (i >= bits_.size()) throw UsageError("TargetVector::set: index out of range");
    if (!bits_[i]) {
      bits_[i] = 1;
      positives_.insert(std::upper_bound(positives_.begin(), positives_.end(), i), i);
    }
  }

  std::size_t size() const noexcept { return bits_.size(); }
  bool test(std::size_t i) const { return bits_.at(i) != 0; }
  std::size_t active_count() const noexcept { return positives_.size(); }
  // Sorted indices of the ones.
  const std::vector<std::size_t>& positives() const noexcept { return positives_; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

  bool operator==(const TargetVector& o) const { return bits_ == o.bits_; }

 private:
  std::vector<std::uint8_t> bits_;
  std::vector<std::size_t> positives_;
};

struct EncodedTarget {
  TargetVector target;
  bool empty_caption = false;  // no content words at all
};

inline EncodedTarget encode_targets(std::span<const std::string> lemmas, const Vocabulary& vocab) {
  EncodedTarget out{TargetVector(vocab.size()), lemmas.empty()};
  for (const auto& l : lemmas) {
    if (auto idx = vocab.find(l)) out.target.set(*idx);
  }
  return out;
}

inline EncodedTarget encode_targets(std::string_view caption, const Vocabulary& vocab) {
  const auto lemmas = extract_content_lemmas(caption);
  return encode_targets(lemmas, vocab);
}

inline EncodedTarget encode_targets(const CaptionRecord& record, const Vocabulary& vocab) {
  const auto lemmas = content_lemmas(record);
  return encode_targets(lemmas, vocab);
}

// One line of the targets file: {id, subject, split, positives, empty_caption}.
struct TargetRecord {
  std::string id;
  int subject = 1;
  Split split = Split::train;
  TargetVector target;
  bool empty_caption = false;
};

inline std::vector<TargetRecord> make_target_records(std::span<const CaptionRecord> corpus, const Vocabulary& vocab) {
  std::vector<TargetRecord> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus) {
    auto enc = encode_targets(r, vocab);
    out.push_back({r.id, r.subject, r.split, std::move(enc.target), enc.empty_caption});
  }
  return out;
}

inline void write_targets(const std::string& path, std::span<const TargetRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write targets " + path);
  for (const auto& r : records) {
    nlohmann::json j = {{"id", r.id},
                        {"subject", r.subject},
                        {"split", std::string(to_string(r.split))},
                        {"positives", r.target.positives()},
                        {"empty_caption", r.empty_caption}};
    out << j.dump() << '\n';
  }
}

inline std::vector<TargetRecord> read_targets(const std::string& path, std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open targets " + path);
  std::vector<TargetRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TargetRecord r;
      r.id = j.at("id").get<std::string>();
      r.subject = j.at("subject").get<int>();
      r.split = parse_split(j.at("split").get<std::string>());
      r.target = TargetVector(vocab_size);
      for (std::size_t i : j.at("positives").get<std::vector<std::size_t>>()) {
        if (i >= vocab_size) throw DataError(DataErrc::parse, "positive index " + std::to_string(i) + " >= V");
        r.target.set(i);
      }
      r.empty_caption = j.value("empty_caption", false);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataErrc::parse, path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(e.code(), path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sense
