#pragma once

// Zero-shot prompt rendering, the outbound privacy check and the
// chat-completion client.
//
// Only the Bag-of-Words, the object label and their scores may leave the
// process. Every request goes through assert_privacy before it is sent.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <regex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "sense/errors.hpp"
#include "sense/retrieval.hpp"

namespace sense {

inline constexpr double kCaptionTemperature = 0.2;
inline constexpr std::size_t kMaxBowForPrompt = 15;
inline constexpr std::size_t kMinCaptionWords = 8;
inline constexpr std::size_t kMaxCaptionWords = 20;

// "%.4f" without locale dependence.
inline std::string format_fixed4(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 4);
  return std::string(buf, res.ptr);
}

struct PromptInput {
  std::string object_label;
  double object_confidence = 0.0;
  BagOfWords bow;

  void validate() const {
    if (!(object_confidence >= 0.0 && object_confidence <= 1.0)) {
      throw UsageError("prompt: object confidence must lie in [0, 1]");
    }
    if (bow.size() > kMaxBowForPrompt) throw UsageError("prompt: more than 15 BoW tokens");
  }
};

enum class PromptVariant { with_obj, without_obj };

inline std::string_view to_string(PromptVariant v) {
  return v == PromptVariant::with_obj ? "with_obj" : "without_obj";
}

inline PromptVariant parse_prompt_variant(std::string_view s) {
  if (s == "with_obj") return PromptVariant::with_obj;
  if (s == "without_obj") return PromptVariant::without_obj;
  throw UsageError("unknown prompt variant '" + std::string(s) + "'");
}

struct RenderedPrompt {
  std::string text;
  bool empty_bow = false;
};

// One "token (0.xxxx)" line per entry, in BoW order, no trailing newline.
inline std::string render_words(const BagOfWords& bow) {
  std::string out;
  for (std::size_t i = 0; i < bow.entries.size(); ++i) {
    if (i) out += '\n';
    out += bow.entries[i].token + " (" + format_fixed4(bow.entries[i].score) + ")";
  }
  return out;
}

namespace detail {

inline constexpr std::string_view kWithObjTemplate =
    "You are given an object label and a noisy bag-of-words (BoW). Both object label and BoW will be "
    "accompanied with numbers, the numbers with object labels are the softmax probabilities of correctly "
    "guessing the object label, and the BoW are cosine similarities of the words to our embedding.\n"
    "\n"
    "Your goal is to regenerate the most likely original image caption.\n"
    "\n"
    "Instructions:\n"
    "- Use the object label as a possible anchor.\n"
    "- Use the similarity scores to infer which words are relevant.\n"
    "- Ignore or remove garbage, irrelevant, contradictory, or low-signal words.\n"
    "- Use only a small, coherent subset of the BoW plus the object label.\n"
    "- Do NOT invent new objects not supported by the label or high-similarity words.\n"
    "\n"
    "Output:\n"
    "Return ONLY one natural-language caption (8–20 words). No explanations, no lists, no formatting.\n"
    "\n"
    "Input:\n"
    "Object label: {pred_obj} (prob: {pred_conf:.4f})\n"
    "\n"
    "BoW tokens with scores:\n"
    "{words_str}";

inline constexpr std::string_view kWithoutObjTemplate =
    "You are given a noisy bag-of-words (BoW). BoW will be accompanied with numbers, the numbers with BoW "
    "are cosine similarities of the words to our embedding.\n"
    "\n"
    "Your goal is to regenerate the most likely original image caption.\n"
    "\n"
    "Instructions:\n"
    "- Use the similarity scores to infer which words are relevant.\n"
    "- Ignore or remove garbage, irrelevant, contradictory, or low-signal words.\n"
    "- Use only a small, coherent subset of the BoW.\n"
    "- Do NOT invent new objects not supported by the high-similarity words.\n"
    "\n"
    "Output:\n"
    "Return ONLY one natural-language caption (8–20 words). No explanations, no lists, no formatting.\n"
    "\n"
    "Input:\n"
    "BoW tokens with scores:\n"
    "{words_str}";

inline void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

}  // namespace detail

inline RenderedPrompt render_prompt_with_obj(const PromptInput& input) {
  input.validate();
  std::string text(detail::kWithObjTemplate);
  // Substitute the words last so a token can never be mistaken for a placeholder.
  detail::replace_all(text, "{pred_conf:.4f}", format_fixed4(input.object_confidence));
  detail::replace_all(text, "{pred_obj}", input.object_label);
  const std::size_t at = text.rfind("{words_str}");
  text.replace(at, std::string_view("{words_str}").size(), render_words(input.bow));
  return {std::move(text), input.bow.empty()};
}

inline RenderedPrompt render_prompt_without_obj(const BagOfWords& bow) {
  if (bow.size() > kMaxBowForPrompt) throw UsageError("prompt: more than 15 BoW tokens");
  std::string text(detail::kWithoutObjTemplate);
  const std::size_t at = text.rfind("{words_str}");
  text.replace(at, std::string_view("{words_str}").size(), render_words(bow));
  return {std::move(text), bow.empty()};
}

inline RenderedPrompt render_prompt(PromptVariant v, const PromptInput& input) {
  return v == PromptVariant::with_obj ? render_prompt_with_obj(input) : render_prompt_without_obj(input.bow);
}

// ----------------------------------------------------------------- privacy

// The on-device values that must never appear in an outbound request.
struct PrivacyContext {
  std::vector<float> raw_embedding;  // x
  std::vector<float> latent;         // z, empty for the naive baseline
};

struct PrivacyViolation {
  std::string field;  // "raw embedding x", "latent z" or "float literal budget"
  std::string detail;
};

struct PrivacyReport {
  std::vector<PrivacyViolation> violations;
  std::size_t float_literals = 0;  // inside message text

  bool ok() const noexcept { return violations.empty(); }
};

inline constexpr std::size_t kMaxFloatLiterals = kMaxBowForPrompt + 1;
inline constexpr std::size_t kLeakWindow = 3;

namespace detail {

// Decimal literals (those containing a '.') in order of appearance.
inline std::vector<std::string> decimal_literals(std::string_view text) {
  static const std::regex pattern(R"(-?\d+\.\d+(?:[eE][-+]?\d+)?)");
  std::vector<std::string> out;
  for (std::cregex_iterator it(text.data(), text.data() + text.size(), pattern), end; it != end; ++it) {
    out.push_back(it->str());
  }
  return out;
}

inline void collect_strings(const nlohmann::json& j, std::vector<std::string>& out) {
  if (j.is_string()) {
    out.push_back(j.get<std::string>());
  } else if (j.is_array() || j.is_object()) {
    for (const auto& item : j) collect_strings(item, out);
  }
}

// True when three consecutive coordinates, rendered at 4 decimals, occur as
// three consecutive decimal literals of the payload (after re-rendering those
// at 4 decimals, so longer renderings are caught too).
inline std::optional<std::size_t> find_leak(std::span<const std::string> literals4, std::span<const float> values) {
  if (values.size() < kLeakWindow || literals4.size() < kLeakWindow) return std::nullopt;
  std::vector<std::string> coords;
  coords.reserve(values.size());
  for (float v : values) coords.push_back(format_fixed4(v));
  for (std::size_t i = 0; i + kLeakWindow <= coords.size(); ++i) {
    for (std::size_t p = 0; p + kLeakWindow <= literals4.size(); ++p) {
      bool match = true;
      for (std::size_t w = 0; w < kLeakWindow && match; ++w) match = literals4[p + w] == coords[i + w];
      if (match) return i;
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Checks an outbound payload against the sample's on-device vectors. The
// float-literal budget counts literals inside string values (the message
// text); protocol fields such as temperature are not content. The leak scan
// covers the whole payload.
inline PrivacyReport assert_privacy(std::string_view payload, const PrivacyContext& ctx) {
  PrivacyReport report;
  std::vector<std::string> texts;
  try {
    detail::collect_strings(nlohmann::json::parse(payload), texts);
  } catch (const nlohmann::json::exception&) {
    texts.assign(1, std::string(payload));
  }
  for (const auto& t : texts) report.float_literals += detail::decimal_literals(t).size();
  if (report.float_literals > kMaxFloatLiterals) {
    report.violations.push_back({"float literal budget", std::to_string(report.float_literals) +
                                                             " decimal literals in message text (max " +
                                                             std::to_string(kMaxFloatLiterals) + ")"});
  }

  std::vector<std::string> literals4;
  for (const auto& lit : detail::decimal_literals(payload)) literals4.push_back(format_fixed4(std::strtod(lit.c_str(), nullptr)));
  if (auto at = detail::find_leak(literals4, ctx.raw_embedding)) {
    report.violations.push_back({"raw embedding x", "coordinates " + std::to_string(*at) + ".." +
                                                        std::to_string(*at + kLeakWindow - 1) + " found in payload"});
  }
  if (auto at = detail::find_leak(literals4, ctx.latent)) {
    report.violations.push_back({"latent z", "coordinates " + std::to_string(*at) + ".." +
                                                 std::to_string(*at + kLeakWindow - 1) + " found in payload"});
  }
  return report;
}

class PrivacyViolationError : public Error {
 public:
  explicit PrivacyViolationError(PrivacyReport report)
      : Error("privacy boundary violation: " + report.violations.front().field + " (" +
              report.violations.front().detail + ")"),
        report_(std::move(report)) {}
  const PrivacyReport& report() const noexcept { return report_; }

 private:
  PrivacyReport report_;
};

// -------------------------------------------------------------- LLM client

struct LLMConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o-mini";
  double temperature = kCaptionTemperature;
  bool allow_temperature_override = false;
  int max_retries = 3;
  double timeout_seconds = 30.0;
  double backoff_initial_seconds = 0.5;
  std::string credential_env = "SENSE_LLM_API_KEY";
  std::size_t max_in_flight = 4;

  void validate() const {
    if (temperature != kCaptionTemperature && !allow_temperature_override) {
      throw UsageError("LLM temperature is fixed at 0.2; set the override flag to change it");
    }
    if (max_retries < 0) throw UsageError("max_retries must be non-negative");
    if (max_in_flight < 1) throw UsageError("max_in_flight must be at least 1");
  }
};

struct GeneratedCaption {
  std::string text;
  std::size_t word_count = 0;
  bool length_ok = false;  // 8-20 words; advisory only
  std::string model;
  double latency_ms = 0.0;
  int attempts = 0;
  std::vector<int> retried_statuses;  // HTTP statuses (0 = transport failure) that triggered a retry
};

inline std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

inline std::string chat_request_body(std::string_view prompt, const LLMConfig& cfg) {
  nlohmann::json body = {{"model", cfg.model},
                         {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
                         {"temperature", cfg.temperature}};
  return body.dump();
}

namespace detail {

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;
};

inline Endpoint split_endpoint(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("endpoint must be an absolute http(s) URL: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

// Sends one chat-completion request. Transport failures, 429 and 5xx are
// retried with exponential backoff (Retry-After honoured); 401/403 and other
// 4xx fail immediately. The payload is privacy-checked first and never sent
// on a violation.
inline GeneratedCaption generate_caption(std::string_view prompt, const LLMConfig& cfg, const PrivacyContext& privacy) {
  cfg.validate();
  const std::string body = chat_request_body(prompt, cfg);
  PrivacyReport report = assert_privacy(body, privacy);
  if (!report.ok()) throw PrivacyViolationError(std::move(report));

  const char* credential = std::getenv(cfg.credential_env.c_str());
  if (!credential || !*credential) throw AuthError("credential environment variable " + cfg.credential_env + " is not set");

  const auto endpoint = detail::split_endpoint(cfg.endpoint);
  httplib::Client client(endpoint.base);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(cfg.timeout_seconds));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  client.set_bearer_token_auth(credential);

  GeneratedCaption out;
  out.model = cfg.model;
  const auto start = std::chrono::steady_clock::now();
  double backoff = cfg.backoff_initial_seconds;
  for (int attempt = 0;; ++attempt) {
    out.attempts = attempt + 1;
    auto res = client.Post(endpoint.path, body, "application/json");
    double wait = backoff;
    int status = 0;
    if (res) {
      status = res->status;
      if (status == 200) {
        nlohmann::json reply;
        try {
          reply = nlohmann::json::parse(res->body);
          out.text = detail::trim(reply.at("choices").at(0).at("message").at("content").get<std::string>());
          if (reply.contains("model") && reply["model"].is_string()) out.model = reply["model"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
          throw MalformedResponseError(std::string("malformed chat-completion response: ") + e.what());
        }
        break;
      }
      if (status == 401 || status == 403) throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(status) + ")");
      const bool retryable = status == 429 || status >= 500;
      if (!retryable) throw NetworkError("endpoint returned HTTP " + std::to_string(status));
      if (status == 429 && res->has_header("Retry-After")) {
        const double retry_after = std::strtod(res->get_header_value("Retry-After").c_str(), nullptr);
        if (retry_after >= 0.0) wait = retry_after;
      }
    }
    if (attempt >= cfg.max_retries) {
      if (status == 0) throw NetworkError("request failed: " + httplib::to_string(res.error()));
      throw NetworkError("endpoint returned HTTP " + std::to_string(status) + " after " +
                         std::to_string(attempt + 1) + " attempts");
    }
    out.retried_statuses.push_back(status);
    std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    backoff *= 2.0;
  }
  out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  out.word_count = count_words(out.text);
  out.length_ok = out.word_count >= kMinCaptionWords && out.word_count <= kMaxCaptionWords;
  return out;
}

struct CaptionRequest {
  std::string prompt;
  PrivacyContext privacy;
};

// Runs up to cfg.max_in_flight requests at once; results keep input order.
// The first failure is rethrown after all workers stop.
inline std::vector<GeneratedCaption> generate_captions(std::span<const CaptionRequest> requests, const LLMConfig& cfg) {
  cfg.validate();
  std::vector<GeneratedCaption> results(requests.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::optional<std::size_t> first_error_index;
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        results[i] = generate_caption(requests[i].prompt, cfg, requests[i].privacy);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error_index || i < *first_error_index) {
          first_error = std::current_exception();
          first_error_index = i;
        }
      }
    }
  };
  const std::size_t n_workers = std::min(cfg.max_in_flight, std::max<std::size_t>(requests.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return results;
}

// One line of the persisted prompts/captions JSON-lines file.
struct CaptionRecordOut {
  std::string id;
  PromptVariant variant = PromptVariant::with_obj;
  std::string prompt;
  std::string caption;
  std::size_t word_count = 0;
  std::string model;
};

inline nlohmann::json to_json(const CaptionRecordOut& r) {
  return {{"id", r.id},
          {"prompt_variant", std::string(to_string(r.variant))},
          {"prompt", r.prompt},
          {"caption", r.caption},
          {"word_count", r.word_count},
          {"model", r.model}};
}

inline CaptionRecordOut caption_record_from_json(const nlohmann::json& j) {
  CaptionRecordOut r;
  r.id = j.at("id").get<std::string>();
  r.variant = parse_prompt_variant(j.at("prompt_variant").get<std::string>());
  r.prompt = j.at("prompt").get<std::string>();
  r.caption = j.value("caption", std::string{});
  r.word_count = j.value("word_count", std::size_t{0});
  r.model = j.value("model", std::string{});
  return r;
}

}  // namespace sense
