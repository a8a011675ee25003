#pragma once

// The `sense` command-line tool. run() is the whole program; main() only
// forwards argv, so commands can be driven in-process from tests.
//
// Data directory layout shared by all commands:
//   vocab.json              vocabulary (JSON array of tokens)
//   vocab_embeddings.bin    SENSEEMB1, V x dim
//   corpus.jsonl            caption records
//   embeddings.bin          SENSEEMB1, one Stage-1 embedding per sample
//   embeddings.ids.json     sample id of each embeddings.bin row
//   targets.jsonl           N-hot targets (make-targets)

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sense/datagen.hpp"
#include "sense/embedding_io.hpp"
#include "sense/errors.hpp"
#include "sense/gradcheck.hpp"
#include "sense/metrics.hpp"
#include "sense/prompting.hpp"
#include "sense/refiner.hpp"
#include "sense/retrieval.hpp"
#include "sense/trainer.hpp"
#include "sense/vocabulary.hpp"

namespace sense::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNetwork = 3 };

namespace files {
inline constexpr const char* kVocab = "vocab.json";
inline constexpr const char* kVocabEmbeddings = "vocab_embeddings.bin";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kEmbeddings = "embeddings.bin";
inline constexpr const char* kEmbeddingIds = "embeddings.ids.json";
inline constexpr const char* kTargets = "targets.jsonl";
inline constexpr const char* kCheckpoint = "checkpoint.bin";
inline constexpr const char* kTrainReport = "train_report.json";
}  // namespace files

namespace fs = std::filesystem;

// ------------------------------------------------------------ run manifest

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started_at;
  double wall_clock_seconds = 0.0;
  nlohmann::json extra = nlohmann::json::object();
};

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"command", m.command},
          {"tool_version", std::string(kToolVersion)},
          {"config", m.config},
          {"seeds", m.seeds},
          {"inputs", m.inputs},
          {"outputs", m.outputs},
          {"started_at", m.started_at},
          {"wall_clock_seconds", m.wall_clock_seconds},
          {"details", m.extra}};
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string manifest_path(const fs::path& dir, const std::string& command) {
  return (dir / ("manifest_" + command + ".json")).string();
}

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(DataErrc::parse, "cannot write " + path);
  out << text;
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::parse, path + ": " + e.what());
  }
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(DataErrc::parse, "cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(DataErrc::parse, path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<nlohmann::json>& lines) {
  std::string text;
  for (const auto& j : lines) text += j.dump() + "\n";
  write_text(path, text);
}

inline fs::path parent_or_cwd(const std::string& file) {
  fs::path p = fs::path(file).parent_path();
  return p.empty() ? fs::path(".") : p;
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(DataErrc::parse, "cannot create directory " + dir.string() + ": " + ec.message());
}

// Resolved option values of one subcommand, for the manifest.
inline nlohmann::json config_snapshot(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      j[name] = res.size() == 1 ? nlohmann::json(res.front()) : nlohmann::json(res);
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

// Expands a JSON config object into flag tokens placed ahead of the user's
// own flags; with take-last semantics the command line wins.
inline std::vector<std::string> config_tokens(const nlohmann::json& cfg) {
  if (!cfg.is_object()) throw UsageError("--config file must hold a JSON object");
  std::vector<std::string> out;
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');  // "nuisance_rank" == "nuisance-rank"
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      out.push_back(flag);
      for (const auto& v : value) out.push_back(v.is_string() ? v.get<std::string>() : v.dump());
    } else if (value.is_string()) {
      out.push_back(flag);
      out.push_back(value.get<std::string>());
    } else {
      out.push_back(flag);
      out.push_back(value.dump());
    }
  }
  return out;
}

inline std::string path_in(const std::string& dir, const char* name) { return (fs::path(dir) / name).string(); }

}  // namespace detail

// ----------------------------------------------------------- data loading

struct DataBundle {
  Vocabulary vocab;
  std::optional<VocabEmbeddings> vocab_embeddings;
  std::vector<CaptionRecord> corpus;
  std::vector<Sample> samples;  // ids order of embeddings.ids.json

  const CaptionRecord* record(const std::string& id) const {
    auto it = by_id.find(id);
    return it == by_id.end() ? nullptr : &corpus[it->second];
  }
  const Sample* sample(const std::string& id) const {
    auto it = sample_by_id.find(id);
    return it == sample_by_id.end() ? nullptr : &samples[it->second];
  }

  std::map<std::string, std::size_t> by_id;
  std::map<std::string, std::size_t> sample_by_id;
};

// Loads a data directory. Targets come from targets.jsonl when present,
// otherwise they are encoded from the corpus on the fly.
inline DataBundle load_data_dir(const std::string& dir, bool need_samples = true) {
  DataBundle d;
  d.vocab = read_vocabulary(detail::path_in(dir, files::kVocab));
  d.vocab_embeddings.emplace(load_vocab_embeddings(detail::path_in(dir, files::kVocabEmbeddings), d.vocab, 0));
  const std::string corpus_path = detail::path_in(dir, files::kCorpus);
  if (fs::exists(corpus_path)) d.corpus = read_corpus(corpus_path);
  for (std::size_t i = 0; i < d.corpus.size(); ++i) d.by_id[d.corpus[i].id] = i;
  if (!need_samples) return d;

  const std::string emb_path = detail::path_in(dir, files::kEmbeddings);
  const Matrix<float> x = load_embeddings(emb_path, d.vocab_embeddings->dim());
  const auto ids = read_id_sidecar(detail::path_in(dir, files::kEmbeddingIds));
  if (ids.size() != x.rows()) {
    throw DataError(DataErrc::row_count_mismatch, emb_path + ": " + std::to_string(x.rows()) + " rows but " +
                                                      std::to_string(ids.size()) + " ids");
  }
  std::vector<TargetRecord> targets;
  const std::string targets_path = detail::path_in(dir, files::kTargets);
  if (fs::exists(targets_path)) {
    targets = read_targets(targets_path, d.vocab.size());
  } else {
    targets = make_target_records(d.corpus, d.vocab);
  }
  std::map<std::string, const TargetRecord*> target_by_id;
  for (const auto& t : targets) target_by_id[t.id] = &t;

  d.samples.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto it = target_by_id.find(ids[i]);
    if (it == target_by_id.end()) throw DataError(DataErrc::parse, "no target record for sample " + ids[i]);
    Sample s;
    s.id = ids[i];
    auto row = x.row(i);
    s.x.assign(row.begin(), row.end());
    s.target = it->second->target;
    s.subject = it->second->subject;
    s.split = it->second->split;
    d.sample_by_id[s.id] = d.samples.size();
    d.samples.push_back(std::move(s));
  }
  return d;
}

inline RefinerShape shape_for_dim(std::size_t dim) { return {dim, 2 * dim, dim}; }

// ---------------------------------------------------------------- commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  RunManifest manifest;
};

struct SynthOptions {
  SynthConfig cfg;
  std::string out_dir;
};

inline void cmd_synth(const SynthOptions& o, Context& ctx) {
  detail::ensure_dir(o.out_dir);
  const SyntheticVocab sv = synth_vocab_embeddings(o.cfg);
  const auto samples = synth_dataset(o.cfg, sv.embeddings);
  const auto corpus = synth_corpus(samples, sv.vocab, o.cfg.seed);

  Matrix<float> x(samples.size(), o.cfg.dim);
  std::vector<std::string> ids;
  std::vector<TargetRecord> targets;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].x.begin(), samples[i].x.end(), x.row(i).begin());
    ids.push_back(samples[i].id);
    targets.push_back({samples[i].id, samples[i].subject, samples[i].split, samples[i].target, false});
  }
  const auto p = [&](const char* name) { return detail::path_in(o.out_dir, name); };
  write_vocabulary(p(files::kVocab), sv.vocab);
  save_embeddings(p(files::kVocabEmbeddings), sv.embeddings);
  save_embeddings(p(files::kEmbeddings), x);
  write_id_sidecar(p(files::kEmbeddingIds), ids);
  write_corpus(p(files::kCorpus), corpus);
  write_targets(p(files::kTargets), targets);

  ctx.manifest.seeds = {o.cfg.seed};
  ctx.manifest.outputs = {p(files::kVocab),         p(files::kVocabEmbeddings), p(files::kEmbeddings),
                          p(files::kEmbeddingIds), p(files::kCorpus),          p(files::kTargets)};
  ctx.out << "synth: " << samples.size() << " samples, V=" << sv.vocab.size() << ", dim=" << o.cfg.dim << " -> "
          << o.out_dir << "\n";
}

struct BuildVocabOptions {
  std::string corpus;
  std::string out;
};

inline void cmd_build_vocab(const BuildVocabOptions& o, Context& ctx) {
  const auto corpus = read_corpus(o.corpus);
  const Vocabulary vocab = build_vocabulary(corpus);
  write_vocabulary(o.out, vocab);
  ctx.manifest.inputs = {o.corpus};
  ctx.manifest.outputs = {o.out};
  ctx.manifest.extra["vocab_size"] = vocab.size();
  ctx.out << "build-vocab: " << vocab.size() << " tokens from the train split -> " << o.out << "\n";
}

struct MakeTargetsOptions {
  std::string corpus;
  std::string vocab;
  std::string out;
};

inline void cmd_make_targets(const MakeTargetsOptions& o, Context& ctx) {
  const auto corpus = read_corpus(o.corpus);
  const Vocabulary vocab = read_vocabulary(o.vocab);
  const auto records = make_target_records(corpus, vocab);
  write_targets(o.out, records);
  std::size_t empty = 0, no_positive = 0, active = 0;
  for (const auto& r : records) {
    empty += r.empty_caption ? 1 : 0;
    no_positive += r.target.active_count() == 0 ? 1 : 0;
    active += r.target.active_count();
  }
  ctx.manifest.inputs = {o.corpus, o.vocab};
  ctx.manifest.outputs = {o.out};
  ctx.manifest.extra["records"] = records.size();
  ctx.manifest.extra["empty_captions"] = empty;
  ctx.manifest.extra["records_without_positives"] = no_positive;
  if (empty) ctx.err << "make-targets: warning: " << empty << " captions have no content words\n";
  ctx.out << "make-targets: " << records.size() << " records, mean active "
          << (records.empty() ? 0.0 : static_cast<double>(active) / static_cast<double>(records.size())) << " -> "
          << o.out << "\n";
}

struct TrainOptions {
  std::string data;
  std::string out_dir;
  std::string loss = "focal";
  std::size_t epochs = 0;  // 0: loss default
  std::size_t batch_size = TrainConfig{}.batch_size;
  double lr = TrainConfig{}.lr_max;
  double weight_decay = TrainConfig{}.weight_decay;
  std::uint64_t seed = 1;
  std::string init = std::string(to_string(InitConfig{}.scheme));
  std::size_t top_k = kDefaultTopK;
};

inline void cmd_train(const TrainOptions& o, Context& ctx) {
  TrainConfig cfg;
  cfg.loss.variant = parse_loss_variant(o.loss);
  if (cfg.loss.variant == LossVariant::naive) throw UsageError("train: the naive baseline has nothing to train");
  cfg.epochs = o.epochs ? o.epochs : TrainConfig::default_epochs(cfg.loss.variant);
  cfg.batch_size = o.batch_size;
  cfg.lr_max = o.lr;
  cfg.weight_decay = o.weight_decay;
  cfg.seed = o.seed;
  cfg.top_k = o.top_k;
  cfg.init.scheme = parse_init_scheme(o.init);

  const DataBundle data = load_data_dir(o.data);
  detail::ensure_dir(o.out_dir);
  FitResult fitted = fit(data.samples, *data.vocab_embeddings, cfg, shape_for_dim(data.vocab_embeddings->dim()));
  const std::string ckpt = detail::path_in(o.out_dir, files::kCheckpoint);
  const std::string report_path = detail::path_in(o.out_dir, files::kTrainReport);
  fitted.report.checkpoint_path = ckpt;
  save_checkpoint(fitted.checkpoint, ckpt);
  detail::write_json(report_path, to_json(fitted.report, false));

  ctx.manifest.seeds = {cfg.seed};
  ctx.manifest.inputs = {o.data};
  ctx.manifest.outputs = {ckpt, report_path};
  ctx.manifest.config["resolved"] = to_json(cfg);
  ctx.manifest.extra["train_wall_clock_seconds"] = fitted.report.wall_clock_seconds;
  ctx.manifest.extra["param_count"] = fitted.report.param_count;
  const auto& last = fitted.report.epochs.back();
  ctx.out << "train: loss=" << to_string(cfg.loss.variant) << " epochs=" << cfg.epochs
          << " params=" << fitted.report.param_count << " final train loss=" << last.train_loss;
  if (last.val_recall) ctx.out << " val recall@" << cfg.top_k << "=" << *last.val_recall;
  ctx.out << " -> " << ckpt << "\n";
}

struct GradcheckOptions {
  std::uint64_t seed = 1;
  std::size_t seeds = 1;
  double tolerance = 1e-4;
  std::string out;
};

inline bool cmd_gradcheck(const GradcheckOptions& o, Context& ctx) {
  bool ok = true;
  nlohmann::json results = nlohmann::json::object();
  for (LossVariant v : {LossVariant::bce, LossVariant::contrastive, LossVariant::focal}) {
    double worst = 0.0;
    std::size_t excluded = 0;
    for (std::size_t i = 0; i < o.seeds; ++i) {
      const GradCheckResult r = gradient_check(v, o.seed + i);
      worst = std::max(worst, r.max_rel_error);
      excluded += r.excluded;
    }
    const bool pass = worst <= o.tolerance;
    ok = ok && pass;
    results[std::string(to_string(v))] = {{"max_rel_error", worst}, {"excluded", excluded}, {"pass", pass}};
    ctx.out << to_string(v) << " max_rel_error=" << worst << (pass ? " ok" : " FAIL") << "\n";
  }
  ctx.manifest.seeds.clear();
  for (std::size_t i = 0; i < o.seeds; ++i) ctx.manifest.seeds.push_back(o.seed + i);
  ctx.manifest.extra["results"] = results;
  if (!o.out.empty()) {
    detail::write_json(o.out, results);
    ctx.manifest.outputs = {o.out};
  }
  return ok;
}

struct RetrieveOptions {
  std::string data;
  std::string checkpoint;  // empty: naive baseline
  std::string split = "test";
  std::size_t top_k = kDefaultTopK;
  std::string out;
};

inline void cmd_retrieve(const RetrieveOptions& o, Context& ctx) {
  const DataBundle data = load_data_dir(o.data);
  const auto split = parse_split(o.split);
  const auto chosen = select_split(data.samples, split);
  if (chosen.empty()) throw DataError(DataErrc::parse, "retrieve: split " + o.split + " is empty");
  std::optional<Checkpoint> ckpt;
  if (!o.checkpoint.empty()) ckpt = load_checkpoint(o.checkpoint);
  const std::string decoder = ckpt ? "refiner:" + std::string(to_string(ckpt->loss)) : "naive";
  const auto& unit = data.vocab_embeddings->unit_rows();

  std::vector<nlohmann::json> lines;
  double recall_sum = 0.0;
  std::size_t counted = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < chosen.size(); start += kChunk) {
    const auto part = std::span<const Sample* const>(chosen).subspan(start, std::min(kChunk, chosen.size() - start));
    const Matrix<float> x = stack_inputs(part);
    const Matrix<float> logits = ckpt ? forward_batch(ckpt->params, x, unit).logits : naive_logits_batch(x, unit);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const Sample& s = *part[i];
      const BagOfWords bow = top_k_bow<float>(logits.row(i), data.vocab, o.top_k);
      const RetrievalScore rs = retrieval_metrics(bow.indices(), s.target, o.top_k);
      if (rs.has_positives) {
        recall_sum += rs.recall;
        ++counted;
      }
      const CaptionRecord* rec = data.record(s.id);
      lines.push_back({{"id", s.id},
                       {"subject", s.subject},
                       {"split", std::string(to_string(s.split))},
                       {"decoder", decoder},
                       {"object_label", rec ? rec->object_label : std::string{}},
                       {"object_confidence", rec ? rec->object_confidence : 1.0},
                       {"bow", bow_to_json(bow)},
                       {"precision_at_k", rs.precision},
                       {"recall_at_k", rs.recall}});
    }
  }
  detail::ensure_dir(detail::parent_or_cwd(o.out));
  detail::write_jsonl(o.out, lines);
  ctx.manifest.inputs = {o.data};
  if (ckpt) {
    ctx.manifest.inputs.push_back(o.checkpoint);
    ctx.manifest.seeds = {ckpt->seed};
  }
  ctx.manifest.outputs = {o.out};
  const double mean_recall = counted ? recall_sum / static_cast<double>(counted) : 0.0;
  ctx.manifest.extra["recall_at_k"] = mean_recall;
  ctx.out << "retrieve: " << lines.size() << " samples, decoder=" << decoder << ", recall@" << o.top_k << "="
          << mean_recall << " -> " << o.out << "\n";
}

struct PromptOptions {
  std::string bow;
  std::string variant = "with_obj";
  std::string out;
};

inline void cmd_prompt(const PromptOptions& o, Context& ctx) {
  std::vector<PromptVariant> variants;
  if (o.variant == "both") {
    variants = {PromptVariant::with_obj, PromptVariant::without_obj};
  } else {
    variants = {parse_prompt_variant(o.variant)};
  }
  std::vector<nlohmann::json> lines;
  std::size_t empty = 0;
  for (const auto& j : detail::read_jsonl(o.bow)) {
    PromptInput in;
    in.object_label = j.value("object_label", std::string{});
    in.object_confidence = j.value("object_confidence", 1.0);
    in.bow = bow_from_json(j.at("bow"));
    for (PromptVariant v : variants) {
      const RenderedPrompt rp = render_prompt(v, in);
      empty += rp.empty_bow ? 1 : 0;
      lines.push_back(to_json(CaptionRecordOut{j.at("id").get<std::string>(), v, rp.text, "", 0, ""}));
    }
  }
  detail::ensure_dir(detail::parent_or_cwd(o.out));
  detail::write_jsonl(o.out, lines);
  if (empty) ctx.err << "prompt: warning: " << empty << " prompts rendered with an empty BoW\n";
  ctx.manifest.inputs = {o.bow};
  ctx.manifest.outputs = {o.out};
  ctx.out << "prompt: " << lines.size() << " prompts -> " << o.out << "\n";
}

struct GenerateOptions {
  std::string prompts;
  std::string data;
  std::string checkpoint;
  std::string out;
  LLMConfig llm;
  bool no_privacy_check = false;
};

inline void cmd_generate(const GenerateOptions& o, Context& ctx) {
  if (o.no_privacy_check) {
    throw UsageError("generate: refusing to send requests with the privacy check disabled");
  }
  const DataBundle data = load_data_dir(o.data);
  std::optional<Checkpoint> ckpt;
  if (!o.checkpoint.empty()) ckpt = load_checkpoint(o.checkpoint);

  const auto prompt_lines = detail::read_jsonl(o.prompts);
  std::vector<CaptionRecordOut> records;
  std::vector<CaptionRequest> requests;
  for (const auto& j : prompt_lines) {
    CaptionRecordOut r = caption_record_from_json(j);
    const Sample* s = data.sample(r.id);
    if (!s) throw DataError(DataErrc::parse, "generate: no embedding for sample " + r.id);
    CaptionRequest req{r.prompt, {s->x, {}}};
    if (ckpt) {
      const auto fwd = forward<float>(ckpt->params, s->x, data.vocab_embeddings->unit_rows());
      auto z = fwd.z.row(0);
      req.privacy.latent.assign(z.begin(), z.end());
    }
    records.push_back(std::move(r));
    requests.push_back(std::move(req));
  }
  const auto captions = generate_captions(requests, o.llm);
  std::vector<nlohmann::json> lines;
  std::size_t off_length = 0;
  nlohmann::json request_meta = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].caption = captions[i].text;
    records[i].word_count = captions[i].word_count;
    records[i].model = captions[i].model;
    if (!captions[i].length_ok) ++off_length;
    lines.push_back(to_json(records[i]));
    request_meta.push_back({{"id", records[i].id},
                            {"attempts", captions[i].attempts},
                            {"retried_statuses", captions[i].retried_statuses},
                            {"latency_ms", captions[i].latency_ms},
                            {"length_ok", captions[i].length_ok}});
  }
  detail::ensure_dir(detail::parent_or_cwd(o.out));
  detail::write_jsonl(o.out, lines);
  if (off_length) ctx.err << "generate: warning: " << off_length << " captions outside 8-20 words\n";
  ctx.manifest.inputs = {o.prompts, o.data};
  if (ckpt) ctx.manifest.inputs.push_back(o.checkpoint);
  ctx.manifest.outputs = {o.out};
  ctx.manifest.extra["requests"] = request_meta;
  ctx.manifest.extra["endpoint"] = o.llm.endpoint;
  ctx.manifest.extra["temperature"] = o.llm.temperature;
  ctx.out << "generate: " << lines.size() << " captions -> " << o.out << "\n";
}

struct EvaluateOptions {
  std::string data;
  std::string checkpoint;
  std::string captions;
  std::string split = "test";
  std::string variant_tag;
  std::size_t top_k = kDefaultTopK;
  bool raw_tokens = false;
  bool corpus_bleu = false;
  std::string out_dir;
};

inline void cmd_evaluate(const EvaluateOptions& o, Context& ctx) {
  const DataBundle data = load_data_dir(o.data);
  detail::ensure_dir(o.out_dir);
  ctx.manifest.inputs = {o.data};

  // Retrieval quality, naive baseline always and the refiner when given.
  const auto chosen = select_split(data.samples, parse_split(o.split));
  if (chosen.empty()) throw DataError(DataErrc::parse, "evaluate: split " + o.split + " is empty");
  nlohmann::json retrieval = {{"split", o.split}, {"naive", to_json(evaluate_naive(chosen, *data.vocab_embeddings, o.top_k))}};
  if (!o.checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(o.checkpoint);
    retrieval["refiner"] = to_json(evaluate(ckpt.params, chosen, *data.vocab_embeddings, o.top_k));
    retrieval["refiner_loss"] = std::string(to_string(ckpt.loss));
    ctx.manifest.inputs.push_back(o.checkpoint);
    ctx.manifest.seeds = {ckpt.seed};
  }
  const std::string retrieval_path = detail::path_in(o.out_dir, "retrieval_eval.json");
  detail::write_json(retrieval_path, retrieval);
  ctx.manifest.outputs.push_back(retrieval_path);
  ctx.out << "evaluate: naive recall@" << o.top_k << "=" << retrieval["naive"]["overall"]["recall_at_k"].get<double>();
  if (retrieval.contains("refiner")) {
    ctx.out << " refiner recall@" << o.top_k << "=" << retrieval["refiner"]["overall"]["recall_at_k"].get<double>();
  }
  ctx.out << "\n";

  if (o.captions.empty()) return;
  const Tokenization mode = o.raw_tokens ? Tokenization::raw : Tokenization::normalized;
  std::vector<MetricRow> rows;
  std::vector<std::string> cands, refs;
  for (const auto& j : detail::read_jsonl(o.captions)) {
    const CaptionRecordOut c = caption_record_from_json(j);
    const CaptionRecord* ref = data.record(c.id);
    if (!ref) throw DataError(DataErrc::parse, "evaluate: no reference caption for " + c.id);
    const std::string variant = o.variant_tag.empty() ? std::string(to_string(c.variant))
                                                      : o.variant_tag + "/" + std::string(to_string(c.variant));
    rows.push_back(score_caption(c.id, ref->subject, variant, c.caption, ref->caption, mode));
    cands.push_back(c.caption);
    refs.push_back(ref->caption);
  }
  if (rows.empty()) throw DataError(DataErrc::parse, "evaluate: no captions in " + o.captions);
  const auto by_variant = aggregate(rows, {GroupKey::variant});
  const auto by_subject = aggregate(rows, {GroupKey::variant, GroupKey::subject});

  const std::string csv_path = detail::path_in(o.out_dir, "metrics.csv");
  const std::string agg_path = detail::path_in(o.out_dir, "metrics_by_subject.csv");
  const std::string json_path = detail::path_in(o.out_dir, "metrics.json");
  std::ostringstream csv, agg;
  write_metric_csv(csv, rows);
  write_aggregate_csv(agg, by_subject);
  detail::write_text(csv_path, csv.str());
  detail::write_text(agg_path, agg.str());
  nlohmann::json j_rows = nlohmann::json::array(), j_var = nlohmann::json::array(), j_sub = nlohmann::json::array();
  for (const auto& r : rows) j_rows.push_back(to_json(r));
  for (const auto& a : by_variant) j_var.push_back(to_json(a));
  for (const auto& a : by_subject) j_sub.push_back(to_json(a));
  nlohmann::json metrics = {{"tokenization", o.raw_tokens ? "raw" : "normalized"},
                            {"rows", j_rows},
                            {"by_variant", j_var},
                            {"by_subject", j_sub}};
  if (o.corpus_bleu) {
    metrics["corpus_bleu1"] = corpus_bleu(cands, refs, 1, mode);
    metrics["corpus_bleu4"] = corpus_bleu(cands, refs, 4, mode);
  }
  detail::write_json(json_path, metrics);
  ctx.manifest.inputs.push_back(o.captions);
  for (const auto& p : {csv_path, agg_path, json_path}) ctx.manifest.outputs.push_back(p);
  const AggregateRow& overall = by_variant.back();
  ctx.out << "evaluate: " << rows.size() << " captions, BLEU-1=" << overall.bleu1 << " ROUGE-1=" << overall.rouge1
          << " ROUGE-L=" << overall.rougeL << "\n";
}

struct ReportOptions {
  std::vector<std::string> metrics;
  std::string out_dir;
};

// Merges several evaluate outputs into one table per variant and one per
// (variant, subject).
inline void cmd_report(const ReportOptions& o, Context& ctx) {
  std::vector<MetricRow> rows;
  for (const auto& path : o.metrics) {
    const auto j = detail::read_json(path);
    for (const auto& r : j.at("rows")) rows.push_back(metric_row_from_json(r));
  }
  if (rows.empty()) throw DataError(DataErrc::parse, "report: no metric rows in the inputs");
  detail::ensure_dir(o.out_dir);
  const auto by_variant = aggregate(rows, {GroupKey::variant});
  const auto by_subject = aggregate(rows, {GroupKey::variant, GroupKey::subject});
  std::ostringstream a, b;
  write_aggregate_csv(a, by_variant);
  write_aggregate_csv(b, by_subject);
  const std::string variant_path = detail::path_in(o.out_dir, "report.csv");
  const std::string subject_path = detail::path_in(o.out_dir, "report_by_subject.csv");
  detail::write_text(variant_path, a.str());
  detail::write_text(subject_path, b.str());
  ctx.manifest.inputs = o.metrics;
  ctx.manifest.outputs = {variant_path, subject_path};
  ctx.out << a.str();
}

// ------------------------------------------------------------------ run()

namespace detail {

inline int report_error(std::ostream& err, const char* kind, const std::exception& e, int code) {
  err << "sense: " << kind << ": " << e.what() << "\n";
  return code;
}

}  // namespace detail

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"sense: embedding -> Bag-of-Words -> prompt -> caption", "sense"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of option values; flags given here override it");
  };

  SynthOptions synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic data directory");
  s_synth->add_option("--v", synth.cfg.vocab_size, "Vocabulary size");
  s_synth->add_option("--n", synth.cfg.n_samples, "Number of samples");
  s_synth->add_option("--dim", synth.cfg.dim, "Embedding dimension");
  s_synth->add_option("--active", synth.cfg.active_per_sample, "Active tokens per sample");
  s_synth->add_option("--noise", synth.cfg.noise_sigma, "Noise sigma");
  s_synth->add_option("--distractor-rate", synth.cfg.distractor_rate, "Probability of one off-target row");
  s_synth->add_option("--subjects", synth.cfg.subjects, "Number of subjects");
  s_synth->add_option("--nuisance-rank", synth.cfg.nuisance_rank, "Rank of the structured noise subspace");
  s_synth->add_option("--nuisance-gain", synth.cfg.nuisance_gain, "Gain of the structured noise");
  s_synth->add_option("--seed", synth.cfg.seed, "Seed");
  s_synth->add_option("--out", synth.out_dir, "Output data directory")->required();

  BuildVocabOptions bv;
  auto* s_bv = app.add_subcommand("build-vocab", "Build the vocabulary from the train split of a corpus");
  s_bv->add_option("--corpus", bv.corpus, "Corpus JSON-lines")->required();
  s_bv->add_option("--out", bv.out, "Output vocabulary JSON")->required();

  MakeTargetsOptions mt;
  auto* s_mt = app.add_subcommand("make-targets", "Encode N-hot targets for a corpus");
  s_mt->add_option("--corpus", mt.corpus, "Corpus JSON-lines")->required();
  s_mt->add_option("--vocab", mt.vocab, "Vocabulary JSON")->required();
  s_mt->add_option("--out", mt.out, "Output targets JSON-lines")->required();

  TrainOptions tr;
  auto* s_tr = app.add_subcommand("train", "Train the similarity refiner");
  s_tr->add_option("--data", tr.data, "Data directory")->required();
  s_tr->add_option("--out", tr.out_dir, "Output directory")->required();
  s_tr->add_option("--loss", tr.loss, "bce | contrastive | focal");
  s_tr->add_option("--epochs", tr.epochs, "Epochs (0: 100 for contrastive, else 50)");
  s_tr->add_option("--batch-size", tr.batch_size, "Mini-batch size");
  s_tr->add_option("--lr", tr.lr, "Peak learning rate");
  s_tr->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
  s_tr->add_option("--seed", tr.seed, "Seed for init and shuffling");
  s_tr->add_option("--init", tr.init, "identity_pair | he_uniform");
  s_tr->add_option("--top-k", tr.top_k, "k for validation recall");

  GradcheckOptions gc;
  auto* s_gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss through the refiner");
  s_gc->add_option("--seed", gc.seed, "First seed");
  s_gc->add_option("--seeds", gc.seeds, "Number of consecutive seeds");
  s_gc->add_option("--tolerance", gc.tolerance, "Maximum relative error");
  s_gc->add_option("--out", gc.out, "Optional JSON result file");

  RetrieveOptions rt;
  auto* s_rt = app.add_subcommand("retrieve", "Extract top-k Bag-of-Words per sample");
  s_rt->add_option("--data", rt.data, "Data directory")->required();
  s_rt->add_option("--checkpoint", rt.checkpoint, "Refiner checkpoint (omit for the naive baseline)");
  s_rt->add_option("--split", rt.split, "train | val | test");
  s_rt->add_option("--top-k", rt.top_k, "Bag-of-Words size");
  s_rt->add_option("--out", rt.out, "Output BoW JSON-lines")->required();

  PromptOptions pr;
  auto* s_pr = app.add_subcommand("prompt", "Render zero-shot prompts from a BoW file");
  s_pr->add_option("--bow", pr.bow, "BoW JSON-lines from retrieve")->required();
  s_pr->add_option("--variant", pr.variant, "with_obj | without_obj | both");
  s_pr->add_option("--out", pr.out, "Output prompts JSON-lines")->required();

  GenerateOptions gen;
  auto* s_gen = app.add_subcommand("generate", "Send prompts to a chat-completion endpoint");
  s_gen->add_option("--prompts", gen.prompts, "Prompts JSON-lines")->required();
  s_gen->add_option("--data", gen.data, "Data directory (for the privacy check)")->required();
  s_gen->add_option("--checkpoint", gen.checkpoint, "Refiner checkpoint (adds the latent to the privacy check)");
  s_gen->add_option("--out", gen.out, "Output captions JSON-lines")->required();
  s_gen->add_option("--endpoint", gen.llm.endpoint, "Chat-completions URL");
  s_gen->add_option("--model", gen.llm.model, "Model name");
  s_gen->add_option("--temperature", gen.llm.temperature, "Sampling temperature (fixed unless overridden)");
  s_gen->add_flag("--allow-temperature-override", gen.llm.allow_temperature_override, "Permit a temperature other than 0.2");
  s_gen->add_option("--max-retries", gen.llm.max_retries, "Retries on transport errors, 429 and 5xx");
  s_gen->add_option("--timeout", gen.llm.timeout_seconds, "Per-request timeout in seconds");
  s_gen->add_option("--backoff", gen.llm.backoff_initial_seconds, "Initial retry backoff in seconds");
  s_gen->add_option("--credential-env", gen.llm.credential_env, "Environment variable holding the API key");
  s_gen->add_option("--max-in-flight", gen.llm.max_in_flight, "Concurrent requests");
  s_gen->add_flag("--no-privacy-check", gen.no_privacy_check, "Rejected: the privacy check cannot be disabled");

  EvaluateOptions ev;
  auto* s_ev = app.add_subcommand("evaluate", "Score retrieval and, if given, generated captions");
  s_ev->add_option("--data", ev.data, "Data directory")->required();
  s_ev->add_option("--checkpoint", ev.checkpoint, "Refiner checkpoint");
  s_ev->add_option("--captions", ev.captions, "Captions JSON-lines from generate");
  s_ev->add_option("--split", ev.split, "Split for retrieval scores");
  s_ev->add_option("--variant-tag", ev.variant_tag, "Prefix for the caption variant label");
  s_ev->add_option("--top-k", ev.top_k, "k for retrieval scores");
  s_ev->add_flag("--raw-tokens", ev.raw_tokens, "Whitespace tokenization without lowercasing or punctuation removal");
  s_ev->add_flag("--corpus-bleu", ev.corpus_bleu, "Also report corpus-level BLEU");
  s_ev->add_option("--out", ev.out_dir, "Output directory")->required();

  ReportOptions rp;
  auto* s_rp = app.add_subcommand("report", "Merge evaluate outputs into summary tables");
  s_rp->add_option("--metrics", rp.metrics, "metrics.json files")->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  s_rp->add_option("--out", rp.out_dir, "Output directory")->required();

  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) add_config(sub);

  if (args.empty()) {
    err << app.help();
    return kUsage;
  }

  // Splice config-file values in right after the subcommand name.
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") {
      try {
        auto tokens = detail::config_tokens(detail::read_json(args[i + 1]));
        args.insert(args.begin() + 1, tokens.begin(), tokens.end());
      } catch (const Error& e) {
        return detail::report_error(err, "usage error", e, kUsage);
      }
      break;
    }
  }

  std::vector<std::string> argv_store{"sense"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "sense: usage error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  Context ctx{out, err, {}};
  ctx.manifest.command = sub->get_name();
  ctx.manifest.config = detail::config_snapshot(*sub);
  ctx.manifest.started_at = utc_timestamp();
  const auto start = std::chrono::steady_clock::now();
  fs::path manifest_dir;
  int code = kOk;
  try {
    if (sub == s_synth) {
      cmd_synth(synth, ctx);
      manifest_dir = synth.out_dir;
    } else if (sub == s_bv) {
      cmd_build_vocab(bv, ctx);
      manifest_dir = detail::parent_or_cwd(bv.out);
    } else if (sub == s_mt) {
      cmd_make_targets(mt, ctx);
      manifest_dir = detail::parent_or_cwd(mt.out);
    } else if (sub == s_tr) {
      cmd_train(tr, ctx);
      manifest_dir = tr.out_dir;
    } else if (sub == s_gc) {
      code = cmd_gradcheck(gc, ctx) ? kOk : kData;
      if (!gc.out.empty()) manifest_dir = detail::parent_or_cwd(gc.out);
    } else if (sub == s_rt) {
      cmd_retrieve(rt, ctx);
      manifest_dir = detail::parent_or_cwd(rt.out);
    } else if (sub == s_pr) {
      cmd_prompt(pr, ctx);
      manifest_dir = detail::parent_or_cwd(pr.out);
    } else if (sub == s_gen) {
      cmd_generate(gen, ctx);
      manifest_dir = detail::parent_or_cwd(gen.out);
    } else if (sub == s_ev) {
      cmd_evaluate(ev, ctx);
      manifest_dir = ev.out_dir;
    } else if (sub == s_rp) {
      cmd_report(rp, ctx);
      manifest_dir = rp.out_dir;
    }
  } catch (const UsageError& e) {
    err << sub->help();
    return detail::report_error(err, "usage error", e, kUsage);
  } catch (const NetworkError& e) {
    return detail::report_error(err, "network error", e, kNetwork);
  } catch (const DataError& e) {
    return detail::report_error(err, "data error", e, kData);
  } catch (const Error& e) {
    return detail::report_error(err, "error", e, kData);
  } catch (const std::exception& e) {
    return detail::report_error(err, "error", e, kData);
  }
  ctx.manifest.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!manifest_dir.empty()) {
    try {
      detail::write_json(manifest_path(manifest_dir, ctx.manifest.command), to_json(ctx.manifest));
    } catch (const Error& e) {
      return detail::report_error(err, "data error", e, kData);
    }
  }
  return code;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace sense::cli
