#pragma once

// Document -> analysis -> (question, passage, rubric) synthesis with
// enrichment, QA filtering, content-hash resume and document-level splits.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgrpo/chat_client.hpp"
#include "rgrpo/hash.hpp"
#include "rgrpo/json_extract.hpp"
#include "rgrpo/log.hpp"
#include "rgrpo/policy.hpp"
#include "rgrpo/rubric.hpp"

namespace rgrpo {

namespace fs = std::filesystem;

/// Anything that turns a (system, user) prompt into text. Implementations
/// must tolerate concurrent calls.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(const ChatRequest& request) = 0;
  virtual std::string model_name() const { return "unknown"; }
};

class ChatGenerator final : public TextGenerator {
 public:
  explicit ChatGenerator(EndpointConfig cfg, double temperature = 0.7, int max_tokens = 8000)
      : client_(std::move(cfg)), temperature_(temperature), max_tokens_(max_tokens) {}

  std::string generate(const ChatRequest& request) override {
    auto req = request;
    req.temperature = temperature_;
    req.max_tokens = max_tokens_;
    return client_.complete(req);
  }

  std::string model_name() const override { return client_.config().model; }

 private:
  ChatClient client_;
  double temperature_;
  int max_tokens_;
};

// ---------------------------------------------------------------------------
// Stage prompts. Each system text starts with a tag so offline generators can
// dispatch on it.

inline constexpr std::string_view kAnalysisTag = "[document-analysis]";
inline constexpr std::string_view kSynthesisTag = "[question-rubric-synthesis]";
inline constexpr std::string_view kEnrichmentTag = "[rubric-enrichment]";

inline ChatRequest analysis_request(std::string_view doc) {
  ChatRequest r;
  r.system = std::string(kAnalysisTag) +
             " You analyze technical documents. Return ONLY a JSON object with string fields "
             "\"genre\", \"contribution\", \"depth\", \"reasoning_mode\" and a string list "
             "\"concepts\".";
  r.user = "Characterize the document's genre, primary contribution, central concepts, "
           "technical depth and dominant reasoning mode.\n\nDOCUMENT:\n" +
           std::string(doc);
  return r;
}

inline ChatRequest synthesis_request(std::string_view doc, const DocumentAnalysis& analysis, int k_d) {
  ChatRequest r;
  r.system = std::string(kSynthesisTag) +
             " You write exam questions with grading rubrics. Return ONLY a JSON object "
             "{\"tuples\": [...]} where each tuple has \"question\", \"passage\", "
             "\"question_rationale\" and \"criteria\"; each criterion has \"id\", \"weight\", "
             "\"name\", \"description\", \"required_elements\", \"scoring_guide\", "
             "\"verification_method\", \"expected_keywords\", \"expected_concepts\".";
  std::ostringstream u;
  u << "Write " << k_d << " question/rubric tuples for the document below.\n"
    << "Constraints:\n"
    << "1. The question and rubric must be answerable and gradable without the source.\n"
    << "2. Target deep understanding, not surface recall.\n"
    << "3. Every criterion carries a description, required elements, scoring guide, keywords "
       "and verification method.\n"
    << "4. Weights reflect each criterion's contribution to answer quality.\n"
    << "The passage is the excerpt of the document that grounds the rubric.\n\n"
    << "ANALYSIS:\n" << to_json(analysis).dump() << "\n\nDOCUMENT:\n" << doc;
  r.user = u.str();
  return r;
}

inline ChatRequest enrichment_request(const TaskInstance& t) {
  ChatRequest r;
  r.system = std::string(kEnrichmentTag) +
             " You refine grading rubrics. Return ONLY a JSON object {\"criteria\": [...]} with, "
             "for each existing criterion id, added \"expected_keywords\", "
             "\"expected_concepts\" and a \"verification_method\". Do not add criteria.";
  ordered_json crit = ordered_json::array();
  for (const auto& c : t.rubric.criteria) crit.push_back(to_json(c));
  r.user = "QUESTION:\n" + t.question + "\n\nPASSAGE:\n" + t.passage + "\n\nCRITERIA:\n" + crit.dump();
  return r;
}

// ---------------------------------------------------------------------------
// Stages

class AnalysisFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::optional<DocumentAnalysis> parse_analysis(std::string_view raw) {
  auto j = extract_first_json_object(raw);
  if (!j) return std::nullopt;
  for (const char* key : {"genre", "contribution", "depth", "reasoning_mode"})
    if (!j->contains(key) || !(*j)[key].is_string()) return std::nullopt;
  if (!j->contains("concepts") || !(*j)["concepts"].is_array()) return std::nullopt;
  try {
    return analysis_from_json(*j);
  } catch (const SchemaError&) {
    return std::nullopt;
  }
}

/// Stage 1. Retries on schema violations, then throws AnalysisFailed.
inline DocumentAnalysis analyze_document(std::string_view doc, TextGenerator& gen, int max_attempts = 3) {
  if (doc.find_first_not_of(" \t\r\n") == std::string_view::npos)
    throw ConfigError("analyze_document: empty document");
  std::string last = "no attempts";
  for (int attempt = 0; attempt < std::max(1, max_attempts); ++attempt) {
    try {
      if (auto a = parse_analysis(gen.generate(analysis_request(doc)))) return *a;
      last = "analysis output violates the schema";
    } catch (const TransportError& e) {
      last = e.what();
    }
  }
  throw AnalysisFailed(last);
}

struct SynthesizedTuple {
  TaskInstance task;
  std::string generator_model;
  std::string synthesized_at;
  std::string enriched_at;
  bool enriched = false;
};

struct SynthesisResult {
  std::vector<SynthesizedTuple> tuples;
  std::vector<std::string> errors;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Stage 2. Per-tuple schema failures are reported in `errors`; structural
/// constraint checks are left to qa_filter.
inline SynthesisResult synthesize_tuples(std::string_view doc, const DocumentAnalysis& analysis, int k_d,
                                         TextGenerator& gen, const std::string& doc_hash = {}) {
  SynthesisResult out;
  if (k_d <= 0) return out;
  std::string raw;
  try {
    raw = gen.generate(synthesis_request(doc, analysis, k_d));
  } catch (const TransportError& e) {
    out.errors.emplace_back(std::string("synthesis transport: ") + e.what());
    return out;
  }
  auto j = extract_first_json_object(raw);
  if (!j || !j->contains("tuples") || !(*j)["tuples"].is_array()) {
    out.errors.emplace_back("synthesis output lacks a 'tuples' list");
    return out;
  }
  const auto stamp = utc_timestamp();
  std::size_t index = 0;
  for (const auto& item : (*j)["tuples"]) {
    if (static_cast<int>(out.tuples.size()) == k_d) break;
    ++index;
    try {
      SynthesizedTuple t;
      t.task = task_from_json(item);
      t.task.document_analysis = analysis;
      t.task.doc_hash = doc_hash;
      t.generator_model = gen.model_name();
      t.synthesized_at = stamp;
      out.tuples.push_back(std::move(t));
    } catch (const SchemaError& e) {
      out.errors.push_back("tuple " + std::to_string(index) + ": " + e.what());
    }
  }
  return out;
}

namespace detail {

inline void extend_unique(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  for (const auto& s : src)
    if (!s.empty() && std::find(dst.begin(), dst.end(), s) == dst.end()) dst.push_back(s);
}

}  // namespace detail

/// Stage 3. Adds keywords, concepts and verification cues to existing
/// criteria only; ids, weights and the criterion set never change. On any
/// failure the tuple comes back untouched with `enriched == false`.
inline SynthesizedTuple enrich_rubric(SynthesizedTuple tuple, TextGenerator& gen) {
  tuple.enriched = false;
  std::string raw;
  try {
    raw = gen.generate(enrichment_request(tuple.task));
  } catch (const TransportError& e) {
    log_warn(std::string("enrichment failed: ") + e.what());
    return tuple;
  }
  auto j = extract_first_json_object(raw);
  if (!j || !j->contains("criteria") || !(*j)["criteria"].is_array()) {
    log_warn("enrichment output lacks a 'criteria' list");
    return tuple;
  }
  auto enriched = tuple.task.rubric;
  try {
    for (const auto& item : (*j)["criteria"]) {
      if (!item.is_object() || !item.contains("id") || !item["id"].is_string()) continue;
      auto it = std::find_if(enriched.criteria.begin(), enriched.criteria.end(),
                             [&](const Criterion& c) { return c.id == item["id"].get<std::string>(); });
      if (it == enriched.criteria.end()) continue;
      detail::extend_unique(it->expected_keywords, detail::string_list(item, "expected_keywords"));
      detail::extend_unique(it->expected_concepts, detail::string_list(item, "expected_concepts"));
      const auto method = detail::string_field(item, "verification_method");
      if (!method.empty() && it->verification_method.find(method) == std::string::npos)
        it->verification_method = it->verification_method.empty() ? method : it->verification_method + "; " + method;
    }
  } catch (const SchemaError& e) {
    log_warn(std::string("enrichment output malformed: ") + e.what());
    return tuple;
  }
  tuple.task.rubric = std::move(enriched);
  tuple.enriched = true;
  tuple.enriched_at = utc_timestamp();
  return tuple;
}

struct Rejection {
  SynthesizedTuple tuple;
  std::vector<std::string> reasons;
};

struct QaResult {
  std::vector<SynthesizedTuple> accepted;
  std::vector<Rejection> rejected;
};

/// Structural QA: rubric checks, non-empty question, and removal of exact
/// duplicates (same doc_hash and question).
inline QaResult qa_filter(std::vector<SynthesizedTuple> tuples, const QaPolicy& policy) {
  QaResult out;
  std::set<std::pair<std::string, std::string>> seen;
  for (auto& t : tuples) {
    std::vector<std::string> reasons;
    if (t.task.question.find_first_not_of(" \t\r\n") == std::string::npos)
      reasons.emplace_back(to_string(QaCheck::NonEmptyQuestion));
    const auto report = validate_rubric(t.task.rubric, policy);
    for (const auto& f : report.failures) reasons.push_back(std::string(to_string(f.check)) + ": " + f.detail);
    if (reasons.empty() && !seen.insert({t.task.doc_hash, t.task.question}).second)
      reasons.emplace_back("duplicate tuple");
    if (reasons.empty()) {
      out.accepted.push_back(std::move(t));
    } else {
      out.rejected.push_back({std::move(t), std::move(reasons)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus and index

struct Document {
  std::string source;
  std::string text;
};

/// Line endings unified, whitespace runs collapsed, ends trimmed.
inline std::string normalize_document(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char ch : text) {
    if (ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' || ch == '\v') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(ch);
  }
  return out;
}

inline std::string document_hash(std::string_view text) { return sha256_hex(normalize_document(text)); }

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// A directory of text files (sorted by name) or a line-delimited JSON file
/// whose records carry a "text" field.
inline std::vector<Document> load_corpus(const fs::path& source) {
  std::vector<Document> docs;
  if (fs::is_directory(source)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(source))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) docs.push_back({f.filename().string(), read_file(f)});
    return docs;
  }
  if (!fs::is_regular_file(source)) throw ConfigError("corpus not found: " + source.string());
  std::ifstream in(source);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw ConfigError(source.string() + ":" + std::to_string(n) + ": record needs a string 'text' field");
    docs.push_back({source.filename().string() + ":" + std::to_string(n), j["text"].get<std::string>()});
  }
  return docs;
}

struct IndexRecord {
  std::string doc_hash;
  std::string source;
  std::string status;  // "done" or "failed"
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::vector<std::string> notes;
  std::string finished_at;
};

inline nlohmann::json to_json(const IndexRecord& r) {
  return {{"doc_hash", r.doc_hash}, {"source", r.source},     {"status", r.status},
          {"accepted", r.accepted}, {"rejected", r.rejected}, {"notes", r.notes},
          {"finished_at", r.finished_at}};
}

inline IndexRecord index_record_from_json(const nlohmann::json& j) {
  IndexRecord r;
  r.doc_hash = j.at("doc_hash").get<std::string>();
  r.source = j.value("source", "");
  r.status = j.at("status").get<std::string>();
  r.accepted = j.value("accepted", std::size_t{0});
  r.rejected = j.value("rejected", std::size_t{0});
  r.notes = j.value("notes", std::vector<std::string>{});
  r.finished_at = j.value("finished_at", "");
  return r;
}

/// Content-hash -> completion record, backed by an append-only journal.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  /// Replays `journal` (missing file = empty index).
  explicit DatasetIndex(fs::path journal) : journal_(std::move(journal)) {
    std::ifstream in(journal_);
    std::string line;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;  // torn trailing write
      try {
        auto r = index_record_from_json(j);
        records_[r.doc_hash] = std::move(r);
      } catch (const std::exception&) {
      }
    }
  }

  bool contains(const std::string& hash) const {
    std::lock_guard lock(mutex_);
    return records_.contains(hash);
  }

  void append(const IndexRecord& r) {
    std::lock_guard lock(mutex_);
    if (!journal_.empty()) {
      std::ofstream out(journal_, std::ios::app);
      out << to_json(r).dump() << '\n';
      out.flush();
    }
    records_[r.doc_hash] = r;
  }

  /// Register a record without journaling it (recovery of orphaned output).
  void adopt(const IndexRecord& r) {
    std::lock_guard lock(mutex_);
    records_.emplace(r.doc_hash, r);
  }

  std::map<std::string, IndexRecord> records() const {
    std::lock_guard lock(mutex_);
    return records_;
  }

 private:
  fs::path journal_;
  mutable std::mutex mutex_;
  std::map<std::string, IndexRecord> records_;
};

// ---------------------------------------------------------------------------
// Statistics

inline nlohmann::json histogram_json(const std::vector<double>& values, double bin_width) {
  std::map<long, std::size_t> bins;
  for (double v : values) bins[static_cast<long>(std::floor(v / bin_width))]++;
  nlohmann::json out = nlohmann::json::array();
  for (const auto& [b, n] : bins)
    out.push_back({{"lo", static_cast<double>(b) * bin_width}, {"hi", static_cast<double>(b + 1) * bin_width}, {"count", n}});
  return out;
}

inline nlohmann::json corpus_statistics(const std::vector<TaskInstance>& tuples) {
  std::map<std::size_t, std::size_t> per_example;
  std::vector<double> weights, q_len, p_len;
  std::set<std::string> docs;
  for (const auto& t : tuples) {
    per_example[t.rubric.criterion_count()]++;
    for (const auto& c : t.rubric.criteria) weights.push_back(c.weight);
    q_len.push_back(static_cast<double>(t.question.size()));
    p_len.push_back(static_cast<double>(t.passage.size()));
    docs.insert(t.doc_hash);
  }
  nlohmann::json cpe = nlohmann::json::object();
  for (const auto& [k, n] : per_example) cpe[std::to_string(k)] = n;
  nlohmann::json w = {{"count", weights.size()}};
  if (!weights.empty()) {
    double sum = 0.0;
    for (double x : weights) sum += x;
    w["min"] = *std::min_element(weights.begin(), weights.end());
    w["max"] = *std::max_element(weights.begin(), weights.end());
    w["mean"] = sum / static_cast<double>(weights.size());
    w["histogram"] = histogram_json(weights, 1.0);
  }
  return {{"tuples", tuples.size()},
          {"documents", docs.size()},
          {"criteria_per_example", cpe},
          {"weights", w},
          {"question_length_chars", histogram_json(q_len, 100.0)},
          {"passage_length_chars", histogram_json(p_len, 500.0)}};
}

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineConfig {
  fs::path corpus;
  fs::path out_dir;
  int concurrency = 4;
  int questions_per_doc = 3;
  QaPolicy qa;
  int analysis_attempts = 3;
  /// Stop claiming new documents after this many have finished (0 = no
  /// limit). Used to simulate an interrupted run.
  std::size_t stop_after = 0;
};

struct PipelineRun {
  std::size_t documents = 0;
  std::size_t skipped_existing = 0;
  std::size_t processed = 0;
  std::size_t failed = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t max_in_flight = 0;
  std::map<std::string, std::size_t> rejection_reasons;
  nlohmann::json stats;
};

inline fs::path tuples_path(const fs::path& out_dir) { return out_dir / "tuples.jsonl"; }
inline fs::path journal_path(const fs::path& out_dir) { return out_dir / "journal.jsonl"; }
inline fs::path stats_path(const fs::path& out_dir) { return out_dir / "stats.json"; }

/// Read a JSONL dataset, skipping blank lines.
inline std::vector<TaskInstance> read_tuples(const fs::path& path) {
  std::vector<TaskInstance> out;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_task(line));
    } catch (const SchemaError& e) {
      throw SchemaError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void write_tuples(const fs::path& path, const std::vector<TaskInstance>& tuples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tuples) out << serialize_task(t) << '\n';
}

namespace detail {

/// Drop a torn final line and return the doc hashes already present.
inline std::set<std::string> recover_output(const fs::path& path) {
  std::set<std::string> hashes;
  if (!fs::exists(path)) return hashes;
  auto content = read_file(path);
  if (!content.empty() && content.back() != '\n') {
    content.erase(content.rfind('\n') == std::string::npos ? 0 : content.rfind('\n') + 1);
    std::ofstream(path, std::ios::trunc | std::ios::binary) << content;
    log_warn("dropped a partial trailing record from " + path.string());
  }
  std::istringstream in(content);
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("doc_hash") && j["doc_hash"].is_string())
      hashes.insert(j["doc_hash"].get<std::string>());
  }
  return hashes;
}

}  // namespace detail

/// Process every document not yet recorded in the journal. Accepted tuples of
/// a document are appended in one write before its journal record, so a rerun
/// after interruption neither repeats nor duplicates finished documents.
inline PipelineRun run_pipeline(const PipelineConfig& cfg, TextGenerator& gen) {
  if (cfg.concurrency < 1) throw ConfigError("concurrency must be >= 1");
  if (cfg.questions_per_doc < 0) throw ConfigError("questions_per_doc must be >= 0");
  auto docs = load_corpus(cfg.corpus);
  fs::create_directories(cfg.out_dir);

  DatasetIndex index(journal_path(cfg.out_dir));
  for (const auto& h : detail::recover_output(tuples_path(cfg.out_dir)))
    if (!index.contains(h)) index.adopt({h, "", "done", 0, 0, {"recovered from output"}, ""});

  PipelineRun run;
  run.documents = docs.size();

  // Unique, unfinished documents in corpus order.
  std::vector<std::pair<std::string, const Document*>> todo;
  std::set<std::string> seen;
  for (const auto& d : docs) {
    const auto h = document_hash(d.text);
    if (!seen.insert(h).second) continue;
    if (index.contains(h)) {
      ++run.skipped_existing;
      continue;
    }
    todo.emplace_back(h, &d);
  }

  std::mutex out_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> finished{0};
  std::atomic<std::size_t> in_flight{0};
  std::atomic<std::size_t> max_in_flight{0};
  std::mutex run_mutex;

  auto process = [&](const std::string& hash, const Document& doc) {
    IndexRecord rec{hash, doc.source, "done", 0, 0, {}, ""};
    std::vector<SynthesizedTuple> accepted;
    std::vector<Rejection> rejected;
    try {
      const auto analysis = analyze_document(doc.text, gen, cfg.analysis_attempts);
      auto synth = synthesize_tuples(doc.text, analysis, cfg.questions_per_doc, gen, hash);
      rec.notes = synth.errors;
      std::vector<SynthesizedTuple> structural;
      auto pre = qa_filter(std::move(synth.tuples), cfg.qa);
      for (auto& t : pre.accepted) structural.push_back(enrich_rubric(std::move(t), gen));
      auto qa = qa_filter(std::move(structural), cfg.qa);
      accepted = std::move(qa.accepted);
      rejected = std::move(pre.rejected);
      for (auto& r : qa.rejected) rejected.push_back(std::move(r));
    } catch (const AnalysisFailed& e) {
      rec.status = "failed";
      rec.notes.push_back(std::string("analysis: ") + e.what());
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.notes.push_back(e.what());
    }
    rec.accepted = accepted.size();
    rec.rejected = rejected.size();
    rec.finished_at = utc_timestamp();

    std::lock_guard lock(out_mutex);
    if (!accepted.empty()) {
      std::string block;
      for (const auto& t : accepted) block += serialize_task(t.task) + "\n";
      std::ofstream out(tuples_path(cfg.out_dir), std::ios::app | std::ios::binary);
      out << block;
      out.flush();
    }
    index.append(rec);
    std::lock_guard rl(run_mutex);
    ++run.processed;
    if (rec.status == "failed") ++run.failed;
    run.accepted += accepted.size();
    run.rejected += rejected.size();
    for (const auto& r : rejected)
      for (const auto& reason : r.reasons) run.rejection_reasons[reason.substr(0, reason.find(':'))]++;
  };

  auto worker = [&] {
    while (true) {
      if (cfg.stop_after && finished.load() + in_flight.load() >= cfg.stop_after) return;
      const auto k = next++;
      if (k >= todo.size()) return;
      const auto now = ++in_flight;
      auto prev = max_in_flight.load();
      while (now > prev && !max_in_flight.compare_exchange_weak(prev, now)) {
      }
      process(todo[k].first, *todo[k].second);
      --in_flight;
      ++finished;
    }
  };

  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.concurrency), todo.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  run.max_in_flight = max_in_flight.load();

  std::vector<TaskInstance> all;
  if (fs::exists(tuples_path(cfg.out_dir))) all = read_tuples(tuples_path(cfg.out_dir));
  run.stats = corpus_statistics(all);
  run.stats["rejection_reasons_this_run"] = run.rejection_reasons;
  std::ofstream(stats_path(cfg.out_dir), std::ios::trunc) << run.stats.dump(2) << '\n';
  return run;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitFractions {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

struct DatasetSplit {
  std::vector<TaskInstance> train;
  std::vector<TaskInstance> validation;
  std::vector<TaskInstance> test;
};

/// Document counts per split by largest remainder; ties go to the earlier
/// (train, validation, test) split.
inline std::array<std::size_t, 3> split_counts(std::size_t n_docs, const SplitFractions& f) {
  const std::array<double, 3> fr{f.train, f.validation, f.test};
  for (double x : fr)
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("split fractions must be non-negative");
  if (std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = fr[static_cast<std::size_t>(k)] * static_cast<double>(n_docs);
    // Guard against 0.7 * 100 = 70.00000000000001 style noise.
    const double fl = std::floor(exact + 1e-9);
    counts[static_cast<std::size_t>(k)] = static_cast<std::size_t>(fl);
    rem[static_cast<std::size_t>(k)] = exact - fl;
    used += counts[static_cast<std::size_t>(k)];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (rem[static_cast<std::size_t>(a)] != rem[static_cast<std::size_t>(b)])
      return rem[static_cast<std::size_t>(a)] > rem[static_cast<std::size_t>(b)];
    return fr[static_cast<std::size_t>(a)] > fr[static_cast<std::size_t>(b)];
  });
  for (std::size_t k = 0; used < n_docs; ++k, ++used) counts[static_cast<std::size_t>(order[k % 3])]++;
  return counts;
}

/// Seeded split at document granularity: all tuples sharing a doc_hash land
/// in the same split.
inline DatasetSplit split_dataset(const std::vector<TaskInstance>& tuples, const SplitFractions& f,
                                  std::uint64_t seed) {
  std::vector<std::string> docs;
  {
    std::set<std::string> uniq;
    for (const auto& t : tuples) uniq.insert(t.doc_hash);
    docs.assign(uniq.begin(), uniq.end());
  }
  const auto counts = split_counts(docs.size(), f);
  Rng rng(mix_seed(seed, 0x73706c6974ULL));
  rng.shuffle(docs);
  std::map<std::string, int> where;
  for (std::size_t k = 0; k < docs.size(); ++k)
    where[docs[k]] = k < counts[0] ? 0 : (k < counts[0] + counts[1] ? 1 : 2);
  DatasetSplit out;
  for (const auto& t : tuples) {
    switch (where[t.doc_hash]) {
      case 0: out.train.push_back(t); break;
      case 1: out.validation.push_back(t); break;
      default: out.test.push_back(t); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Offline generator

/// Deterministic stand-in for a generation endpoint: derives the analysis and
/// rubrics from the document's most frequent long words. Lets the pipeline
/// run end to end without network access.
class HeuristicGenerator final : public TextGenerator {
 public:
  std::string generate(const ChatRequest& req) override {
    calls_++;
    if (req.system.starts_with(kAnalysisTag)) return analysis(doc_of(req.user));
    if (req.system.starts_with(kSynthesisTag)) return synthesis(req.user);
    if (req.system.starts_with(kEnrichmentTag)) return enrichment(req.user);
    return "{}";
  }

  std::string model_name() const override { return "heuristic-offline"; }
  std::size_t calls() const { return calls_.load(); }

  static std::vector<std::string> top_words(std::string_view text, std::size_t k) {
    std::map<std::string, std::size_t> freq;
    std::string w;
    auto flush = [&] {
      if (w.size() >= 5) freq[w]++;
      w.clear();
    };
    for (char ch : text) {
      if (std::isalpha(static_cast<unsigned char>(ch))) {
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      } else {
        flush();
      }
    }
    flush();
    std::vector<std::pair<std::string, std::size_t>> v(freq.begin(), freq.end());
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size() && i < k; ++i) out.push_back(v[i].first);
    return out;
  }

 private:
  static std::string doc_of(const std::string& user) {
    const auto p = user.find("DOCUMENT:\n");
    return p == std::string::npos ? user : user.substr(p + 10);
  }

  static std::string analysis(const std::string& doc) {
    nlohmann::json j = {{"genre", "technical report"},
                        {"contribution", "describes " + join_words(top_words(doc, 2))},
                        {"concepts", top_words(doc, 5)},
                        {"depth", doc.size() > 2000 ? "advanced" : "introductory"},
                        {"reasoning_mode", "explanatory"}};
    return "Analysis follows.\n```json\n" + j.dump() + "\n```";
  }

  static std::string synthesis(const std::string& user) {
    const auto doc = doc_of(user);
    int k = 3;
    if (auto p = user.find("Write "); p != std::string::npos) k = std::atoi(user.c_str() + p + 6);
    const auto words = top_words(doc, 12);
    nlohmann::json tuples = nlohmann::json::array();
    for (int q = 0; q < k && !words.empty(); ++q) {
      nlohmann::json crit = nlohmann::json::array();
      for (int j = 0; j < 5; ++j) {
        const auto& a = words[static_cast<std::size_t>(q + j) % words.size()];
        crit.push_back({{"id", "c_" + std::to_string(j + 1)},
                        {"weight", 1 + (q + j) % 4},
                        {"name", "Covers " + a},
                        {"description", "Explains the role of " + a + "."},
                        {"required_elements", {a}},
                        {"scoring_guide", "Full credit when " + a + " is explained correctly."},
                        {"verification_method", "term presence"},
                        {"expected_keywords", nlohmann::json::array()},
                        {"expected_concepts", nlohmann::json::array()}});
      }
      tuples.push_back({{"question", "How does the document use " + words[static_cast<std::size_t>(q) % words.size()] + "?"},
                        {"passage", std::string(utf8_head(doc, 600))},
                        {"question_rationale", "Targets the document's central terms."},
                        {"criteria", crit}});
    }
    return nlohmann::json{{"tuples", tuples}}.dump();
  }

  static std::string enrichment(const std::string& user) {
    const auto p = user.find("CRITERIA:\n");
    if (p == std::string::npos) return "{}";
    auto crit = nlohmann::json::parse(user.substr(p + 10), nullptr, false);
    if (crit.is_discarded() || !crit.is_array()) return "{}";
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : crit) {
      std::vector<std::string> kw;
      if (c.contains("required_elements"))
        for (const auto& e : c["required_elements"]) kw.push_back(e.get<std::string>());
      out.push_back({{"id", c.value("id", "")},
                     {"expected_keywords", kw},
                     {"expected_concepts", kw},
                     {"verification_method", "keyword match"}});
    }
    return nlohmann::json{{"criteria", out}}.dump();
  }

  static std::string join_words(const std::vector<std::string>& w) {
    std::string s;
    for (const auto& x : w) s += (s.empty() ? "" : " and ") + x;
    return s.empty() ? "its subject" : s;
  }

  static std::string_view utf8_head(std::string_view s, std::size_t n) {
    if (s.size() <= n) return s;
    while (n > 0 && (static_cast<unsigned char>(s[n]) & 0xC0) == 0x80) --n;
    return s.substr(0, n);
  }

  std::atomic<std::size_t> calls_{0};
};

}  // namespace rgrpo
