#pragma once

// Judge backends, prompt construction, verdict parsing and concurrent batch
// scoring.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "rgrpo/chat_client.hpp"
#include "rgrpo/json_extract.hpp"
#include "rgrpo/log.hpp"
#include "rgrpo/rubric.hpp"

namespace rgrpo {

struct JudgeConfig {
  double temperature = 0.1;
  int max_response_tokens = 16000;
  std::size_t max_passage_chars = 50000;
  int workers = 32;
  int worker_batch = 4;
  std::string endpoint_url = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model_name = "judge";
  std::chrono::milliseconds request_timeout{120000};
  int max_retries = 3;
  /// When false (default) a criterion absent from "scores" fails the parse.
  bool missing_criterion_as_zero = false;

  void validate() const {
    if (workers < 1) throw ConfigError("judge workers must be >= 1");
    if (worker_batch < 1) throw ConfigError("judge worker_batch must be >= 1");
    if (max_retries < 0) throw ConfigError("judge max_retries must be >= 0");
  }
};

struct JudgePrompt {
  std::string system_text;
  std::string user_text;
};

inline constexpr std::string_view kJudgeSystemText =
    "You are a strict, objective academic evaluator. Score the RESPONSE against each "
    "evaluation criterion using the provided scoring guide, required elements, and expected "
    "keywords. Return ONLY a valid JSON object.";

/// First `max_chars` UTF-8 code points of `text`.
inline std::string_view utf8_prefix(std::string_view text, std::size_t max_chars) {
  std::size_t chars = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) == 0x80) continue;
    if (chars == max_chars) return text.substr(0, i);
    ++chars;
  }
  return text;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

namespace detail {

inline std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

}  // namespace detail

inline JudgePrompt build_judge_prompt(const TaskInstance& instance, std::string_view response,
                                      const JudgeConfig& cfg) {
  const auto& rubric = instance.rubric;
  std::ostringstream u;
  u << "SOURCE PASSAGE:\n" << utf8_prefix(instance.passage, cfg.max_passage_chars) << "\n\n";
  u << "QUESTION:\n" << instance.question << "\n\n";
  u << "RESPONSE:\n" << response << "\n\n";
  u << "CRITERIA (total weight " << format_number(rubric.total_weight()) << "):\n";
  for (std::size_t j = 0; j < rubric.criteria.size(); ++j) {
    const auto& c = rubric.criteria[j];
    u << j + 1 << ". [" << c.id << "] " << c.name << " (weight " << format_number(c.weight)
      << ")\n";
    u << "   Description: " << c.description << "\n";
    u << "   Required elements: " << detail::join(c.required_elements, "; ") << "\n";
    u << "   Scoring guide: " << c.scoring_guide << "\n";
    u << "   Expected keywords: " << detail::join(c.expected_keywords, ", ") << "\n";
    if (!c.expected_concepts.empty())
      u << "   Expected concepts: " << detail::join(c.expected_concepts, ", ") << "\n";
    u << "   Verification method: " << c.verification_method << "\n";
  }
  u << "\nReturn ONLY a JSON object of the form:\n";
  u << "{ \"scores\": {";
  for (std::size_t j = 0; j < rubric.criteria.size(); ++j) {
    const auto& c = rubric.criteria[j];
    if (j) u << ", ";
    u << '"' << c.id << "\": <0-" << format_number(c.weight) << '>';
  }
  u << "},\n  \"total\": <sum of scores>, \"max_total\": " << format_number(rubric.total_weight())
    << ",\n  \"reasoning\": \"<brief justification>\" }\n";
  return {std::string(kJudgeSystemText), u.str()};
}

struct ParseOptions {
  bool missing_criterion_as_zero = false;
};

/// Total: malformed input yields a parse_ok=false verdict, never an exception.
inline JudgeVerdict parse_verdict(std::string_view raw_text, const Rubric& rubric,
                                  ParseOptions opts = {}) {
  auto obj = extract_first_json_object(raw_text);
  if (!obj) return JudgeVerdict::failure("no JSON object in judge output");
  auto scores = obj->find("scores");
  if (scores == obj->end() || !scores->is_object())
    return JudgeVerdict::failure("judge output lacks a 'scores' object");

  JudgeVerdict v;
  for (const auto& c : rubric.criteria) {
    auto it = scores->find(c.id);
    if (it == scores->end() || it->is_null()) {
      if (!opts.missing_criterion_as_zero)
        return JudgeVerdict::failure("judge omitted criterion '" + c.id + "'");
      v.scores[c.id] = 0.0;
      continue;
    }
    if (!it->is_number()) return JudgeVerdict::failure("non-numeric score for '" + c.id + "'");
    const double s = it->get<double>();
    if (!std::isfinite(s)) return JudgeVerdict::failure("non-finite score for '" + c.id + "'");
    v.scores[c.id] = std::clamp(s, 0.0, std::max(c.weight, 0.0));
  }
  for (const auto& [id, s] : v.scores) v.total += s;
  v.max_total = rubric.total_weight();
  if (auto r = obj->find("reasoning"); r != obj->end() && r->is_string())
    v.reasoning = r->get<std::string>();
  if (auto t = obj->find("total"); t != obj->end() && t->is_number() &&
                                    std::abs(t->get<double>() - v.total) > 1e-6) {
    log(LogLevel::Debug, "judge-reported total " + format_number(t->get<double>()) +
                             " differs from recomputed " + format_number(v.total));
  }
  if (auto m = obj->find("max_total"); m != obj->end() && m->is_number() &&
                                        std::abs(m->get<double>() - v.max_total) > 1e-6) {
    log(LogLevel::Debug, "judge-reported max_total " + format_number(m->get<double>()) +
                             " differs from rubric weight " + format_number(v.max_total));
  }
  v.parse_ok = true;
  return v;
}

// ---------------------------------------------------------------------------
// Oracle judge

enum class CreditMode { AllOrNothing, Proportional };

struct OracleRule {
  std::string criterion_id;
  std::vector<std::string> elements;
};

/// Deterministic matching rules: one rule per criterion, built from its
/// required elements (falling back to expected keywords).
struct OracleSpec {
  std::vector<OracleRule> rules;
  CreditMode mode = CreditMode::AllOrNothing;

  static OracleSpec from_rubric(const Rubric& rubric, CreditMode mode = CreditMode::AllOrNothing) {
    OracleSpec spec;
    spec.mode = mode;
    for (const auto& c : rubric.criteria) {
      const auto& src = c.required_elements.empty() ? c.expected_keywords : c.required_elements;
      if (src.empty()) throw ConfigError("criterion '" + c.id + "' has no oracle matching rules");
      spec.rules.push_back({c.id, src});
    }
    return spec;
  }

  const OracleRule* rule_for(const std::string& id) const {
    for (const auto& r : rules)
      if (r.criterion_id == id) return &r;
    return nullptr;
  }
};

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline JudgeVerdict oracle_judge(const TaskInstance& instance, std::string_view response,
                                 const OracleSpec& spec) {
  const auto text = to_lower(response);
  JudgeVerdict v;
  for (const auto& c : instance.rubric.criteria) {
    const auto* rule = spec.rule_for(c.id);
    if (!rule || rule->elements.empty())
      throw ConfigError("oracle spec does not cover criterion '" + c.id + "'");
    std::size_t hits = 0;
    for (const auto& e : rule->elements)
      if (text.find(to_lower(e)) != std::string::npos) ++hits;
    const double frac = static_cast<double>(hits) / static_cast<double>(rule->elements.size());
    const double w = std::max(c.weight, 0.0);
    double s = 0.0;
    if (spec.mode == CreditMode::AllOrNothing) {
      s = hits == rule->elements.size() ? w : 0.0;
    } else {
      s = w * frac;
    }
    v.scores[c.id] = s;
    v.total += s;
  }
  v.max_total = instance.rubric.total_weight();
  v.reasoning = "oracle";
  v.parse_ok = true;
  return v;
}

// ---------------------------------------------------------------------------
// Backends

struct JudgeCall {
  JudgeVerdict verdict;
  bool transport_ok = true;
  std::string error;
};

/// Must be callable from many workers at once.
class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;
  virtual JudgeCall evaluate(const TaskInstance& instance, std::string_view response) const = 0;
};

class OracleJudge final : public JudgeBackend {
 public:
  explicit OracleJudge(CreditMode mode = CreditMode::AllOrNothing) : mode_(mode) {}

  JudgeCall evaluate(const TaskInstance& instance, std::string_view response) const override {
    return {oracle_judge(instance, response, OracleSpec::from_rubric(instance.rubric, mode_)), true,
            {}};
  }

 private:
  CreditMode mode_;
};

class RemoteJudge final : public JudgeBackend {
 public:
  explicit RemoteJudge(JudgeConfig cfg) : cfg_(std::move(cfg)), client_(endpoint(cfg_)) {}

  JudgeCall evaluate(const TaskInstance& instance, std::string_view response) const override {
    const auto prompt = build_judge_prompt(instance, response, cfg_);
    std::string raw;
    try {
      raw = client_.complete(
          {prompt.system_text, prompt.user_text, cfg_.temperature, cfg_.max_response_tokens});
    } catch (const TransportError& e) {
      return {JudgeVerdict::failure(e.what()), false, e.what()};
    }
    return {parse_verdict(raw, instance.rubric, {cfg_.missing_criterion_as_zero}), true, {}};
  }

 private:
  static EndpointConfig endpoint(const JudgeConfig& cfg) {
    EndpointConfig e;
    e.url = cfg.endpoint_url;
    e.model = cfg.model_name;
    e.timeout = cfg.request_timeout;
    e.max_retries = cfg.max_retries;
    return e;
  }

  JudgeConfig cfg_;
  ChatClient client_;
};

// ---------------------------------------------------------------------------
// Scoring

struct ScoredResponse {
  NormalizedReward reward;
  JudgeVerdict verdict;
  std::chrono::microseconds latency{0};
  bool transport_ok = true;
};

/// Judge one response and normalize. Any backend failure degrades to a zero
/// reward; nothing propagates to the training loop.
inline ScoredResponse score_response(const TaskInstance& instance, std::string_view response,
                                     const JudgeBackend& backend) {
  ScoredResponse out;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto call = backend.evaluate(instance, response);
    out.transport_ok = call.transport_ok;
    if (!call.transport_ok) log_error("judge transport failure: " + call.error);
    out.verdict = std::move(call.verdict);
  } catch (const std::exception& e) {
    log_error(std::string("judge backend error: ") + e.what());
    out.transport_ok = false;
    out.verdict = JudgeVerdict::failure(e.what());
  }
  out.latency = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::steady_clock::now() - t0);
  out.reward = normalize_reward(out.verdict, instance.rubric);
  return out;
}

struct GroupRequest {
  const TaskInstance* instance = nullptr;
  std::vector<std::string> responses;
};

/// Score B groups of responses. Result [i][g] matches batch[i].responses[g]
/// whatever order the workers finish in. At most cfg.workers calls are in
/// flight; each worker claims cfg.worker_batch cells at a time.
inline std::vector<std::vector<ScoredResponse>> score_group(const std::vector<GroupRequest>& batch,
                                                            const JudgeConfig& cfg,
                                                            const JudgeBackend& backend) {
  cfg.validate();
  std::vector<std::vector<ScoredResponse>> out(batch.size());
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i].instance) throw ConfigError("score_group: null instance");
    out[i].resize(batch[i].responses.size());
    for (std::size_t g = 0; g < batch[i].responses.size(); ++g) cells.emplace_back(i, g);
  }
  const std::size_t chunk = static_cast<std::size_t>(cfg.worker_batch);
  const std::size_t n_chunks = (cells.size() + chunk - 1) / chunk;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n_chunks; k = next++) {
      const auto end = std::min(cells.size(), (k + 1) * chunk);
      for (std::size_t c = k * chunk; c < end; ++c) {
        const auto [i, g] = cells[c];
        out[i][g] = score_response(*batch[i].instance, batch[i].responses[g], backend);
      }
    }
  };
  const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), n_chunks);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return out;
}

}  // namespace rgrpo
