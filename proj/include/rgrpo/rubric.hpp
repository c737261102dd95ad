#pragma once

// Rubric domain types, reward normalization and structural-credit helpers.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace rgrpo {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

/// Raised for invalid configuration or arguments violating a precondition.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a JSON document does not follow the dataset schema.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Criterion {
  std::string id;
  std::string name;
  double weight = 0.0;
  std::string description;
  std::vector<std::string> required_elements;
  std::string scoring_guide;
  std::vector<std::string> expected_keywords;
  std::vector<std::string> expected_concepts;
  std::string verification_method;

  bool operator==(const Criterion&) const = default;
};

struct Rubric {
  std::vector<Criterion> criteria;

  std::size_t criterion_count() const { return criteria.size(); }

  double total_weight() const {
    double w = 0.0;
    for (const auto& c : criteria) w += c.weight;
    return w;
  }

  const Criterion* find(const std::string& id) const {
    for (const auto& c : criteria)
      if (c.id == id) return &c;
    return nullptr;
  }

  bool operator==(const Rubric&) const = default;
};

struct DocumentAnalysis {
  std::string genre;
  std::string contribution;
  std::vector<std::string> concepts;
  std::string depth;
  std::string reasoning_mode;

  bool operator==(const DocumentAnalysis&) const = default;
};

/// (question, grounding passage, rubric). The policy only ever sees the
/// question; the judge sees everything.
struct TaskInstance {
  std::string question;
  std::string passage;
  Rubric rubric;
  std::string question_rationale;
  DocumentAnalysis document_analysis;
  std::string doc_hash;

  bool operator==(const TaskInstance&) const = default;
};

struct JudgeVerdict {
  std::map<std::string, double> scores;
  double total = 0.0;
  double max_total = 0.0;
  std::string reasoning;
  bool parse_ok = false;

  bool operator==(const JudgeVerdict&) const = default;

  static JudgeVerdict failure(std::string why) {
    JudgeVerdict v;
    v.reasoning = std::move(why);
    return v;
  }
};

struct NormalizedReward {
  double value = 0.0;
  bool zero_by_failure = false;
};

// ---------------------------------------------------------------------------
// Quality assurance

struct QaPolicy {
  std::size_t min_criteria = 3;
  double min_total_weight = 1.0;
};

enum class QaCheck {
  MinCriteria,
  MinTotalWeight,
  NonEmptyQuestion,
  FieldsPresent,
  NonNegativeWeights,
  UniqueIds,
};

inline const char* to_string(QaCheck check) {
  switch (check) {
    case QaCheck::MinCriteria: return "min criteria count";
    case QaCheck::MinTotalWeight: return "min total weight";
    case QaCheck::NonEmptyQuestion: return "non-empty question";
    case QaCheck::FieldsPresent: return "all criterion fields present";
    case QaCheck::NonNegativeWeights: return "non-negative weights";
    case QaCheck::UniqueIds: return "unique criterion ids";
  }
  return "?";
}

struct QaFailure {
  QaCheck check;
  std::string detail;
};

struct ValidationReport {
  std::vector<QaFailure> failures;

  bool accepted() const { return failures.empty(); }

  bool failed(QaCheck check) const {
    return std::any_of(failures.begin(), failures.end(),
                       [&](const QaFailure& f) { return f.check == check; });
  }
};

inline std::vector<std::string> missing_fields(const Criterion& c) {
  std::vector<std::string> missing;
  if (c.id.empty()) missing.emplace_back("id");
  if (c.name.empty()) missing.emplace_back("name");
  if (c.description.empty()) missing.emplace_back("description");
  if (c.required_elements.empty()) missing.emplace_back("required_elements");
  if (c.scoring_guide.empty()) missing.emplace_back("scoring_guide");
  if (c.verification_method.empty()) missing.emplace_back("verification_method");
  return missing;
}

/// Structural checks on a rubric. Failures are reported, never thrown. The
/// non-empty-question check lives at tuple level (see qa_filter).
inline ValidationReport validate_rubric(const Rubric& rubric, const QaPolicy& policy) {
  ValidationReport report;
  const auto m = rubric.criterion_count();
  if (m < policy.min_criteria || m == 0) {
    report.failures.push_back({QaCheck::MinCriteria, std::to_string(m) + " < " +
                                                         std::to_string(policy.min_criteria)});
  }
  const double w = rubric.total_weight();
  if (!(w >= policy.min_total_weight) || !(w > 0.0)) {
    report.failures.push_back(
        {QaCheck::MinTotalWeight,
         "total weight " + std::to_string(w) + " < " + std::to_string(policy.min_total_weight)});
  }
  std::set<std::string> ids;
  for (std::size_t j = 0; j < m; ++j) {
    const auto& c = rubric.criteria[j];
    const auto label = c.id.empty() ? "#" + std::to_string(j + 1) : c.id;
    if (auto missing = missing_fields(c); !missing.empty()) {
      std::string detail = label + " missing";
      for (const auto& f : missing) detail += " " + f;
      report.failures.push_back({QaCheck::FieldsPresent, detail});
    }
    if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) {
      report.failures.push_back({QaCheck::NonNegativeWeights, label + " weight " +
                                                                  std::to_string(c.weight)});
    }
    if (!c.id.empty() && !ids.insert(c.id).second) {
      report.failures.push_back({QaCheck::UniqueIds, "duplicate id " + c.id});
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Reward arithmetic

namespace detail {

inline double clamped_score(const JudgeVerdict& v, const Criterion& c) {
  auto it = v.scores.find(c.id);
  if (it == v.scores.end() || !std::isfinite(it->second)) return 0.0;
  return std::clamp(it->second, 0.0, std::max(c.weight, 0.0));
}

inline void require_positive_total(const Rubric& rubric) {
  if (!(rubric.total_weight() > 0.0))
    throw ConfigError("rubric total weight must be positive");
}

}  // namespace detail

/// Weighted criterion credit divided by the rubric's total weight. Per
/// criterion scores are clamped to [0, w_j] first; parse failures give 0.
inline NormalizedReward normalize_reward(const JudgeVerdict& verdict, const Rubric& rubric) {
  detail::require_positive_total(rubric);
  if (!verdict.parse_ok) return {0.0, true};
  double sum = 0.0;
  for (const auto& c : rubric.criteria) sum += detail::clamped_score(verdict, c);
  return {std::clamp(sum / rubric.total_weight(), 0.0, 1.0), false};
}

/// Sum over criteria of alpha_j * (z_j(a) - z_j(b)), with alpha_j = w_j / W
/// and z_j = s_j / w_j. Zero-weight criteria contribute nothing.
inline double criterion_delta(const JudgeVerdict& a, const JudgeVerdict& b, const Rubric& rubric) {
  detail::require_positive_total(rubric);
  if (!a.parse_ok || !b.parse_ok) throw ConfigError("criterion_delta needs parsed verdicts");
  for (const auto* v : {&a, &b})
    for (const auto& [id, s] : v->scores)
      if (!rubric.find(id)) throw ConfigError("verdict scores unknown criterion '" + id + "'");
  for (const auto& [id, s] : a.scores)
    if (!b.scores.contains(id)) throw ConfigError("verdicts cover different criteria");
  if (a.scores.size() != b.scores.size()) throw ConfigError("verdicts cover different criteria");

  const double total = rubric.total_weight();
  double delta = 0.0;
  for (const auto& c : rubric.criteria) {
    if (!(c.weight > 0.0)) continue;
    const double alpha = c.weight / total;
    const double za = detail::clamped_score(a, c) / c.weight;
    const double zb = detail::clamped_score(b, c) / c.weight;
    delta += alpha * (za - zb);
  }
  return delta;
}

/// W^2 / sum(w_j^2) over positive-weight criteria.
inline double effective_criteria(const Rubric& rubric) {
  double w = 0.0;
  double w2 = 0.0;
  for (const auto& c : rubric.criteria) {
    if (!(c.weight > 0.0)) continue;
    w += c.weight;
    w2 += c.weight * c.weight;
  }
  if (!(w2 > 0.0)) throw ConfigError("effective_criteria needs a positive weight");
  return w * w / w2;
}

// ---------------------------------------------------------------------------
// Dataset schema. Field order follows the published record layout so that
// canonical serialization is byte-stable.

inline ordered_json to_json(const Criterion& c) {
  ordered_json j;
  j["id"] = c.id;
  j["weight"] = c.weight;
  j["name"] = c.name;
  j["description"] = c.description;
  j["required_elements"] = c.required_elements;
  j["scoring_guide"] = c.scoring_guide;
  j["verification_method"] = c.verification_method;
  j["expected_keywords"] = c.expected_keywords;
  j["expected_concepts"] = c.expected_concepts;
  return j;
}

inline ordered_json to_json(const DocumentAnalysis& a) {
  ordered_json j;
  j["genre"] = a.genre;
  j["contribution"] = a.contribution;
  j["concepts"] = a.concepts;
  j["depth"] = a.depth;
  j["reasoning_mode"] = a.reasoning_mode;
  return j;
}

inline ordered_json to_json(const TaskInstance& t) {
  ordered_json j;
  j["question"] = t.question;
  j["passage"] = t.passage;
  j["criteria"] = ordered_json::array();
  for (const auto& c : t.rubric.criteria) j["criteria"].push_back(to_json(c));
  j["question_rationale"] = t.question_rationale;
  j["document_analysis"] = to_json(t.document_analysis);
  j["doc_hash"] = t.doc_hash;
  return j;
}

namespace detail {

template <class J>
std::string string_field(const J& j, const char* key, bool required = false) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    if (required) throw SchemaError(std::string("missing field '") + key + "'");
    return {};
  }
  if (!it->is_string()) throw SchemaError(std::string("field '") + key + "' must be a string");
  return it->template get<std::string>();
}

template <class J>
std::vector<std::string> string_list(const J& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return {};
  if (!it->is_array()) throw SchemaError(std::string("field '") + key + "' must be a list");
  std::vector<std::string> out;
  for (const auto& e : *it) {
    if (!e.is_string()) throw SchemaError(std::string("field '") + key + "' must hold strings");
    out.push_back(e.template get<std::string>());
  }
  return out;
}

}  // namespace detail

template <class J>
Criterion criterion_from_json(const J& j) {
  if (!j.is_object()) throw SchemaError("criterion must be an object");
  Criterion c;
  c.id = detail::string_field(j, "id", true);
  auto w = j.find("weight");
  if (w == j.end() || !w->is_number()) throw SchemaError("criterion '" + c.id + "' needs a numeric weight");
  c.weight = w->template get<double>();
  c.name = detail::string_field(j, "name");
  c.description = detail::string_field(j, "description");
  c.required_elements = detail::string_list(j, "required_elements");
  c.scoring_guide = detail::string_field(j, "scoring_guide");
  c.verification_method = detail::string_field(j, "verification_method");
  c.expected_keywords = detail::string_list(j, "expected_keywords");
  c.expected_concepts = detail::string_list(j, "expected_concepts");
  return c;
}

template <class J>
DocumentAnalysis analysis_from_json(const J& j) {
  if (!j.is_object()) throw SchemaError("document_analysis must be an object");
  DocumentAnalysis a;
  a.genre = detail::string_field(j, "genre");
  a.contribution = detail::string_field(j, "contribution");
  a.concepts = detail::string_list(j, "concepts");
  a.depth = detail::string_field(j, "depth");
  a.reasoning_mode = detail::string_field(j, "reasoning_mode");
  return a;
}

template <class J>
TaskInstance task_from_json(const J& j) {
  if (!j.is_object()) throw SchemaError("task record must be an object");
  TaskInstance t;
  t.question = detail::string_field(j, "question", true);
  t.passage = detail::string_field(j, "passage");
  auto crit = j.find("criteria");
  if (crit == j.end() || !crit->is_array()) throw SchemaError("missing 'criteria' list");
  for (const auto& c : *crit) t.rubric.criteria.push_back(criterion_from_json(c));
  t.question_rationale = detail::string_field(j, "question_rationale");
  if (auto a = j.find("document_analysis"); a != j.end() && !a->is_null())
    t.document_analysis = analysis_from_json(*a);
  t.doc_hash = detail::string_field(j, "doc_hash");
  return t;
}

/// One-line canonical form used for dataset files.
inline std::string serialize_task(const TaskInstance& t) { return to_json(t).dump(); }

inline TaskInstance parse_task(const std::string& line) {
  ordered_json j;
  try {
    j = ordered_json::parse(line);
  } catch (const ordered_json::parse_error& e) {
    throw SchemaError(std::string("invalid JSON: ") + e.what());
  }
  return task_from_json(j);
}

}  // namespace rgrpo
