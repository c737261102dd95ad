#pragma once

// Synthetic rubric environment. Every prompt class owns a hidden answer key
// (a set of content tokens). Its tasks are rubrics whose criteria require
// subsets of that key, so the passage (the key) is visible to the judge but
// the policy only learns it through rewards.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "rgrpo/hash.hpp"
#include "rgrpo/judge.hpp"
#include "rgrpo/policy.hpp"
#include "rgrpo/rubric.hpp"

namespace rgrpo {

enum class Difficulty { Easy, Medium, Hard };

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "medium") return Difficulty::Medium;
  if (s == "hard") return Difficulty::Hard;
  throw ConfigError("unknown difficulty '" + s + "'");
}

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Hard: return "hard";
  }
  return "?";
}

struct SyntheticEnv {
  int vocab_size = 32;
  int prompt_classes = 64;
  int max_len = 16;
  /// Seeds the per-class answer keys; train and held-out tasks share it.
  std::uint64_t world_seed = 7;
};

struct SyntheticTask {
  TaskInstance instance;
  OracleSpec oracle;
  int prompt_id = 0;
  /// A response that earns full credit: the class key followed by <stop>.
  std::vector<int> optimal_tokens;
};

namespace detail {

struct KeyRange {
  int lo;
  int hi;
};

inline KeyRange key_range(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return {3, 4};
    case Difficulty::Medium: return {4, 6};
    case Difficulty::Hard: return {6, 9};
  }
  return {4, 6};
}

}  // namespace detail

/// Answer key of every prompt class, as content-token ids.
inline std::vector<std::vector<int>> synthetic_keys(const SyntheticEnv& env, Difficulty difficulty) {
  const auto vocab = Vocab::synthetic(env.vocab_size);
  const int content = env.vocab_size - 2;
  auto [lo, hi] = detail::key_range(difficulty);
  hi = std::min({hi, env.max_len - 1, content});
  lo = std::min(lo, hi);
  if (hi < 1) throw ConfigError("synthetic environment too small for an answer key");
  std::vector<std::vector<int>> keys;
  for (int c = 0; c < env.prompt_classes; ++c) {
    Rng rng(mix_seed(env.world_seed, 0x6b6579ULL, static_cast<std::uint64_t>(c)));
    std::vector<int> pool(static_cast<std::size_t>(content));
    for (int i = 0; i < content; ++i) pool[static_cast<std::size_t>(i)] = i;
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(rng.uniform_int(lo, hi)));
    keys.push_back(std::move(pool));
  }
  return keys;
}

/// n tasks cycling through the prompt classes. Each rubric has 3-10
/// criteria; each criterion requires 1-2 key tokens (up to 3 when hard).
inline std::vector<SyntheticTask> make_synthetic_tasks(int n, Difficulty difficulty,
                                                       std::uint64_t rng_seed,
                                                       const SyntheticEnv& env = {}) {
  if (n < 0) throw ConfigError("task count must be non-negative");
  const auto vocab = Vocab::synthetic(env.vocab_size);
  const auto keys = synthetic_keys(env, difficulty);
  const int max_required = difficulty == Difficulty::Hard ? 3 : 2;
  std::vector<SyntheticTask> tasks;
  tasks.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(rng_seed, 0x7461736bULL, static_cast<std::uint64_t>(i)));
    SyntheticTask task;
    task.prompt_id = i % env.prompt_classes;
    const auto& key = keys[static_cast<std::size_t>(task.prompt_id)];

    auto& inst = task.instance;
    inst.question = "Explain topic " + std::to_string(task.prompt_id) + " (variant " +
                    std::to_string(i / env.prompt_classes) + ").";
    inst.passage = "Reference notes for topic " + std::to_string(task.prompt_id) + ":";
    for (int t : key) inst.passage += " " + vocab.tokens[static_cast<std::size_t>(t)];
    inst.question_rationale = "Checks recall of the topic's key terms.";
    inst.document_analysis = {"synthetic", "token answer key", {}, to_string(difficulty), "recall"};

    const int m = rng.uniform_int(3, 10);
    for (int j = 0; j < m; ++j) {
      Criterion c;
      c.id = "c_" + std::to_string(j + 1);
      c.weight = rng.uniform_int(1, 5);
      const int need = std::min(static_cast<int>(key.size()), rng.uniform_int(1, max_required));
      auto pool = key;
      rng.shuffle(pool);
      for (int k = 0; k < need; ++k)
        c.required_elements.push_back(vocab.tokens[static_cast<std::size_t>(pool[static_cast<std::size_t>(k)])]);
      std::sort(c.required_elements.begin(), c.required_elements.end());
      c.name = "Mentions " + detail::join(c.required_elements, " and ");
      c.description = "The response names " + detail::join(c.required_elements, ", ") + ".";
      c.scoring_guide = "Full weight only if every required term appears; otherwise zero.";
      c.expected_keywords = c.required_elements;
      c.verification_method = "case-insensitive term match";
      inst.rubric.criteria.push_back(std::move(c));
    }
    inst.doc_hash = sha256_hex("synthetic|" + std::to_string(rng_seed) + "|" + std::to_string(i) +
                               "|" + serialize_task(inst));
    task.oracle = OracleSpec::from_rubric(inst.rubric, CreditMode::AllOrNothing);
    task.optimal_tokens = key;
    task.optimal_tokens.push_back(vocab.stop);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

}  // namespace rgrpo
