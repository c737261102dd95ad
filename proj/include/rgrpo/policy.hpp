#pragma once

// Tabular positional softmax policy: one logit row per (prompt class,
// position). Log-probabilities and their gradients are exact.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgrpo/rubric.hpp"

namespace rgrpo {

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(mix_seed(a) ^ b); }

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b) ^ mix_seed(c));
}

/// Portable generator: same seed gives the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next() % span);
  }

  double normal() {
    // Box-Muller; one value per call keeps the stream position simple.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(next() % i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

struct Vocab {
  std::vector<std::string> tokens;
  int stop = -1;
  int pad = -1;

  int size() const { return static_cast<int>(tokens.size()); }

  /// Fixed-width content tokens ("t00", "t01", ...) plus <stop> and <pad>.
  /// No token is a substring of another token's rendering.
  static Vocab synthetic(int vocab_size) {
    if (vocab_size < 3) throw ConfigError("vocab needs at least one content token");
    Vocab v;
    const int content = vocab_size - 2;
    const int width = content > 100 ? 3 : 2;
    for (int i = 0; i < content; ++i) {
      auto s = std::to_string(i);
      v.tokens.push_back("t" + std::string(width - s.size(), '0') + s);
    }
    v.stop = content;
    v.tokens.emplace_back("<stop>");
    v.pad = content + 1;
    v.tokens.emplace_back("<pad>");
    return v;
  }

  /// Content words plus the two special tokens appended at the end.
  static Vocab from_words(std::vector<std::string> words) {
    Vocab v;
    v.tokens = std::move(words);
    v.stop = static_cast<int>(v.tokens.size());
    v.tokens.emplace_back("<stop>");
    v.pad = static_cast<int>(v.tokens.size());
    v.tokens.emplace_back("<pad>");
    v.validate();
    return v;
  }

  int id(const std::string& token) const {
    for (int i = 0; i < size(); ++i)
      if (tokens[static_cast<std::size_t>(i)] == token) return i;
    return -1;
  }

  bool is_content(int t) const { return t >= 0 && t < size() && t != stop && t != pad; }

  void validate() const {
    if (stop < 0 || stop >= size() || pad < 0 || pad >= size())
      throw ConfigError("stop and pad must be vocabulary members");
    if (stop == pad) throw ConfigError("stop and pad must be distinct");
  }

  bool operator==(const Vocab&) const = default;
};

class PolicyParams {
 public:
  PolicyParams() = default;

  PolicyParams(Vocab vocab, int prompt_classes, int max_len, double temperature = 1.0)
      : vocab_(std::move(vocab)),
        prompt_classes_(prompt_classes),
        max_len_(max_len),
        temperature_(temperature) {
    vocab_.validate();
    if (prompt_classes < 1) throw ConfigError("prompt_classes must be >= 1");
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("rollout temperature must be positive");
    theta_.assign(static_cast<std::size_t>(prompt_classes) * static_cast<std::size_t>(max_len) *
                      static_cast<std::size_t>(vocab_.size()),
                  0.0);
  }

  const Vocab& vocab() const { return vocab_; }
  int prompt_classes() const { return prompt_classes_; }
  int max_len() const { return max_len_; }
  int vocab_size() const { return vocab_.size(); }
  double temperature() const { return temperature_; }

  std::span<double> theta() { return theta_; }
  std::span<const double> theta() const { return theta_; }

  std::size_t row_offset(int prompt_class, int position) const {
    return (static_cast<std::size_t>(prompt_class) * static_cast<std::size_t>(max_len_) +
            static_cast<std::size_t>(position)) *
           static_cast<std::size_t>(vocab_.size());
  }

  std::span<const double> logits(int prompt_class, int position) const {
    return std::span<const double>(theta_).subspan(row_offset(prompt_class, position),
                                                   static_cast<std::size_t>(vocab_.size()));
  }

  std::span<double> logits(int prompt_class, int position) {
    return std::span<double>(theta_).subspan(row_offset(prompt_class, position),
                                             static_cast<std::size_t>(vocab_.size()));
  }

  /// Log-probabilities over the vocabulary at one position. The pad token is
  /// outside the support and gets -inf.
  std::vector<double> log_softmax(int prompt_class, int position) const {
    const auto row = logits(prompt_class, position);
    std::vector<double> out(row.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < vocab_.size(); ++v)
      if (v != vocab_.pad) mx = std::max(mx, row[static_cast<std::size_t>(v)] / temperature_);
    double z = 0.0;
    for (int v = 0; v < vocab_.size(); ++v)
      if (v != vocab_.pad) z += std::exp(row[static_cast<std::size_t>(v)] / temperature_ - mx);
    const double lse = mx + std::log(z);
    for (int v = 0; v < vocab_.size(); ++v) {
      out[static_cast<std::size_t>(v)] =
          v == vocab_.pad ? -std::numeric_limits<double>::infinity()
                          : row[static_cast<std::size_t>(v)] / temperature_ - lse;
    }
    return out;
  }

  void check_class(int prompt_class) const {
    if (prompt_class < 0 || prompt_class >= prompt_classes_)
      throw ConfigError("prompt class " + std::to_string(prompt_class) + " out of range");
  }

  bool operator==(const PolicyParams&) const = default;

 private:
  Vocab vocab_;
  int prompt_classes_ = 0;
  int max_len_ = 0;
  double temperature_ = 1.0;
  std::vector<double> theta_;
};

/// Frozen deep copy (reference policy or generation policy).
inline PolicyParams snapshot(const PolicyParams& policy) { return policy; }

/// G rollouts for one prompt, stored densely as [G x max_len] with padding.
struct SampledGroup {
  int prompt_id = 0;
  int group_size = 0;
  int max_len = 0;
  std::vector<int> tokens;
  std::vector<double> gen_logprobs;
  std::vector<std::uint8_t> mask;
  std::vector<int> lengths;

  std::size_t at(int g, int t) const {
    return static_cast<std::size_t>(g) * static_cast<std::size_t>(max_len) +
           static_cast<std::size_t>(t);
  }

  std::vector<int> response(int g) const {
    return {tokens.begin() + static_cast<std::ptrdiff_t>(at(g, 0)),
            tokens.begin() + static_cast<std::ptrdiff_t>(at(g, 0)) + lengths[static_cast<std::size_t>(g)]};
  }

  int valid_tokens() const {
    int n = 0;
    for (int l : lengths) n += l;
    return n;
  }
};

inline SampledGroup sample_group(const PolicyParams& policy, int prompt_id, int group_size,
                                 std::uint64_t seed) {
  if (group_size < 2) throw ConfigError("group size must be >= 2");
  policy.check_class(prompt_id);
  const auto& vocab = policy.vocab();
  SampledGroup out;
  out.prompt_id = prompt_id;
  out.group_size = group_size;
  out.max_len = policy.max_len();
  const auto cells = static_cast<std::size_t>(group_size) * static_cast<std::size_t>(policy.max_len());
  out.tokens.assign(cells, vocab.pad);
  out.gen_logprobs.assign(cells, 0.0);
  out.mask.assign(cells, 0);
  out.lengths.assign(static_cast<std::size_t>(group_size), 0);

  // The position-wise distributions do not depend on earlier tokens, so they
  // are computed once per group.
  std::vector<std::vector<double>> lp(static_cast<std::size_t>(policy.max_len()));
  for (int t = 0; t < policy.max_len(); ++t) lp[static_cast<std::size_t>(t)] = policy.log_softmax(prompt_id, t);

  Rng rng(seed);
  for (int g = 0; g < group_size; ++g) {
    for (int t = 0; t < policy.max_len(); ++t) {
      const auto& row = lp[static_cast<std::size_t>(t)];
      const double u = rng.uniform();
      double acc = 0.0;
      int pick = -1;
      for (int v = 0; v < vocab.size(); ++v) {
        if (v == vocab.pad) continue;
        acc += std::exp(row[static_cast<std::size_t>(v)]);
        pick = v;
        if (u < acc) break;
      }
      const auto k = out.at(g, t);
      out.tokens[k] = pick;
      out.gen_logprobs[k] = row[static_cast<std::size_t>(pick)];
      out.mask[k] = 1;
      ++out.lengths[static_cast<std::size_t>(g)];
      if (pick == vocab.stop) break;
    }
  }
  return out;
}

/// Per-token log pi(token) under `policy`, dense like the group; 0 where
/// masked.
inline std::vector<double> logprobs(const PolicyParams& policy, const SampledGroup& group) {
  policy.check_class(group.prompt_id);
  if (group.max_len != policy.max_len()) throw ConfigError("group/policy max_len mismatch");
  std::vector<double> out(group.tokens.size(), 0.0);
  std::vector<std::vector<double>> lp(static_cast<std::size_t>(policy.max_len()));
  for (int g = 0; g < group.group_size; ++g) {
    for (int t = 0; t < group.max_len; ++t) {
      const auto k = group.at(g, t);
      if (!group.mask[k]) continue;
      const int tok = group.tokens[k];
      if (tok < 0 || tok >= policy.vocab_size() || tok == policy.vocab().pad)
        throw ConfigError("token " + std::to_string(tok) + " outside the policy vocabulary");
      auto& row = lp[static_cast<std::size_t>(t)];
      if (row.empty()) row = policy.log_softmax(group.prompt_id, t);
      out[k] = row[static_cast<std::size_t>(tok)];
    }
  }
  return out;
}

/// Accumulate coeff * d log pi(token | class, position) / d theta into grad.
/// The derivative w.r.t. the logit row is (onehot - softmax) / temperature.
inline void accumulate_logprob_grad(const PolicyParams& policy, int prompt_class, int position,
                                    int token, double coeff, std::span<double> grad) {
  if (coeff == 0.0) return;
  const auto lp = policy.log_softmax(prompt_class, position);
  const auto off = policy.row_offset(prompt_class, position);
  const double scale = coeff / policy.temperature();
  for (int v = 0; v < policy.vocab_size(); ++v) {
    if (v == policy.vocab().pad) continue;
    const double p = std::exp(lp[static_cast<std::size_t>(v)]);
    grad[off + static_cast<std::size_t>(v)] += scale * ((v == token ? 1.0 : 0.0) - p);
  }
}

/// Space-joined content tokens; this is what the judge reads.
inline std::string render_response(const Vocab& vocab, std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (!vocab.is_content(t)) continue;
    if (!out.empty()) out += ' ';
    out += vocab.tokens[static_cast<std::size_t>(t)];
  }
  return out;
}

inline bool ends_with_stop(const Vocab& vocab, std::span<const int> tokens) {
  return !tokens.empty() && tokens.back() == vocab.stop;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const Vocab& v) {
  return {{"tokens", v.tokens}, {"stop", v.stop}, {"pad", v.pad}};
}

inline Vocab vocab_from_json(const nlohmann::json& j) {
  Vocab v;
  v.tokens = j.at("tokens").get<std::vector<std::string>>();
  v.stop = j.at("stop").get<int>();
  v.pad = j.at("pad").get<int>();
  v.validate();
  return v;
}

inline nlohmann::json to_json(const PolicyParams& p) {
  return {{"vocab", to_json(p.vocab())},
          {"prompt_classes", p.prompt_classes()},
          {"max_len", p.max_len()},
          {"temperature", p.temperature()},
          {"theta", std::vector<double>(p.theta().begin(), p.theta().end())}};
}

inline PolicyParams policy_from_json(const nlohmann::json& j) {
  PolicyParams p(vocab_from_json(j.at("vocab")), j.at("prompt_classes").get<int>(),
                 j.at("max_len").get<int>(), j.at("temperature").get<double>());
  const auto theta = j.at("theta").get<std::vector<double>>();
  if (theta.size() != p.theta().size()) throw SchemaError("theta has the wrong size");
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!std::isfinite(theta[i])) throw SchemaError("theta holds a non-finite entry");
    p.theta()[i] = theta[i];
  }
  return p;
}

}  // namespace rgrpo
