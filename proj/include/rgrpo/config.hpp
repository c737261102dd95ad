#pragma once

// Run configuration: profile defaults < config file < command-line overrides,
// resolved into a flat key/value map before any subsystem starts.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "rgrpo/datagen.hpp"
#include "rgrpo/judge.hpp"
#include "rgrpo/synthetic.hpp"
#include "rgrpo/trainer.hpp"

namespace rgrpo {

using ConfigMap = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

/// Every recognised key with its value under `profile` ("desk" or "paper").
inline ConfigMap profile_defaults(const std::string& profile) {
  if (profile != "desk" && profile != "paper") throw ConfigError("unknown profile '" + profile + "'");
  const auto t = profile == "desk" ? TrainConfig::desk() : TrainConfig::paper();
  const JudgeConfig j;
  const SyntheticEnv env;
  auto num = [](double v) { return format_number(v); };
  ConfigMap m{
      {"profile", profile},
      {"seed", "0"},
      {"out", "run"},
      {"judge", "oracle"},
      {"resume", ""},
      {"checkpoint_every", "10"},

      {"train.batch_prompts", std::to_string(t.batch_prompts)},
      {"train.group_size", std::to_string(t.group_size)},
      {"train.clip_eps", num(t.clip_eps)},
      {"train.delta", num(t.delta)},
      {"train.kl_coef", num(t.kl_coef)},
      {"train.learning_rate", num(t.learning_rate)},
      {"train.weight_decay", num(t.weight_decay)},
      {"train.max_grad_norm", num(t.max_grad_norm)},
      {"train.warmup_steps", std::to_string(t.warmup_steps)},
      {"train.epochs", std::to_string(t.epochs)},
      {"train.max_steps", std::to_string(t.max_steps)},
      {"train.updates_per_batch", "1"},
      {"train.dual_clip", "off"},
      {"train.sequence_is", "false"},
      {"train.truncated_is", "off"},
      {"train.truncated_is_lo", "0.5"},
      {"train.truncated_is_hi", "2"},
      {"train.dynamic_sampling", "false"},
      {"train.dynamic_max_draws_per_prompt", "8"},
      {"train.length_penalty", "0"},
      {"train.alpha_stop", "off"},
      {"train.eval_every", std::to_string(t.eval_every)},
      {"train.eval_samples", std::to_string(t.eval_samples)},

      {"judge.temperature", num(j.temperature)},
      {"judge.max_response_tokens", std::to_string(j.max_response_tokens)},
      {"judge.max_passage_chars", std::to_string(j.max_passage_chars)},
      {"judge.workers", std::to_string(j.workers)},
      {"judge.worker_batch", std::to_string(j.worker_batch)},
      {"judge.endpoint_url", j.endpoint_url},
      {"judge.model_name", j.model_name},
      {"judge.request_timeout_ms", std::to_string(j.request_timeout.count())},
      {"judge.max_retries", std::to_string(j.max_retries)},
      {"judge.missing_as_zero", "false"},
      {"judge.credit_mode", "all_or_nothing"},

      {"qa.min_criteria", "3"},
      {"qa.min_total_weight", "1"},

      {"data.corpus", ""},
      {"data.generator", "heuristic"},
      {"data.generator_url", "http://127.0.0.1:8000/v1/chat/completions"},
      {"data.generator_model", "generator"},
      {"data.concurrency", "4"},
      {"data.questions_per_doc", "3"},
      {"data.split_train", "0.7"},
      {"data.split_validation", "0.15"},
      {"data.split_test", "0.15"},

      {"dataset.train", ""},
      {"dataset.validation", ""},
      {"dataset.test", ""},

      {"env.vocab_size", std::to_string(env.vocab_size)},
      {"env.prompt_classes", std::to_string(env.prompt_classes)},
      {"env.max_len", std::to_string(env.max_len)},
      {"env.rollout_temperature", "1"},
      {"env.difficulty", "medium"},
      {"env.train_tasks", "256"},
      {"env.heldout_tasks", "64"},
      {"env.world_seed", std::to_string(env.world_seed)},
  };
  return m;
}

/// Apply `key = value` pairs onto `base`; unknown keys are rejected.
inline void apply_overrides(ConfigMap& base, const ConfigMap& overrides, const std::string& origin) {
  for (const auto& [k, v] : overrides) {
    if (!base.contains(k)) throw ConfigError(origin + ": unknown config key '" + k + "'");
    base[k] = v;
  }
}

/// Declarative file: one `key = value` per line, `#` starts a comment.
inline ConfigMap parse_config_text(std::string_view text, const std::string& origin) {
  ConfigMap out;
  std::istringstream in{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
    const auto key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
    out[key] = trim(std::string_view(line).substr(eq + 1));
  }
  return out;
}

inline ConfigMap parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

inline std::string render_config(const ConfigMap& m) {
  std::string out = "# resolved configuration\n";
  for (const auto& [k, v] : m) out += k + " = " + v + "\n";
  return out;
}

/// Resolve defaults < file < CLI. The profile may itself come from the file
/// or the CLI, so it is looked up first.
inline ConfigMap resolve_config(const std::string& config_file, const ConfigMap& cli) {
  ConfigMap file;
  if (!config_file.empty()) file = parse_config_file(config_file);
  std::string profile = "desk";
  if (auto it = file.find("profile"); it != file.end()) profile = it->second;
  if (auto it = cli.find("profile"); it != cli.end()) profile = it->second;
  auto m = profile_defaults(profile);
  apply_overrides(m, file, config_file);
  apply_overrides(m, cli, "command line");
  m["profile"] = profile;
  return m;
}

// ---------------------------------------------------------------------------
// Typed access

class RunConfig {
 public:
  explicit RunConfig(ConfigMap values) : v_(std::move(values)) { validate(); }

  const ConfigMap& values() const { return v_; }
  const std::string& str(const std::string& key) const {
    auto it = v_.find(key);
    if (it == v_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  double real(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    const double x = std::strtod(s.c_str(), &end);
    if (s.empty() || *end != '\0') throw ConfigError("'" + key + "' expects a number, got '" + s + "'");
    return x;
  }

  long integer(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    const long x = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || *end != '\0') throw ConfigError("'" + key + "' expects an integer, got '" + s + "'");
    return x;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    char* end = nullptr;
    const auto x = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || *end != '\0' || s[0] == '-') throw ConfigError("'" + key + "' expects a non-negative integer");
    return x;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "off" || s == "no") return false;
    throw ConfigError("'" + key + "' expects a boolean, got '" + s + "'");
  }

  /// "off" disables; anything else must be a number.
  std::optional<double> optional_real(const std::string& key) const {
    if (str(key) == "off" || str(key).empty()) return std::nullopt;
    return real(key);
  }

  std::uint64_t seed() const { return u64("seed"); }
  std::filesystem::path out_dir() const { return str("out"); }

  TrainConfig train() const {
    TrainConfig t;
    t.batch_prompts = static_cast<int>(integer("train.batch_prompts"));
    t.group_size = static_cast<int>(integer("train.group_size"));
    t.clip_eps = real("train.clip_eps");
    t.delta = real("train.delta");
    t.kl_coef = real("train.kl_coef");
    t.learning_rate = real("train.learning_rate");
    t.weight_decay = real("train.weight_decay");
    t.max_grad_norm = real("train.max_grad_norm");
    t.warmup_steps = static_cast<int>(integer("train.warmup_steps"));
    t.epochs = static_cast<int>(integer("train.epochs"));
    t.max_steps = static_cast<int>(integer("train.max_steps"));
    t.updates_per_batch = static_cast<int>(integer("train.updates_per_batch"));
    t.dual_clip = optional_real("train.dual_clip");
    t.sequence_is = flag("train.sequence_is");
    if (const auto& mode = str("train.truncated_is"); mode != "off") {
      if (mode != "cap" && mode != "mask") throw ConfigError("train.truncated_is must be off, cap or mask");
      t.truncated_is = TruncationBand{real("train.truncated_is_lo"), real("train.truncated_is_hi"),
                                      mode == "cap" ? TruncationMode::Cap : TruncationMode::Mask};
    }
    t.dynamic_sampling = flag("train.dynamic_sampling");
    t.dynamic_max_draws_per_prompt = static_cast<int>(integer("train.dynamic_max_draws_per_prompt"));
    t.shaping.length_penalty = real("train.length_penalty");
    t.shaping.alpha_stop = optional_real("train.alpha_stop");
    t.eval_every = static_cast<int>(integer("train.eval_every"));
    t.eval_samples = static_cast<int>(integer("train.eval_samples"));
    t.seed = seed();
    return t;
  }

  JudgeConfig judge() const {
    JudgeConfig j;
    j.temperature = real("judge.temperature");
    j.max_response_tokens = static_cast<int>(integer("judge.max_response_tokens"));
    const auto chars = integer("judge.max_passage_chars");
    if (chars < 0) throw ConfigError("judge.max_passage_chars must be >= 0");
    j.max_passage_chars = static_cast<std::size_t>(chars);
    j.workers = static_cast<int>(integer("judge.workers"));
    j.worker_batch = static_cast<int>(integer("judge.worker_batch"));
    j.endpoint_url = str("judge.endpoint_url");
    j.model_name = str("judge.model_name");
    j.request_timeout = std::chrono::milliseconds(integer("judge.request_timeout_ms"));
    j.max_retries = static_cast<int>(integer("judge.max_retries"));
    j.missing_criterion_as_zero = flag("judge.missing_as_zero");
    return j;
  }

  CreditMode credit_mode() const {
    const auto& s = str("judge.credit_mode");
    if (s == "all_or_nothing") return CreditMode::AllOrNothing;
    if (s == "proportional") return CreditMode::Proportional;
    throw ConfigError("judge.credit_mode must be all_or_nothing or proportional");
  }

  QaPolicy qa() const {
    const auto n = integer("qa.min_criteria");
    if (n < 0) throw ConfigError("qa.min_criteria must be >= 0");
    return {static_cast<std::size_t>(n), real("qa.min_total_weight")};
  }

  SyntheticEnv env() const {
    SyntheticEnv e;
    e.vocab_size = static_cast<int>(integer("env.vocab_size"));
    e.prompt_classes = static_cast<int>(integer("env.prompt_classes"));
    e.max_len = static_cast<int>(integer("env.max_len"));
    e.world_seed = u64("env.world_seed");
    return e;
  }

  SplitFractions split() const {
    return {real("data.split_train"), real("data.split_validation"), real("data.split_test")};
  }

 private:
  void validate() const {
    const auto& judge_kind = str("judge");
    if (judge_kind != "oracle" && judge_kind != "remote") throw ConfigError("judge must be oracle or remote");
    train().validate();
    judge().validate();
    credit_mode();
    qa();
    const auto e = env();
    if (e.vocab_size < 3 || e.prompt_classes < 1 || e.max_len < 2) throw ConfigError("env sizes too small");
    if (!(real("env.rollout_temperature") > 0.0)) throw ConfigError("env.rollout_temperature must be positive");
    parse_difficulty(str("env.difficulty"));
    if (integer("env.train_tasks") < 1 || integer("env.heldout_tasks") < 1)
      throw ConfigError("env.train_tasks and env.heldout_tasks must be >= 1");
    if (integer("checkpoint_every") < 1) throw ConfigError("checkpoint_every must be >= 1");
    if (integer("data.concurrency") < 1) throw ConfigError("data.concurrency must be >= 1");
    if (integer("data.questions_per_doc") < 0) throw ConfigError("data.questions_per_doc must be >= 0");
    const auto& gen = str("data.generator");
    if (gen != "heuristic" && gen != "remote") throw ConfigError("data.generator must be heuristic or remote");
    split_counts(1, split());
  }

  ConfigMap v_;
};

}  // namespace rgrpo
