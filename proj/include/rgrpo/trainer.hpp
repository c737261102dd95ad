#pragma once

// The GRPO training loop and held-out evaluation.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgrpo/grpo.hpp"
#include "rgrpo/judge.hpp"
#include "rgrpo/optimizer.hpp"
#include "rgrpo/policy.hpp"

namespace rgrpo {

struct TrainConfig {
  int batch_prompts = 64;
  int group_size = 32;
  double clip_eps = 0.2;
  double delta = 1e-8;
  double kl_coef = 0.01;
  double learning_rate = 3e-7;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  int warmup_steps = 13;
  int epochs = 1;
  /// Stop after this many optimizer steps; 0 means run `epochs` passes.
  int max_steps = 0;
  /// Gradient steps per sampled batch. Values above 1 need an IS variant.
  int updates_per_batch = 1;

  std::optional<double> dual_clip;
  bool sequence_is = false;
  std::optional<TruncationBand> truncated_is;
  bool dynamic_sampling = false;
  /// Dynamic sampling gives up after this many draws per emitted prompt.
  int dynamic_max_draws_per_prompt = 8;
  ShapingConfig shaping;

  int eval_every = 10;
  int eval_samples = 4;
  std::uint64_t seed = 0;

  /// Published main-run hyperparameters.
  static TrainConfig paper() { return {}; }

  /// Scaled for a tabular policy on one CPU.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch_prompts = 8;
    c.group_size = 8;
    c.learning_rate = 0.3;
    c.warmup_steps = 5;
    c.max_steps = 200;
    return c;
  }

  LossConfig loss_config() const {
    LossConfig l;
    l.clip_eps = clip_eps;
    l.kl_coef = kl_coef;
    l.dual_clip_c = dual_clip;
    l.sequence_is = sequence_is;
    l.truncated_is = truncated_is;
    return l;
  }

  AdamWConfig optimizer_config() const {
    AdamWConfig a;
    a.learning_rate = learning_rate;
    a.weight_decay = weight_decay;
    a.max_grad_norm = max_grad_norm;
    a.warmup_steps = warmup_steps;
    return a;
  }

  void validate() const {
    if (batch_prompts < 1) throw ConfigError("batch_prompts must be >= 1");
    if (group_size < 2) throw ConfigError("group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("clip_eps must lie in (0, 1)");
    if (!(delta > 0.0)) throw ConfigError("delta must be positive");
    if (!(kl_coef >= 0.0)) throw ConfigError("kl_coef must be non-negative");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
    if (epochs < 1 && max_steps <= 0) throw ConfigError("need epochs >= 1 or max_steps > 0");
    if (updates_per_batch < 1) throw ConfigError("updates_per_batch must be >= 1");
    if (updates_per_batch > 1 && !sequence_is && !truncated_is)
      throw ConfigError("multiple updates per batch require sequence_is or truncated_is");
    if (dual_clip && !(*dual_clip > 1.0)) throw ConfigError("dual_clip c must exceed 1");
    if (truncated_is && !(truncated_is->lo >= 0.0 && truncated_is->lo <= truncated_is->hi))
      throw ConfigError("truncated_is band must satisfy 0 <= lo <= hi");
    if (shaping.alpha_stop && !(*shaping.alpha_stop >= 0.0 && *shaping.alpha_stop < 1.0))
      throw ConfigError("alpha_stop must lie in [0, 1)");
    if (shaping.length_penalty < 0.0 || shaping.length_penalty > 1.0)
      throw ConfigError("length_penalty must lie in [0, 1]");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
    if (dynamic_max_draws_per_prompt < 1) throw ConfigError("dynamic_max_draws_per_prompt must be >= 1");
  }
};

/// A task paired with the policy's prompt class for its question.
struct TrainItem {
  TaskInstance instance;
  int prompt_id = 0;
};

struct StepMetrics {
  long step = 0;
  double train_reward = 0.0;
  double heldout_reward = std::numeric_limits<double>::quiet_NaN();
  double mean_advantage = 0.0;
  double loss = 0.0;
  double kl = 0.0;
  double clip_fraction = 0.0;
  double zero_reward_fraction = 0.0;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct CriterionStats {
  std::size_t count = 0;
  double mean_credit = 0.0;              // mean of s_j / w_j
  std::vector<std::size_t> histogram;    // 5 bins over [0, 1]
};

struct EvalReport {
  std::size_t instances = 0;
  std::size_t responses = 0;
  double mean_reward = 0.0;
  double zero_reward_fraction = 0.0;
  std::map<std::string, CriterionStats> per_criterion;
};

/// Sample `samples` responses per instance (fixed seed) and score them.
inline EvalReport evaluate_policy(const PolicyParams& policy, const std::vector<TrainItem>& items,
                                  const JudgeBackend& backend, const JudgeConfig& judge_cfg,
                                  int samples, std::uint64_t seed) {
  if (items.empty()) throw ConfigError("evaluation split is empty");
  const int g = std::max(2, samples);
  std::vector<GroupRequest> batch;
  batch.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto grp = sample_group(policy, items[i].prompt_id, g, mix_seed(seed, 0x6576616cULL, i));
    GroupRequest req{&items[i].instance, {}};
    for (int k = 0; k < samples; ++k) req.responses.push_back(render_response(policy.vocab(), grp.response(k)));
    batch.push_back(std::move(req));
  }
  const auto scored = score_group(batch, judge_cfg, backend);

  EvalReport rep;
  rep.instances = items.size();
  std::map<std::string, double> credit_sum;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    for (const auto& s : scored[i]) {
      ++rep.responses;
      rep.mean_reward += s.reward.value;
      if (s.reward.value == 0.0) rep.zero_reward_fraction += 1.0;
      if (!s.verdict.parse_ok) continue;
      for (const auto& c : items[i].instance.rubric.criteria) {
        if (!(c.weight > 0.0)) continue;
        auto it = s.verdict.scores.find(c.id);
        const double z = it == s.verdict.scores.end() ? 0.0 : it->second / c.weight;
        auto& st = rep.per_criterion[c.id];
        if (st.histogram.empty()) st.histogram.assign(5, 0);
        ++st.count;
        credit_sum[c.id] += z;
        st.histogram[std::min<std::size_t>(4, static_cast<std::size_t>(z * 5.0))]++;
      }
    }
  }
  rep.mean_reward /= static_cast<double>(rep.responses);
  rep.zero_reward_fraction /= static_cast<double>(rep.responses);
  for (auto& [id, st] : rep.per_criterion) st.mean_credit = credit_sum[id] / static_cast<double>(st.count);
  return rep;
}

// ---------------------------------------------------------------------------
// Training

/// Everything needed to continue a run exactly where it stopped.
struct TrainerState {
  PolicyParams policy;
  PolicyParams reference;
  AdamWState optimizer;
  long step = 0;
  long stream_pos = 0;
  double best_heldout = -1.0;
  long best_step = 0;
  double best_train_window = 0.0;

  static TrainerState fresh(const PolicyParams& init) {
    TrainerState s{init, snapshot(init), AdamWState(init.theta().size())};
    return s;
  }
};

inline nlohmann::json to_json(const TrainerState& s) {
  return {{"format", "rgrpo-checkpoint"},
          {"version", 1},
          {"step", s.step},
          {"stream_pos", s.stream_pos},
          {"best_heldout", s.best_heldout},
          {"best_step", s.best_step},
          {"best_train_window", s.best_train_window},
          {"policy", to_json(s.policy)},
          {"reference", to_json(s.reference)},
          {"optimizer", to_json(s.optimizer)}};
}

inline TrainerState trainer_state_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "rgrpo-checkpoint") throw SchemaError("not an rgrpo checkpoint");
  if (j.value("version", 0) != 1) throw SchemaError("unsupported checkpoint version");
  TrainerState s{policy_from_json(j.at("policy")), policy_from_json(j.at("reference")),
                 adamw_state_from_json(j.at("optimizer"))};
  s.step = j.at("step").get<long>();
  s.stream_pos = j.at("stream_pos").get<long>();
  s.best_heldout = j.at("best_heldout").get<double>();
  s.best_step = j.at("best_step").get<long>();
  s.best_train_window = j.value("best_train_window", 0.0);
  if (s.optimizer.m.size() != s.policy.theta().size()) throw SchemaError("optimizer/policy size mismatch");
  return s;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called with the state after a held-out improvement.
  std::function<void(const TrainerState&)> on_best;
  /// Called after every step; the CLI uses it for periodic resume points.
  std::function<void(const TrainerState&)> on_state;
};

struct TrainResult {
  std::vector<StepMetrics> history;
  std::optional<PolicyParams> best_policy;
  double best_heldout = -1.0;
  long best_step = 0;
  /// Mean training reward over the eval window ending at best_step.
  double train_reward_at_best = 0.0;
};

namespace detail {

/// Prompt at position `pos` of the endless stream of per-epoch shuffles.
inline std::size_t stream_item(std::size_t n, std::uint64_t seed, long pos) {
  const auto epoch = static_cast<std::uint64_t>(pos) / n;
  std::vector<std::size_t> perm(n);
  for (std::size_t k = 0; k < n; ++k) perm[k] = k;
  Rng rng(mix_seed(seed, 0x65706f6368ULL, epoch));
  rng.shuffle(perm);
  return perm[static_cast<std::size_t>(pos) % n];
}

struct Rollout {
  std::size_t item = 0;
  SampledGroup group;
  std::vector<double> rewards;
  std::vector<double> raw_rewards;
};

}  // namespace detail

inline long planned_steps(const TrainConfig& cfg, std::size_t dataset_size) {
  if (cfg.max_steps > 0) return cfg.max_steps;
  const auto per_epoch = (dataset_size + static_cast<std::size_t>(cfg.batch_prompts) - 1) /
                         static_cast<std::size_t>(cfg.batch_prompts);
  return static_cast<long>(per_epoch) * cfg.epochs;
}

/// Runs until `planned_steps` optimizer steps have been taken, continuing
/// from `state.step`. Judge failures become zero rewards; nothing aborts.
inline TrainResult train(const std::vector<TrainItem>& dataset, const std::vector<TrainItem>& heldout,
                         TrainerState& state, const JudgeBackend& backend, const JudgeConfig& judge_cfg,
                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  judge_cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  for (const auto& item : dataset) state.policy.check_class(item.prompt_id);
  for (const auto& item : heldout) state.policy.check_class(item.prompt_id);

  const auto total_steps = planned_steps(cfg, dataset.size());
  const auto loss_cfg = cfg.loss_config();
  const auto opt_cfg = cfg.optimizer_config();
  const auto& vocab = state.policy.vocab();

  TrainResult result;
  result.best_heldout = state.best_heldout;
  result.best_step = state.best_step;
  result.train_reward_at_best = state.best_train_window;
  std::vector<double> recent_train;

  auto roll = [&](std::size_t item_idx, std::uint64_t seed, const PolicyParams& gen) {
    detail::Rollout r;
    r.item = item_idx;
    r.group = sample_group(gen, dataset[item_idx].prompt_id, cfg.group_size, seed);
    return r;
  };

  auto judge_rollouts = [&](std::vector<detail::Rollout>& rollouts) {
    std::vector<GroupRequest> reqs;
    for (const auto& r : rollouts) {
      GroupRequest q{&dataset[r.item].instance, {}};
      for (int g = 0; g < cfg.group_size; ++g) q.responses.push_back(render_response(vocab, r.group.response(g)));
      reqs.push_back(std::move(q));
    }
    const auto scored = score_group(reqs, judge_cfg, backend);
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      auto& r = rollouts[i];
      r.rewards.clear();
      r.raw_rewards.clear();
      for (int g = 0; g < cfg.group_size; ++g) {
        const double raw = scored[i][static_cast<std::size_t>(g)].reward.value;
        const auto toks = r.group.response(g);
        r.raw_rewards.push_back(raw);
        r.rewards.push_back(shape_reward(raw, static_cast<int>(toks.size()), ends_with_stop(vocab, toks),
                                         state.policy.max_len(), cfg.shaping));
      }
    }
  };

  while (state.step < total_steps) {
    const long step = state.step + 1;
    const auto gen = snapshot(state.policy);  // sync pi_gen <- pi_theta

    std::vector<detail::Rollout> rollouts;
    auto draw_one = [&] {
      const long pos = state.stream_pos++;
      return roll(detail::stream_item(dataset.size(), cfg.seed, pos),
                  mix_seed(cfg.seed, 0x726f6c6cULL, static_cast<std::uint64_t>(pos)), gen);
    };
    if (cfg.dynamic_sampling) {
      auto draw_scored = [&] {
        std::vector<detail::Rollout> one{draw_one()};
        judge_rollouts(one);
        return std::move(one.front());
      };
      rollouts = filter_informative(draw_scored, [](const detail::Rollout& r) -> const std::vector<double>& { return r.rewards; },
                                    static_cast<std::size_t>(cfg.batch_prompts),
                                    static_cast<std::size_t>(cfg.batch_prompts) *
                                        static_cast<std::size_t>(cfg.dynamic_max_draws_per_prompt));
    } else {
      for (int i = 0; i < cfg.batch_prompts; ++i) rollouts.push_back(draw_one());
      judge_rollouts(rollouts);
    }

    GroupRewards rewards(static_cast<int>(rollouts.size()), cfg.group_size);
    std::vector<SampledGroup> groups;
    StepMetrics m;
    m.step = step;
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      for (int g = 0; g < cfg.group_size; ++g) {
        rewards(static_cast<int>(i), g) = rollouts[i].rewards[static_cast<std::size_t>(g)];
        m.train_reward += rollouts[i].raw_rewards[static_cast<std::size_t>(g)];
        if (rollouts[i].raw_rewards[static_cast<std::size_t>(g)] == 0.0) ++zeros;
      }
      groups.push_back(std::move(rollouts[i].group));
    }
    const double cells = static_cast<double>(rewards.values.size());
    m.train_reward /= cells;
    m.zero_reward_fraction = static_cast<double>(zeros) / cells;

    const auto adv = advantages(rewards, cfg.delta);
    for (double a : adv.advantages.values) m.mean_advantage += a;
    m.mean_advantage /= cells;

    for (int u = 0; u < cfg.updates_per_batch; ++u) {
      auto lr = grpo_loss(state.policy, state.reference, groups, adv, loss_cfg);
      const auto rep = optimizer_step(state.policy.theta(), lr.grad, state.optimizer, opt_cfg);
      if (u == 0) {
        m.loss = lr.summary.loss;
        m.kl = lr.summary.mean_kl;
        m.clip_fraction = lr.summary.clip_fraction;
        m.grad_norm = rep.grad_norm;
        m.learning_rate = rep.applied ? rep.learning_rate : warmup_lr(opt_cfg, state.optimizer.step + 1);
      }
    }
    state.step = step;

    recent_train.push_back(m.train_reward);
    if (recent_train.size() > static_cast<std::size_t>(cfg.eval_every)) recent_train.erase(recent_train.begin());

    if (!heldout.empty() && (step % cfg.eval_every == 0 || step == total_steps)) {
      const auto rep = evaluate_policy(state.policy, heldout, backend, judge_cfg, cfg.eval_samples,
                                       mix_seed(cfg.seed, 0x68656c64ULL));
      m.heldout_reward = rep.mean_reward;
      if (rep.mean_reward > state.best_heldout) {
        double window = 0.0;
        for (double r : recent_train) window += r;
        window /= static_cast<double>(recent_train.size());
        state.best_heldout = rep.mean_reward;
        state.best_step = step;
        state.best_train_window = window;
        result.best_policy = snapshot(state.policy);
        result.best_heldout = rep.mean_reward;
        result.best_step = step;
        result.train_reward_at_best = window;
        if (hooks.on_best) hooks.on_best(state);
      }
    }

    result.history.push_back(m);
    if (hooks.on_step) hooks.on_step(m);
    if (hooks.on_state) hooks.on_state(state);
  }
  return result;
}

}  // namespace rgrpo
