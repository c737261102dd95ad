#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "rgrpo/log.hpp"
#include "rgrpo/rubric.hpp"

namespace rgrpo {

struct AdamWConfig {
  double learning_rate = 3e-7;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 1.0;
  int warmup_steps = 13;
};

struct AdamWState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  long skipped = 0;

  explicit AdamWState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
  bool operator==(const AdamWState&) const = default;
};

/// Linear warmup over `warmup_steps`, then constant.
inline double warmup_lr(const AdamWConfig& cfg, long step) {
  if (cfg.warmup_steps <= 0) return cfg.learning_rate;
  return cfg.learning_rate * std::min(1.0, static_cast<double>(step) / cfg.warmup_steps);
}

inline double global_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Rescale in place so the global norm is at most max_norm; returns the
/// norm before clipping.
inline double clip_grad_norm(std::span<double> g, double max_norm) {
  const double norm = global_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& x : g) x *= scale;
  }
  return norm;
}

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  double learning_rate = 0.0;
};

/// Clip, then one decoupled-weight-decay Adam update. A non-finite gradient
/// skips the step and leaves parameters and moments untouched.
inline StepReport optimizer_step(std::span<double> theta, std::span<double> grad, AdamWState& state,
                                 const AdamWConfig& cfg) {
  if (state.m.size() != theta.size() || state.v.size() != theta.size() || grad.size() != theta.size())
    throw ConfigError("optimizer state does not match parameter count");
  StepReport rep;
  rep.grad_norm = global_norm(grad);
  if (!std::isfinite(rep.grad_norm)) {
    ++state.skipped;
    log_warn("non-finite gradient; optimizer step skipped");
    return rep;
  }
  clip_grad_norm(grad, cfg.max_grad_norm);

  ++state.step;
  const double lr = warmup_lr(cfg, state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < theta.size(); ++k) {
    state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * grad[k];
    state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
    const double mhat = state.m[k] / bc1;
    const double vhat = state.v[k] / bc2;
    theta[k] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * theta[k]);
  }
  rep.applied = true;
  rep.learning_rate = lr;
  return rep;
}

inline nlohmann::json to_json(const AdamWState& s) {
  return {{"m", s.m}, {"v", s.v}, {"step", s.step}, {"skipped", s.skipped}};
}

inline AdamWState adamw_state_from_json(const nlohmann::json& j) {
  AdamWState s;
  s.m = j.at("m").get<std::vector<double>>();
  s.v = j.at("v").get<std::vector<double>>();
  s.step = j.at("step").get<long>();
  s.skipped = j.value("skipped", 0L);
  return s;
}

}  // namespace rgrpo
