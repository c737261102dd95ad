#pragma once

// Group-relative advantages, the clipped surrogate with k3 KL penalty, its
// analytic gradient, and the optional importance-sampling / clipping /
// sampling / shaping variants.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "rgrpo/policy.hpp"
#include "rgrpo/rubric.hpp"

namespace rgrpo {

/// Row-major [B x G] matrix.
template <class T>
struct GroupMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> values;

  GroupMatrix() = default;
  GroupMatrix(int b, int g, T init = T{})
      : rows(b), cols(g), values(static_cast<std::size_t>(b) * static_cast<std::size_t>(g), init) {}

  static GroupMatrix from_rows(const std::vector<std::vector<T>>& rows_in) {
    GroupMatrix m(static_cast<int>(rows_in.size()), rows_in.empty() ? 0 : static_cast<int>(rows_in[0].size()));
    for (std::size_t i = 0; i < rows_in.size(); ++i) {
      if (static_cast<int>(rows_in[i].size()) != m.cols) throw ConfigError("ragged group matrix");
      std::copy(rows_in[i].begin(), rows_in[i].end(), m.values.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(m.cols)));
    }
    return m;
  }

  T& operator()(int i, int g) { return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(g)]; }
  const T& operator()(int i, int g) const {
    return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(g)];
  }
  std::span<const T> row(int i) const {
    return std::span<const T>(values).subspan(static_cast<std::size_t>(i) * static_cast<std::size_t>(cols), static_cast<std::size_t>(cols));
  }
};

using GroupRewards = GroupMatrix<double>;

/// b_i^(g): mean of the other G-1 rewards in the group.
inline GroupMatrix<double> loo_baseline(const GroupRewards& rewards) {
  if (rewards.cols < 2) throw ConfigError("leave-one-out baseline needs G >= 2");
  GroupMatrix<double> b(rewards.rows, rewards.cols);
  for (int i = 0; i < rewards.rows; ++i) {
    double sum = 0.0;
    for (double r : rewards.row(i)) sum += r;
    for (int g = 0; g < rewards.cols; ++g) b(i, g) = (sum - rewards(i, g)) / (rewards.cols - 1);
  }
  return b;
}

/// Population standard deviation; exactly 0 for a constant row.
inline double group_sigma(std::span<const double> row) {
  if (row.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
  if (*lo == *hi) return 0.0;
  double mean = 0.0;
  for (double r : row) mean += r;
  mean /= static_cast<double>(row.size());
  double var = 0.0;
  for (double r : row) var += (r - mean) * (r - mean);
  return std::sqrt(var / static_cast<double>(row.size()));
}

struct AdvantageTensor {
  GroupMatrix<double> advantages;
  GroupMatrix<double> baselines;
  std::vector<double> sigmas;

  /// Per-token view: the sequence advantage repeated on every response token.
  double token(int i, int g, int /*t*/) const { return advantages(i, g); }
};

inline AdvantageTensor advantages(const GroupRewards& rewards, double delta) {
  if (!(delta > 0.0)) throw ConfigError("advantage stabilizer must be positive");
  AdvantageTensor out{GroupMatrix<double>(rewards.rows, rewards.cols), loo_baseline(rewards), {}};
  out.sigmas.resize(static_cast<std::size_t>(rewards.rows));
  for (int i = 0; i < rewards.rows; ++i) {
    const double sigma = group_sigma(rewards.row(i));
    out.sigmas[static_cast<std::size_t>(i)] = sigma;
    for (int g = 0; g < rewards.cols; ++g)
      out.advantages(i, g) = sigma > 0.0 ? (rewards(i, g) - out.baselines(i, g)) / (sigma + delta) : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-token pieces

inline std::vector<double> token_ratio(std::span<const double> logp_theta,
                                       std::span<const double> logp_gen) {
  if (logp_theta.size() != logp_gen.size()) throw ConfigError("token_ratio: misaligned tensors");
  std::vector<double> r(logp_theta.size());
  for (std::size_t k = 0; k < r.size(); ++k) r[k] = std::exp(logp_theta[k] - logp_gen[k]);
  return r;
}

struct SurrogateTerm {
  double loss = 0.0;
  bool clipped = false;  // the clipped branch is the active minimum
};

inline SurrogateTerm clipped_surrogate(double ratio, double advantage, double clip_eps) {
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage;
  if (clipped < unclipped) return {-clipped, true};
  return {-unclipped, false};
}

inline constexpr double kKlClamp = 20.0;

/// k3 estimator e^u - 1 - u with u = logp_ref - logp_theta clamped to +-20.
inline double kl_k3(double logp_ref, double logp_theta) {
  const double u = std::clamp(logp_ref - logp_theta, -kKlClamp, kKlClamp);
  return std::expm1(u) - u;
}

struct LossSummary {
  double loss = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  std::size_t valid_tokens = 0;
};

/// Token-averaged loss: sum of masked (l_t + beta * KL_t) over the count of
/// valid tokens.
inline LossSummary total_loss(std::span<const double> surrogates, std::span<const double> kls,
                              std::span<const std::uint8_t> masks, double kl_coef,
                              std::span<const std::uint8_t> clipped = {}) {
  if (surrogates.size() != kls.size() || kls.size() != masks.size() ||
      (!clipped.empty() && clipped.size() != masks.size()))
    throw ConfigError("total_loss: misaligned tensors");
  LossSummary s;
  double num = 0.0;
  double kl = 0.0;
  std::size_t n_clipped = 0;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (!masks[k]) continue;
    ++s.valid_tokens;
    num += surrogates[k] + kl_coef * kls[k];
    kl += kls[k];
    if (!clipped.empty() && clipped[k]) ++n_clipped;
  }
  if (s.valid_tokens == 0) throw ConfigError("total_loss: no valid tokens");
  const auto n = static_cast<double>(s.valid_tokens);
  s.loss = num / n;
  s.mean_kl = kl / n;
  s.clip_fraction = static_cast<double>(n_clipped) / n;
  return s;
}

// ---------------------------------------------------------------------------
// Variants (all off by default)

/// For negative advantages the loss is floored at -c * A.
inline double dual_clip(double clip_loss, double advantage, double c) {
  if (advantage >= 0.0) return clip_loss;
  return std::max(clip_loss, -c * advantage);
}

/// Geometric mean of the masked per-token ratios.
inline double sequence_is_ratio(std::span<const double> ratios, std::span<const std::uint8_t> mask) {
  if (ratios.size() != mask.size()) throw ConfigError("sequence_is_ratio: misaligned tensors");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < ratios.size(); ++k) {
    if (!mask[k]) continue;
    sum += std::log(ratios[k]);
    ++n;
  }
  return n == 0 ? 1.0 : std::exp(sum / static_cast<double>(n));
}

enum class TruncationMode { Cap, Mask };

struct TruncationBand {
  double lo = 0.5;
  double hi = 2.0;
  TruncationMode mode = TruncationMode::Cap;
};

inline double truncated_is(double ratio, const TruncationBand& band) {
  if (band.mode == TruncationMode::Cap) return std::clamp(ratio, band.lo, band.hi);
  return (ratio < band.lo || ratio > band.hi) ? 0.0 : ratio;
}

inline std::vector<double> truncated_is(std::span<const double> ratios, const TruncationBand& band) {
  std::vector<double> w(ratios.size());
  for (std::size_t k = 0; k < w.size(); ++k) w[k] = truncated_is(ratios[k], band);
  return w;
}

struct ShapingConfig {
  /// Multiplicative factor removed at full length; 0 disables the ramp.
  double length_penalty = 0.0;
  /// Fraction of max_len over which the length penalty ramps in.
  double length_ramp = 0.1;
  /// Multiplier applied when the response never emits <stop>; nullopt = off.
  std::optional<double> alpha_stop;
};

/// Applied to the normalized reward; the result is clipped back to [0, 1].
inline double shape_reward(double reward, int length, bool has_stop, int max_len,
                           const ShapingConfig& cfg) {
  double r = reward;
  if (cfg.length_penalty > 0.0 && max_len > 0) {
    const double start = static_cast<double>(max_len) * (1.0 - cfg.length_ramp);
    const double span = static_cast<double>(max_len) - start;
    if (static_cast<double>(length) > start && span > 0.0) {
      const double frac = std::min(1.0, (static_cast<double>(length) - start) / span);
      r *= 1.0 - cfg.length_penalty * frac;
    }
  }
  if (cfg.alpha_stop && !has_stop) r *= *cfg.alpha_stop;
  return std::clamp(r, 0.0, 1.0);
}

class DynamicSamplingExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Draw candidates until `batch_size` of them have a non-constant reward
/// group; gives up after `max_draws` draws.
template <class Draw, class RewardsOf>
auto filter_informative(Draw&& draw, RewardsOf&& rewards_of, std::size_t batch_size,
                        std::size_t max_draws) {
  using Candidate = std::decay_t<decltype(draw())>;
  std::vector<Candidate> kept;
  std::size_t draws = 0;
  while (kept.size() < batch_size) {
    if (draws == max_draws)
      throw DynamicSamplingExhausted("dynamic sampling found " + std::to_string(kept.size()) + " of " +
                                     std::to_string(batch_size) + " informative prompts in " +
                                     std::to_string(max_draws) + " draws");
    ++draws;
    auto c = draw();
    const auto& rewards = rewards_of(c);
    if (group_sigma(std::span<const double>(rewards.data(), rewards.size())) > 0.0)
      kept.push_back(std::move(c));
  }
  return kept;
}

// ---------------------------------------------------------------------------
// Full loss and gradient

struct LossConfig {
  double clip_eps = 0.2;
  double kl_coef = 0.01;
  std::optional<double> dual_clip_c;
  bool sequence_is = false;
  std::optional<TruncationBand> truncated_is;
};

struct LossResult {
  LossSummary summary;
  std::vector<double> grad;  // same layout as PolicyParams::theta
};

/// Loss over a batch of groups and its exact gradient w.r.t. the live
/// policy's logits. `groups[i]` carries the generation log-probabilities and
/// `adv` row i its advantages. The clipped and dual-clipped branches
/// contribute zero gradient, as does a KL term whose log-ratio hits the clamp.
inline LossResult grpo_loss(const PolicyParams& policy, const PolicyParams& reference,
                            std::span<const SampledGroup> groups, const AdvantageTensor& adv,
                            const LossConfig& cfg) {
  if (adv.advantages.rows != static_cast<int>(groups.size()))
    throw ConfigError("advantage rows do not match the number of groups");
  LossResult out;
  out.grad.assign(policy.theta().size(), 0.0);

  std::size_t total_tokens = 0;
  for (const auto& grp : groups) total_tokens += static_cast<std::size_t>(grp.valid_tokens());
  if (total_tokens == 0) throw ConfigError("grpo_loss: no valid tokens");
  const double inv_n = 1.0 / static_cast<double>(total_tokens);

  double loss_sum = 0.0;
  double kl_sum = 0.0;
  std::size_t n_clipped = 0;

  for (std::size_t i = 0; i < groups.size(); ++i) {
    const auto& grp = groups[i];
    if (grp.group_size != adv.advantages.cols) throw ConfigError("group size mismatch");
    const auto lp_theta = logprobs(policy, grp);
    const auto lp_ref = logprobs(reference, grp);

    for (int g = 0; g < grp.group_size; ++g) {
      const int len = grp.lengths[static_cast<std::size_t>(g)];
      if (len == 0) continue;
      const double a = adv.advantages(static_cast<int>(i), g);

      // d loss_sum / d logp_theta for each token of this response.
      std::vector<double> coeff(static_cast<std::size_t>(len), 0.0);

      double seq_ratio = 1.0;
      if (cfg.sequence_is) {
        double s = 0.0;
        for (int t = 0; t < len; ++t) s += lp_theta[grp.at(g, t)] - grp.gen_logprobs[grp.at(g, t)];
        seq_ratio = std::exp(s / len);
      }

      for (int t = 0; t < len; ++t) {
        const auto k = grp.at(g, t);
        const double token_ratio_v = std::exp(lp_theta[k] - grp.gen_logprobs[k]);
        double ratio = cfg.sequence_is ? seq_ratio : token_ratio_v;
        double dratio = 1.0;  // d(weight)/d(ratio)
        if (cfg.truncated_is) {
          const auto& band = *cfg.truncated_is;
          const bool outside = ratio < band.lo || ratio > band.hi;
          ratio = truncated_is(ratio, band);
          if (outside) dratio = 0.0;
        }

        auto term = clipped_surrogate(ratio, a, cfg.clip_eps);
        double dl_dw = term.clipped ? 0.0 : -a;
        if (cfg.truncated_is && cfg.truncated_is->mode == TruncationMode::Mask && ratio == 0.0) {
          term = {0.0, false};
          dl_dw = 0.0;
        } else if (cfg.dual_clip_c && a < 0.0) {
          const double floored = dual_clip(term.loss, a, *cfg.dual_clip_c);
          if (floored > term.loss) {
            term.loss = floored;
            dl_dw = 0.0;
          }
        }
        if (term.clipped) ++n_clipped;
        loss_sum += term.loss;

        const double dl = dl_dw * dratio;
        if (cfg.sequence_is) {
          // d seq_ratio / d logp_t' = seq_ratio / len for every token t'.
          const double share = dl * seq_ratio / len;
          for (int tp = 0; tp < len; ++tp) coeff[static_cast<std::size_t>(tp)] += share;
        } else {
          coeff[static_cast<std::size_t>(t)] += dl * token_ratio_v;
        }

        const double u_raw = lp_ref[k] - lp_theta[k];
        const double kl = kl_k3(lp_ref[k], lp_theta[k]);
        kl_sum += kl;
        loss_sum += cfg.kl_coef * kl;
        if (std::abs(u_raw) < kKlClamp) coeff[static_cast<std::size_t>(t)] += cfg.kl_coef * -std::expm1(u_raw);
      }

      for (int t = 0; t < len; ++t) {
        accumulate_logprob_grad(policy, grp.prompt_id, t, grp.tokens[grp.at(g, t)],
                                coeff[static_cast<std::size_t>(t)] * inv_n, out.grad);
      }
    }
  }

  out.summary.loss = loss_sum * inv_n;
  out.summary.mean_kl = kl_sum * inv_n;
  out.summary.clip_fraction = static_cast<double>(n_clipped) * inv_n;
  out.summary.valid_tokens = total_tokens;
  return out;
}

/// Loss only (used by finite-difference checks).
inline double grpo_loss_value(const PolicyParams& policy, const PolicyParams& reference,
                              std::span<const SampledGroup> groups, const AdvantageTensor& adv,
                              const LossConfig& cfg) {
  return grpo_loss(policy, reference, groups, adv, cfg).summary.loss;
}

}  // namespace rgrpo
