#include <gtest/gtest.h>

#include "support.hpp"

using namespace rgrpo;
using namespace testing_support;

TEST(LooBaseline, HandValues) {
  const auto b = loo_baseline(GroupRewards::from_rows({{1, 0, 0, 1}}));
  EXPECT_DOUBLE_EQ(b(0, 0), 1.0 / 3.0);
  const auto c = loo_baseline(GroupRewards::from_rows({{0.4, 0.4, 0.4}}));
  for (int g = 0; g < 3; ++g) EXPECT_DOUBLE_EQ(c(0, g), 0.4);
  const auto s = loo_baseline(GroupRewards::from_rows({{0.25, 0.75}}));
  EXPECT_EQ(s(0, 0), 0.75);
  EXPECT_EQ(s(0, 1), 0.25);
  EXPECT_THROW(loo_baseline(GroupRewards::from_rows({{1}})), ConfigError);
}

TEST(Advantages, HandValues) {
  const auto a = advantages(GroupRewards::from_rows({{1, 0}}), 1e-8);
  EXPECT_DOUBLE_EQ(a.sigmas[0], 0.5);
  EXPECT_NEAR(a.advantages(0, 0), 2.0, 1e-6);
  EXPECT_NEAR(a.advantages(0, 1), -2.0, 1e-6);

  const auto b = advantages(GroupRewards::from_rows({{1, 0, 0, 1}}), 1e-8);
  EXPECT_EQ(b.sigmas[0], 0.5);
  EXPECT_NEAR(b.advantages(0, 0), 4.0 / 3.0, 1e-7);
  EXPECT_EQ(b.token(0, 0, 5), b.advantages(0, 0));

  const auto c = advantages(GroupRewards::from_rows({{0.3, 0.3, 0.3}, {0.0, 0.0, 0.0}}), 1e-8);
  for (double x : c.advantages.values) EXPECT_EQ(x, 0.0);
  EXPECT_EQ(c.sigmas[0], 0.0);
  EXPECT_THROW(advantages(GroupRewards::from_rows({{1, 0}}), 0.0), ConfigError);
}

TEST(Advantages, ShiftInvariant) {
  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const int G = rng.uniform_int(2, 16);
    std::vector<double> row, shifted;
    const double k = 3 * rng.normal();
    for (int g = 0; g < G; ++g) {
      row.push_back(rng.uniform());
      shifted.push_back(row.back() + k);
    }
    const auto a = advantages(GroupRewards::from_rows({row}), 1e-8);
    const auto b = advantages(GroupRewards::from_rows({shifted}), 1e-8);
    for (int g = 0; g < G; ++g) ASSERT_NEAR(a.advantages(0, g), b.advantages(0, g), 1e-9);
  }
}

TEST(TokenRatio, ClosedForms) {
  const std::vector<double> th{-1.0, std::log(2.0) - 3, -std::log(4.0)};
  const std::vector<double> gen{-1.0, -3.0, 0.0};
  const auto r = token_ratio(th, gen);
  EXPECT_EQ(r[0], 1.0);
  EXPECT_NEAR(r[1], 2.0, 1e-15);
  EXPECT_NEAR(r[2], 0.25, 1e-15);
  EXPECT_THROW(token_ratio(th, std::vector<double>{1.0}), ConfigError);
}

TEST(ClippedSurrogate, HandValues) {
  EXPECT_NEAR(clipped_surrogate(1.5, 1.0, 0.2).loss, -1.2, 1e-15);
  EXPECT_TRUE(clipped_surrogate(1.5, 1.0, 0.2).clipped);
  for (double a : {-2.0, -0.5, 0.0, 0.7, 3.0}) EXPECT_EQ(clipped_surrogate(1.0, a, 0.2).loss, -a);
  EXPECT_NEAR(clipped_surrogate(0.5, -1.0, 0.2).loss, 0.8, 1e-15);
}

TEST(KlK3, HandValues) {
  EXPECT_EQ(kl_k3(0.0, 0.0), 0.0);
  EXPECT_NEAR(kl_k3(1.0, 0.0), std::exp(1.0) - 2.0, 1e-15);
  EXPECT_EQ(kl_k3(50.0, 0.0), kl_k3(20.0, 0.0));
  EXPECT_EQ(kl_k3(0.0, 50.0), kl_k3(0.0, 20.0));
}

TEST(TotalLoss, HandValues) {
  const std::vector<std::uint8_t> m1{1};
  EXPECT_EQ(total_loss(std::vector<double>{-2.0}, std::vector<double>{0.0}, m1, 0.0).loss, -2.0);
  const std::vector<std::uint8_t> mask{1, 1, 0};
  const auto s = total_loss(std::vector<double>{1.0, 3.0, 100.0}, std::vector<double>{0.5, 0.5, 9.0}, mask, 0.1);
  EXPECT_DOUBLE_EQ(s.loss, (1.0 + 0.05 + 3.0 + 0.05) / 2);
  EXPECT_EQ(s.valid_tokens, 2u);
  EXPECT_THROW(total_loss(std::vector<double>{1.0}, std::vector<double>{1.0}, std::vector<std::uint8_t>{0}, 0.0),
               ConfigError);
}

TEST(GrpoLoss, IdentityCasesAndZeroGradient) {
  auto gc = random_gradient_case(7);
  // Evaluate at the generation policy: r = 1, pi_theta = pi_ref.
  PolicyParams gen = gc.policy;
  for (auto& grp : gc.groups) grp.gen_logprobs = logprobs(gen, grp);
  LossConfig cfg;
  cfg.kl_coef = 0.01;
  const auto res = grpo_loss(gen, gen, gc.groups, gc.adv, cfg);
  EXPECT_EQ(res.summary.mean_kl, 0.0);
  EXPECT_EQ(res.summary.clip_fraction, 0.0);

  // r = 1, beta = 0: loss is minus the token-weighted mean advantage.
  double num = 0;
  int tokens = 0;
  for (std::size_t i = 0; i < gc.groups.size(); ++i)
    for (int g = 0; g < gc.groups[i].group_size; ++g) {
      num += gc.adv_rows[i][g] * gc.groups[i].lengths[g];
      tokens += gc.groups[i].lengths[g];
    }
  EXPECT_NEAR(res.summary.loss, -num / tokens, 1e-12);

  auto zero = gc.adv;
  for (auto& a : zero.advantages.values) a = 0.0;
  cfg.kl_coef = 0.0;
  const auto z = grpo_loss(gc.policy, gc.reference, gc.groups, zero, cfg);
  EXPECT_EQ(z.summary.loss, 0.0);
  for (double g : z.grad) EXPECT_EQ(g, 0.0);
}

TEST(GrpoLoss, MatchesIndependentOracleValue) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto gc = random_gradient_case(100 + s, 3, 4, 4, 7, 3);
    for (double beta : {0.0, 0.05}) {
      LossConfig cfg;
      cfg.kl_coef = beta;
      OracleLossOptions o;
      o.beta = beta;
      const std::vector<double> th(gc.policy.theta().begin(), gc.policy.theta().end());
      const std::vector<double> rf(gc.reference.theta().begin(), gc.reference.theta().end());
      EXPECT_NEAR(grpo_loss_value(gc.policy, gc.reference, gc.groups, gc.adv, cfg),
                  oracle_loss(th, rf, gc.policy, gc.groups, gc.adv_rows, o), 1e-12);
    }
  }
}

TEST(GrpoLoss, GradientMatchesFiniteDifferences) {
  int clipped_cases = 0;
  for (double beta : {0.0, 0.01}) {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto gc = random_gradient_case(1000 + s);
      LossConfig cfg;
      cfg.kl_coef = beta;
      OracleLossOptions o;
      o.beta = beta;
      const auto res = grpo_loss(gc.policy, gc.reference, gc.groups, gc.adv, cfg);
      if (res.summary.clip_fraction > 0) ++clipped_cases;
      const auto fd = central_difference(gc, o, 1e-5);
      EXPECT_LE(max_relative_error(res.grad, fd, 1e-6), 1e-4) << "seed " << s << " beta " << beta;
    }
  }
  EXPECT_GT(clipped_cases, 0);
}

TEST(GrpoLoss, VariantGradientsMatchFiniteDifferences) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto gc = random_gradient_case(2000 + s);
    for (int variant = 0; variant < 2; ++variant) {
      LossConfig cfg;
      cfg.kl_coef = 0.01;
      OracleLossOptions o;
      o.beta = 0.01;
      if (variant == 0) {
        cfg.dual_clip_c = 3.0;
        o.dual_c = 3.0;
      } else {
        cfg.sequence_is = true;
        o.sequence_is = true;
      }
      const auto res = grpo_loss(gc.policy, gc.reference, gc.groups, gc.adv, cfg);
      const std::vector<double> th(gc.policy.theta().begin(), gc.policy.theta().end());
      const std::vector<double> rf(gc.reference.theta().begin(), gc.reference.theta().end());
      EXPECT_NEAR(res.summary.loss, oracle_loss(th, rf, gc.policy, gc.groups, gc.adv_rows, o), 1e-12);
      EXPECT_LE(max_relative_error(res.grad, central_difference(gc, o, 1e-5), 1e-6), 1e-4)
          << "seed " << s << " variant " << variant;
    }
  }
}

TEST(GrpoLoss, TruncatedIsOutsideBandHasNoPolicyGradient) {
  auto gc = random_gradient_case(55);
  LossConfig cfg;
  cfg.kl_coef = 0.0;
  cfg.truncated_is = TruncationBand{0.999999, 1.000001, TruncationMode::Mask};
  const auto res = grpo_loss(gc.policy, gc.reference, gc.groups, gc.adv, cfg);
  EXPECT_EQ(res.summary.loss, 0.0);
  for (double g : res.grad) EXPECT_EQ(g, 0.0);
}

TEST(Variants, DualClip) {
  EXPECT_EQ(dual_clip(1.2, -1.0, 3.0), 3.0);
  EXPECT_EQ(dual_clip(1.0, -1.0, 3.0), 3.0);
  EXPECT_EQ(dual_clip(-0.7, 0.5, 3.0), -0.7);
  EXPECT_EQ(dual_clip(-2.0, 2.0, 3.0), -2.0);
}

TEST(Variants, SequenceIs) {
  const std::vector<std::uint8_t> m2{1, 1}, m3{1, 1, 1};
  EXPECT_EQ(sequence_is_ratio(std::vector<double>{1, 1, 1}, m3), 1.0);
  EXPECT_NEAR(sequence_is_ratio(std::vector<double>{4, 0.25}, m2), 1.0, 1e-15);
  EXPECT_NEAR(sequence_is_ratio(std::vector<double>{2, 2, 2}, m3), 2.0, 1e-15);
  EXPECT_NEAR(sequence_is_ratio(std::vector<double>{2, 2, 1000}, std::vector<std::uint8_t>{1, 1, 0}), 2.0, 1e-15);
}

TEST(Variants, TruncatedIs) {
  const TruncationBand cap{0.5, 2.0, TruncationMode::Cap};
  const TruncationBand mask{0.5, 2.0, TruncationMode::Mask};
  EXPECT_EQ(truncated_is(5.0, cap), 2.0);
  EXPECT_EQ(truncated_is(5.0, mask), 0.0);
  EXPECT_EQ(truncated_is(1.3, cap), 1.3);
  EXPECT_EQ(truncated_is(1.3, mask), 1.3);
  EXPECT_EQ(truncated_is(std::vector<double>{0.1, 1.0, 3.0}, cap), (std::vector<double>{0.5, 1.0, 2.0}));
}

TEST(Variants, DynamicSampling) {
  using Cand = std::pair<int, std::vector<double>>;
  auto rewards = [](const Cand& c) -> const std::vector<double>& { return c.second; };

  std::vector<Cand> stream{{0, {1, 0}}, {1, {0.5, 0.2}}, {2, {0.3, 0.9}}};
  std::size_t k = 0;
  auto kept = filter_informative([&] { return stream[k++]; }, rewards, 3, 10);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[2].first, 2);

  stream = {{0, {1, 0}}, {1, {0.4, 0.4}}, {2, {0.3, 0.9}}, {3, {0, 1}}};
  k = 0;
  kept = filter_informative([&] { return stream[k++]; }, rewards, 3, 10);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].first, 0);
  EXPECT_EQ(kept[1].first, 2);
  EXPECT_EQ(kept[2].first, 3);

  std::size_t draws = 0;
  EXPECT_THROW(filter_informative(
                   [&] {
                     ++draws;
                     return Cand{0, {0.5, 0.5}};
                   },
                   rewards, 2, 7),
               DynamicSamplingExhausted);
  EXPECT_EQ(draws, 7u);
}

TEST(Variants, RewardShaping) {
  ShapingConfig cfg;
  cfg.alpha_stop = 0.5;
  EXPECT_EQ(shape_reward(0.8, 3, true, 16, cfg), 0.8);
  EXPECT_NEAR(shape_reward(0.8, 16, false, 16, cfg), 0.4, 1e-15);
  cfg.alpha_stop = 0.0;
  EXPECT_EQ(shape_reward(0.8, 16, false, 16, cfg), 0.0);

  ShapingConfig len;
  len.length_penalty = 0.5;
  EXPECT_EQ(shape_reward(1.0, 18, true, 20, len), 1.0);  // ramp starts at 18
  EXPECT_NEAR(shape_reward(1.0, 19, true, 20, len), 0.75, 1e-15);
  EXPECT_NEAR(shape_reward(1.0, 20, true, 20, len), 0.5, 1e-15);
}
