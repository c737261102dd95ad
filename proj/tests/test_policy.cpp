#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace rgrpo;

TEST(SampleGroup, UniformLogitsGiveUniformFrequencies) {
  // Four sampleable tokens: t00, t01, t02, <stop> (pad is outside the support).
  const PolicyParams p(Vocab::synthetic(5), 1, 1);
  const int n = 100000;
  const auto grp = sample_group(p, 0, n, 42);
  std::vector<int> counts(4, 0);
  for (int g = 0; g < n; ++g) {
    ASSERT_EQ(grp.lengths[g], 1);
    const int tok = grp.tokens[grp.at(g, 0)];
    ASSERT_NE(tok, p.vocab().pad);
    counts[static_cast<std::size_t>(tok)]++;
  }
  double chi2 = 0;
  for (int c : counts) chi2 += (c - n / 4.0) * (c - n / 4.0) / (n / 4.0);
  EXPECT_LT(chi2, 16.27);  // df = 3, p = 0.001
}

TEST(SampleGroup, DominantStopGivesLengthOne) {
  PolicyParams p(Vocab::synthetic(8), 2, 6);
  for (int t = 0; t < 6; ++t) p.logits(1, t)[p.vocab().stop] = 1e9;
  const auto grp = sample_group(p, 1, 64, 1);
  for (int l : grp.lengths) EXPECT_EQ(l, 1);
}

TEST(SampleGroup, DeterministicPerSeedAndRequiresTwo) {
  PolicyParams p(Vocab::synthetic(10), 3, 5);
  Rng rng(1);
  for (auto& x : p.theta()) x = rng.normal();
  const auto a = sample_group(p, 2, 16, 77);
  const auto b = sample_group(p, 2, 16, 77);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.gen_logprobs, b.gen_logprobs);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_NE(a.tokens, sample_group(p, 2, 16, 78).tokens);
  EXPECT_THROW(sample_group(p, 0, 1, 1), ConfigError);
  EXPECT_THROW(sample_group(p, 3, 4, 1), ConfigError);
}

TEST(Logprobs, SelfConsistentWithSampling) {
  PolicyParams p(Vocab::synthetic(12), 2, 7, 0.8);
  Rng rng(4);
  for (auto& x : p.theta()) x = 2 * rng.normal();
  const auto grp = sample_group(p, 1, 32, 9);
  const auto lp = logprobs(p, grp);
  for (std::size_t k = 0; k < lp.size(); ++k) {
    if (grp.mask[k]) {
      ASSERT_NEAR(lp[k], grp.gen_logprobs[k], 1e-12);
    } else {
      ASSERT_EQ(grp.tokens[k], p.vocab().pad);
    }
  }
}

TEST(Logprobs, ClosedForms) {
  // Sampleable support {a, <stop>}.
  PolicyParams p(Vocab::from_words({"a"}), 1, 1);
  SampledGroup grp{0, 2, 1, {0, 1}, {0, 0}, {1, 1}, {1, 1}};
  auto lp = logprobs(p, grp);
  EXPECT_NEAR(lp[0], std::log(0.5), 1e-15);
  EXPECT_NEAR(lp[1], std::log(0.5), 1e-15);
  p.logits(0, 0)[0] = 1.0;
  lp = logprobs(p, grp);
  EXPECT_NEAR(lp[0], -std::log1p(std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(lp[1], -1.0 - std::log1p(std::exp(-1.0)), 1e-15);

  SampledGroup bad = grp;
  bad.tokens[0] = p.vocab().pad;
  EXPECT_THROW(logprobs(p, bad), ConfigError);
  bad.tokens[0] = 17;
  EXPECT_THROW(logprobs(p, bad), ConfigError);
}

TEST(Logprobs, RowsNormalize) {
  PolicyParams p(Vocab::synthetic(20), 2, 3, 1.7);
  Rng rng(8);
  for (auto& x : p.theta()) x = 5 * rng.normal();
  for (int c = 0; c < 2; ++c)
    for (int t = 0; t < 3; ++t) {
      double z = 0;
      for (double l : p.log_softmax(c, t)) z += std::exp(l);
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
}

TEST(Logprobs, GradientMatchesFiniteDifference) {
  PolicyParams p(Vocab::synthetic(6), 1, 2, 0.7);
  Rng rng(12);
  for (auto& x : p.theta()) x = rng.normal();
  const int tok = 2;
  std::vector<double> grad(p.theta().size(), 0.0);
  accumulate_logprob_grad(p, 0, 1, tok, 1.0, grad);
  const double h = 1e-6;
  for (std::size_t k = 0; k < grad.size(); ++k) {
    auto q = p;
    q.theta()[k] += h;
    const double up = q.log_softmax(0, 1)[tok];
    q.theta()[k] -= 2 * h;
    const double dn = q.log_softmax(0, 1)[tok];
    EXPECT_NEAR(grad[k], (up - dn) / (2 * h), 1e-8) << "k=" << k;
  }
}

TEST(Snapshot, IndependentOfLaterUpdates) {
  PolicyParams p(Vocab::synthetic(6), 1, 3);
  const auto snap = snapshot(p);
  const auto grp = sample_group(snap, 0, 4, 3);
  const auto before = logprobs(snap, grp);
  for (auto& x : p.theta()) x += 1.0;
  p.logits(0, 0)[0] = 9.0;
  EXPECT_EQ(logprobs(snap, grp), before);
}

TEST(Policy, JsonRoundTrip) {
  PolicyParams p(Vocab::synthetic(7), 2, 3, 0.9);
  Rng rng(2);
  for (auto& x : p.theta()) x = rng.normal();
  EXPECT_EQ(policy_from_json(nlohmann::json::parse(to_json(p).dump())), p);
}

TEST(SyntheticTasks, ShapeAndOptimalResponses) {
  const auto tasks = make_synthetic_tasks(100, Difficulty::Medium, 5);
  std::set<std::string> hashes;
  SyntheticEnv env;
  const auto vocab = Vocab::synthetic(env.vocab_size);
  OracleJudge judge;
  for (const auto& t : tasks) {
    hashes.insert(t.instance.doc_hash);
    const auto m = t.instance.rubric.criterion_count();
    EXPECT_GE(m, 3u);
    EXPECT_LE(m, 10u);
    EXPECT_TRUE(validate_rubric(t.instance.rubric, QaPolicy{}).accepted());
    EXPECT_LT(static_cast<int>(t.optimal_tokens.size()), env.max_len + 1);
    const auto resp = render_response(vocab, t.optimal_tokens);
    EXPECT_DOUBLE_EQ(score_response(t.instance, resp, judge).reward.value, 1.0);
    EXPECT_EQ(score_response(t.instance, "", judge).reward.value, 0.0);
  }
  EXPECT_EQ(hashes.size(), 100u);
  const auto again = make_synthetic_tasks(100, Difficulty::Medium, 5);
  EXPECT_EQ(again.front().instance, tasks.front().instance);
}
