#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "d2evo/grpo.hpp"
#include "support.hpp"

using namespace d2evo;
using namespace d2evo::testing;

namespace {

std::vector<double> random_rewards(Rng& rng, int G) {
  std::vector<double> r(static_cast<std::size_t>(G));
  const int style = rng.uniform_int(0, 3);
  for (auto& x : r) {
    switch (style) {
      case 0: x = rng.uniform(); break;
      case 1: x = rng.bernoulli(0.5) ? 1.0 : 0.0; break;
      case 2: x = 100.0 * rng.normal(); break;
      default: x = 0.25 * rng.uniform_int(0, 4); break;
    }
  }
  return r;
}

// A group sampled from `old` whose ratios are then moved by perturbing the
// current parameters.
GradientInstance random_instance(Rng& rng, int V, int L, int G, double beta, double drift) {
  GradientInstance in;
  PolicyParams old = random_policy(V, L, 1, rng);
  in.params = old;
  for (double& z : in.params.raw()) z += drift * rng.normal();
  in.reference = old;
  for (double& z : in.reference.raw()) z += 0.5 * rng.normal();
  in.config.kl_beta = beta;
  in.config.clip_eps = 0.2;
  in.group.prompt_context = 0;
  for (int i = 0; i < G; ++i) {
    in.group.sequences.push_back(sample(old, 0, 1.0, rng.next(), {0, rng.bernoulli(0.5) ? 0 : -1}));
    in.group.rewards.push_back(rng.uniform());
  }
  return in;
}

SampledSequence one_token(const PolicyParams& p, int tok, double ratio) {
  SampledSequence s;
  s.tokens = {tok};
  s.logp_old = {sequence_logp(p, 0, s.tokens)[0] - std::log(ratio)};
  return s;
}

}  // namespace

TEST(Advantage, Examples) {
  const std::vector<double> a{1, 0, 1, 0};
  EXPECT_EQ(group_advantage(a, 1e-6), (std::vector<double>{1, -1, 1, -1}));
  const std::vector<double> flat{0.7, 0.7, 0.7};
  EXPECT_EQ(group_advantage(flat, 1e-6), (std::vector<double>{0, 0, 0}));
  const std::vector<double> one{1.0};
  EXPECT_THROW(group_advantage(one, 1e-6), ValidationError);
}

TEST(Advantage, CenteredAndUnitVariance) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto r = random_rewards(rng, rng.uniform_int(2, 16));
    const auto a = group_advantage(r, 1e-6);
    const double n = static_cast<double>(r.size());
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
    double var = 0.0;
    for (double x : r) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / n);
    const double s = std::accumulate(a.begin(), a.end(), 0.0);
    double sq = 0.0;
    for (double x : a) sq += x * x;
    if (sd >= 1e-6) {
      ASSERT_NEAR(s, 0.0, 1e-9);
      ASSERT_NEAR(sq / n, 1.0, 1e-9);
    } else if (std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; })) {
      for (double x : a) ASSERT_EQ(x, 0.0);
    }
  }
}

TEST(Kl, ValuesAndSign) {
  EXPECT_EQ(kl_estimate(-0.3, -0.3), 0.0);
  EXPECT_NEAR(kl_estimate(0.0, std::log(0.5)), 0.5 - std::log(0.5) - 1.0, 1e-15);
  EXPECT_NEAR(kl_estimate(std::log(0.5), 0.0), 0.30685281944005469, 1e-12);
  Rng rng(2);
  for (int i = 0; i < 1000000; ++i) {
    const double a = -20.0 * rng.uniform(), b = -20.0 * rng.uniform();
    ASSERT_GE(kl_estimate(a, b), 0.0);
  }
}

TEST(Kl, UnbiasedForCategoricalKl) {
  const std::vector<double> pt{0.5, 0.3, 0.2}, pr{0.2, 0.5, 0.3};
  double exact = 0.0;
  for (int i = 0; i < 3; ++i) exact += pt[i] * std::log(pt[i] / pr[i]);
  Rng rng(3);
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto k = rng.categorical(pt);
    const double x = kl_estimate(std::log(pt[k]), std::log(pr[k]));
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
  EXPECT_LT(std::abs(mean - exact), 3 * sd / std::sqrt(double(n)));
}

TEST(Objective, ClipExamples) {
  PolicyParams p(3, 1, 1);
  GrpoConfig cfg;
  cfg.kl_beta = 0.0;
  cfg.clip_eps = 0.2;
  // Rewards [1, 0] give advantages [+1, -1]; the second sequence sits at
  // ratio 1 and contributes -1.
  RolloutGroup g;
  g.sequences = {one_token(p, 0, 1.5), one_token(p, 1, 1.0)};
  g.rewards = {1.0, 0.0};
  EXPECT_NEAR(2.0 * grpo_objective(g, p, p, cfg) + 1.0, 1.2, 1e-12);

  g.sequences = {one_token(p, 0, 1.0), one_token(p, 1, 0.5)};
  EXPECT_NEAR(2.0 * grpo_objective(g, p, p, cfg) - 1.0, -0.8, 1e-12);

  g.sequences = {one_token(p, 0, 1.0), one_token(p, 1, 1.0)};
  EXPECT_NEAR(grpo_objective(g, p, p, cfg), 0.0, 1e-15);
}

TEST(Objective, MissingLogpOldRaises) {
  PolicyParams p(3, 2, 1);
  RolloutGroup g;
  g.sequences = {one_token(p, 0, 1.0), one_token(p, 1, 1.0)};
  g.sequences[0].logp_old.clear();
  g.rewards = {1, 0};
  EXPECT_THROW(grpo_objective(g, p, p, GrpoConfig{}), ValidationError);
  g.sequences[0] = one_token(p, 0, 1.0);
  g.rewards = {1};
  EXPECT_THROW(grpo_gradient(g, p, p, GrpoConfig{}), ValidationError);
}

TEST(Gradient, ZeroForEqualRewardsAtReference) {
  Rng rng(4);
  const auto p = random_policy(4, 2, 1, rng);
  RolloutGroup g;
  for (int i = 0; i < 4; ++i) {
    g.sequences.push_back(sample(p, 0, 1.0, rng.next()));
    g.rewards.push_back(0.5);
  }
  for (double x : grpo_gradient(g, p, p, GrpoConfig{})) ASSERT_EQ(x, 0.0);
}

TEST(Gradient, MatchesFiniteDifferences) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const int V = rng.uniform_int(2, 4), L = rng.uniform_int(1, 2);
    const auto in = random_instance(rng, V, L, 4, 0.05, 0.3);
    ASSERT_LT(check_gradient(in, 1e-5), 1e-4) << "instance " << i;
  }
}

TEST(Gradient, KlOnlyTermWhenAdvantagesVanish) {
  Rng rng(6);
  for (int i = 0; i < 20; ++i) {
    auto in = random_instance(rng, 3, 2, 4, 0.5, 0.3);
    in.group.rewards.assign(4, 1.0);
    ASSERT_LT(check_gradient(in, 1e-5), 1e-4);
    // Objective equals -beta times the mean per-token KL.
    double kl = 0.0;
    for (const auto& s : in.group.sequences) {
      const auto a = sequence_logp(in.params, 0, s.tokens), b = sequence_logp(in.reference, 0, s.tokens);
      double t = 0.0;
      for (std::size_t j = 0; j < a.size(); ++j) t += kl_estimate(a[j], b[j]);
      kl += t / a.size();
    }
    ASSERT_NEAR(grpo_objective(in.group, in.params, in.reference, in.config), -0.5 * kl / 4, 1e-12);
  }
}

// With beta = 0 and theta = theta_old, the gradient is the vanilla
// policy gradient: sum_i A_i / (G |y_i|) sum_t grad log pi(y_t).
TEST(Gradient, VanillaPolicyGradientAtOldParameters) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int V = 4, L = 3;
    const auto p = random_policy(V, L, 1, rng);
    RolloutGroup g;
    for (int i = 0; i < 5; ++i) {
      g.sequences.push_back(sample(p, 0, 1.0, rng.next()));
      g.rewards.push_back(rng.uniform());
    }
    GrpoConfig cfg;
    cfg.kl_beta = 0.0;
    const auto got = grpo_gradient(g, p, p, cfg);
    const auto adv = group_advantage(g.rewards, cfg.std_floor);
    std::vector<double> want(p.raw().size(), 0.0);
    for (std::size_t i = 0; i < g.sequences.size(); ++i) {
      const auto& s = g.sequences[i];
      int prev = V;
      for (std::size_t t = 0; t < s.tokens.size(); ++t) {
        const auto q = slot_probs(p, 0, static_cast<int>(t), prev);
        const auto off = p.slot_offset(0, static_cast<int>(t), prev);
        for (int j = 0; j < V; ++j)
          want[off + j] += adv[i] / (5.0 * s.tokens.size()) * ((j == s.tokens[t]) - q[static_cast<std::size_t>(j)]);
        prev = s.tokens[t];
      }
    }
    for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(got[k], want[k], 1e-12);
  }
}

TEST(Gradient, ActiveClipZeroesSurrogateTerm) {
  PolicyParams p(3, 1, 1);
  GrpoConfig cfg;
  cfg.kl_beta = 0.0;
  RolloutGroup g;
  g.sequences = {one_token(p, 0, 1.5), one_token(p, 1, 1.0)};
  g.rewards = {1.0, 0.0};
  const auto grad = grpo_gradient(g, p, p, cfg);
  // Only the unclipped second sequence moves logits; token 1 goes down.
  const auto off = p.slot_offset(0, 0, p.start_token());
  EXPECT_NEAR(grad[off + 1], -1.0 / 3.0, 1e-15);  // A = -1, G = 2: -(1 - 1/3) / 2
  EXPECT_NEAR(grad[off] + grad[off + 1] + grad[off + 2], 0.0, 1e-15);
  GradientInstance in{g, p, p, cfg};
  const auto mask = unclipped_mask(in);
  EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 0);  // both share the one slot
}

// Inside the trust region |log k| < log(1 + eps) the two branches agree.
TEST(Gradient, ClipInactiveNearOrigin) {
  Rng rng(8);
  const double eps = 0.2;
  for (int i = 0; i < 100000; ++i) {
    const double lk = (2.0 * rng.uniform() - 1.0) * std::log(1.0 + eps) * 0.999;
    const double k = std::exp(lk), a = 10.0 * rng.normal();
    ASSERT_EQ(std::min(k * a, std::clamp(k, 1 - eps, 1 + eps) * a), k * a);
  }
}

TEST(Step, Examples) {
  Rng rng(9);
  auto p = random_policy(4, 2, 1, rng);
  const auto before = p.raw();
  const std::vector<double> zero(p.raw().size(), 0.0);
  step(p, zero, GrpoConfig{});
  EXPECT_EQ(p.raw(), before);
  EXPECT_EQ(p.version(), 1u);

  GrpoConfig lr0;
  lr0.learning_rate = 0.0;
  std::vector<double> g(p.raw().size(), 1.0);
  step(p, g, lr0);
  EXPECT_EQ(p.raw(), before);

  EXPECT_THROW(step(p, std::vector<double>(3, 0.0), GrpoConfig{}), ValidationError);
  PolicyParams other(5, 2, 1);
  RolloutGroup grp;
  grp.sequences = {one_token(p, 0, 1.0), one_token(p, 1, 1.0)};
  grp.rewards = {1, 0};
  EXPECT_THROW(grpo_gradient(grp, p, other, GrpoConfig{}), ValidationError);
}

TEST(Step, BanditAscentRaisesRewardedToken) {
  PolicyParams p(3, 1, 1);
  GrpoConfig cfg;
  cfg.learning_rate = 0.5;
  std::vector<double> scratch;
  const auto ref = p;
  Rng rng(10);
  const double p0 = slot_probs(p, 0, 0, 3)[2];
  for (int it = 0; it < 200; ++it) {
    RolloutGroup g;
    for (int i = 0; i < 8; ++i) {
      g.sequences.push_back(sample(p, 0, 1.0, rng.next()));
      g.rewards.push_back(g.sequences.back().tokens[0] == 2 ? 1.0 : 0.0);
    }
    grpo_update(p, g, ref, cfg, scratch);
  }
  EXPECT_GT(slot_probs(p, 0, 0, 3)[2], std::max(0.9, p0));
  EXPECT_EQ(p.version(), 200u);
}

TEST(Checker, QuadraticIsExact) {
  Rng rng(11);
  const int n = 30;
  std::vector<double> A(n * n), x(n);
  for (auto& v : A) v = rng.normal();
  for (auto& v : x) v = rng.normal();
  auto f = [&](const std::vector<double>& y) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) s += 0.5 * y[i] * A[i * n + j] * y[j];
    return s;
  };
  std::vector<double> g(n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g[i] += 0.5 * (A[i * n + j] + A[j * n + i]) * x[j];
  EXPECT_LT(check_gradient(f, x, g, 1e-3), 1e-9);
  EXPECT_THROW(check_gradient(f, x, g, 1e-2), ValidationError);
  EXPECT_THROW(check_gradient(f, x, g, 1e-9), ValidationError);
}

TEST(Checker, ClippedPointNeedsMask) {
  Rng rng(12);
  int masked_some = 0;
  for (int i = 0; i < 30; ++i) {
    auto in = random_instance(rng, 3, 2, 4, 0.02, 1.5);  // large drift: many ratios clip
    const auto mask = unclipped_mask(in);
    masked_some += std::count(mask.begin(), mask.end(), false) > 0;
    ASSERT_LT(check_gradient(in, 1e-5), 1e-4);
  }
  EXPECT_GT(masked_some, 0);
}

TEST(SignalBound, Values) {
  EXPECT_DOUBLE_EQ(signal_bound(0.5, 1.0), 0.125);
  EXPECT_EQ(signal_bound(0.0, 0.3), 0.0);
  EXPECT_EQ(signal_bound(1.0, 0.3), 0.0);
  EXPECT_THROW(signal_bound(0.5, 0.0), ValidationError);
  EXPECT_THROW(signal_bound(1.5, 1.0), ValidationError);
  int best = 0;
  for (int i = 0; i <= 1000; ++i)
    if (signal_bound(i / 1000.0, 0.7) > signal_bound(best / 1000.0, 0.7)) best = i;
  EXPECT_EQ(best, 500);
}
