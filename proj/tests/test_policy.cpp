#include <gtest/gtest.h>

#include <cmath>

#include "d2evo/lab.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/rewards.hpp"
#include "support.hpp"

using namespace d2evo;
using namespace d2evo::testing;

TEST(Sampling, PointMassIsDeterministic) {
  PolicyParams p(5, 4, 1);
  const std::vector<int> want{3, 1, 4, 0};
  int prev = p.start_token();
  for (int pos = 0; pos < 4; ++pos) {
    p.slot(0, pos, prev)[static_cast<std::size_t>(want[static_cast<std::size_t>(pos)])] = 1e9;
    prev = want[static_cast<std::size_t>(pos)];
  }
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto seq = sample(p, 0, 1.0, s);
    ASSERT_EQ(seq.tokens, want);
    for (double lp : seq.logp_old) ASSERT_EQ(lp, 0.0);
  }
  const auto lp = sequence_logp(p, 0, want);
  for (double v : lp) EXPECT_EQ(v, 0.0);
}

TEST(Sampling, UniformFrequencies) {
  PolicyParams p(4, 1, 1);
  std::array<int, 4> counts{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample(p, 0, 1.0, derive_seed(1, {static_cast<std::uint64_t>(i)})).tokens[0])];
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (int c : counts) EXPECT_LT(std::abs(c - n / 4.0), 3 * sigma);
  EXPECT_NEAR(sequence_logp(p, 0, std::vector<int>{2})[0], -std::log(4.0), 1e-15);
}

TEST(Sampling, StopTokenAndCap) {
  Rng rng(2);
  const auto p = random_policy(6, 8, 2, rng);
  for (std::uint64_t s = 0; s < 500; ++s) {
    const auto seq = sample(p, 1, 1.0, s, {5, 2});
    ASSERT_LE(seq.tokens.size(), 5u);
    for (std::size_t i = 0; i + 1 < seq.tokens.size(); ++i) ASSERT_NE(seq.tokens[i], 2);
    if (seq.tokens.size() < 5) ASSERT_EQ(seq.tokens.back(), 2);
  }
}

TEST(Sampling, ReplayMatchesRecordedLogp) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_policy(7, 6, 3, rng, 2.0);
    const double temp = trial % 2 ? 1.0 : 0.7;
    const auto seq = sample(p, trial % 3, temp, rng.next(), {0, 1});
    const auto lp = sequence_logp(p, seq.context, seq.tokens);
    ASSERT_EQ(lp.size(), seq.logp_old.size());
    for (std::size_t i = 0; i < lp.size(); ++i) ASSERT_NEAR(lp[i], seq.logp_old[i], 1e-12);
  }
}

TEST(Sampling, SameSeedSameSequence) {
  Rng rng(6);
  const auto p = random_policy(9, 10, 2, rng);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto a = sample(p, 1, 0.7, s);
    const auto b = sample(p, 1, 0.7, s);
    ASSERT_EQ(a.tokens, b.tokens);
    ASSERT_EQ(a.logp_old, b.logp_old);
  }
}

TEST(Sampling, InvalidInputs) {
  PolicyParams p(4, 3, 2);
  EXPECT_THROW(sample(p, 0, 0.0, 1), ValidationError);
  EXPECT_THROW(sample(p, 2, 1.0, 1), ValidationError);
  EXPECT_THROW(sequence_logp(p, 0, std::vector<int>{4}), ValidationError);
  EXPECT_THROW(sequence_logp(p, 0, std::vector<int>{0, 0, 0, 0}), ValidationError);
  EXPECT_THROW(PolicyParams(0, 1, 1), ValidationError);
}

TEST(Softmax, SlotsNormalize) {
  Rng rng(12);
  const auto p = random_policy(8, 4, 3, rng, 5.0);
  for (int c = 0; c < 3; ++c)
    for (int t = 0; t < 4; ++t)
      for (int prev = 0; prev <= 8; ++prev)
        for (double temp : {0.5, 1.0, 2.0}) {
          double s = 0.0;
          for (double q : slot_probs(p, c, t, prev, temp)) s += q;
          ASSERT_NEAR(s, 1.0, 1e-12);
        }
  // Single-token sequences: total probability one.
  double total = 0.0;
  for (int tok = 0; tok < 8; ++tok) total += std::exp(sequence_logp(p, 0, std::vector<int>{tok})[0]);
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Softmax, ExtremeLogitsStayFinite) {
  PolicyParams p(3, 1, 1);
  p.slot(0, 0, 3)[0] = 1e9;
  p.slot(0, 0, 3)[1] = -1e9;
  const auto q = slot_probs(p, 0, 0, 3);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], 0.0);
  for (double v : q) EXPECT_TRUE(std::isfinite(v));
}

namespace {

// Solver-only vocabulary: BEGIN END + answer numbers.
Vocabulary solver_vocab(int answers) {
  Vocabulary v;
  v.answer_count = answers;
  v.number_count = answers;
  v.question_tokens = false;
  return v;
}

}  // namespace

TEST(ExactPassRate, PointMassAndUniformAnswer) {
  const auto v = solver_vocab(5);
  const RolloutLimits lim{3, Vocabulary::kEnd};
  AnswerExtractor ex = [&](std::span<const int> t) { return solver_answer(t, v); };

  PolicyParams p(v.size(), 3, 1);
  for (int prev = 0; prev <= v.size(); ++prev) {
    p.slot(0, 0, prev)[Vocabulary::kBegin] = 1e9;
    p.slot(0, 2, prev)[Vocabulary::kEnd] = 1e9;
    p.slot(0, 1, prev)[static_cast<std::size_t>(v.number(3))] = 1e9;
  }
  EXPECT_EQ(exact_pass_rate(p, 0, lim, ex, 3), 1.0);
  EXPECT_EQ(exact_pass_rate(p, 0, lim, ex, 2), 0.0);

  // Frame pinned, answer uniform over the answer tokens only.
  for (int prev = 0; prev <= v.size(); ++prev) {
    auto s = p.slot(0, 1, prev);
    for (int tok = 0; tok < v.size(); ++tok) s[static_cast<std::size_t>(tok)] = v.is_answer(tok) ? 0.0 : -1e9;
  }
  for (int a = 0; a < 5; ++a) EXPECT_NEAR(exact_pass_rate(p, 0, lim, ex, a), 0.2, 1e-12);
}

TEST(ExactPassRate, SumsToOneOverTargets) {
  const auto v = solver_vocab(4);
  const RolloutLimits lim{3, Vocabulary::kEnd};
  AnswerExtractor any = [&](std::span<const int> t) -> std::optional<int> {
    return solver_answer(t, v) ? std::optional<int>(0) : std::nullopt;
  };
  AnswerExtractor all = [](std::span<const int>) -> std::optional<int> { return 0; };
  Rng rng(31);
  for (int i = 0; i < 20; ++i) {
    const auto p = random_policy(v.size(), 3, 1, rng);
    AnswerExtractor ex = [&](std::span<const int> t) { return solver_answer(t, v); };
    double s = 0.0;
    for (int a = 0; a < 4; ++a) s += exact_pass_rate(p, 0, lim, ex, a);
    EXPECT_NEAR(s, exact_pass_rate(p, 0, lim, any, 0), 1e-12);
    EXPECT_NEAR(exact_pass_rate(p, 0, lim, all, 0), 1.0, 1e-12);
  }
}

TEST(ExactPassRate, MatchesMonteCarlo) {
  const Lab lab;
  Rng rng(41);
  const int N = 4096;
  int inside = 0;
  for (int i = 0; i < 50; ++i) {
    const auto p = random_solver_policy(lab, rng);
    const auto spec = random_spec(rng);
    const double exact = lab.solver_exact_pass_rate(p, spec);
    const NativeSolver src(lab, snapshot(p));
    int hits = 0;
    for (const auto& a : src.answers(spec, N, rng.next()))
      if (a && *a == oracle_answer(spec)) ++hits;
    const double tol = 4.0 * std::sqrt(exact * (1.0 - exact) / N) + 1.0 / N;
    if (std::abs(hits / double(N) - exact) <= tol) ++inside;
  }
  EXPECT_EQ(inside, 50);
}

TEST(ExactPassRate, BudgetGuard) {
  PolicyParams p(14, 14, 1);
  AnswerExtractor ex = [](std::span<const int>) -> std::optional<int> { return 0; };
  EXPECT_THROW(exact_pass_rate(p, 0, {}, ex, 0), BudgetError);
  EXPECT_NO_THROW(exact_pass_rate(p, 0, {3, 1}, ex, 0));
}

TEST(Snapshot, ImmutableUnderUpdates) {
  Rng rng(50);
  auto p = random_policy(5, 3, 2, rng);
  const auto snap = snapshot(p);
  const auto bytes = to_json(*snap).dump();
  const auto ver = snap->version();
  for (double& z : p.raw()) z += 1.0;
  p.bump_version();
  EXPECT_EQ(to_json(*snap).dump(), bytes);
  EXPECT_EQ(snap->version(), ver);
  EXPECT_EQ(p.version(), ver + 1);
}

TEST(Snapshot, ReferenceHasZeroKl) {
  Rng rng(51);
  const auto p = random_policy(5, 3, 2, rng);
  const auto ref = set_reference(p);
  for (int i = 0; i < 100; ++i) {
    const auto seq = sample(p, i % 2, 1.0, rng.next());
    const auto a = sequence_logp(p, seq.context, seq.tokens);
    const auto b = sequence_logp(*ref, seq.context, seq.tokens);
    for (std::size_t t = 0; t < a.size(); ++t) ASSERT_EQ(std::expm1(b[t] - a[t]) - (b[t] - a[t]), 0.0);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir;
  Rng rng(60);
  auto p = random_policy(6, 4, 3, rng, 3.0);
  p.set_version(42);
  save_checkpoint(p, dir / "p.json");
  const auto q = load_checkpoint(dir / "p.json");
  EXPECT_EQ(p, q);
  EXPECT_EQ(q.version(), 42u);
}

TEST(Checkpoint, CorruptionIsReported) {
  TempDir dir;
  PolicyParams p(3, 2, 1);
  save_checkpoint(p, dir / "p.json");
  auto text = io::read_file(dir / "p.json");
  io::write_atomic(dir / "trunc.json", text.substr(0, text.size() / 2));
  EXPECT_THROW(load_checkpoint(dir / "trunc.json"), CorruptionError);
  EXPECT_THROW(load_checkpoint(dir / "nope.json"), CorruptionError);
  auto j = Json::parse(text);
  j["V"] = 4;
  io::write_atomic(dir / "shape.json", j.dump());
  EXPECT_THROW(load_checkpoint(dir / "shape.json"), CorruptionError);
}
