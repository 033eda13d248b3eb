#include <gtest/gtest.h>

#include "d2evo/config.hpp"
#include "support.hpp"

using namespace d2evo;
using namespace d2evo::testing;

namespace {

std::string error_of(const Json& file, const std::vector<std::string>& overrides = {}) {
  try {
    load_config_json(file, overrides);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, Defaults) {
  const auto c = load_config_json(Json::object());
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.T, 3);
  EXPECT_EQ(c.dataset.real_count, 3180);
  EXPECT_EQ(c.difficulty.n_rollouts, 32);
  EXPECT_EQ(c.difficulty.band_low, 0.4);
  EXPECT_EQ(c.difficulty.band_high, 0.8);
  EXPECT_EQ(c.questioner.n_votes, 10);
  EXPECT_EQ(c.questioner.learning_rate, 2.0);
  EXPECT_EQ(c.grpo.learning_rate, 0.05);
  EXPECT_EQ(c.questioner.reward.tau_low, 0.4);
  EXPECT_EQ(c.questioner.reward.tau_high, 0.6);
  EXPECT_EQ(c.grpo.clip_eps, 0.2);
  EXPECT_EQ(c.grpo.kl_beta, 0.01);
  EXPECT_EQ(c.grpo.group_size, 8);
  EXPECT_EQ(c.loop.empty_anchor_fallback, "widen");
  EXPECT_EQ(c.endpoint.token_env, "D2EVO_API_TOKEN");
  EXPECT_EQ(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, RoundTripThroughEffectiveJson) {
  auto c = load_config_json(Json{{"seed", 17}, {"grpo", {{"kl_beta", 0.05}}}});
  EXPECT_EQ(load_config_json(to_json(c)).seed, 17u);
  EXPECT_EQ(to_json(load_config_json(to_json(c))), to_json(c));
  EXPECT_NE(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, OverridesApplyAndEcho) {
  const auto c = load_config_json(Json{{"grpo", {{"clip_eps", 0.1}}}}, {"grpo.clip_eps=0.3", "loop.empty_anchor_fallback=halt"});
  EXPECT_EQ(c.grpo.clip_eps, 0.3);
  EXPECT_EQ(to_json(c)["grpo"]["clip_eps"], 0.3);
  EXPECT_EQ(c.loop.empty_anchor_fallback, "halt");
}

TEST(Config, BandOrderNamesBothKeys) {
  const auto msg = error_of(Json{{"difficulty", {{"band_low", 0.8}, {"band_high", 0.4}}}});
  EXPECT_NE(msg.find("band_low"), std::string::npos) << msg;
  EXPECT_NE(msg.find("band_high"), std::string::npos) << msg;
}

TEST(Config, UnknownKeySuggestsNearest) {
  const auto msg = error_of(Json{{"grpo", {{"clip_esp", 0.2}}}});
  EXPECT_NE(msg.find("grpo.clip_esp"), std::string::npos) << msg;
  EXPECT_NE(msg.find("grpo.clip_eps"), std::string::npos) << msg;
  EXPECT_NE(error_of(Json{{"sed", 1}}).find("'seed'"), std::string::npos);
}

TEST(Config, TypeMismatch) {
  const auto msg = error_of(Json{{"T", "three"}});
  EXPECT_NE(msg.find("'T'"), std::string::npos) << msg;
  EXPECT_NE(msg.find("integer"), std::string::npos) << msg;
  EXPECT_FALSE(error_of(Json{{"seed", -1}}).empty());
  EXPECT_FALSE(error_of(Json{{"grpo", 3}}).empty());
}

TEST(Config, AggregatesEveryProblem) {
  const auto msg = error_of(Json{{"T", -1},
                                 {"grpo", {{"clip_eps", 1.5}}},
                                 {"bogus", true},
                                 {"loop", {{"empty_anchor_fallback", "retry"}}}},
                            {"difficulty.n_rollouts=0", "no-equals-sign"});
  for (const char* needle : {"T must", "clip_eps", "bogus", "empty_anchor_fallback",
                             "n_rollouts", "no-equals-sign"})
    EXPECT_NE(msg.find(needle), std::string::npos) << needle << "\n" << msg;
  EXPECT_NE(msg.find("6 problems"), std::string::npos) << msg;
}

TEST(Config, FileErrors) {
  TempDir dir;
  EXPECT_THROW(load_config(dir / "missing.json"), ConfigError);
  io::write_atomic(dir / "bad.json", "{ nope");
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  io::write_atomic(dir / "arr.json", "[1, 2]");
  EXPECT_THROW(load_config(dir / "arr.json"), ConfigError);
  io::write_atomic(dir / "ok.json", R"({"T": 5, "dataset": {"real_count": 40}})");
  const auto c = load_config(dir / "ok.json", {"T=2"});
  EXPECT_EQ(c.T, 2);
  EXPECT_EQ(c.dataset.real_count, 40);
  EXPECT_EQ(load_config(std::nullopt).T, 3);
}

TEST(Config, RandomValidConfigsRoundTrip) {
  Rng rng(31);
  for (int i = 0; i < 300; ++i) {
    const double lo = 0.05 + 0.4 * rng.uniform();
    Json j{{"seed", rng.next() >> 1},
           {"T", rng.uniform_int(0, 9)},
           {"difficulty", {{"band_low", lo}, {"band_high", lo + 0.05 + 0.4 * rng.uniform()}}},
           {"grpo", {{"clip_eps", 0.05 + 0.9 * rng.uniform()}, {"group_size", rng.uniform_int(2, 16)}}},
           {"questioner", {{"n_votes", rng.uniform_int(1, 20)}}}};
    const auto c = load_config_json(j);
    ASSERT_EQ(to_json(load_config_json(to_json(c))), to_json(c));
    ASSERT_EQ(c.grpo.group_size, j["grpo"]["group_size"].get<int>());
  }
}
