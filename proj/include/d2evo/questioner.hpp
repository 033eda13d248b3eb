#pragma once

// Anchor-conditioned question generation, vote-based scoring, and the
// questioner's GRPO pass.

#include <atomic>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/difficulty.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/grpo.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/pseudo_label.hpp"
#include "d2evo/rewards.hpp"

namespace d2evo {

struct QuestionerConfig {
  double temperature = 0.7;
  int n_votes = 10;
  // Own step size: questions are ~4x longer than solver answers and the
  // per-token averaging shrinks their steps, so the shared rate barely
  // moves the questioner.
  double learning_rate = 2.0;
  QuestionerRewardConfig reward;

  void validate() const {
    if (!(temperature > 0.0)) throw ValidationError("questioner.temperature must be > 0");
    if (n_votes < 1) throw ValidationError("questioner.n_votes must be >= 1");
    if (!(learning_rate >= 0.0)) throw ValidationError("questioner.learning_rate must be >= 0");
    reward.validate();
  }
};

struct GeneratedQuestion {
  SampledSequence seq;  // tokens + logp_old + context
  DecodeResult decoded;
  std::string anchor_id;
  std::optional<VoteTally> tally;  // absent for MALFORMED
  double solver_pass_rate_vs_vote = 0.0;
  double reward = 0.0;

  const std::vector<int>& tokens() const { return seq.tokens; }
};

inline std::vector<GeneratedQuestion> generate(const PolicyParams& questioner, const Lab& lab,
                                               const AnchorRecord& anchor, int count,
                                               double temperature, std::uint64_t seed) {
  if (count < 1) throw ValidationError("generate: count must be >= 1");
  std::vector<GeneratedQuestion> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    GeneratedQuestion q;
    q.seq = lab.questioner_sample(questioner, anchor.spec, temperature, rollout_seed(seed, i));
    q.decoded = task_decode(q.seq.tokens, lab.vocab());
    q.anchor_id = anchor.spec.id;
    out.push_back(std::move(q));
  }
  return out;
}

// Vote seed for a question: keyed by the problem, so the same problem gets
// the same tally wherever it shows up within one iteration.
inline std::uint64_t vote_seed(std::uint64_t seed, const TaskSpec& spec) {
  return task_seed(seed, 0x7073, spec);
}

inline VoteTally vote(const TaskSpec& spec, const SolverSource& solver, int n_votes,
                      std::uint64_t seed) {
  const auto answers = solver.answers(spec, n_votes, vote_seed(seed, spec));
  return majority_vote(answers);
}

// Fills tally, pass rate (agreement with the vote) and reward. MALFORMED
// questions get reward 0 without touching the solver. `solver_calls`
// counts questions sent to the solver.
inline void score_questions(std::span<GeneratedQuestion> questions, const SolverSource& solver,
                            int n_votes, const QuestionerRewardConfig& qc, std::uint64_t seed,
                            std::atomic<long>* solver_calls = nullptr) {
  for (auto& q : questions) {
    if (q.decoded.malformed()) {
      q.tally.reset();
      q.solver_pass_rate_vs_vote = 0.0;
      q.reward = questioner_reward(q.decoded, 0.0, qc);
      continue;
    }
    if (solver_calls) ++*solver_calls;
    q.tally = vote(*q.decoded.spec, solver, n_votes, seed);
    q.solver_pass_rate_vs_vote = q.tally->agreement();
    q.reward = questioner_reward(q.decoded, q.solver_pass_rate_vs_vote, qc);
  }
}

struct QuestionerStats {
  int groups = 0;
  int generated = 0;
  int malformed = 0;
  double mean_reward = 0.0;
  std::vector<GeneratedQuestion> history;  // every scored candidate, in order
};

// One epoch over the anchors, one ascent step per anchor group. The KL
// reference is the policy as it was when the pass started.
inline PolicyParams train_questioner(PolicyParams params, const Lab& lab,
                                     std::span<const AnchorRecord> anchors,
                                     const SolverSource& frozen_solver, const GrpoConfig& gc_shared,
                                     const QuestionerConfig& qc, std::uint64_t seed,
                                     QuestionerStats* stats = nullptr) {
  if (anchors.empty()) throw LoopError("train_questioner: refusing to train on an empty anchor set");
  qc.validate();
  GrpoConfig gc = gc_shared;
  gc.learning_rate = qc.learning_rate;
  gc.validate();
  const auto reference = set_reference(params);
  std::vector<double> scratch;
  double reward_sum = 0.0;
  QuestionerStats local;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    const auto& anchor = anchors[a];
    const auto gseed = derive_seed(seed, {0x9e4, fnv1a(anchor.spec.id)});
    auto qs = generate(params, lab, anchor, gc.group_size, qc.temperature, gseed);
    score_questions(qs, frozen_solver, qc.n_votes, qc.reward, seed);
    RolloutGroup g;
    g.prompt_context = lab.questioner_context(anchor.spec);
    for (auto& q : qs) {
      g.sequences.push_back(q.seq);
      g.rewards.push_back(q.reward);
      reward_sum += q.reward;
      ++local.generated;
      if (q.decoded.malformed()) ++local.malformed;
    }
    grpo_update(params, g, *reference, gc, scratch);
    ++local.groups;
    if (stats)
      for (auto& q : qs) local.history.push_back(std::move(q));
  }
  local.mean_reward = local.generated ? reward_sum / local.generated : 0.0;
  if (stats) *stats = std::move(local);
  return params;
}

inline nlohmann::json to_json(const GeneratedQuestion& q) {
  nlohmann::json j;
  j["anchor_id"] = q.anchor_id;
  j["tokens"] = q.seq.tokens;
  j["context"] = q.seq.context;
  j["policy_version"] = q.seq.policy_version;
  if (q.decoded.ok()) {
    const auto& s = *q.decoded.spec;
    nlohmann::json ops = nlohmann::json::array();
    for (Op o : s.ops) ops.push_back(std::string(to_string(o)));
    j["decoded"] = {{"id", s.id},       {"subject", std::string(to_string(s.subject))},
                    {"k", s.chain_length}, {"m", s.modulus},
                    {"operands", s.operands}, {"ops", ops}};
    j["malformed_at"] = nullptr;
  } else {
    j["decoded"] = "MALFORMED";
    j["malformed_at"] = q.decoded.error_pos;
  }
  if (q.tally) {
    j["vote"] = q.tally->winner ? nlohmann::json(*q.tally->winner) : nlohmann::json("NO_LABEL");
    j["vote_count"] = q.tally->winner_count;
    j["tie_broken"] = q.tally->tie_broken;
  } else {
    j["vote"] = nullptr;
    j["vote_count"] = 0;
    j["tie_broken"] = false;
  }
  j["solver_pass_rate_vs_vote"] = q.solver_pass_rate_vs_vote;
  j["reward"] = q.reward;
  return j;
}

}  // namespace d2evo
