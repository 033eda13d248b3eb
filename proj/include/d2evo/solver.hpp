#pragma once

// Solver GRPO pass over a hybrid buffer, and held-out evaluation.

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/buffer.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/grpo.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/parallel.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/rewards.hpp"

namespace d2evo {

struct SolverConfig {
  double temperature = 1.0;
  SolverRewardConfig reward;

  void validate() const {
    if (!(temperature > 0.0)) throw ValidationError("solver.temperature must be > 0");
    reward.validate();
  }
};

struct SolverStats {
  int groups = 0;
  double mean_reward = 0.0;
};

// One epoch over the buffer in a seeded shuffled order, one ascent step per
// item. KL reference = policy at the start of the pass.
inline PolicyParams train_solver(PolicyParams params, const Lab& lab, const HybridBuffer& buffer,
                                 const GrpoConfig& gc, const SolverConfig& sc, std::uint64_t seed,
                                 SolverStats* stats = nullptr) {
  if (buffer.empty()) throw LoopError("train_solver: empty buffer");
  gc.validate();
  sc.validate();
  std::vector<const LabeledTask*> items;
  for (const auto& t : buffer.real_items) items.push_back(&t);
  for (const auto& t : buffer.gen_items) items.push_back(&t);
  Rng order(derive_seed(seed, {0x5017e4}));
  order.shuffle(items);

  const auto reference = set_reference(params);
  std::vector<double> scratch;
  double reward_sum = 0.0;
  int n_rewards = 0;
  for (const LabeledTask* item : items) {
    const auto iseed = derive_seed(seed, {0x5a3b, fnv1a(canonical_key(item->spec))});
    RolloutGroup g;
    g.prompt_context = lab.solver_context(item->spec);
    for (int i = 0; i < gc.group_size; ++i) {
      auto r = lab.solver_rollout(params, item->spec, sc.temperature, rollout_seed(iseed, i));
      const double rw = solver_reward(r.tokens, item->label, sc.reward, lab.vocab());
      g.sequences.push_back(std::move(r.seq));
      g.rewards.push_back(rw);
      reward_sum += rw;
      ++n_rewards;
    }
    grpo_update(params, g, *reference, gc, scratch);
  }
  if (stats) {
    stats->groups = static_cast<int>(items.size());
    stats->mean_reward = n_rewards ? reward_sum / n_rewards : 0.0;
  }
  return params;
}

// A solver that always answers correctly: frame and zero offset pinned.
inline PolicyParams oracle_solver_policy(const Lab& lab) {
  PolicyParams p = lab.empty_policy();
  for (int c = 0; c < lab.solver_contexts(); ++c)
    for (int prev = 0; prev <= p.vocab_size(); ++prev) {
      p.slot(c, 0, prev)[Vocabulary::kBegin] = 1e9;
      p.slot(c, 1, prev)[static_cast<std::size_t>(lab.vocab().number(0))] = 1e9;
      p.slot(c, 2, prev)[Vocabulary::kEnd] = 1e9;
    }
  return p;
}

struct BucketPassRate {
  int count = 0;
  double pass_rate = 0.0;
};

struct EvalSummary {
  double aggregate = 0.0;
  std::map<std::string, BucketPassRate> buckets;  // "add-chain/k=3"
  int count = 0;
};

inline std::string bucket_name(const Lab& lab, const TaskSpec& s) {
  return std::string(to_string(s.subject)) + "/k=" + std::to_string(lab.clipped_k(s.chain_length));
}

// Exact pass rates against oracle labels. The eval set must not share a
// problem with `training_pool`.
inline EvalSummary evaluate(const Lab& lab, const PolicyParams& solver,
                            std::span<const LabeledTask> eval_set,
                            std::span<const LabeledTask> training_pool = {},
                            unsigned threads = 0) {
  if (eval_set.empty()) throw ValidationError("evaluate: empty eval set");
  std::set<std::string> train_keys;
  for (const auto& t : training_pool) train_keys.insert(canonical_key(t.spec));
  for (const auto& t : eval_set)
    if (train_keys.count(canonical_key(t.spec)))
      throw ValidationError("eval task '" + t.spec.id + "' overlaps the training pool");
  std::vector<double> rates(eval_set.size());
  parallel_for(eval_set.size(), threads, [&](std::size_t i) {
    rates[i] = lab.solver_exact_pass_rate(solver, eval_set[i].spec, eval_set[i].label);
  });
  EvalSummary out;
  std::map<std::string, double> sums;
  double total = 0.0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const auto name = bucket_name(lab, eval_set[i].spec);
    ++out.buckets[name].count;
    sums[name] += rates[i];
    total += rates[i];
  }
  for (auto& [name, b] : out.buckets) b.pass_rate = sums[name] / b.count;
  out.count = static_cast<int>(eval_set.size());
  out.aggregate = total / out.count;
  return out;
}

inline nlohmann::json to_json(const EvalSummary& e) {
  nlohmann::json buckets = nlohmann::json::object();
  for (const auto& [name, b] : e.buckets)
    buckets[name] = {{"count", b.count}, {"pass_rate", b.pass_rate}};
  return {{"aggregate", e.aggregate}, {"count", e.count}, {"buckets", buckets}};
}

}  // namespace d2evo
