#pragma once

// Majority-vote pseudo labels, acceptance rate, and verifier hooks.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/rng.hpp"

namespace d2evo {

struct VoteTally {
  std::map<int, int> answers;
  int n_votes = 0;
  std::optional<int> winner;  // nothing = NO_LABEL
  int winner_count = 0;
  bool tie_broken = false;

  bool no_label() const { return !winner.has_value(); }
  // Share of all votes (extractable or not) agreeing with the winner.
  double agreement() const {
    return n_votes > 0 ? static_cast<double>(winner_count) / n_votes : 0.0;
  }
};

inline VoteTally majority_vote(std::span<const std::optional<int>> answers) {
  if (answers.empty()) throw ValidationError("majority_vote needs at least one entry");
  VoteTally t;
  t.n_votes = static_cast<int>(answers.size());
  for (const auto& a : answers)
    if (a) ++t.answers[*a];
  int ties = 0;
  // std::map iterates in ascending answer order, so the first maximum seen
  // is the smallest tied value.
  for (const auto& [value, count] : t.answers) {
    if (count > t.winner_count) {
      t.winner = value;
      t.winner_count = count;
      ties = 1;
    } else if (count == t.winner_count) {
      ++ties;
    }
  }
  t.tie_broken = ties > 1;
  return t;
}

struct VotedQuestion {
  TaskSpec spec;
  VoteTally tally;
};

inline double acceptance_rate(std::span<const VotedQuestion> questions) {
  if (questions.empty()) return 0.0;
  int ok = 0;
  for (const auto& q : questions)
    if (q.tally.winner && *q.tally.winner == oracle_answer(q.spec)) ++ok;
  return static_cast<double>(ok) / static_cast<double>(questions.size());
}

// Simulated binary vote: each of n_votes voters is right with probability
// p; the vote is right when the majority is. Ties count as wrong.
inline double condorcet_check(double p, int n_votes, int trials, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("condorcet_check: p must be in [0, 1]");
  if (n_votes < 1 || trials < 1) throw ValidationError("condorcet_check: bad counts");
  Rng rng(seed);
  std::vector<std::optional<int>> votes(static_cast<std::size_t>(n_votes));
  int right = 0;
  for (int i = 0; i < trials; ++i) {
    for (auto& v : votes) v = rng.bernoulli(p) ? 1 : 0;
    const auto t = majority_vote(votes);
    if (t.winner == 1 && !t.tie_broken) ++right;
  }
  return static_cast<double>(right) / trials;
}

// ---------------------------------------------------------------------------
// Verifier hooks: (spec, pseudo label) -> accept?

using Verifier = std::function<bool(const TaskSpec&, int)>;

inline Verifier make_verifier(const std::string& name) {
  if (name == "oracle")
    return [](const TaskSpec& s, int label) { return oracle_answer(s) == label; };
  if (name == "accept-all") return [](const TaskSpec&, int) { return true; };
  throw ConfigError("unknown verifier '" + name + "' (known: oracle, accept-all)");
}

}  // namespace d2evo
