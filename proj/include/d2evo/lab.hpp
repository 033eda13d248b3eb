#pragma once

// Binds the task family to the tabular policy: context buckets for both
// roles, the pretrained priors, and solver rollouts.
//
// Both roles share one logit table. Solver contexts come first, one per
// (subject, clipped k); questioner contexts follow, one per anchor
// (subject, clipped k, m).
//
// The solver reads a task through its bucket and "perceives" the residue
// y = oracle_answer(spec). Answer tokens it emits are offsets from y: the
// absolute answer of offset token r is (r + y) mod answer_count. A bucket
// therefore learns an error distribution, and every task in a bucket has
// the same exact pass rate against its oracle label.

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/rewards.hpp"
#include "d2evo/rng.hpp"

namespace d2evo {

struct PriorConfig {
  // solver
  double frame_logit = 6.0;
  double skill = 6.5;
  double slope = 1.0;
  // questioner
  double structure_logit = 6.0;
  double subject_switch_penalty = 2.0;
  double length_shift_penalty = 3.0;
  double modulus_shift_penalty = 3.0;
  double operand_penalty = 1.0;
  double early_stop_penalty = 4.0;

  void validate() const {
    for (double v : {frame_logit, skill, slope, structure_logit, subject_switch_penalty,
                     length_shift_penalty, modulus_shift_penalty, operand_penalty,
                     early_stop_penalty})
      if (!std::isfinite(v)) throw ValidationError("prior values must be finite");
  }
};

struct LabConfig {
  Vocabulary vocab;
  int k_clip = 5;
  PriorConfig prior;

  void validate() const {
    vocab.validate();
    if (!vocab.question_tokens) throw ValidationError("lab vocabulary needs question tokens");
    if (k_clip < 1 || k_clip > vocab.number_count - 1)
      throw ValidationError("policy.k_clip must be in [1, number_count - 1]");
    prior.validate();
  }
};

class Lab {
 public:
  Lab() : Lab(LabConfig{}) {}
  explicit Lab(LabConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const LabConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return cfg_.vocab; }
  int answer_count() const { return cfg_.vocab.answer_count; }
  int k_clip() const { return cfg_.k_clip; }

  int vocab_size() const { return cfg_.vocab.size(); }
  // Longest encodable question: k up to number_count - 1.
  int max_len() const { return encoded_length(cfg_.vocab.number_count - 1); }
  int solver_contexts() const { return kSubjectCount * cfg_.k_clip; }
  int moduli() const { return cfg_.vocab.answer_count - 1; }  // m in [2, answer_count]
  int questioner_contexts() const { return kSubjectCount * cfg_.k_clip * moduli(); }
  int contexts() const { return solver_contexts() + questioner_contexts(); }

  int clipped_k(int k) const { return std::clamp(k, 1, cfg_.k_clip); }

  int solver_context(Subject s, int k) const {
    return static_cast<int>(s) * cfg_.k_clip + clipped_k(k) - 1;
  }
  int solver_context(const TaskSpec& spec) const {
    return solver_context(spec.subject, spec.chain_length);
  }
  int questioner_context(const TaskSpec& anchor) const {
    if (anchor.modulus < 2 || anchor.modulus > answer_count())
      throw ValidationError("anchor modulus outside the answer vocabulary");
    return solver_contexts() +
           (solver_context(anchor) * moduli() + (anchor.modulus - 2));
  }
  bool is_solver_context(int c) const { return c >= 0 && c < solver_contexts(); }
  bool is_questioner_context(int c) const { return c >= solver_contexts() && c < contexts(); }

  // Latent difficulty the base solver perceives for a bucket.
  int bucket_difficulty(Subject s, int k) const { return latent_difficulty(s, clipped_k(k)); }

  PolicyParams empty_policy() const { return PolicyParams(vocab_size(), max_len(), contexts()); }

  // Pretrained starting point for both roles.
  PolicyParams base_policy() const {
    PolicyParams p = empty_policy();
    const auto& pr = cfg_.prior;
    const auto& v = cfg_.vocab;
    for (int s = 0; s < kSubjectCount; ++s)
      for (int k = 1; k <= cfg_.k_clip; ++k) {
        const auto subj = static_cast<Subject>(s);
        const int c = solver_context(subj, k);
        const double b = pr.skill - pr.slope * (bucket_difficulty(subj, k) - 1);
        for (int prev = 0; prev <= p.vocab_size(); ++prev) {
          p.slot(c, 0, prev)[Vocabulary::kBegin] = pr.frame_logit;
          p.slot(c, 1, prev)[static_cast<std::size_t>(v.number(0))] = b;
          p.slot(c, 2, prev)[Vocabulary::kEnd] = pr.frame_logit;
        }
      }
    for (int s = 0; s < kSubjectCount; ++s)
      for (int k = 1; k <= cfg_.k_clip; ++k)
        for (int m = 2; m <= answer_count(); ++m) {
          TaskSpec a;
          a.subject = static_cast<Subject>(s);
          a.chain_length = k;
          a.modulus = m;
          write_questioner_prior(p, questioner_context(a), a.subject, k, m);
        }
    p.validate();
    return p;
  }

  // Offset (policy) tokens <-> absolute tokens for a perceived residue y.
  std::vector<int> to_absolute(std::span<const int> rel, int y) const {
    return shift(rel, y);
  }
  std::vector<int> to_relative(std::span<const int> abs, int y) const {
    return shift(abs, answer_count() - (y % answer_count()));
  }

  RolloutLimits solver_limits() const { return {3, Vocabulary::kEnd}; }
  RolloutLimits questioner_limits() const { return {0, cfg_.vocab.qend()}; }

  struct SolverRollout {
    SampledSequence seq;       // offset tokens, as the policy sampled them
    std::vector<int> tokens;   // absolute tokens
    std::optional<int> answer;
  };

  SolverRollout solver_rollout(const PolicyParams& p, const TaskSpec& spec, double temperature,
                               std::uint64_t seed) const {
    SolverRollout r;
    r.seq = sample(p, solver_context(spec), temperature, seed, solver_limits());
    r.tokens = to_absolute(r.seq.tokens, oracle_answer(spec));
    r.answer = solver_answer(r.tokens, cfg_.vocab);
    return r;
  }

  // Exact probability that one rollout answers `label` on `spec`.
  double solver_exact_pass_rate(const PolicyParams& p, const TaskSpec& spec, int label) const {
    const int y = oracle_answer(spec);
    AnswerExtractor ex = [this, y](std::span<const int> rel) {
      return solver_answer(to_absolute(rel, y), cfg_.vocab);
    };
    return exact_pass_rate(p, solver_context(spec), solver_limits(), ex, label);
  }
  double solver_exact_pass_rate(const PolicyParams& p, const TaskSpec& spec) const {
    return solver_exact_pass_rate(p, spec, oracle_answer(spec));
  }

  SampledSequence questioner_sample(const PolicyParams& p, const TaskSpec& anchor,
                                    double temperature, std::uint64_t seed) const {
    return sample(p, questioner_context(anchor), temperature, seed, questioner_limits());
  }

 private:
  std::vector<int> shift(std::span<const int> toks, int by) const {
    std::vector<int> out(toks.begin(), toks.end());
    const int A = answer_count();
    for (int& t : out)
      if (cfg_.vocab.is_answer(t)) {
        const int n = *cfg_.vocab.number_value(t);
        t = cfg_.vocab.number((n + by) % A);
      }
    return out;
  }

  void write_questioner_prior(PolicyParams& p, int c, Subject subj, int k, int m) const {
    const auto& pr = cfg_.prior;
    const auto& v = cfg_.vocab;
    const double S = pr.structure_logit;
    const Subject other = subj == Subject::AddChain ? Subject::MixedChain : Subject::AddChain;
    auto set = [&](int pos, int tok, double z) {
      for (int prev = 0; prev <= p.vocab_size(); ++prev)
        p.slot(c, pos, prev)[static_cast<std::size_t>(tok)] = z;
    };
    set(0, v.qbegin(), S);
    set(1, v.subject_token(subj), S);
    set(1, v.subject_token(other), S - pr.subject_switch_penalty);
    set(2, v.number(k), S);
    for (int dk : {-1, 1})
      if (k + dk >= 1 && k + dk <= v.number_count - 1)
        set(2, v.number(k + dk), S - pr.length_shift_penalty);
    for (int mm = 2; mm <= answer_count(); ++mm)
      set(3, v.number(mm), mm == m ? S : S - pr.modulus_shift_penalty);
    for (int j = 0; j < k; ++j) {
      const int pos = 4 + 2 * j;
      for (int x = 0; x < m; ++x) set(pos, v.number(x), S - pr.operand_penalty);
      if (j + 1 < k) {
        const int op_pos = pos + 1;
        if (subj == Subject::AddChain) {
          set(op_pos, v.op_token(Op::Plus), S);
        } else {
          set(op_pos, v.op_token(Op::Plus), S - 1.0);
          set(op_pos, v.op_token(Op::Times), S - 1.0);
        }
        set(op_pos, v.qend(), S - pr.early_stop_penalty);
      }
    }
    set(2 * k + 3, v.qend(), S);
  }

  LabConfig cfg_;
};

// ---------------------------------------------------------------------------
// Where solver answers come from when only answers (not gradients) are
// needed: difficulty estimation, votes, and acceptance.

class SolverSource {
 public:
  virtual ~SolverSource() = default;
  // n extracted answers for `spec`; nothing = extraction failure.
  virtual std::vector<std::optional<int>> answers(const TaskSpec& spec, int n,
                                                  std::uint64_t seed) const = 0;
  // Version of the policy behind the answers (for frozen-evaluator checks).
  virtual std::uint64_t version() const = 0;
};

inline std::uint64_t rollout_seed(std::uint64_t seed, int i) {
  return derive_seed(seed, {static_cast<std::uint64_t>(i)});
}

class NativeSolver : public SolverSource {
 public:
  NativeSolver(const Lab& lab, PolicySnapshot policy, double temperature = 1.0)
      : lab_(lab), policy_(std::move(policy)), temperature_(temperature) {
    if (!policy_) throw ValidationError("native solver needs a policy snapshot");
  }

  std::vector<std::optional<int>> answers(const TaskSpec& spec, int n,
                                          std::uint64_t seed) const override {
    std::vector<std::optional<int>> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      out.push_back(lab_.solver_rollout(*policy_, spec, temperature_, rollout_seed(seed, i)).answer);
    return out;
  }
  std::uint64_t version() const override { return policy_->version(); }

  const PolicySnapshot& policy() const { return policy_; }
  double temperature() const { return temperature_; }

 private:
  const Lab& lab_;
  PolicySnapshot policy_;
  double temperature_;
};

}  // namespace d2evo
