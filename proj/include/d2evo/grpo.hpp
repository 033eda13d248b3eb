#pragma once

// Group-relative advantages, the clipped surrogate with a per-token KL
// penalty, its analytic gradient for the tabular policy, and a central
// difference checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "d2evo/errors.hpp"
#include "d2evo/policy.hpp"

namespace d2evo {

struct GrpoConfig {
  double clip_eps = 0.2;
  double kl_beta = 0.01;
  int group_size = 8;
  double learning_rate = 0.05;
  double std_floor = 1e-6;

  void validate() const {
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ValidationError("grpo.clip_eps must be in (0, 1)");
    if (!(kl_beta >= 0.0)) throw ValidationError("grpo.kl_beta must be >= 0");
    if (group_size < 2) throw ValidationError("grpo.group_size must be >= 2");
    if (!(learning_rate >= 0.0)) throw ValidationError("grpo.learning_rate must be >= 0");
    if (!(std_floor > 0.0 && std_floor <= 1e-3))
      throw ValidationError("grpo.std_floor must be in (0, 1e-3]");
  }
};

struct RolloutGroup {
  int prompt_context = 0;
  std::vector<SampledSequence> sequences;
  std::vector<double> rewards;
};

inline std::vector<double> group_advantage(std::span<const double> rewards, double std_floor) {
  if (rewards.size() < 2) throw ValidationError("group_advantage needs at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd < std_floor && std::all_of(rewards.begin(), rewards.end(),
                                    [&](double r) { return r == rewards[0]; }))
    return a;
  const double denom = std::max(sd, std_floor);
  for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / denom;
  return a;
}

// r - log r - 1 with r = pi_ref / pi_theta at the sampled token.
inline double kl_estimate(double logp_theta, double logp_ref) {
  const double d = logp_ref - logp_theta;
  return std::expm1(d) - d;
}

namespace detail {

inline void check_group(const RolloutGroup& g) {
  if (g.sequences.size() != g.rewards.size())
    throw ValidationError("rollout group: sequences and rewards differ in length");
  if (g.sequences.size() < 2) throw ValidationError("rollout group needs G >= 2");
  for (const auto& s : g.sequences) {
    if (s.tokens.empty()) throw ValidationError("rollout group: empty sequence");
    if (s.logp_old.size() != s.tokens.size())
      throw ValidationError("rollout group: sequence is missing logp_old");
  }
}

inline double clip(double k, double eps) { return std::clamp(k, 1.0 - eps, 1.0 + eps); }

// Clipped branch selected by the min and flat in k.
inline bool clip_active(double k, double adv, double eps) {
  return (adv > 0.0 && k > 1.0 + eps) || (adv < 0.0 && k < 1.0 - eps);
}

}  // namespace detail

inline double grpo_objective(const RolloutGroup& group, const PolicyParams& params,
                             const PolicyParams& reference, const GrpoConfig& cfg) {
  detail::check_group(group);
  if (!params.same_shape(reference)) throw ValidationError("reference shape mismatch");
  const auto adv = group_advantage(group.rewards, cfg.std_floor);
  double total = 0.0;
  for (std::size_t i = 0; i < group.sequences.size(); ++i) {
    const auto& s = group.sequences[i];
    const auto lp = sequence_logp(params, s.context, s.tokens);
    const auto lr = sequence_logp(reference, s.context, s.tokens);
    double seq = 0.0;
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const double k = std::exp(lp[t] - s.logp_old[t]);
      const double surr = std::min(k * adv[i], detail::clip(k, cfg.clip_eps) * adv[i]);
      seq += surr - cfg.kl_beta * kl_estimate(lp[t], lr[t]);
    }
    total += seq / static_cast<double>(s.tokens.size());
  }
  return total / static_cast<double>(group.sequences.size());
}

// Adds scale * d(objective)/d(logits) into `out` (dense, same layout as the
// logit table).
inline void accumulate_gradient(const RolloutGroup& group, const PolicyParams& params,
                                const PolicyParams& reference, const GrpoConfig& cfg,
                                std::vector<double>& out, double scale = 1.0) {
  detail::check_group(group);
  if (!params.same_shape(reference)) throw ValidationError("reference shape mismatch");
  if (out.size() != params.raw().size()) throw ValidationError("gradient buffer shape mismatch");
  const auto adv = group_advantage(group.rewards, cfg.std_floor);
  const int V = params.vocab_size();
  const double G = static_cast<double>(group.sequences.size());
  std::vector<double> lp(static_cast<std::size_t>(V)), lr(static_cast<std::size_t>(V));
  for (std::size_t i = 0; i < group.sequences.size(); ++i) {
    const auto& s = group.sequences[i];
    const double w = scale / (G * static_cast<double>(s.tokens.size()));
    int prev = params.start_token();
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const int tok = s.tokens[t];
      const int pos = static_cast<int>(t);
      log_softmax(params.slot(s.context, pos, prev), 1.0, lp);
      log_softmax(reference.slot(s.context, pos, prev), 1.0, lr);
      const double lt = lp[static_cast<std::size_t>(tok)];
      const double k = std::exp(lt - s.logp_old[t]);
      double dl = detail::clip_active(k, adv[i], cfg.clip_eps) ? 0.0 : adv[i] * k;
      dl += cfg.kl_beta * std::expm1(lr[static_cast<std::size_t>(tok)] - lt);
      if (dl != 0.0) {
        double* g = out.data() + params.slot_offset(s.context, pos, prev);
        for (int j = 0; j < V; ++j) g[j] -= w * dl * std::exp(lp[static_cast<std::size_t>(j)]);
        g[tok] += w * dl;
      }
      prev = tok;
    }
  }
}

inline std::vector<double> grpo_gradient(const RolloutGroup& group, const PolicyParams& params,
                                         const PolicyParams& reference, const GrpoConfig& cfg) {
  std::vector<double> g(params.raw().size(), 0.0);
  accumulate_gradient(group, params, reference, cfg, g);
  return g;
}

inline void step(PolicyParams& params, std::span<const double> gradient, const GrpoConfig& cfg) {
  if (gradient.size() != params.raw().size())
    throw ValidationError("gradient shape does not match parameters");
  auto& z = params.raw();
  if (cfg.learning_rate != 0.0)
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += cfg.learning_rate * gradient[i];
  params.bump_version();
}

// One ascent step on one group. `params` must equal the sampling snapshot
// recorded in the sequences' logp_old for the ratio to start at 1.
inline void grpo_update(PolicyParams& params, const RolloutGroup& group,
                        const PolicyParams& reference, const GrpoConfig& cfg,
                        std::vector<double>& scratch) {
  scratch.assign(params.raw().size(), 0.0);
  accumulate_gradient(group, params, reference, cfg, scratch);
  step(params, scratch, cfg);
}

// p(1-p) / (2 beta^2): the bound on the per-question training signal.
inline double signal_bound(double p, double beta) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("signal_bound: p must be in [0, 1]");
  if (!(beta > 0.0)) throw ValidationError("signal_bound: beta must be > 0");
  return p * (1.0 - p) / (2.0 * beta * beta);
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Max relative error of `analytic` against central differences of `f` at x,
// over coordinates where mask is true (all when mask is empty).
inline double check_gradient(const std::function<double(const std::vector<double>&)>& f,
                             std::vector<double> x, std::span<const double> analytic, double h,
                             const std::vector<bool>& mask = {}) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ValidationError("check_gradient: h must be in [1e-7, 1e-3]");
  if (analytic.size() != x.size()) throw ValidationError("check_gradient: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
  }
  return worst;
}

struct GradientInstance {
  RolloutGroup group;
  PolicyParams params;
  PolicyParams reference;
  GrpoConfig config;
};

// Coordinates usable for a finite-difference comparison: every slot visited
// by the group except those holding a token whose ratio is clipped or lies
// within `margin` of a clip edge (the objective has a kink there).
inline std::vector<bool> unclipped_mask(const GradientInstance& in, double margin = 1e-4) {
  const auto& p = in.params;
  std::vector<bool> visited(p.raw().size(), false), kinked(p.raw().size(), false);
  const auto adv = group_advantage(in.group.rewards, in.config.std_floor);
  const double eps = in.config.clip_eps;
  for (std::size_t i = 0; i < in.group.sequences.size(); ++i) {
    const auto& s = in.group.sequences[i];
    const auto lp = sequence_logp(p, s.context, s.tokens);
    int prev = p.start_token();
    for (std::size_t t = 0; t < s.tokens.size(); ++t) {
      const double k = std::exp(lp[t] - s.logp_old[t]);
      const bool near_edge = std::abs(k - (1.0 + eps)) < margin || std::abs(k - (1.0 - eps)) < margin;
      const bool bad = adv[i] != 0.0 && (detail::clip_active(k, adv[i], eps) || near_edge);
      const auto off = p.slot_offset(s.context, static_cast<int>(t), prev);
      for (int j = 0; j < p.vocab_size(); ++j) {
        visited[off + static_cast<std::size_t>(j)] = true;
        if (bad) kinked[off + static_cast<std::size_t>(j)] = true;
      }
      prev = s.tokens[t];
    }
  }
  std::vector<bool> mask(p.raw().size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = visited[i] && !kinked[i];
  return mask;
}

inline double check_gradient(const GradientInstance& in, double h) {
  const auto analytic = grpo_gradient(in.group, in.params, in.reference, in.config);
  PolicyParams probe = in.params;
  auto f = [&](const std::vector<double>& x) {
    probe.raw() = x;
    return grpo_objective(in.group, probe, in.reference, in.config);
  };
  return check_gradient(f, in.params.raw(), analytic, h, unclipped_mask(in));
}

}  // namespace d2evo
