#pragma once

// First-order tabular softmax sequence policy.
//
// The distribution of the token at position t depends on (context bucket,
// t, previous token); the first position conditions on a virtual START
// token with index V. Logits are stored densely as [C][L][V+1][V].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/rng.hpp"

namespace d2evo {

using Json = nlohmann::json;

class PolicyParams {
 public:
  PolicyParams() = default;
  PolicyParams(int vocab_size, int max_len, int contexts)
      : vocab_(vocab_size), max_len_(max_len), contexts_(contexts) {
    if (vocab_size < 1 || max_len < 1 || contexts < 1)
      throw ValidationError("policy dimensions must be positive");
    logits_.assign(static_cast<std::size_t>(contexts) * max_len * (vocab_size + 1) * vocab_size,
                   0.0);
  }

  int vocab_size() const { return vocab_; }
  int max_len() const { return max_len_; }
  int contexts() const { return contexts_; }
  int start_token() const { return vocab_; }
  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }
  void set_version(std::uint64_t v) { version_ = v; }

  std::size_t slot_offset(int context, int pos, int prev) const {
    return ((static_cast<std::size_t>(context) * max_len_ + pos) * (vocab_ + 1) + prev) *
           vocab_;
  }
  std::span<double> slot(int context, int pos, int prev) {
    return {logits_.data() + slot_offset(context, pos, prev), static_cast<std::size_t>(vocab_)};
  }
  std::span<const double> slot(int context, int pos, int prev) const {
    return {logits_.data() + slot_offset(context, pos, prev), static_cast<std::size_t>(vocab_)};
  }

  std::vector<double>& raw() { return logits_; }
  const std::vector<double>& raw() const { return logits_; }

  bool same_shape(const PolicyParams& o) const {
    return vocab_ == o.vocab_ && max_len_ == o.max_len_ && contexts_ == o.contexts_;
  }

  void check_context(int context) const {
    if (context < 0 || context >= contexts_)
      throw ValidationError("context " + std::to_string(context) + " out of range");
  }

  void validate() const {
    if (logits_.size() !=
        static_cast<std::size_t>(contexts_) * max_len_ * (vocab_ + 1) * vocab_)
      throw ValidationError("logit table size does not match (C, L, V)");
    for (double z : logits_)
      if (!std::isfinite(z)) throw ValidationError("non-finite logit");
  }

  bool operator==(const PolicyParams&) const = default;

 private:
  int vocab_ = 0;
  int max_len_ = 0;
  int contexts_ = 0;
  std::uint64_t version_ = 0;
  std::vector<double> logits_;
};

// Frozen, shareable copies used as pi_old and pi_ref.
using PolicySnapshot = std::shared_ptr<const PolicyParams>;

inline PolicySnapshot snapshot(const PolicyParams& params) {
  return std::make_shared<const PolicyParams>(params);
}
inline PolicySnapshot set_reference(const PolicyParams& params) { return snapshot(params); }

// Numerically stable log-softmax of z / temperature.
inline void log_softmax(std::span<const double> z, double temperature, std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / temperature);
  double sum = 0.0;
  for (double v : z) sum += std::exp(v / temperature - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - lse;
}

inline std::vector<double> slot_probs(const PolicyParams& p, int context, int pos, int prev,
                                      double temperature = 1.0) {
  std::vector<double> lp(static_cast<std::size_t>(p.vocab_size()));
  log_softmax(p.slot(context, pos, prev), temperature, lp);
  for (double& v : lp) v = std::exp(v);
  return lp;
}

// Where a rollout stops: at `stop_token` (inclusive) or after `max_len`
// tokens. max_len = 0 means the policy's L.
struct RolloutLimits {
  int max_len = 0;
  int stop_token = -1;

  int cap(const PolicyParams& p) const {
    return max_len > 0 ? std::min(max_len, p.max_len()) : p.max_len();
  }
};

struct SampledSequence {
  std::vector<int> tokens;
  std::vector<double> logp_old;  // per token, under the sampling snapshot at temperature 1
  int context = 0;
  std::uint64_t policy_version = 0;
};

// Autoregressive categorical sampling at `temperature`; log-probabilities
// are recorded at temperature 1 (ratios in the surrogate are taken there).
inline SampledSequence sample(const PolicyParams& params, int context, double temperature,
                              std::uint64_t seed, const RolloutLimits& limits = {}) {
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  params.check_context(context);
  Rng rng(seed);
  SampledSequence out;
  out.context = context;
  out.policy_version = params.version();
  const int V = params.vocab_size();
  const int cap = limits.cap(params);
  std::vector<double> lp_t(static_cast<std::size_t>(V)), lp_1(static_cast<std::size_t>(V)),
      w(static_cast<std::size_t>(V));
  int prev = params.start_token();
  for (int pos = 0; pos < cap; ++pos) {
    const auto z = params.slot(context, pos, prev);
    log_softmax(z, temperature, lp_t);
    for (int i = 0; i < V; ++i) w[static_cast<std::size_t>(i)] = std::exp(lp_t[static_cast<std::size_t>(i)]);
    const int tok = static_cast<int>(rng.categorical(w));
    if (temperature == 1.0) {
      out.logp_old.push_back(lp_t[static_cast<std::size_t>(tok)]);
    } else {
      log_softmax(z, 1.0, lp_1);
      out.logp_old.push_back(lp_1[static_cast<std::size_t>(tok)]);
    }
    out.tokens.push_back(tok);
    if (tok == limits.stop_token) break;
    prev = tok;
  }
  return out;
}

inline std::vector<double> sequence_logp(const PolicyParams& params, int context,
                                         std::span<const int> tokens) {
  params.check_context(context);
  if (static_cast<int>(tokens.size()) > params.max_len())
    throw ValidationError("sequence longer than policy max_len");
  const int V = params.vocab_size();
  std::vector<double> lp(static_cast<std::size_t>(V));
  std::vector<double> out;
  out.reserve(tokens.size());
  int prev = params.start_token();
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    const int tok = tokens[pos];
    if (tok < 0 || tok >= V) throw ValidationError("token " + std::to_string(tok) + " out of vocabulary");
    log_softmax(params.slot(context, static_cast<int>(pos), prev), 1.0, lp);
    out.push_back(lp[static_cast<std::size_t>(tok)]);
    prev = tok;
  }
  return out;
}

// Maps a finished token sequence to an extracted answer (nullopt = no answer).
using AnswerExtractor = std::function<std::optional<int>(std::span<const int>)>;

inline constexpr double kEnumerationBudget = 1e6;

// Exact probability that a rollout (under `limits`, temperature 1) yields an
// extracted answer equal to `target`. Enumerates every reachable sequence.
inline double exact_pass_rate(const PolicyParams& params, int context, const RolloutLimits& limits,
                              const AnswerExtractor& extract, int target,
                              double budget = kEnumerationBudget) {
  params.check_context(context);
  const int V = params.vocab_size();
  const int cap = limits.cap(params);
  if (std::pow(static_cast<double>(V), cap) > budget)
    throw BudgetError("exact enumeration needs V^L = " + std::to_string(V) + "^" +
                      std::to_string(cap) + " sequences, over budget");
  std::vector<int> prefix;
  std::vector<std::vector<double>> probs(static_cast<std::size_t>(cap));
  double total = 0.0;
  std::function<void(int, int, double)> walk = [&](int pos, int prev, double p) {
    auto& pr = probs[static_cast<std::size_t>(pos)];
    pr = slot_probs(params, context, pos, prev);
    for (int tok = 0; tok < V; ++tok) {
      const double q = p * probs[static_cast<std::size_t>(pos)][static_cast<std::size_t>(tok)];
      prefix.push_back(tok);
      if (tok == limits.stop_token || pos + 1 == cap) {
        const auto a = extract(prefix);
        if (a && *a == target) total += q;
      } else {
        walk(pos + 1, tok, q);
      }
      prefix.pop_back();
    }
  };
  walk(0, params.start_token(), 1.0);
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoints: {version, V, L, C, logits: [C][L][V+1][V]}.

inline Json to_json(const PolicyParams& p) {
  Json logits = Json::array();
  for (int c = 0; c < p.contexts(); ++c) {
    Json jc = Json::array();
    for (int t = 0; t < p.max_len(); ++t) {
      Json jt = Json::array();
      for (int prev = 0; prev <= p.vocab_size(); ++prev) {
        const auto s = p.slot(c, t, prev);
        jt.push_back(Json(std::vector<double>(s.begin(), s.end())));
      }
      jc.push_back(std::move(jt));
    }
    logits.push_back(std::move(jc));
  }
  Json j;
  j["version"] = p.version();
  j["V"] = p.vocab_size();
  j["L"] = p.max_len();
  j["C"] = p.contexts();
  j["logits"] = std::move(logits);
  return j;
}

inline PolicyParams policy_from_json(const Json& j) {
  try {
    PolicyParams p(j.at("V").get<int>(), j.at("L").get<int>(), j.at("C").get<int>());
    p.set_version(j.at("version").get<std::uint64_t>());
    const auto& logits = j.at("logits");
    if (!logits.is_array() || static_cast<int>(logits.size()) != p.contexts())
      throw CorruptionError("checkpoint logits: wrong context dimension");
    for (int c = 0; c < p.contexts(); ++c) {
      const auto& jc = logits[static_cast<std::size_t>(c)];
      if (static_cast<int>(jc.size()) != p.max_len())
        throw CorruptionError("checkpoint logits: wrong position dimension");
      for (int t = 0; t < p.max_len(); ++t) {
        const auto& jt = jc[static_cast<std::size_t>(t)];
        if (static_cast<int>(jt.size()) != p.vocab_size() + 1)
          throw CorruptionError("checkpoint logits: wrong prev-token dimension");
        for (int prev = 0; prev <= p.vocab_size(); ++prev) {
          const auto& row = jt[static_cast<std::size_t>(prev)];
          if (static_cast<int>(row.size()) != p.vocab_size())
            throw CorruptionError("checkpoint logits: wrong vocabulary dimension");
          auto s = p.slot(c, t, prev);
          for (int v = 0; v < p.vocab_size(); ++v) s[static_cast<std::size_t>(v)] = row[static_cast<std::size_t>(v)].get<double>();
        }
      }
    }
    p.validate();
    return p;
  } catch (const Json::exception& e) {
    throw CorruptionError(std::string("bad checkpoint: ") + e.what());
  } catch (const ValidationError& e) {
    throw CorruptionError(std::string("bad checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const PolicyParams& p, const std::filesystem::path& path) {
  io::write_atomic(path, to_json(p).dump() + "\n");
}

inline PolicyParams load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw CorruptionError("missing checkpoint " + path.string());
  Json j;
  try {
    j = Json::parse(io::read_file(path));
  } catch (const Json::exception& e) {
    throw CorruptionError("checkpoint " + path.string() + " does not parse: " + e.what());
  }
  return policy_from_json(j);
}

}  // namespace d2evo
