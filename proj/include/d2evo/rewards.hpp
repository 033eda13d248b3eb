#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>

#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"

namespace d2evo {

struct QuestionerRewardConfig {
  double tau_low = 0.4;
  double tau_high = 0.6;
  double exponent_a = 2.0;

  void validate() const {
    if (!(tau_low > 0.0 && tau_low < tau_high && tau_high < 1.0))
      throw ValidationError("questioner reward needs 0 < tau_low < tau_high < 1");
    if (!(exponent_a >= 1.0)) throw ValidationError("questioner exponent_a must be >= 1");
  }
};

struct SolverRewardConfig {
  double alpha = 0.9;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("solver alpha must be in [0, 1]");
  }
};

// Piecewise difficulty reward: flat inside the target band, power decay
// toward 0 at both extremes.
inline double r_diff(double x, const QuestionerRewardConfig& c) {
  x = std::clamp(x, 0.0, 1.0);
  if (x < c.tau_low) return std::pow(x / c.tau_low, c.exponent_a);
  if (x > c.tau_high) return std::pow((1.0 - x) / (1.0 - c.tau_high), c.exponent_a);
  return 1.0;
}

inline double questioner_reward(const DecodeResult& decoded, double pass_rate,
                                const QuestionerRewardConfig& c) {
  return decoded.malformed() ? 0.0 : r_diff(pass_rate, c);
}

inline double questioner_reward(std::span<const int> tokens, double pass_rate,
                                const QuestionerRewardConfig& c, const Vocabulary& vocab) {
  return questioner_reward(task_decode(tokens, vocab), pass_rate, c);
}

inline bool solver_format_ok(std::span<const int> tokens, const Vocabulary& vocab) {
  return tokens.size() == 3 && tokens[0] == Vocabulary::kBegin && vocab.is_answer(tokens[1]) &&
         tokens[2] == Vocabulary::kEnd;
}

// The framed answer, or nothing when the frame is broken.
inline std::optional<int> solver_answer(std::span<const int> tokens, const Vocabulary& vocab) {
  if (!solver_format_ok(tokens, vocab)) return std::nullopt;
  return vocab.number_value(tokens[1]);
}

inline double solver_reward(std::span<const int> tokens, int label, const SolverRewardConfig& c,
                            const Vocabulary& vocab) {
  const auto a = solver_answer(tokens, vocab);
  if (!a) return 0.0;
  const double acc = *a == label ? 1.0 : 0.0;
  return c.alpha * acc + (1.0 - c.alpha);
}

}  // namespace d2evo
