#pragma once

// Rollout-based difficulty, pass-rate bands, and anchor mining.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/parallel.hpp"
#include "d2evo/rng.hpp"

namespace d2evo {

struct DifficultyConfig {
  int n_rollouts = 32;
  double band_low = 0.4;
  double band_high = 0.8;
  double estimation_temperature = 1.0;

  void validate() const {
    if (n_rollouts < 1) throw ValidationError("difficulty.n_rollouts must be >= 1");
    if (!(band_low > 0.0 && band_low < 1.0 && band_high > 0.0 && band_high < 1.0))
      throw ValidationError("difficulty band edges must lie in (0, 1)");
    if (!(band_low < band_high))
      throw ValidationError("difficulty.band_low must be < difficulty.band_high");
    if (!(estimation_temperature > 0.0))
      throw ValidationError("difficulty.estimation_temperature must be > 0");
  }
};

enum class Band { Easy, Mid, Hard };

inline std::string_view to_string(Band b) {
  switch (b) {
    case Band::Easy: return "easy";
    case Band::Mid: return "mid";
    case Band::Hard: return "hard";
  }
  return "?";
}
inline Band band_from_string(std::string_view s) {
  if (s == "easy") return Band::Easy;
  if (s == "mid") return Band::Mid;
  if (s == "hard") return Band::Hard;
  throw ValidationError("unknown band '" + std::string(s) + "'");
}

// Closed interval: both edges are mid.
inline Band classify_band(double pass_rate, double low, double high) {
  if (pass_rate > high) return Band::Easy;
  if (pass_rate < low) return Band::Hard;
  return Band::Mid;
}
inline Band classify_band(double pass_rate, const DifficultyConfig& c) {
  return classify_band(pass_rate, c.band_low, c.band_high);
}

struct DifficultyEstimate {
  std::string task_id;
  int correct = 0;
  int n = 0;
  double pass_rate = 0.0;
  double difficulty = 0.0;
  Band band = Band::Hard;
  std::uint64_t solver_version = 0;

  bool operator==(const DifficultyEstimate&) const = default;
};

inline DifficultyEstimate make_estimate(std::string id, int correct, int n,
                                        const DifficultyConfig& c, std::uint64_t version = 0) {
  if (n < 1 || correct < 0 || correct > n) throw ValidationError("estimate needs 0 <= correct <= n, n >= 1");
  DifficultyEstimate e;
  e.task_id = std::move(id);
  e.correct = correct;
  e.n = n;
  e.pass_rate = static_cast<double>(correct) / n;
  e.difficulty = 100.0 * (n - correct) / n;  // exact at bin edges
  e.band = classify_band(e.pass_rate, c);
  e.solver_version = version;
  return e;
}

inline std::uint64_t task_seed(std::uint64_t base, std::uint64_t tag, const TaskSpec& spec) {
  return derive_seed(base, {tag, fnv1a(canonical_key(spec))});
}

inline DifficultyEstimate estimate_difficulty(const LabeledTask& task, const SolverSource& solver,
                                              const DifficultyConfig& c, std::uint64_t seed) {
  const auto answers = solver.answers(task.spec, c.n_rollouts, seed);
  int correct = 0;
  for (const auto& a : answers)
    if (a && *a == task.label) ++correct;
  return make_estimate(task.spec.id, correct, c.n_rollouts, c, solver.version());
}

// Per-task seeds depend on the task, not its position, so the result for a
// task does not change when the dataset is reordered.
inline std::vector<DifficultyEstimate> estimate_all(std::span<const LabeledTask> dataset,
                                                    const SolverSource& solver,
                                                    const DifficultyConfig& c, std::uint64_t seed,
                                                    unsigned threads = 0) {
  std::vector<DifficultyEstimate> out(dataset.size());
  parallel_for(dataset.size(), threads, [&](std::size_t i) {
    out[i] = estimate_difficulty(dataset[i], solver, c, task_seed(seed, 0xd1ff, dataset[i].spec));
  });
  return out;
}

struct AnchorRecord {
  TaskSpec spec;
  int label = 0;
  Subject subject = Subject::AddChain;
  DifficultyEstimate estimate;

  bool operator==(const AnchorRecord&) const = default;
};

struct AnchorSet {
  std::vector<AnchorRecord> anchors;
  bool empty_warning = false;
};

// Mid-band tasks, sorted by id. `estimates` is parallel to `dataset`.
inline AnchorSet select_anchors(std::span<const LabeledTask> dataset,
                                std::span<const DifficultyEstimate> estimates, double low,
                                double high) {
  if (dataset.size() != estimates.size())
    throw ValidationError("select_anchors: dataset and estimates differ in length");
  AnchorSet out;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    if (classify_band(estimates[i].pass_rate, low, high) == Band::Mid) {
      auto e = estimates[i];
      e.band = Band::Mid;
      out.anchors.push_back({dataset[i].spec, dataset[i].label, dataset[i].spec.subject, e});
    }
  std::stable_sort(out.anchors.begin(), out.anchors.end(),
                   [](const AnchorRecord& a, const AnchorRecord& b) { return a.spec.id < b.spec.id; });
  out.empty_warning = out.anchors.empty();
  return out;
}

inline AnchorSet mine_anchors(std::span<const LabeledTask> dataset, const SolverSource& solver,
                              const DifficultyConfig& c, std::uint64_t seed, unsigned threads = 0) {
  if (dataset.empty()) throw ValidationError("mine_anchors: empty dataset");
  const auto est = estimate_all(dataset, solver, c, seed, threads);
  return select_anchors(dataset, est, c.band_low, c.band_high);
}

struct DistributionReport {
  int easy = 0;
  int mid = 0;
  int hard = 0;
  std::array<int, 10> histogram{};  // difficulty bins [0,10), ..., [90,100]

  int total() const { return easy + mid + hard; }
  bool operator==(const DistributionReport&) const = default;
};

inline DistributionReport distribution_report(std::span<const DifficultyEstimate> estimates) {
  DistributionReport r;
  for (const auto& e : estimates) {
    switch (e.band) {
      case Band::Easy: ++r.easy; break;
      case Band::Mid: ++r.mid; break;
      case Band::Hard: ++r.hard; break;
    }
    const int bin = std::clamp(static_cast<int>(std::floor(e.difficulty / 10.0)), 0, 9);
    ++r.histogram[static_cast<std::size_t>(bin)];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Serialization.

inline nlohmann::json to_json(const DistributionReport& r) {
  return {{"easy", r.easy}, {"mid", r.mid}, {"hard", r.hard}, {"bins", r.histogram}};
}

inline DistributionReport distribution_from_json(const nlohmann::json& j) {
  DistributionReport r;
  r.easy = j.at("easy").get<int>();
  r.mid = j.at("mid").get<int>();
  r.hard = j.at("hard").get<int>();
  const auto bins = j.at("bins").get<std::vector<int>>();
  if (bins.size() != r.histogram.size()) throw ValidationError("histogram must have 10 bins");
  std::copy(bins.begin(), bins.end(), r.histogram.begin());
  return r;
}

inline nlohmann::json to_json(const DifficultyEstimate& e) {
  return {{"task_id", e.task_id},       {"correct", e.correct},
          {"n", e.n},                   {"pass_rate", e.pass_rate},
          {"difficulty", e.difficulty}, {"band", std::string(to_string(e.band))},
          {"solver_version", e.solver_version}};
}

inline DifficultyEstimate estimate_from_json(const nlohmann::json& j) {
  DifficultyEstimate e;
  e.task_id = j.at("task_id").get<std::string>();
  e.correct = j.at("correct").get<int>();
  e.n = j.at("n").get<int>();
  e.pass_rate = j.at("pass_rate").get<double>();
  e.difficulty = j.at("difficulty").get<double>();
  e.band = band_from_string(j.at("band").get<std::string>());
  e.solver_version = j.at("solver_version").get<std::uint64_t>();
  return e;
}

inline nlohmann::json to_json(const AnchorRecord& a) {
  auto j = to_json(LabeledTask{a.spec, a.label, LabelKind::Oracle, std::nullopt});
  return {{"task", j}, {"estimate", to_json(a.estimate)}};
}

inline AnchorRecord anchor_from_json(const nlohmann::json& j) {
  const auto t = labeled_task_from_json(j.at("task"));
  return {t.spec, t.label, t.spec.subject, estimate_from_json(j.at("estimate"))};
}

template <class T>
std::string jsonl(std::span<const T> items) {
  std::string out;
  for (const auto& x : items) {
    out += to_json(x).dump();
    out += '\n';
  }
  return out;
}

}  // namespace d2evo
