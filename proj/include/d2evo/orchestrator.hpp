#pragma once

// The self-evolution loop: mine anchors, train the questioner, build the
// generated pool, train the solver on the hybrid buffer, evaluate, repeat.
//
// Run directory:
//   config.effective.json   run.json (manifest)   metrics.jsonl (t >= 1)
//   baseline.json (t = 0)   summary.json
//   ckpt/solver_<t>.json    ckpt/questioner_<t>.json
//   iter_<t>/{anchors,generated,buffer,estimates}.jsonl, iter_<t>/diagnostics.json

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/buffer.hpp"
#include "d2evo/config.hpp"
#include "d2evo/difficulty.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/pseudo_label.hpp"
#include "d2evo/questioner.hpp"
#include "d2evo/solver.hpp"

namespace d2evo {

namespace fs = std::filesystem;

struct LoopHooks {
  // Answer source for a solver snapshot at a temperature. Default: native.
  std::function<std::unique_ptr<SolverSource>(const Lab&, PolicySnapshot, double)> make_source;
  std::function<void(const std::string&)> log;
  // Sees the questioner's starting weights for iteration t.
  std::function<void(int, const PolicyParams&)> on_questioner_init;
};

struct RunControl {
  int stop_after_iteration = -1;  // emulates a kill after that iteration completes
};

struct MetricRecord {
  int t = 0;
  int anchors = 0;
  int buffer_real = 0;
  int buffer_gen = 0;
  double mean_q_reward = 0.0;
  double mean_s_reward = 0.0;
  double eval_pass_rate = 0.0;
  double acceptance_rate = 0.0;
  DistributionReport difficulty_histogram;
};

inline Json to_json(const MetricRecord& m) {
  return Json{{"t", m.t},
              {"anchors", m.anchors},
              {"buffer_real", m.buffer_real},
              {"buffer_gen", m.buffer_gen},
              {"mean_q_reward", m.mean_q_reward},
              {"mean_s_reward", m.mean_s_reward},
              {"eval_pass_rate", m.eval_pass_rate},
              {"acceptance_rate", m.acceptance_rate},
              {"difficulty_histogram", to_json(m.difficulty_histogram)}};
}

inline MetricRecord metric_from_json(const Json& j) {
  static const std::set<std::string> kKeys{"t",           "anchors",        "buffer_real",
                                           "buffer_gen",  "mean_q_reward",  "mean_s_reward",
                                           "eval_pass_rate", "acceptance_rate",
                                           "difficulty_histogram"};
  for (const auto& [k, _] : j.items())
    if (!kKeys.count(k)) throw CorruptionError("unexpected metrics key '" + k + "'");
  MetricRecord m;
  m.t = j.at("t").get<int>();
  m.anchors = j.at("anchors").get<int>();
  m.buffer_real = j.at("buffer_real").get<int>();
  m.buffer_gen = j.at("buffer_gen").get<int>();
  m.mean_q_reward = j.at("mean_q_reward").get<double>();
  m.mean_s_reward = j.at("mean_s_reward").get<double>();
  m.eval_pass_rate = j.at("eval_pass_rate").get<double>();
  m.acceptance_rate = j.at("acceptance_rate").get<double>();
  m.difficulty_histogram = distribution_from_json(j.at("difficulty_histogram"));
  return m;
}

inline std::vector<MetricRecord> read_metrics(const fs::path& path) {
  if (!fs::exists(path)) throw LoopError("no metrics at " + path.string());
  std::vector<MetricRecord> out;
  std::size_t n = 0;
  for (const auto& line : io::split_lines(io::read_file(path))) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(metric_from_json(Json::parse(line)));
    } catch (const std::exception& e) {
      throw CorruptionError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

struct IterationState {
  int t = 0;
  fs::path solver_ckpt;
  fs::path questioner_ckpt;
  int anchor_count = 0;
  int buffer_real = 0;
  int buffer_gen = 0;
  std::vector<MetricRecord> metrics;
  std::uint64_t rng_seed = 0;
};

struct AcceptanceResult {
  double rate = 0.0;
  int questions = 0;
  int malformed = 0;
};

// Questions generated by `questioner` from fixed anchors, voted on by
// `solver`, compared with the oracle. MALFORMED questions are skipped.
inline AcceptanceResult measure_acceptance(const Lab& lab, const PolicyParams& questioner,
                                           const SolverSource& solver,
                                           std::span<const AnchorRecord> anchors,
                                           int per_anchor, int votes, double temperature,
                                           std::uint64_t seed, unsigned threads = 0) {
  std::vector<std::vector<VotedQuestion>> per(anchors.size());
  std::vector<int> bad(anchors.size(), 0);
  parallel_for(anchors.size(), threads, [&](std::size_t a) {
    const auto qs = generate(questioner, lab, anchors[a], per_anchor, temperature,
                             derive_seed(seed, {0xacc, fnv1a(anchors[a].spec.id)}));
    for (const auto& q : qs) {
      if (q.decoded.malformed()) {
        ++bad[a];
        continue;
      }
      per[a].push_back({*q.decoded.spec, vote(*q.decoded.spec, solver, votes, seed)});
    }
  });
  std::vector<VotedQuestion> all;
  AcceptanceResult r;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    r.malformed += bad[a];
    for (auto& v : per[a]) all.push_back(std::move(v));
  }
  r.questions = static_cast<int>(all.size());
  r.rate = acceptance_rate(all);
  return r;
}

inline double mean_latent_difficulty(std::span<const AnchorRecord> anchors) {
  if (anchors.empty()) return 0.0;
  double s = 0.0;
  for (const auto& a : anchors) s += latent_difficulty(a.spec);
  return s / static_cast<double>(anchors.size());
}

inline double median_latent_difficulty(std::span<const AnchorRecord> anchors) {
  if (anchors.empty()) return 0.0;
  std::vector<int> d;
  for (const auto& a : anchors) d.push_back(latent_difficulty(a.spec));
  std::sort(d.begin(), d.end());
  const auto n = d.size();
  return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

class Orchestrator {
 public:
  Orchestrator(RunConfig cfg, fs::path out_dir, LoopHooks hooks = {})
      : cfg_(std::move(cfg)), out_(std::move(out_dir)), hooks_(std::move(hooks)), lab_(cfg_.lab) {
    const auto errs = validation_errors(cfg_);
    if (!errs.empty()) throw ConfigError(join_report(errs));
    if (!hooks_.make_source)
      hooks_.make_source = [](const Lab& lab, PolicySnapshot p, double temp) {
        return std::unique_ptr<SolverSource>(new NativeSolver(lab, std::move(p), temp));
      };
    real_ = sample_real_dataset(cfg_.dataset.real_count, cfg_.dataset.ranges, cfg_.seed);
    std::set<std::string> keys;
    for (const auto& t : real_) keys.insert(canonical_key(t.spec));
    eval_ = sample_distinct(cfg_.dataset.eval_count, cfg_.dataset.ranges, cfg_.seed, "eval", keys);
    // Fixed acceptance anchors: a seeded sample of the real pool.
    std::vector<std::size_t> idx(real_.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(cfg_.seed, {0xacc0}));
    rng.shuffle(idx);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(cfg_.loop.acceptance_anchors)));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) acc_anchors_.push_back({real_[i].spec, real_[i].label, real_[i].spec.subject, {}});
  }

  const Lab& lab() const { return lab_; }
  const RunConfig& config() const { return cfg_; }
  const std::vector<LabeledTask>& real_pool() const { return real_; }
  const std::vector<LabeledTask>& eval_set() const { return eval_; }
  const fs::path& out_dir() const { return out_; }

  // Fresh run into an empty (or nonexistent) directory.
  IterationState run_loop(const RunControl& control = {}) {
    if (fs::exists(out_ / "run.json"))
      throw LoopError("output directory " + out_.string() +
                      " already holds a run; use resume or a fresh --out-dir");
    fs::create_directories(out_);
    io::write_atomic(out_ / "config.effective.json", to_json(cfg_).dump(2) + "\n");
    io::write_atomic(out_ / "metrics.jsonl", "");
    const PolicyParams base = lab_.base_policy();
    save_checkpoint(base, solver_path(0));
    save_checkpoint(base, questioner_path(0));
    auto est = estimate_real(base, 0);
    write_estimates(0, est);
    write_baseline(base, est);
    write_manifest(0);
    metrics_.clear();
    diagnostics_.clear();
    write_summary();
    return continue_from(0, base, std::move(est), control);
  }

  // Continues a run from the last completed iteration on disk.
  static IterationState resume(const fs::path& out_dir, LoopHooks hooks = {},
                               const RunControl& control = {}) {
    if (!fs::exists(out_dir / "run.json"))
      throw LoopError("nothing to resume in " + out_dir.string() + " (no run.json)");
    Json manifest;
    try {
      manifest = Json::parse(io::read_file(out_dir / "run.json"));
    } catch (const Json::exception& e) {
      throw CorruptionError("run.json does not parse: " + std::string(e.what()));
    }
    if (!fs::exists(out_dir / "config.effective.json"))
      throw CorruptionError("run.json present but config.effective.json is missing");
    RunConfig cfg;
    int done = 0;
    try {
      cfg = load_config_json(Json::parse(io::read_file(out_dir / "config.effective.json")));
      if (io::hex64(config_hash(cfg)) != manifest.at("config_hash").get<std::string>())
        throw CorruptionError("config.effective.json does not match the manifest's config hash");
      if (manifest.at("seed").get<std::uint64_t>() != cfg.seed)
        throw CorruptionError("manifest seed disagrees with the effective config");
      done = manifest.at("completed_iterations").get<int>();
    } catch (const Json::exception& e) {
      throw CorruptionError("bad run manifest: " + std::string(e.what()));
    } catch (const ConfigError& e) {
      throw CorruptionError(std::string("stored config is invalid: ") + e.what());
    }
    if (done < 0 || done > cfg.T) throw CorruptionError("manifest completed_iterations out of range");

    Orchestrator o(cfg, out_dir, std::move(hooks));
    for (int t = 0; t <= done; ++t)
      for (const auto& p : {o.solver_path(t), o.questioner_path(t)})
        if (!fs::exists(p))
          throw CorruptionError("manifest claims " + std::to_string(done) +
                                " completed iterations but " + p.string() + " is missing");
    const auto est_path = o.iter_dir(done) / "estimates.jsonl";
    if (!fs::exists(est_path)) throw CorruptionError("missing " + est_path.string());
    PolicyParams solver = load_checkpoint(o.solver_path(done));
    std::vector<DifficultyEstimate> est;
    for (const auto& line : io::split_lines(io::read_file(est_path)))
      if (!line.empty()) est.push_back(estimate_from_json(Json::parse(line)));
    if (est.size() != o.real_.size()) throw CorruptionError(est_path.string() + " has the wrong length");

    auto metrics = read_metrics(out_dir / "metrics.jsonl");
    if (static_cast<int>(metrics.size()) < done)
      throw CorruptionError("metrics.jsonl has fewer records than completed iterations");
    metrics.resize(static_cast<std::size_t>(done));
    o.metrics_ = std::move(metrics);
    o.write_metrics();
    o.diagnostics_.clear();
    for (int t = 1; t <= done; ++t) {
      const auto p = o.iter_dir(t) / "diagnostics.json";
      if (!fs::exists(p)) throw CorruptionError("missing " + p.string());
      o.diagnostics_.push_back(Json::parse(io::read_file(p)));
    }
    o.write_summary();
    return o.continue_from(done, std::move(solver), std::move(est), control);
  }

  fs::path solver_path(int t) const { return out_ / "ckpt" / ("solver_" + std::to_string(t) + ".json"); }
  fs::path questioner_path(int t) const {
    return out_ / "ckpt" / ("questioner_" + std::to_string(t) + ".json");
  }
  fs::path iter_dir(int t) const { return out_ / ("iter_" + std::to_string(t)); }

  std::vector<DifficultyEstimate> estimate_real(const PolicyParams& solver, int t) const {
    auto src = hooks_.make_source(lab_, snapshot(solver), cfg_.difficulty.estimation_temperature);
    return estimate_all(real_, *src, cfg_.difficulty, derive_seed(cfg_.seed, {0xe57, static_cast<std::uint64_t>(t)}),
                        cfg_.threads);
  }

  AcceptanceResult acceptance(const PolicyParams& questioner, const PolicyParams& solver) const {
    auto src = hooks_.make_source(lab_, snapshot(solver), cfg_.solver.temperature);
    return measure_acceptance(lab_, questioner, *src, acc_anchors_, cfg_.loop.acceptance_questions,
                              cfg_.loop.acceptance_votes, cfg_.questioner.temperature,
                              derive_seed(cfg_.seed, {0xacc}), cfg_.threads);
  }

 private:
  void log(const std::string& msg) const {
    if (hooks_.log) hooks_.log(msg);
  }

  IterationState continue_from(int done, PolicyParams solver, std::vector<DifficultyEstimate> est,
                               const RunControl& control) {
    IterationState st;
    st.t = done;
    st.solver_ckpt = solver_path(done);
    st.questioner_ckpt = questioner_path(done);
    st.rng_seed = cfg_.seed;
    for (int t = done + 1; t <= cfg_.T; ++t) {
      iteration(t, solver, est, st);
      write_manifest(t);
      if (control.stop_after_iteration == t) break;
    }
    st.metrics = metrics_;
    return st;
  }

  void iteration(int t, PolicyParams& solver, std::vector<DifficultyEstimate>& est,
                 IterationState& st) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t seed_t = derive_seed(cfg_.seed, {static_cast<std::uint64_t>(t)});
    const auto frozen = snapshot(solver);
    const auto frozen_src = hooks_.make_source(lab_, frozen, cfg_.solver.temperature);

    // Anchors from the estimates made under the previous solver.
    for (const auto& e : est)
      if (e.solver_version != frozen->version())
        throw LoopError("estimate for " + e.task_id + " was not made by the frozen solver");
    double low = cfg_.difficulty.band_low, high = cfg_.difficulty.band_high;
    auto anchors = select_anchors(real_, est, low, high);
    bool widened = false;
    if (anchors.anchors.empty()) {
      if (cfg_.loop.empty_anchor_fallback == "halt")
        throw LoopError("iteration " + std::to_string(t) + ": no mid-band anchors (fallback: halt)");
      low = std::max(1e-9, low - cfg_.loop.widen_delta);
      high = std::min(1.0 - 1e-9, high + cfg_.loop.widen_delta);
      widened = true;
      log("iteration " + std::to_string(t) + ": no anchors, widening band to [" +
          std::to_string(low) + ", " + std::to_string(high) + "]");
      anchors = select_anchors(real_, est, low, high);
      if (anchors.anchors.empty())
        throw LoopError("iteration " + std::to_string(t) + ": no anchors even after widening the band");
    }
    const auto& A = anchors.anchors;
    write_lines(iter_dir(t) / "anchors.jsonl", jsonl<AnchorRecord>(A));

    // Questioner: starts as the previous solver (shared weights).
    PolicyParams questioner = solver;
    if (hooks_.on_questioner_init) hooks_.on_questioner_init(t, questioner);
    QuestionerStats qstats;
    questioner = train_questioner(std::move(questioner), lab_, A, *frozen_src, cfg_.grpo,
                                  cfg_.questioner, seed_t, &qstats);
    save_checkpoint(questioner, questioner_path(t));

    std::vector<GeneratedQuestion> scored;
    const auto pool = build_generated_pool(questioner, lab_, A, *frozen_src, cfg_.questioner,
                                           cfg_.buffer, seed_t,
                                           "ckpt/questioner_" + std::to_string(t) + ".json",
                                           &scored, cfg_.threads);
    write_lines(iter_dir(t) / "generated.jsonl", jsonl<GeneratedQuestion>(scored));
    const auto buffer = assemble(A, pool, t);
    persist(buffer, iter_dir(t) / "buffer.jsonl");

    // Solver: continues from the questioner-updated weights.
    SolverStats sstats;
    solver = train_solver(questioner, lab_, buffer, cfg_.grpo, cfg_.solver, seed_t, &sstats);
    save_checkpoint(solver, solver_path(t));

    const auto eval = evaluate(lab_, solver, eval_, real_, cfg_.threads);
    const auto acc = acceptance(questioner, solver);
    est = estimate_real(solver, t);
    write_estimates(t, est);

    MetricRecord m;
    m.t = t;
    m.anchors = static_cast<int>(A.size());
    m.buffer_real = static_cast<int>(buffer.real_items.size());
    m.buffer_gen = static_cast<int>(buffer.gen_items.size());
    m.mean_q_reward = qstats.mean_reward;
    m.mean_s_reward = sstats.mean_reward;
    m.eval_pass_rate = eval.aggregate;
    m.acceptance_rate = acc.rate;
    m.difficulty_histogram = distribution_report(est);
    metrics_.push_back(m);
    write_metrics();

    double gen_latent = 0.0;
    for (const auto& g : buffer.gen_items) gen_latent += latent_difficulty(g.spec);
    Json diag{{"t", t},
              {"frozen_solver_version", frozen->version()},
              {"solver_version", solver.version()},
              {"questioner_version", questioner.version()},
              {"band", {low, high}},
              {"band_widened", widened},
              {"anchor_mean_latent_difficulty", mean_latent_difficulty(A)},
              {"anchor_median_latent_difficulty", median_latent_difficulty(A)},
              {"generated_mean_latent_difficulty",
               buffer.gen_items.empty() ? 0.0 : gen_latent / buffer.gen_items.size()},
              {"questioner_malformed", qstats.malformed},
              {"questioner_generated", qstats.generated},
              {"pool",
               {{"candidates", pool.candidates},
                {"malformed", pool.malformed},
                {"no_label", pool.no_label},
                {"out_of_band", pool.out_of_band},
                {"rejected", pool.rejected},
                {"duplicates", pool.duplicates},
                {"admitted", pool.items.size()}}},
              {"acceptance", {{"questions", acc.questions}, {"malformed", acc.malformed}}},
              {"eval", to_json(eval)}};
    io::write_atomic(iter_dir(t) / "diagnostics.json", diag.dump(2) + "\n");
    diagnostics_.push_back(std::move(diag));
    write_summary();

    st.t = t;
    st.solver_ckpt = solver_path(t);
    st.questioner_ckpt = questioner_path(t);
    st.anchor_count = m.anchors;
    st.buffer_real = m.buffer_real;
    st.buffer_gen = m.buffer_gen;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log("iteration " + std::to_string(t) + ": anchors=" + std::to_string(m.anchors) +
        " buffer=" + std::to_string(m.buffer_real) + "+" + std::to_string(m.buffer_gen) +
        " eval=" + std::to_string(m.eval_pass_rate) + " accept=" + std::to_string(m.acceptance_rate) +
        " (" + std::to_string(secs) + "s)");
  }

  void write_lines(const fs::path& p, const std::string& text) const { io::write_atomic(p, text); }

  void write_estimates(int t, const std::vector<DifficultyEstimate>& est) const {
    write_lines(iter_dir(t) / "estimates.jsonl", jsonl<DifficultyEstimate>(est));
  }

  void write_baseline(const PolicyParams& base, const std::vector<DifficultyEstimate>& est) const {
    const auto eval = evaluate(lab_, base, eval_, real_, cfg_.threads);
    const auto acc = acceptance(base, base);
    const auto anchors = select_anchors(real_, est, cfg_.difficulty.band_low, cfg_.difficulty.band_high);
    Json j{{"t", 0},
           {"anchors", anchors.anchors.size()},
           {"eval_pass_rate", eval.aggregate},
           {"acceptance_rate", acc.rate},
           {"difficulty_histogram", to_json(distribution_report(est))},
           {"anchor_mean_latent_difficulty", mean_latent_difficulty(anchors.anchors)},
           {"eval", to_json(eval)}};
    io::write_atomic(out_ / "baseline.json", j.dump(2) + "\n");
  }

  void write_metrics() const {
    std::string text;
    for (const auto& m : metrics_) text += to_json(m).dump() + "\n";
    io::write_atomic(out_ / "metrics.jsonl", text);
  }

  void write_manifest(int completed) const {
    Json j{{"config_hash", io::hex64(config_hash(cfg_))},
           {"seed", cfg_.seed},
           {"T", cfg_.T},
           {"completed_iterations", completed}};
    io::write_atomic(out_ / "run.json", j.dump(2) + "\n");
  }

  void write_summary() const {
    Json j{{"iterations", diagnostics_}};
    io::write_atomic(out_ / "summary.json", j.dump(2) + "\n");
  }

  RunConfig cfg_;
  fs::path out_;
  LoopHooks hooks_;
  Lab lab_;
  std::vector<LabeledTask> real_;
  std::vector<LabeledTask> eval_;
  std::vector<AnchorRecord> acc_anchors_;
  std::vector<MetricRecord> metrics_;
  std::vector<Json> diagnostics_;
};

}  // namespace d2evo
