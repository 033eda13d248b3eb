// d2evo: command-line front end for the self-evolution lab.
//
// Exit codes: 0 ok, 2 validation/config, 3 runtime/loop, 4 transport.

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "d2evo/buffer.hpp"
#include "d2evo/config.hpp"
#include "d2evo/difficulty.hpp"
#include "d2evo/llm_adapter.hpp"
#include "d2evo/orchestrator.hpp"
#include "d2evo/questioner.hpp"
#include "d2evo/report.hpp"
#include "d2evo/solver.hpp"

namespace fs = std::filesystem;
using namespace d2evo;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string endpoint;
  std::string checkpoint;
  std::string input;
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

RunConfig resolve(const Common& c) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed) ov.push_back("seed=" + std::to_string(*c.seed));
  if (!c.out_dir.empty()) ov.push_back("out_dir=" + nlohmann::json(c.out_dir).dump());
  if (!c.endpoint.empty()) {
    ov.push_back("endpoint.enabled=true");
    ov.push_back("endpoint.base_url=" + nlohmann::json(c.endpoint).dump());
  }
  return load_config(c.config.empty() ? std::nullopt : std::optional<fs::path>(c.config), ov);
}

void echo_config(const RunConfig& cfg) {
  io::write_atomic(fs::path(cfg.out_dir) / "config.effective.json", to_json(cfg).dump(2) + "\n");
}

LoopHooks make_hooks(const RunConfig& cfg) {
  LoopHooks h;
  h.log = log_line;
  if (cfg.endpoint.enabled) {
    auto client = std::make_shared<const EndpointClient>(cfg.endpoint, log_line);
    h.make_source = [client](const Lab&, PolicySnapshot p, double) {
      return std::unique_ptr<SolverSource>(new EndpointSolver(client, p->version()));
    };
  } else {
    h.make_source = [](const Lab& lab, PolicySnapshot p, double temp) {
      return std::unique_ptr<SolverSource>(new NativeSolver(lab, std::move(p), temp));
    };
  }
  return h;
}

PolicyParams starting_policy(const Lab& lab, const Common& c) {
  return c.checkpoint.empty() ? lab.base_policy() : load_checkpoint(c.checkpoint);
}

int cmd_estimate(const Common& c, bool anchors_only) {
  const auto cfg = resolve(c);
  echo_config(cfg);
  Orchestrator o(cfg, cfg.out_dir, make_hooks(cfg));
  const auto policy = starting_policy(o.lab(), c);
  const auto est = o.estimate_real(policy, 0);
  const fs::path out(cfg.out_dir);
  const auto dist = distribution_report(est);
  if (anchors_only) {
    auto set = select_anchors(o.real_pool(), est, cfg.difficulty.band_low, cfg.difficulty.band_high);
    io::write_atomic(out / "anchors.jsonl", jsonl<AnchorRecord>(set.anchors));
    std::cout << "anchors: " << set.anchors.size() << " of " << est.size() << '\n';
    if (set.empty_warning) std::cerr << "warning: no task fell in the mid band\n";
  } else {
    io::write_atomic(out / "estimates.jsonl", jsonl<DifficultyEstimate>(est));
    io::write_atomic(out / "difficulty_report.json", to_json(dist).dump(2) + "\n");
    std::cout << "easy " << dist.easy << "  mid " << dist.mid << "  hard " << dist.hard << '\n';
  }
  return 0;
}

std::vector<AnchorRecord> read_anchors(const fs::path& p) {
  if (!fs::exists(p)) throw ValidationError("anchor file " + p.string() + " does not exist");
  std::vector<AnchorRecord> out;
  std::size_t n = 0;
  for (const auto& line : io::split_lines(io::read_file(p))) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(anchor_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError(p.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

int cmd_train_questioner(const Common& c) {
  const auto cfg = resolve(c);
  echo_config(cfg);
  if (c.input.empty()) throw ValidationError("train-questioner needs --anchors");
  const Lab lab(cfg.lab);
  const auto anchors = read_anchors(c.input);
  const auto start = starting_policy(lab, c);
  auto hooks = make_hooks(cfg);
  const auto frozen = hooks.make_source(lab, snapshot(start), cfg.solver.temperature);
  QuestionerStats stats;
  const auto q = train_questioner(start, lab, anchors, *frozen, cfg.grpo, cfg.questioner,
                                  derive_seed(cfg.seed, {1}), &stats);
  const fs::path out(cfg.out_dir);
  save_checkpoint(q, out / "questioner.json");
  io::write_atomic(out / "generated.jsonl", jsonl<GeneratedQuestion>(stats.history));
  std::cout << "groups " << stats.groups << "  mean reward " << stats.mean_reward << "  malformed "
            << stats.malformed << '/' << stats.generated << '\n';
  return 0;
}

int cmd_train_solver(const Common& c) {
  const auto cfg = resolve(c);
  echo_config(cfg);
  if (c.input.empty()) throw ValidationError("train-solver needs --buffer");
  const Lab lab(cfg.lab);
  const auto buffer = load_training_buffer(c.input);
  SolverStats stats;
  const auto s = train_solver(starting_policy(lab, c), lab, buffer, cfg.grpo, cfg.solver,
                              derive_seed(cfg.seed, {2}), &stats);
  save_checkpoint(s, fs::path(cfg.out_dir) / "solver.json");
  std::cout << "groups " << stats.groups << "  mean reward " << stats.mean_reward << '\n';
  return 0;
}

int cmd_run_loop(const Common& c) {
  const auto cfg = resolve(c);
  Orchestrator o(cfg, cfg.out_dir, make_hooks(cfg));
  const auto st = o.run_loop();
  std::cout << "completed " << st.t << " iteration(s) in " << cfg.out_dir << '\n';
  return 0;
}

int cmd_resume(const Common& c) {
  if (c.out_dir.empty()) throw ValidationError("resume needs --out-dir");
  RunConfig stored;
  const fs::path eff = fs::path(c.out_dir) / "config.effective.json";
  LoopHooks hooks;
  hooks.log = log_line;
  if (fs::exists(eff)) {
    // A broken stored config is reported by resume itself as corruption.
    try {
      stored = load_config_json(nlohmann::json::parse(io::read_file(eff)));
    } catch (const std::exception&) {
      stored = RunConfig{};
    }
    hooks = make_hooks(stored);
  }
  const auto st = Orchestrator::resume(c.out_dir, hooks);
  std::cout << "completed " << st.t << " iteration(s) in " << c.out_dir << '\n';
  return 0;
}

int cmd_report(const Common& c) {
  const fs::path dir = c.out_dir.empty() ? fs::path(resolve(c).out_dir) : fs::path(c.out_dir);
  const auto r = report(dir);
  std::cout << r.summary;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2evo: difficulty-aware questioner/solver self-evolution on synthetic tasks"};
  app.require_subcommand(1);
  Common c;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", c.config, "JSON config file");
    sub->add_option("--set", c.overrides, "dotted-key override, e.g. grpo.clip_eps=0.2")->allow_extra_args(false);
    sub->add_option("--seed", c.seed, "seed override");
    sub->add_option("--out-dir", c.out_dir, "output directory");
    sub->add_option("--endpoint", c.endpoint, "base URL of an OpenAI-compatible endpoint");
  };
  auto* est = app.add_subcommand("estimate-difficulty", "estimate difficulty of the real pool");
  auto* mine = app.add_subcommand("mine-anchors", "write the mid-band anchors of the real pool");
  auto* tq = app.add_subcommand("train-questioner", "one questioner pass over an anchor file");
  auto* ts = app.add_subcommand("train-solver", "one solver pass over a buffer file");
  auto* run = app.add_subcommand("run-loop", "run the full loop");
  auto* rep = app.add_subcommand("report", "write CSVs and a summary for a run directory");
  auto* res = app.add_subcommand("resume", "continue a run from its last completed iteration");
  for (auto* s : {est, mine, tq, ts, run, rep, res}) add_common(s);
  for (auto* s : {est, mine, tq, ts}) s->add_option("--checkpoint", c.checkpoint, "policy checkpoint (default: base model)");
  tq->add_option("--anchors", c.input, "anchors.jsonl from mine-anchors");
  ts->add_option("--buffer", c.input, "buffer.jsonl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (*est) return cmd_estimate(c, false);
    if (*mine) return cmd_estimate(c, true);
    if (*tq) return cmd_train_questioner(c);
    if (*ts) return cmd_train_solver(c);
    if (*run) return cmd_run_loop(c);
    if (*rep) return cmd_report(c);
    if (*res) return cmd_resume(c);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return 3;
}
