#pragma once

// Shared helpers for the test suites and the acceptance binary: scratch
// directories, hand-rolled generators, exact reference distributions, the
// standard loop fixture, and a local chat-completions stub.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "d2evo/config.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/io.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/orchestrator.hpp"
#include "d2evo/policy.hpp"
#include "d2evo/rng.hpp"

#ifdef D2EVO_WITH_STUB
#include "httplib.h"
#include "d2evo/llm_adapter.hpp"
#endif

namespace d2evo::testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "d2evo") {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

// ---------------------------------------------------------------------------
// Generators.

inline TaskSpec random_spec(Rng& rng, const GenerationRanges& r = {}) {
  TaskSpec s = sample_task(rng, r);
  s.id = "t-" + std::to_string(rng.next() % 1000000);
  return s;
}

inline void fill_random(PolicyParams& p, Rng& rng, double scale) {
  for (double& z : p.raw()) z = scale * rng.normal();
}

inline PolicyParams random_policy(int V, int L, int C, Rng& rng, double scale = 1.0) {
  PolicyParams p(V, L, C);
  fill_random(p, rng, scale);
  return p;
}

// Random solver logits on the three solver positions, biased toward the
// frame so that pass rates cover the interior of [0, 1].
inline PolicyParams random_solver_policy(const Lab& lab, Rng& rng) {
  PolicyParams p = lab.empty_policy();
  const int V = p.vocab_size();
  for (int c = 0; c < lab.solver_contexts(); ++c)
    for (int pos = 0; pos < 3; ++pos)
      for (int prev = 0; prev <= V; ++prev) {
        auto s = p.slot(c, pos, prev);
        for (int v = 0; v < V; ++v) s[static_cast<std::size_t>(v)] = rng.normal();
        if (pos == 0) s[Vocabulary::kBegin] += 3.0 + 2.0 * rng.uniform();
        if (pos == 1)
          for (int a = 0; a < lab.answer_count(); ++a)
            s[static_cast<std::size_t>(lab.vocab().number(a))] += 2.0 + 2.0 * rng.uniform();
        if (pos == 2) s[Vocabulary::kEnd] += 3.0 + 2.0 * rng.uniform();
      }
  return p;
}

// ---------------------------------------------------------------------------
// Exact references.

inline double log_choose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

inline double binom_pmf(int n, int k, double p) {
  if (p == 0.0) return k == 0 ? 1.0 : 0.0;
  if (p == 1.0) return k == n ? 1.0 : 0.0;
  return std::exp(log_choose(n, k) + k * std::log(p) + (n - k) * std::log1p(-p));
}

// P(strict majority of n voters right), each right with probability p.
inline double majority_tail(double p, int n) {
  double s = 0.0;
  for (int k = n / 2 + 1; k <= n; ++k) s += binom_pmf(n, k, p);
  return s;
}

// Every count vector of n draws over `cats` categories, with its
// multinomial probability under probabilities `q`.
inline void for_each_count_vector(int n, const std::vector<double>& q,
                                  const std::function<void(const std::vector<int>&, double)>& fn) {
  const int cats = static_cast<int>(q.size());
  std::vector<int> counts(static_cast<std::size_t>(cats), 0);
  std::function<void(int, int)> rec = [&](int c, int left) {
    if (c == cats - 1) {
      counts[static_cast<std::size_t>(c)] = left;
      double lp = std::lgamma(n + 1.0);
      for (int i = 0; i < cats; ++i) {
        const int k = counts[static_cast<std::size_t>(i)];
        lp -= std::lgamma(k + 1.0);
        if (k > 0) {
          if (q[static_cast<std::size_t>(i)] == 0.0) return;
          lp += k * std::log(q[static_cast<std::size_t>(i)]);
        }
      }
      fn(counts, std::exp(lp));
      return;
    }
    for (int k = 0; k <= left; ++k) {
      counts[static_cast<std::size_t>(c)] = k;
      rec(c + 1, left - k);
    }
  };
  rec(0, n);
}

// ---------------------------------------------------------------------------
// Test doubles.

// Answers drawn uniformly from [0, m).
class UniformSolver : public SolverSource {
 public:
  std::vector<std::optional<int>> answers(const TaskSpec& spec, int n,
                                          std::uint64_t seed) const override {
    ++calls;
    Rng rng(seed);
    std::vector<std::optional<int>> out;
    for (int i = 0; i < n; ++i) out.push_back(rng.uniform_int(0, spec.modulus - 1));
    return out;
  }
  std::uint64_t version() const override { return 0; }
  mutable std::atomic<long> calls{0};
};

// Always the oracle answer.
class OracleSource : public SolverSource {
 public:
  std::vector<std::optional<int>> answers(const TaskSpec& spec, int n, std::uint64_t) const override {
    ++calls;
    return std::vector<std::optional<int>>(static_cast<std::size_t>(n), oracle_answer(spec));
  }
  std::uint64_t version() const override { return 7; }
  mutable std::atomic<long> calls{0};
};

// Fixed answer lists per canonical key (cycled if n exceeds the list).
class ScriptedSource : public SolverSource {
 public:
  std::map<std::string, std::vector<std::optional<int>>> script;
  std::vector<std::optional<int>> answers(const TaskSpec& spec, int n, std::uint64_t) const override {
    const auto& v = script.at(canonical_key(spec));
    std::vector<std::optional<int>> out;
    for (int i = 0; i < n; ++i) out.push_back(v[static_cast<std::size_t>(i) % v.size()]);
    return out;
  }
  std::uint64_t version() const override { return 0; }
};

// ---------------------------------------------------------------------------
// Standard loop fixture: 300 real tasks, T = 3, fixed seed.

inline RunConfig fixture_config(const fs::path& out, int T = 3, std::uint64_t seed = 2026) {
  RunConfig c;
  c.seed = seed;
  c.T = T;
  c.out_dir = out.string();
  c.dataset.real_count = 300;
  c.dataset.eval_count = 200;
  return c;
}

inline std::vector<Json> read_jsonl(const fs::path& p) {
  std::vector<Json> out;
  for (const auto& line : io::split_lines(io::read_file(p)))
    if (!line.empty()) out.push_back(Json::parse(line));
  return out;
}

// ---------------------------------------------------------------------------
// Chat-completions stub.

#ifdef D2EVO_WITH_STUB

// Local HTTP server on an ephemeral port. The handler sees the parsed
// request body and the Authorization header and returns (status, body).
class StubServer {
 public:
  using Handler = std::function<std::pair<int, std::string>(const Json&, const std::string&)>;

  explicit StubServer(Handler h) : handler_(std::move(h)) {
    server_.new_task_queue = [] { return new httplib::ThreadPool(8); };
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++requests;
      Json body;
      try {
        body = Json::parse(req.body);
      } catch (const std::exception&) {
        res.status = 400;
        return;
      }
      const auto [status, text] = handler_(body, req.get_header_value("Authorization"));
      res.status = status;
      res.set_content(text, "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  static std::string completion(const std::vector<std::string>& texts) {
    Json choices = Json::array();
    for (std::size_t i = 0; i < texts.size(); ++i)
      choices.push_back({{"index", i}, {"message", {{"role", "assistant"}, {"content", texts[i]}}}});
    return Json{{"choices", choices}}.dump();
  }

  std::atomic<int> requests{0};

 private:
  httplib::Server server_;
  Handler handler_;
  int port_ = 0;
  std::thread thread_;
};

// A stub that answers exactly like the native tabular solver. Each source
// the loop creates registers its snapshot under a model name; the stub
// parses the rendered task back and replays the native rollouts with the
// request's seed.
class NativeEmulator {
 public:
  explicit NativeEmulator(const Lab& lab)
      : lab_(lab), server_([this](const Json& body, const std::string&) { return handle(body); }) {}

  std::string url() const { return server_.url(); }
  int requests() const { return server_.requests.load(); }

  LoopHooks hooks(const EndpointConfig& base) {
    LoopHooks h;
    h.make_source = [this, base](const Lab&, PolicySnapshot p, double temp) {
      EndpointConfig cfg = base;
      cfg.enabled = true;
      cfg.base_url = url();
      {
        std::lock_guard lock(mu_);
        cfg.model = "native-" + std::to_string(models_.size());
        models_[cfg.model] = std::make_unique<NativeSolver>(lab_, p, temp);
      }
      auto client = std::make_shared<const EndpointClient>(cfg);
      return std::unique_ptr<SolverSource>(new EndpointSolver(client, p->version()));
    };
    return h;
  }

 private:
  std::pair<int, std::string> handle(const Json& body) {
    const SolverSource* src = nullptr;
    {
      std::lock_guard lock(mu_);
      const auto it = models_.find(body.at("model").get<std::string>());
      if (it == models_.end()) return {404, R"({"error":"unknown model"})"};
      src = it->second.get();
    }
    const auto& user = body.at("messages").at(1).at("content").get_ref<const std::string&>();
    const auto spec = task_from_text(user, lab_.answer_count());
    if (!spec) return {400, R"({"error":"unparseable task"})"};
    const int n = body.at("n").get<int>();
    const auto seed = body.at("seed").get<std::uint64_t>();
    std::vector<std::string> texts;
    for (const auto& a : src->answers(*spec, n, seed))
      texts.push_back(a ? "Working it through.\nThe answer is \\boxed{" + std::to_string(*a) + "}."
                        : "I could not finish this one.");
    return {200, StubServer::completion(texts)};
  }

  const Lab& lab_;
  std::mutex mu_;
  std::map<std::string, std::unique_ptr<NativeSolver>> models_;
  StubServer server_;
};

#endif

}  // namespace d2evo::testing
