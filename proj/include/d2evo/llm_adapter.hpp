#pragma once

// Optional bridge to an OpenAI-compatible chat-completions endpoint. A
// remote model can stand in for the solver wherever only answers are
// needed (difficulty estimation, votes, acceptance). Gradient steps stay on
// the native tabular policy.

#include <cctype>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "d2evo/config.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/lab.hpp"

namespace d2evo {

// ---------------------------------------------------------------------------
// Extraction.

// Content of the last \boxed{...}; nothing if absent or its braces never close.
inline std::optional<std::string> extract_boxed(std::string_view text) {
  static constexpr std::string_view kTag = "\\boxed{";
  const auto at = text.rfind(kTag);
  if (at == std::string_view::npos) return std::nullopt;
  const std::size_t start = at + kTag.size();
  int depth = 1;
  for (std::size_t i = start; i < text.size(); ++i) {
    if (text[i] == '{') ++depth;
    else if (text[i] == '}' && --depth == 0) return std::string(text.substr(start, i - start));
  }
  return std::nullopt;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// First <question>...</question> after the reasoning section. Text inside
// <think>...</think> is ignored; an unterminated <think> hides everything.
inline std::optional<std::string> extract_question(std::string_view text) {
  std::string_view rest = text;
  if (const auto open = rest.find("<think>"); open != std::string_view::npos) {
    const auto close = rest.find("</think>", open);
    if (close == std::string_view::npos) return std::nullopt;
    rest = rest.substr(close + 8);
  } else if (const auto close = rest.find("</think>"); close != std::string_view::npos) {
    rest = rest.substr(close + 8);
  }
  const auto q = rest.find("<question>");
  if (q == std::string_view::npos) return std::nullopt;
  const auto body = q + 10;
  const auto end = rest.find("</question>", body);
  if (end == std::string_view::npos) return std::nullopt;
  return trim(rest.substr(body, end - body));
}

// Whitespace-normalized exact match: collapse runs, strip the ends.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool space = false;
  for (char c : trim(s)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      space = true;
      continue;
    }
    if (space && !out.empty()) out += ' ';
    space = false;
    out += c;
  }
  return out;
}

inline std::optional<int> parse_int_answer(std::string_view s) {
  const auto n = normalize_answer(s);
  if (n.empty() || n.size() > 9) return std::nullopt;
  for (char c : n)
    if (!std::isdigit(static_cast<unsigned char>(c))) return std::nullopt;
  return std::stoi(n);
}

// ---------------------------------------------------------------------------
// Prompt templates.

enum class PromptRole { Questioner, Solver, Verifier };

inline std::string_view to_string(PromptRole r) {
  switch (r) {
    case PromptRole::Questioner: return "questioner";
    case PromptRole::Solver: return "solver";
    case PromptRole::Verifier: return "verifier";
  }
  return "?";
}

struct PromptTemplate {
  PromptRole role = PromptRole::Solver;
  std::string system;
  std::string user;

  std::set<std::string> placeholders() const {
    std::set<std::string> out;
    for (std::size_t i = user.find('{'); i != std::string::npos; i = user.find('{', i + 1)) {
      const auto j = user.find('}', i);
      if (j == std::string::npos) break;
      const auto name = user.substr(i + 1, j - i - 1);
      if (!name.empty() && name.find_first_not_of("abcdefghijklmnopqrstuvwxyz_") == std::string::npos)
        out.insert(name);
    }
    return out;
  }

  std::string render(const std::map<std::string, std::string>& fills) const {
    for (const auto& p : placeholders())
      if (!fills.count(p))
        throw ValidationError(std::string(to_string(role)) + " template needs a value for {" + p + "}");
    std::string out;
    for (std::size_t i = 0; i < user.size();) {
      if (user[i] == '{') {
        const auto j = user.find('}', i);
        if (j != std::string::npos) {
          const auto it = fills.find(user.substr(i + 1, j - i - 1));
          if (it != fills.end()) {
            out += it->second;
            i = j + 1;
            continue;
          }
        }
      }
      out += user[i++];
    }
    return out;
  }
};

struct PromptSet {
  PromptTemplate questioner;
  PromptTemplate solver;
  PromptTemplate verifier;
};

inline PromptSet default_prompts() {
  PromptSet p;
  p.questioner = {PromptRole::Questioner,
                  "You write practice problems for a student model. Each new problem should "
                  "stay on the given topic, be answerable with a single number, and be slightly "
                  "harder than the example you are shown.",
                  "Topic: {subject}\n\nExample problem:\n{example_problem}\n\nExample solution:\n"
                  "{reference_solution}\n\nPlan inside <think></think>. Afterwards write the new "
                  "problem, and nothing else, between <question> and </question>."};
  p.solver = {PromptRole::Solver,
              "Work through the problem one step at a time. Finish with the final answer alone "
              "inside \\boxed{}.",
              "{problem}"};
  p.verifier = {PromptRole::Verifier,
                "You check whether a proposed final answer to a problem is correct.",
                "Problem:\n{problem}\n\nProposed answer: {reference_solution}\n\nReply with "
                "\\boxed{yes} if it is correct and \\boxed{no} otherwise."};
  return p;
}

// JSON file {questioner|solver|verifier: {system, user}}; missing roles keep
// their defaults.
inline PromptSet load_prompts(const std::filesystem::path& path) {
  PromptSet p = default_prompts();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const std::exception& e) {
    throw ConfigError("prompt file " + path.string() + ": " + e.what());
  }
  for (auto* t : {&p.questioner, &p.solver, &p.verifier}) {
    const std::string key(to_string(t->role));
    if (!j.contains(key)) continue;
    try {
      t->system = j.at(key).at("system").get<std::string>();
      t->user = j.at(key).at("user").get<std::string>();
    } catch (const std::exception& e) {
      throw ConfigError("prompt file " + path.string() + ", role " + key + ": " + e.what());
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// HTTP client.

struct CompletionResult {
  std::vector<std::string> texts;
  int retries = 0;
};

class EndpointClient {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit EndpointClient(EndpointConfig cfg, Logger log = {})
      : cfg_(std::move(cfg)), log_(std::move(log)) {
    cfg_.validate();
    const char* tok = std::getenv(cfg_.token_env.c_str());
    if (tok == nullptr || *tok == '\0')
      throw ConfigError("endpoint token variable " + cfg_.token_env + " is not set");
    token_ = tok;
    prompts_ = cfg_.prompts.empty() ? default_prompts() : load_prompts(cfg_.prompts);
  }

  const PromptSet& prompts() const { return prompts_; }
  const EndpointConfig& config() const { return cfg_; }

  CompletionResult complete(const PromptTemplate& tpl, const std::map<std::string, std::string>& fills,
                            int n, std::optional<std::uint64_t> seed = std::nullopt) const {
    if (n < 1) throw ValidationError("complete: n must be >= 1");
    nlohmann::json body{{"model", cfg_.model},
                        {"messages",
                         {{{"role", "system"}, {"content", tpl.system}},
                          {{"role", "user"}, {"content", tpl.render(fills)}}}},
                        {"temperature", cfg_.temperature},
                        {"n", n},
                        {"max_tokens", cfg_.max_tokens}};
    if (seed) body["seed"] = *seed;
    InFlight guard(*this);
    return post(body.dump(), n);
  }

 private:
  // Bounds concurrent requests to max_in_flight.
  struct InFlight {
    explicit InFlight(const EndpointClient& c) : c_(c) {
      std::unique_lock lock(c_.mu_);
      c_.cv_.wait(lock, [&] { return c_.in_flight_ < c_.cfg_.max_in_flight; });
      ++c_.in_flight_;
    }
    ~InFlight() {
      {
        std::lock_guard lock(c_.mu_);
        --c_.in_flight_;
      }
      c_.cv_.notify_one();
    }
    const EndpointClient& c_;
  };

  std::string scrub(std::string s) const {
    for (auto at = s.find(token_); !token_.empty() && at != std::string::npos; at = s.find(token_))
      s.replace(at, token_.size(), "***");
    return s;
  }

  void log(const std::string& msg) const {
    if (log_) log_(scrub(msg));
  }

  CompletionResult post(const std::string& payload, int n) const {
    httplib::Client cli(cfg_.base_url);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    const httplib::Headers headers{{"Authorization", "Bearer " + token_}};
    const std::string url = cfg_.base_url + "/v1/chat/completions";

    CompletionResult out;
    for (int attempt = 0;; ++attempt) {
      log("POST " + url + " attempt " + std::to_string(attempt + 1));
      auto res = cli.Post("/v1/chat/completions", headers, payload, "application/json");
      if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout)
          throw TransportError("no response from " + url + " within the " +
                               std::to_string(cfg_.timeout_s) + " s timeout (" +
                               httplib::to_string(err) + ")");
        throw TransportError("request to " + url + " failed: " + httplib::to_string(err));
      }
      const int status = res->status;
      if (status >= 200 && status < 300) {
        out.texts = parse_choices(res->body, n);
        return out;
      }
      const bool retryable = status == 429 || (status >= 500 && status < 600);
      if (retryable && attempt < cfg_.max_retries) {
        ++out.retries;
        const auto wait = std::chrono::milliseconds(static_cast<long long>(cfg_.backoff_ms) << attempt);
        log("status " + std::to_string(status) + ", retrying in " + std::to_string(wait.count()) + " ms");
        std::this_thread::sleep_for(wait);
        continue;
      }
      std::string snippet = scrub(res->body.substr(0, 200));
      throw TransportError("endpoint returned HTTP " + std::to_string(status) + " after " +
                               std::to_string(out.retries) + " retries: " + snippet,
                           status);
    }
  }

  static std::vector<std::string> parse_choices(const std::string& body, int n) {
    std::vector<std::string> texts;
    try {
      const auto j = nlohmann::json::parse(body);
      for (const auto& c : j.at("choices")) {
        const auto& content = c.at("message").at("content");
        texts.push_back(content.is_string() ? content.get<std::string>() : std::string());
      }
    } catch (const std::exception& e) {
      throw TransportError(std::string("malformed completion body: ") + e.what());
    }
    if (static_cast<int>(texts.size()) != n)
      throw TransportError("endpoint returned " + std::to_string(texts.size()) + " choices, expected " +
                           std::to_string(n));
    return texts;
  }

  EndpointConfig cfg_;
  Logger log_;
  std::string token_;
  PromptSet prompts_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  mutable int in_flight_ = 0;
};

// Solver answers from the endpoint: the task is rendered as text, each
// choice's last \boxed{} is parsed as an integer.
class EndpointSolver : public SolverSource {
 public:
  EndpointSolver(std::shared_ptr<const EndpointClient> client, std::uint64_t version = 0)
      : client_(std::move(client)), version_(version) {}

  std::vector<std::optional<int>> answers(const TaskSpec& spec, int n,
                                          std::uint64_t seed) const override {
    const auto res = client_->complete(client_->prompts().solver, {{"problem", task_to_text(spec)}}, n, seed);
    std::vector<std::optional<int>> out;
    for (const auto& t : res.texts) {
      const auto boxed = extract_boxed(t);
      out.push_back(boxed ? parse_int_answer(*boxed) : std::nullopt);
    }
    return out;
  }
  std::uint64_t version() const override { return version_; }

 private:
  std::shared_ptr<const EndpointClient> client_;
  std::uint64_t version_;
};

// One anchor-conditioned question from the endpoint, parsed back into the
// task family; nothing when the tags are missing or the text does not parse.
inline std::optional<TaskSpec> endpoint_question(const EndpointClient& client, const TaskSpec& anchor,
                                                 int label, int answer_vocab,
                                                 std::optional<std::uint64_t> seed = std::nullopt) {
  const auto res = client.complete(client.prompts().questioner,
                                   {{"subject", std::string(to_string(anchor.subject))},
                                    {"example_problem", task_to_text(anchor)},
                                    {"reference_solution", "The answer is \\boxed{" + std::to_string(label) + "}."}},
                                   1, seed);
  const auto q = extract_question(res.texts.at(0));
  if (!q) return std::nullopt;
  return task_from_text(*q, answer_vocab);
}

}  // namespace d2evo
