#pragma once

// Run configuration: JSON file + dotted-key overrides merged onto defaults,
// with unknown-key suggestions and one aggregated validation report.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "d2evo/buffer.hpp"
#include "d2evo/difficulty.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/grpo.hpp"
#include "d2evo/io.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/questioner.hpp"
#include "d2evo/solver.hpp"

namespace d2evo {

struct DatasetConfig {
  int real_count = 3180;
  int eval_count = 500;
  GenerationRanges ranges;
};

struct LoopConfig {
  std::string empty_anchor_fallback = "widen";  // or "halt"
  double widen_delta = 0.1;
  int acceptance_anchors = 500;
  int acceptance_questions = 4;
  int acceptance_votes = 10;
};

struct EndpointConfig {
  bool enabled = false;
  std::string base_url = "http://127.0.0.1:8000";
  std::string model = "local-model";
  std::string token_env = "D2EVO_API_TOKEN";
  double timeout_s = 30.0;
  int max_retries = 3;
  int backoff_ms = 200;
  double temperature = 1.0;
  int max_tokens = 1024;
  int n = 1;
  int max_in_flight = 4;
  std::string prompts;  // optional JSON file overriding the built-in templates

  void validate() const {
    if (!(timeout_s > 0.0)) throw ValidationError("endpoint.timeout_s must be > 0");
    if (max_retries < 0) throw ValidationError("endpoint.max_retries must be >= 0");
    if (backoff_ms < 0) throw ValidationError("endpoint.backoff_ms must be >= 0");
    if (n < 1) throw ValidationError("endpoint.n must be >= 1");
    if (max_tokens < 1) throw ValidationError("endpoint.max_tokens must be >= 1");
    if (max_in_flight < 1) throw ValidationError("endpoint.max_in_flight must be >= 1");
    if (!(temperature >= 0.0)) throw ValidationError("endpoint.temperature must be >= 0");
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  int T = 3;
  std::string out_dir = "runs/default";
  unsigned threads = 0;
  DatasetConfig dataset;
  LabConfig lab;
  DifficultyConfig difficulty;
  QuestionerConfig questioner;
  SolverConfig solver;
  GrpoConfig grpo;
  PoolConfig buffer;
  LoopConfig loop;
  EndpointConfig endpoint;
};

using Json = nlohmann::json;

inline Json to_json(const RunConfig& c) {
  Json subjects = Json::array();
  for (Subject s : c.dataset.ranges.subjects) subjects.push_back(std::string(to_string(s)));
  const auto& p = c.lab.prior;
  return Json{
      {"seed", c.seed},
      {"T", c.T},
      {"out_dir", c.out_dir},
      {"threads", c.threads},
      {"dataset",
       {{"real_count", c.dataset.real_count},
        {"eval_count", c.dataset.eval_count},
        {"subjects", subjects},
        {"k_min", c.dataset.ranges.k_min},
        {"k_max", c.dataset.ranges.k_max},
        {"m_min", c.dataset.ranges.m_min},
        {"m_max", c.dataset.ranges.m_max}}},
      {"vocab",
       {{"answer_count", c.lab.vocab.answer_count}, {"number_count", c.lab.vocab.number_count}}},
      {"policy", {{"k_clip", c.lab.k_clip}}},
      {"prior",
       {{"frame_logit", p.frame_logit},
        {"skill", p.skill},
        {"slope", p.slope},
        {"structure_logit", p.structure_logit},
        {"subject_switch_penalty", p.subject_switch_penalty},
        {"length_shift_penalty", p.length_shift_penalty},
        {"modulus_shift_penalty", p.modulus_shift_penalty},
        {"operand_penalty", p.operand_penalty},
        {"early_stop_penalty", p.early_stop_penalty}}},
      {"difficulty",
       {{"n_rollouts", c.difficulty.n_rollouts},
        {"band_low", c.difficulty.band_low},
        {"band_high", c.difficulty.band_high},
        {"estimation_temperature", c.difficulty.estimation_temperature}}},
      {"questioner",
       {{"temperature", c.questioner.temperature},
        {"n_votes", c.questioner.n_votes},
        {"learning_rate", c.questioner.learning_rate},
        {"tau_low", c.questioner.reward.tau_low},
        {"tau_high", c.questioner.reward.tau_high},
        {"exponent_a", c.questioner.reward.exponent_a}}},
      {"solver", {{"temperature", c.solver.temperature}, {"alpha", c.solver.reward.alpha}}},
      {"grpo",
       {{"clip_eps", c.grpo.clip_eps},
        {"kl_beta", c.grpo.kl_beta},
        {"group_size", c.grpo.group_size},
        {"learning_rate", c.grpo.learning_rate},
        {"std_floor", c.grpo.std_floor}}},
      {"buffer",
       {{"candidates_per_anchor", c.buffer.candidates_per_anchor},
        {"verifier", c.buffer.verifier}}},
      {"loop",
       {{"empty_anchor_fallback", c.loop.empty_anchor_fallback},
        {"widen_delta", c.loop.widen_delta},
        {"acceptance_anchors", c.loop.acceptance_anchors},
        {"acceptance_questions", c.loop.acceptance_questions},
        {"acceptance_votes", c.loop.acceptance_votes}}},
      {"endpoint",
       {{"enabled", c.endpoint.enabled},
        {"base_url", c.endpoint.base_url},
        {"model", c.endpoint.model},
        {"token_env", c.endpoint.token_env},
        {"timeout_s", c.endpoint.timeout_s},
        {"max_retries", c.endpoint.max_retries},
        {"backoff_ms", c.endpoint.backoff_ms},
        {"temperature", c.endpoint.temperature},
        {"max_tokens", c.endpoint.max_tokens},
        {"n", c.endpoint.n},
        {"max_in_flight", c.endpoint.max_in_flight},
        {"prompts", c.endpoint.prompts}}},
  };
}

inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

namespace detail {

inline void flatten_keys(const Json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) flatten_keys(v, key, out);
    else out.push_back(key);
  }
}

inline std::string suggest(const std::string& key, const Json& defaults) {
  std::vector<std::string> keys;
  flatten_keys(defaults, "", keys);
  for (const auto& [k, v] : defaults.items())
    if (v.is_object()) keys.push_back(k);
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& k : keys) {
    // Compare against both the full dotted key and its last component.
    std::size_t d = levenshtein(key, k);
    const auto dot = k.rfind('.');
    const auto kd = key.rfind('.');
    if (dot != std::string::npos) {
      const std::string tail = k.substr(dot + 1);
      const std::string ktail = kd == std::string::npos ? key : key.substr(kd + 1);
      d = std::min(d, levenshtein(ktail, tail) + 1);
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline bool same_kind(const Json& def, const Json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_number_float()) return v.is_number();
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_array()) return v.is_array();
  if (def.is_object()) return v.is_object();
  return false;
}

inline std::string kind_name(const Json& def) {
  if (def.is_boolean()) return "boolean";
  if (def.is_string()) return "string";
  if (def.is_number_float()) return "number";
  if (def.is_number_unsigned()) return "non-negative integer";
  if (def.is_number_integer()) return "integer";
  if (def.is_array()) return "array";
  return "object";
}

// Merges `user` onto `base` in place, recording unknown keys and type
// mismatches instead of stopping at the first.
inline void merge_checked(Json& base, const Json& user, const std::string& prefix,
                          const Json& defaults, std::vector<std::string>& errors) {
  for (const auto& [k, v] : user.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) {
      errors.push_back("unknown key '" + key + "' (did you mean '" + suggest(key, defaults) + "'?)");
      continue;
    }
    Json& slot = base[k];
    if (!same_kind(slot, v)) {
      errors.push_back("key '" + key + "': expected " + kind_name(slot) + ", got " +
                       std::string(v.type_name()));
      continue;
    }
    if (slot.is_object()) merge_checked(slot, v, key, defaults, errors);
    else slot = v;
  }
}

}  // namespace detail

// Parses "a.b.c=value" into a nested object; the value is JSON when it
// parses, else a string.
inline Json override_object(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;
  }
  Json root = Json::object();
  Json* cur = &root;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      break;
    }
    (*cur)[part] = Json::object();
    cur = &(*cur)[part];
    start = dot + 1;
  }
  return root;
}

namespace detail {

inline void deep_merge(Json& into, const Json& from) {
  for (const auto& [k, v] : from.items()) {
    if (v.is_object() && into.contains(k) && into[k].is_object()) deep_merge(into[k], v);
    else into[k] = v;
  }
}

}  // namespace detail

inline RunConfig config_from_effective(const Json& j) {
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.T = j.at("T").get<int>();
  c.out_dir = j.at("out_dir").get<std::string>();
  c.threads = j.at("threads").get<unsigned>();
  const auto& d = j.at("dataset");
  c.dataset.real_count = d.at("real_count").get<int>();
  c.dataset.eval_count = d.at("eval_count").get<int>();
  c.dataset.ranges.subjects.clear();
  for (const auto& s : d.at("subjects")) c.dataset.ranges.subjects.push_back(subject_from_string(s.get<std::string>()));
  c.dataset.ranges.k_min = d.at("k_min").get<int>();
  c.dataset.ranges.k_max = d.at("k_max").get<int>();
  c.dataset.ranges.m_min = d.at("m_min").get<int>();
  c.dataset.ranges.m_max = d.at("m_max").get<int>();
  c.lab.vocab.answer_count = j.at("vocab").at("answer_count").get<int>();
  c.lab.vocab.number_count = j.at("vocab").at("number_count").get<int>();
  c.lab.k_clip = j.at("policy").at("k_clip").get<int>();
  const auto& p = j.at("prior");
  auto& pr = c.lab.prior;
  pr.frame_logit = p.at("frame_logit").get<double>();
  pr.skill = p.at("skill").get<double>();
  pr.slope = p.at("slope").get<double>();
  pr.structure_logit = p.at("structure_logit").get<double>();
  pr.subject_switch_penalty = p.at("subject_switch_penalty").get<double>();
  pr.length_shift_penalty = p.at("length_shift_penalty").get<double>();
  pr.modulus_shift_penalty = p.at("modulus_shift_penalty").get<double>();
  pr.operand_penalty = p.at("operand_penalty").get<double>();
  pr.early_stop_penalty = p.at("early_stop_penalty").get<double>();
  const auto& df = j.at("difficulty");
  c.difficulty.n_rollouts = df.at("n_rollouts").get<int>();
  c.difficulty.band_low = df.at("band_low").get<double>();
  c.difficulty.band_high = df.at("band_high").get<double>();
  c.difficulty.estimation_temperature = df.at("estimation_temperature").get<double>();
  const auto& q = j.at("questioner");
  c.questioner.temperature = q.at("temperature").get<double>();
  c.questioner.n_votes = q.at("n_votes").get<int>();
  c.questioner.learning_rate = q.at("learning_rate").get<double>();
  c.questioner.reward.tau_low = q.at("tau_low").get<double>();
  c.questioner.reward.tau_high = q.at("tau_high").get<double>();
  c.questioner.reward.exponent_a = q.at("exponent_a").get<double>();
  c.solver.temperature = j.at("solver").at("temperature").get<double>();
  c.solver.reward.alpha = j.at("solver").at("alpha").get<double>();
  const auto& g = j.at("grpo");
  c.grpo.clip_eps = g.at("clip_eps").get<double>();
  c.grpo.kl_beta = g.at("kl_beta").get<double>();
  c.grpo.group_size = g.at("group_size").get<int>();
  c.grpo.learning_rate = g.at("learning_rate").get<double>();
  c.grpo.std_floor = g.at("std_floor").get<double>();
  c.buffer.candidates_per_anchor = j.at("buffer").at("candidates_per_anchor").get<int>();
  c.buffer.verifier = j.at("buffer").at("verifier").get<std::string>();
  const auto& l = j.at("loop");
  c.loop.empty_anchor_fallback = l.at("empty_anchor_fallback").get<std::string>();
  c.loop.widen_delta = l.at("widen_delta").get<double>();
  c.loop.acceptance_anchors = l.at("acceptance_anchors").get<int>();
  c.loop.acceptance_questions = l.at("acceptance_questions").get<int>();
  c.loop.acceptance_votes = l.at("acceptance_votes").get<int>();
  const auto& e = j.at("endpoint");
  c.endpoint.enabled = e.at("enabled").get<bool>();
  c.endpoint.base_url = e.at("base_url").get<std::string>();
  c.endpoint.model = e.at("model").get<std::string>();
  c.endpoint.token_env = e.at("token_env").get<std::string>();
  c.endpoint.timeout_s = e.at("timeout_s").get<double>();
  c.endpoint.max_retries = e.at("max_retries").get<int>();
  c.endpoint.backoff_ms = e.at("backoff_ms").get<int>();
  c.endpoint.temperature = e.at("temperature").get<double>();
  c.endpoint.max_tokens = e.at("max_tokens").get<int>();
  c.endpoint.n = e.at("n").get<int>();
  c.endpoint.max_in_flight = e.at("max_in_flight").get<int>();
  c.endpoint.prompts = e.at("prompts").get<std::string>();
  return c;
}

// Every invariant violation, not just the first.
inline std::vector<std::string> validation_errors(const RunConfig& c) {
  std::vector<std::string> errs;
  auto check = [&](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errs.push_back(std::string(section) + ": " + e.what());
    }
  };
  if (c.T < 0) errs.push_back("T must be >= 0");
  if (c.dataset.real_count < 1) errs.push_back("dataset.real_count must be >= 1");
  if (c.dataset.eval_count < 1) errs.push_back("dataset.eval_count must be >= 1");
  check("dataset", [&] { c.dataset.ranges.validate(c.lab.vocab.answer_count); });
  if (c.dataset.ranges.k_max > c.lab.vocab.number_count - 1)
    errs.push_back("dataset.k_max must be <= vocab.number_count - 1");
  check("lab", [&] { c.lab.validate(); });
  if (c.difficulty.band_low >= c.difficulty.band_high)
    errs.push_back("difficulty.band_low (" + Json(c.difficulty.band_low).dump() +
                   ") must be < difficulty.band_high (" + Json(c.difficulty.band_high).dump() + ")");
  else
    check("difficulty", [&] { c.difficulty.validate(); });
  check("questioner", [&] { c.questioner.validate(); });
  check("solver", [&] { c.solver.validate(); });
  check("grpo", [&] { c.grpo.validate(); });
  check("buffer", [&] { c.buffer.validate(); });
  if (c.loop.empty_anchor_fallback != "widen" && c.loop.empty_anchor_fallback != "halt")
    errs.push_back("loop.empty_anchor_fallback must be 'widen' or 'halt'");
  if (!(c.loop.widen_delta > 0.0 && c.loop.widen_delta < 1.0))
    errs.push_back("loop.widen_delta must be in (0, 1)");
  if (c.loop.acceptance_anchors < 1) errs.push_back("loop.acceptance_anchors must be >= 1");
  if (c.loop.acceptance_questions < 1) errs.push_back("loop.acceptance_questions must be >= 1");
  if (c.loop.acceptance_votes < 1) errs.push_back("loop.acceptance_votes must be >= 1");
  check("endpoint", [&] { c.endpoint.validate(); });
  return errs;
}

inline std::string join_report(const std::vector<std::string>& errs) {
  std::string msg = "invalid configuration (" + std::to_string(errs.size()) + " problem" +
                    (errs.size() == 1 ? "" : "s") + "):";
  for (const auto& e : errs) msg += "\n  - " + e;
  return msg;
}

// Defaults <- file <- overrides, then validation. Throws ConfigError with
// every problem found.
inline RunConfig load_config_json(const Json& file, const std::vector<std::string>& overrides = {}) {
  if (!file.is_object()) throw ConfigError("configuration must be a JSON object");
  const Json defaults = to_json(RunConfig{});
  Json user = file;
  std::vector<std::string> errors;
  for (const auto& o : overrides) {
    try {
      detail::deep_merge(user, override_object(o));
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  Json merged = defaults;
  // Rejected keys keep their defaults so the invariants can still be
  // checked and reported together with them.
  detail::merge_checked(merged, user, "", defaults, errors);
  RunConfig c;
  try {
    c = config_from_effective(merged);
    const auto verrs = validation_errors(c);
    errors.insert(errors.end(), verrs.begin(), verrs.end());
  } catch (const std::exception& e) {
    errors.push_back(e.what());
  }
  if (!errors.empty()) throw ConfigError(join_report(errors));
  return c;
}

inline RunConfig load_config(const std::optional<std::filesystem::path>& path,
                             const std::vector<std::string>& overrides = {}) {
  Json file = Json::object();
  if (path) {
    if (!std::filesystem::exists(*path)) throw ConfigError("config file " + path->string() + " does not exist");
    try {
      file = Json::parse(io::read_file(*path));
    } catch (const Json::exception& e) {
      throw ConfigError("config file " + path->string() + " does not parse: " + e.what());
    }
  }
  return load_config_json(file, overrides);
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a(to_json(c).dump()); }

}  // namespace d2evo
