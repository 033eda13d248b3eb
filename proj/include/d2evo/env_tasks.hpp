#pragma once

// Synthetic task family: left-to-right modular arithmetic chains.
//
// A task is a chain x1 op1 x2 op2 ... xk reduced modulo m. Add-chains use
// only '+', mixed-chains may use '+' and '*'. The answer is always a single
// residue in [0, m), and m never exceeds the answer vocabulary, so every
// answer is expressible as one answer token.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/rng.hpp"

namespace d2evo {

using Json = nlohmann::json;

enum class Subject { AddChain, MixedChain };
enum class Op { Plus, Times };
enum class Source { Real, Generated };
enum class LabelKind { Oracle, Pseudo };

inline constexpr int kSubjectCount = 2;

inline std::string_view to_string(Subject s) {
  return s == Subject::AddChain ? "add-chain" : "mixed-chain";
}
inline std::string_view to_string(Op o) { return o == Op::Plus ? "plus" : "times"; }
inline std::string_view to_string(Source s) {
  return s == Source::Real ? "real" : "generated";
}
inline std::string_view to_string(LabelKind k) {
  return k == LabelKind::Oracle ? "oracle" : "pseudo";
}

inline Subject subject_from_string(std::string_view s) {
  if (s == "add-chain") return Subject::AddChain;
  if (s == "mixed-chain") return Subject::MixedChain;
  throw ValidationError("unknown subject '" + std::string(s) + "'");
}
inline Op op_from_string(std::string_view s) {
  if (s == "plus") return Op::Plus;
  if (s == "times") return Op::Times;
  throw ValidationError("unknown op '" + std::string(s) + "'");
}
inline Source source_from_string(std::string_view s) {
  if (s == "real") return Source::Real;
  if (s == "generated") return Source::Generated;
  throw ValidationError("unknown source '" + std::string(s) + "'");
}
inline LabelKind label_kind_from_string(std::string_view s) {
  if (s == "oracle") return LabelKind::Oracle;
  if (s == "pseudo") return LabelKind::Pseudo;
  throw ValidationError("unknown label_kind '" + std::string(s) + "'");
}

struct TaskSpec {
  std::string id;
  Subject subject = Subject::AddChain;
  int chain_length = 1;
  int modulus = 2;
  std::vector<int> operands;
  std::vector<Op> ops;
  Source source = Source::Real;

  bool operator==(const TaskSpec&) const = default;
};

// Two specs pose the same problem (ids and provenance ignored).
inline bool same_problem(const TaskSpec& a, const TaskSpec& b) {
  return a.subject == b.subject && a.chain_length == b.chain_length &&
         a.modulus == b.modulus && a.operands == b.operands && a.ops == b.ops;
}

// Structural validation. `answer_vocab` (when positive) additionally bounds
// the modulus so the answer fits one answer token.
inline void validate(const TaskSpec& spec, int answer_vocab = 0) {
  auto fail = [&](const std::string& why) {
    throw ValidationError("malformed task '" + spec.id + "': " + why);
  };
  if (spec.chain_length < 1) fail("chain_length must be >= 1");
  if (spec.modulus < 2) fail("modulus must be >= 2");
  if (answer_vocab > 0 && spec.modulus > answer_vocab)
    fail("modulus " + std::to_string(spec.modulus) + " exceeds answer vocabulary " +
         std::to_string(answer_vocab));
  if (static_cast<int>(spec.operands.size()) != spec.chain_length)
    fail("operands length differs from chain_length");
  if (static_cast<int>(spec.ops.size()) != spec.chain_length - 1)
    fail("ops length must be chain_length - 1");
  for (int x : spec.operands)
    if (x < 0 || x >= spec.modulus) fail("operand out of [0, modulus)");
  if (spec.subject == Subject::AddChain)
    for (Op o : spec.ops)
      if (o != Op::Plus) fail("add-chain may only use plus");
}

inline int oracle_answer(const TaskSpec& spec) {
  validate(spec);
  const int m = spec.modulus;
  int acc = spec.operands[0] % m;
  for (std::size_t i = 0; i < spec.ops.size(); ++i) {
    const int x = spec.operands[i + 1];
    acc = spec.ops[i] == Op::Plus ? (acc + x) % m : (acc * x) % m;
  }
  return acc;
}

// Closed-form latent difficulty of the family: chain length plus one unit
// for the multiplicative regime.
inline int latent_difficulty(Subject subject, int chain_length) {
  return chain_length + (subject == Subject::MixedChain ? 1 : 0);
}
inline int latent_difficulty(const TaskSpec& spec) {
  return latent_difficulty(spec.subject, spec.chain_length);
}

// ---------------------------------------------------------------------------
// Token vocabulary shared by both roles.
//
//   0            BEGIN   (solver frame)
//   1            END     (solver frame)
//   2 .. 2+N-1   numbers 0..N-1; the first `answer_count` are answer tokens
//   then         QBEGIN QEND ADD MIXED PLUS TIMES   (question markup)
//
// A solver-only vocabulary (question_tokens = false) stops after the numbers.
struct Vocabulary {
  int answer_count = 5;
  int number_count = 6;
  bool question_tokens = true;

  static constexpr int kBegin = 0;
  static constexpr int kEnd = 1;

  int size() const { return 2 + number_count + (question_tokens ? 6 : 0); }
  int number(int n) const { return 2 + n; }
  int qbegin() const { return 2 + number_count; }
  int qend() const { return qbegin() + 1; }
  int subject_token(Subject s) const { return qbegin() + (s == Subject::AddChain ? 2 : 3); }
  int op_token(Op o) const { return qbegin() + (o == Op::Plus ? 4 : 5); }

  bool in_range(int tok) const { return tok >= 0 && tok < size(); }
  std::optional<int> number_value(int tok) const {
    if (tok >= 2 && tok < 2 + number_count) return tok - 2;
    return std::nullopt;
  }
  bool is_answer(int tok) const { return tok >= 2 && tok < 2 + answer_count; }
  std::optional<Subject> subject_of(int tok) const {
    if (!question_tokens) return std::nullopt;
    if (tok == subject_token(Subject::AddChain)) return Subject::AddChain;
    if (tok == subject_token(Subject::MixedChain)) return Subject::MixedChain;
    return std::nullopt;
  }
  std::optional<Op> op_of(int tok) const {
    if (!question_tokens) return std::nullopt;
    if (tok == op_token(Op::Plus)) return Op::Plus;
    if (tok == op_token(Op::Times)) return Op::Times;
    return std::nullopt;
  }

  void validate() const {
    if (answer_count < 2) throw ValidationError("answer_count must be >= 2");
    if (number_count < answer_count)
      throw ValidationError("number_count must cover the answer tokens");
  }

  std::string token_name(int tok) const {
    if (tok == kBegin) return "BEGIN";
    if (tok == kEnd) return "END";
    if (auto n = number_value(tok)) return std::to_string(*n);
    if (question_tokens) {
      if (tok == qbegin()) return "QBEGIN";
      if (tok == qend()) return "QEND";
      if (auto s = subject_of(tok)) return std::string(to_string(*s));
      if (auto o = op_of(tok)) return std::string(to_string(*o));
    }
    return "<" + std::to_string(tok) + ">";
  }
};

// Encoded length of a chain of length k: QBEGIN SUBJ K M x1 (op x)* QEND.
constexpr int encoded_length(int chain_length) { return 2 * chain_length + 4; }

inline std::vector<int> task_encode(const TaskSpec& spec, const Vocabulary& vocab) {
  validate(spec, vocab.answer_count);
  if (!vocab.question_tokens)
    throw ValidationError("vocabulary has no question tokens");
  if (spec.chain_length >= vocab.number_count || spec.modulus >= vocab.number_count)
    throw ValidationError("chain_length/modulus not representable by number tokens");
  std::vector<int> out;
  out.reserve(encoded_length(spec.chain_length));
  out.push_back(vocab.qbegin());
  out.push_back(vocab.subject_token(spec.subject));
  out.push_back(vocab.number(spec.chain_length));
  out.push_back(vocab.number(spec.modulus));
  out.push_back(vocab.number(spec.operands[0]));
  for (std::size_t i = 0; i < spec.ops.size(); ++i) {
    out.push_back(vocab.op_token(spec.ops[i]));
    out.push_back(vocab.number(spec.operands[i + 1]));
  }
  out.push_back(vocab.qend());
  return out;
}

inline std::string canonical_key(const TaskSpec& spec) {
  std::string key(to_string(spec.subject));
  key += '|';
  key += std::to_string(spec.modulus);
  key += '|';
  key += std::to_string(spec.operands[0]);
  for (std::size_t i = 0; i < spec.ops.size(); ++i) {
    key += spec.ops[i] == Op::Plus ? '+' : '*';
    key += std::to_string(spec.operands[i + 1]);
  }
  return key;
}

inline std::string generated_id(const TaskSpec& spec) {
  return "gen-" + io::hex64(fnv1a(canonical_key(spec)));
}

// Result of decoding a token sequence. Exactly one of `spec` / MALFORMED.
struct DecodeResult {
  std::optional<TaskSpec> spec;
  std::size_t error_pos = 0;
  std::string reason;

  bool ok() const { return spec.has_value(); }
  bool malformed() const { return !spec.has_value(); }
};

inline DecodeResult task_decode(std::span<const int> tokens, const Vocabulary& vocab) {
  auto bad = [](std::size_t pos, std::string why) {
    return DecodeResult{std::nullopt, pos, std::move(why)};
  };
  if (!vocab.question_tokens) return bad(0, "vocabulary has no question tokens");
  if (tokens.empty()) return bad(0, "empty sequence");
  if (tokens[0] != vocab.qbegin()) return bad(0, "expected QBEGIN");
  if (tokens.size() < 2) return bad(1, "missing subject");
  const auto subject = vocab.subject_of(tokens[1]);
  if (!subject) return bad(1, "expected subject token");
  if (tokens.size() < 3) return bad(2, "missing chain length");
  const auto k = vocab.number_value(tokens[2]);
  if (!k || *k < 1) return bad(2, "expected chain length >= 1");
  if (tokens.size() < 4) return bad(3, "missing modulus");
  const auto m = vocab.number_value(tokens[3]);
  if (!m || *m < 2 || *m > vocab.answer_count) return bad(3, "modulus out of range");

  TaskSpec spec;
  spec.subject = *subject;
  spec.chain_length = *k;
  spec.modulus = *m;
  spec.source = Source::Generated;
  std::size_t pos = 4;
  for (int i = 0; i < *k; ++i) {
    if (i > 0) {
      if (pos >= tokens.size()) return bad(pos, "missing op");
      const auto op = vocab.op_of(tokens[pos]);
      if (!op) return bad(pos, "expected op token");
      if (*subject == Subject::AddChain && *op != Op::Plus)
        return bad(pos, "times in add-chain");
      spec.ops.push_back(*op);
      ++pos;
    }
    if (pos >= tokens.size()) return bad(pos, "missing operand");
    const auto x = vocab.number_value(tokens[pos]);
    if (!x || *x >= *m) return bad(pos, "operand out of [0, modulus)");
    spec.operands.push_back(*x);
    ++pos;
  }
  if (pos >= tokens.size()) return bad(pos, "missing QEND");
  if (tokens[pos] != vocab.qend()) return bad(pos, "expected QEND");
  if (pos + 1 != tokens.size()) return bad(pos + 1, "tokens after QEND");
  spec.id = generated_id(spec);
  return DecodeResult{std::move(spec), 0, {}};
}

// ---------------------------------------------------------------------------
// Labeled records and sampling.

struct LabeledTask {
  TaskSpec spec;
  int label = 0;
  LabelKind label_kind = LabelKind::Oracle;
  std::optional<int> votes;

  bool operator==(const LabeledTask&) const = default;
};

inline void validate(const LabeledTask& t, int answer_vocab = 0, int max_votes = 0) {
  validate(t.spec, answer_vocab);
  if (t.label < 0 || t.label >= t.spec.modulus)
    throw ValidationError("label out of range for task '" + t.spec.id + "'");
  if (t.label_kind == LabelKind::Oracle) {
    if (t.votes) throw ValidationError("oracle label must not carry votes");
    if (t.label != oracle_answer(t.spec))
      throw ValidationError("oracle label disagrees with oracle for '" + t.spec.id + "'");
  } else {
    if (!t.votes || *t.votes < 1 || (max_votes > 0 && *t.votes > max_votes))
      throw ValidationError("pseudo label needs 1 <= votes <= N_v");
  }
}

inline LabeledTask oracle_labeled(TaskSpec spec) {
  const int y = oracle_answer(spec);
  return LabeledTask{std::move(spec), y, LabelKind::Oracle, std::nullopt};
}

struct GenerationRanges {
  std::vector<Subject> subjects{Subject::AddChain, Subject::MixedChain};
  int k_min = 1;
  int k_max = 5;
  int m_min = 2;
  int m_max = 5;

  void validate(int answer_vocab = 0) const {
    if (subjects.empty()) throw ConfigError("generation ranges: no subjects");
    if (k_min < 1 || k_min > k_max) throw ConfigError("generation ranges: empty k range");
    if (m_min < 2 || m_min > m_max) throw ConfigError("generation ranges: empty m range");
    if (answer_vocab > 0 && m_max > answer_vocab)
      throw ConfigError("generation ranges: m_max exceeds answer vocabulary");
  }
};

inline TaskSpec sample_task(Rng& rng, const GenerationRanges& r) {
  TaskSpec spec;
  spec.subject = r.subjects[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(r.subjects.size()) - 1))];
  spec.chain_length = rng.uniform_int(r.k_min, r.k_max);
  spec.modulus = rng.uniform_int(r.m_min, r.m_max);
  for (int i = 0; i < spec.chain_length; ++i)
    spec.operands.push_back(rng.uniform_int(0, spec.modulus - 1));
  for (int i = 1; i < spec.chain_length; ++i)
    spec.ops.push_back(spec.subject == Subject::AddChain || rng.bernoulli(0.5) ? Op::Plus
                                                                              : Op::Times);
  return spec;
}

// Draws `count` distinct problems (by canonical key), skipping any key in
// `exclude`. Ids are "<prefix>-NNNNN" in draw order.
inline std::vector<LabeledTask> sample_distinct(int count, const GenerationRanges& ranges,
                                                std::uint64_t seed, std::string_view prefix,
                                                const std::set<std::string>& exclude = {}) {
  if (count < 1) throw ConfigError("dataset count must be >= 1");
  ranges.validate();
  Rng rng(derive_seed(seed, {fnv1a(prefix)}));
  std::set<std::string> seen = exclude;
  std::vector<LabeledTask> out;
  out.reserve(static_cast<std::size_t>(count));
  const long long max_attempts = 1000LL * count + 10000;
  long long attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > max_attempts)
      throw ConfigError("generation ranges too small for " + std::to_string(count) +
                        " distinct tasks");
    TaskSpec spec = sample_task(rng, ranges);
    if (!seen.insert(canonical_key(spec)).second) continue;
    char id[32];
    std::snprintf(id, sizeof id, "-%05zu", out.size());
    spec.id = std::string(prefix) + id;
    spec.source = Source::Real;
    out.push_back(oracle_labeled(std::move(spec)));
  }
  return out;
}

inline std::vector<LabeledTask> sample_real_dataset(int count, const GenerationRanges& ranges,
                                                    std::uint64_t seed) {
  return sample_distinct(count, ranges, seed, "real");
}

// ---------------------------------------------------------------------------
// JSON-lines records: id, subject, k, m, operands, ops, source, label,
// label_kind, votes.

inline Json to_json(const LabeledTask& t) {
  Json ops = Json::array();
  for (Op o : t.spec.ops) ops.push_back(std::string(to_string(o)));
  Json j;
  j["id"] = t.spec.id;
  j["subject"] = std::string(to_string(t.spec.subject));
  j["k"] = t.spec.chain_length;
  j["m"] = t.spec.modulus;
  j["operands"] = t.spec.operands;
  j["ops"] = std::move(ops);
  j["source"] = std::string(to_string(t.spec.source));
  j["label"] = t.label;
  j["label_kind"] = std::string(to_string(t.label_kind));
  j["votes"] = t.votes ? Json(*t.votes) : Json(nullptr);
  return j;
}

inline LabeledTask labeled_task_from_json(const Json& j) {
  static const std::set<std::string> kFields{"id",  "subject", "k",     "m",          "operands",
                                             "ops", "source",  "label", "label_kind", "votes"};
  if (!j.is_object()) throw ValidationError("task record is not an object");
  for (const auto& [key, _] : j.items())
    if (!kFields.count(key)) throw ValidationError("unexpected task field '" + key + "'");
  for (const auto& f : kFields)
    if (!j.contains(f)) throw ValidationError("task record missing '" + f + "'");
  try {
    LabeledTask t;
    t.spec.id = j.at("id").get<std::string>();
    t.spec.subject = subject_from_string(j.at("subject").get<std::string>());
    t.spec.chain_length = j.at("k").get<int>();
    t.spec.modulus = j.at("m").get<int>();
    t.spec.operands = j.at("operands").get<std::vector<int>>();
    for (const auto& o : j.at("ops")) t.spec.ops.push_back(op_from_string(o.get<std::string>()));
    t.spec.source = source_from_string(j.at("source").get<std::string>());
    t.label = j.at("label").get<int>();
    t.label_kind = label_kind_from_string(j.at("label_kind").get<std::string>());
    if (!j.at("votes").is_null()) t.votes = j.at("votes").get<int>();
    validate(t);
    return t;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("bad task record: ") + e.what());
  }
}

inline std::string to_jsonl(std::span<const LabeledTask> tasks) {
  std::string out;
  for (const auto& t : tasks) {
    out += to_json(t).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<LabeledTask> tasks_from_jsonl(const std::string& text) {
  std::vector<LabeledTask> out;
  std::size_t line_no = 0;
  for (const auto& line : io::split_lines(text)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(labeled_task_from_json(Json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plain-text rendering, used by the endpoint adapter. The parser accepts
// exactly what the renderer produces (modulo surrounding whitespace).

inline std::string task_to_text(const TaskSpec& spec) {
  std::ostringstream ss;
  ss << "Subject: " << to_string(spec.subject) << ". Evaluate " << spec.operands[0];
  for (std::size_t i = 0; i < spec.ops.size(); ++i)
    ss << (spec.ops[i] == Op::Plus ? " + " : " * ") << spec.operands[i + 1];
  ss << " from left to right, then reduce modulo " << spec.modulus << '.';
  return ss.str();
}

inline std::optional<TaskSpec> task_from_text(std::string_view text, int answer_vocab = 0) {
  std::istringstream in{std::string(text)};
  std::string word;
  auto expect = [&](std::string_view w) { return (in >> word) && word == w; };
  if (!expect("Subject:")) return std::nullopt;
  if (!(in >> word) || word.empty() || word.back() != '.') return std::nullopt;
  word.pop_back();
  TaskSpec spec;
  try {
    spec.subject = subject_from_string(word);
  } catch (const ValidationError&) {
    return std::nullopt;
  }
  if (!expect("Evaluate")) return std::nullopt;
  long long x;
  if (!(in >> x)) return std::nullopt;
  if (x < 0 || x > 1'000'000) return std::nullopt;
  spec.operands.push_back(static_cast<int>(x));
  while (in >> word) {
    if (word == "from") break;
    Op op;
    if (word == "+") op = Op::Plus;
    else if (word == "*") op = Op::Times;
    else return std::nullopt;
    if (!(in >> x) || x < 0 || x > 1'000'000) return std::nullopt;
    spec.ops.push_back(op);
    spec.operands.push_back(static_cast<int>(x));
  }
  if (word != "from") return std::nullopt;
  for (std::string_view w : {"left", "to", "right,", "then", "reduce", "modulo"})
    if (!expect(w)) return std::nullopt;
  if (!(in >> word) || word.size() < 2 || word.back() != '.') return std::nullopt;
  word.pop_back();
  try {
    std::size_t used = 0;
    spec.modulus = std::stoi(word, &used);
    if (used != word.size()) return std::nullopt;
  } catch (const std::exception&) {
    return std::nullopt;
  }
  if (in >> word) return std::nullopt;
  spec.chain_length = static_cast<int>(spec.operands.size());
  spec.source = Source::Generated;
  try {
    validate(spec, answer_vocab);
  } catch (const ValidationError&) {
    return std::nullopt;
  }
  spec.id = generated_id(spec);
  return spec;
}

}  // namespace d2evo
