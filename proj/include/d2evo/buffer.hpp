#pragma once

// The per-iteration hybrid training buffer: mid-band real anchors plus
// band-filtered, vote-labeled generated questions.

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/difficulty.hpp"
#include "d2evo/env_tasks.hpp"
#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/lab.hpp"
#include "d2evo/pseudo_label.hpp"
#include "d2evo/questioner.hpp"
#include "d2evo/rewards.hpp"

namespace d2evo {

inline constexpr int kBufferFormatVersion = 1;

struct Provenance {
  std::string id;
  Source source = Source::Real;
  std::string anchor_id;        // generated only
  std::string questioner_ckpt;  // generated only
  double pass_rate = 0.0;       // generated only: agreement with the vote at admission

  bool operator==(const Provenance&) const = default;
};

struct HybridBuffer {
  std::vector<LabeledTask> real_items;
  std::vector<LabeledTask> gen_items;
  int iteration = 0;
  std::vector<Provenance> provenance;  // real items first, then generated, in order

  std::size_t size() const { return real_items.size() + gen_items.size(); }
  bool empty() const { return size() == 0; }
  bool operator==(const HybridBuffer&) const = default;
};

inline bool in_band(double x, const QuestionerRewardConfig& c) {
  return x >= c.tau_low && x <= c.tau_high;
}

struct GeneratedPool {
  std::vector<LabeledTask> items;
  std::vector<Provenance> provenance;
  int candidates = 0;
  int malformed = 0;
  int no_label = 0;
  int out_of_band = 0;
  int rejected = 0;
  int duplicates = 0;
};

// Admission of already-scored candidates: well formed, labeled, agreement
// inside [tau_low, tau_high], accepted by the verifier, first of its kind.
inline GeneratedPool admit_scored(std::span<const GeneratedQuestion> scored,
                                  const QuestionerRewardConfig& qc, const Verifier& verifier,
                                  const std::string& questioner_ckpt) {
  GeneratedPool pool;
  std::set<std::string> seen;
  for (const auto& q : scored) {
    ++pool.candidates;
    if (q.decoded.malformed()) {
      ++pool.malformed;
      continue;
    }
    if (!q.tally || q.tally->no_label()) {
      ++pool.no_label;
      continue;
    }
    if (!in_band(q.solver_pass_rate_vs_vote, qc)) {
      ++pool.out_of_band;
      continue;
    }
    const auto& spec = *q.decoded.spec;
    const int label = *q.tally->winner;
    if (label < 0 || label >= spec.modulus || !verifier(spec, label)) {
      ++pool.rejected;
      continue;
    }
    if (!seen.insert(canonical_key(spec)).second) {
      ++pool.duplicates;
      continue;
    }
    LabeledTask t{spec, label, LabelKind::Pseudo, q.tally->winner_count};
    t.spec.source = Source::Generated;
    pool.items.push_back(t);
    pool.provenance.push_back(
        {spec.id, Source::Generated, q.anchor_id, questioner_ckpt, q.solver_pass_rate_vs_vote});
  }
  return pool;
}

struct PoolConfig {
  int candidates_per_anchor = 8;
  std::string verifier = "oracle";

  void validate() const {
    if (candidates_per_anchor < 1) throw ValidationError("buffer.candidates_per_anchor must be >= 1");
    make_verifier(verifier);
  }
};

inline GeneratedPool build_generated_pool(const PolicyParams& questioner, const Lab& lab,
                                          std::span<const AnchorRecord> anchors,
                                          const SolverSource& frozen_solver,
                                          const QuestionerConfig& qc, const PoolConfig& pc,
                                          std::uint64_t seed, const std::string& questioner_ckpt,
                                          std::vector<GeneratedQuestion>* scored_out = nullptr,
                                          unsigned threads = 0) {
  if (anchors.empty()) throw LoopError("build_generated_pool: empty anchor set");
  std::vector<std::vector<GeneratedQuestion>> per(anchors.size());
  parallel_for(anchors.size(), threads, [&](std::size_t a) {
    const auto gseed = derive_seed(seed, {0x9001, fnv1a(anchors[a].spec.id)});
    per[a] = generate(questioner, lab, anchors[a], pc.candidates_per_anchor, qc.temperature, gseed);
    score_questions(per[a], frozen_solver, qc.n_votes, qc.reward, seed);
  });
  std::vector<GeneratedQuestion> all;
  for (auto& v : per)
    for (auto& q : v) all.push_back(std::move(q));
  auto pool = admit_scored(all, qc.reward, make_verifier(pc.verifier), questioner_ckpt);
  if (scored_out) *scored_out = std::move(all);
  return pool;
}

// Union with dedup by problem; a real item wins over a generated one.
inline HybridBuffer assemble(std::span<const AnchorRecord> real_mid, const GeneratedPool& pool,
                             int iteration) {
  if (real_mid.empty() && pool.items.empty())
    throw LoopError("empty hybrid buffer: no anchors and no admitted generated questions");
  HybridBuffer b;
  b.iteration = iteration;
  std::set<std::string> seen;
  for (const auto& a : real_mid) {
    if (!seen.insert(canonical_key(a.spec)).second) continue;
    b.real_items.push_back(LabeledTask{a.spec, a.label, LabelKind::Oracle, std::nullopt});
    b.provenance.push_back({a.spec.id, Source::Real, {}, {}, 0.0});
  }
  for (std::size_t i = 0; i < pool.items.size(); ++i) {
    if (!seen.insert(canonical_key(pool.items[i].spec)).second) continue;
    b.gen_items.push_back(pool.items[i]);
    b.provenance.push_back(pool.provenance[i]);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Persistence: one LabeledTask per line, then a manifest line.

inline nlohmann::json to_json(const Provenance& p) {
  nlohmann::json j{{"id", p.id}, {"source", std::string(to_string(p.source))}};
  if (p.source == Source::Generated) {
    j["anchor_id"] = p.anchor_id;
    j["questioner_ckpt"] = p.questioner_ckpt;
    j["pass_rate"] = p.pass_rate;
  }
  return j;
}

inline Provenance provenance_from_json(const nlohmann::json& j) {
  Provenance p;
  p.id = j.at("id").get<std::string>();
  p.source = source_from_string(j.at("source").get<std::string>());
  if (p.source == Source::Generated) {
    p.anchor_id = j.at("anchor_id").get<std::string>();
    p.questioner_ckpt = j.at("questioner_ckpt").get<std::string>();
    p.pass_rate = j.at("pass_rate").get<double>();
  }
  return p;
}

inline std::string serialize(const HybridBuffer& b) {
  std::string body;
  for (const auto* part : {&b.real_items, &b.gen_items})
    for (const auto& t : *part) {
      body += to_json(t).dump();
      body += '\n';
    }
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& p : b.provenance) prov.push_back(to_json(p));
  nlohmann::json m;
  m["format_version"] = kBufferFormatVersion;
  m["iteration"] = b.iteration;
  m["counts"] = {{"real", b.real_items.size()}, {"generated", b.gen_items.size()}};
  m["checksum"] = io::hex64(fnv1a(body));
  m["provenance"] = std::move(prov);
  return body + nlohmann::json{{"manifest", m}}.dump() + "\n";
}

inline HybridBuffer parse_buffer(const std::string& text, const std::string& where = "buffer") {
  bool complete = true;
  const auto lines = io::split_lines(text, &complete);
  auto corrupt = [&](std::size_t line_no, const std::string& why) {
    return CorruptionError(where + ": line " + std::to_string(line_no) + ": " + why);
  };
  if (lines.empty()) throw CorruptionError(where + ": empty file (no manifest)");
  if (!complete) throw corrupt(lines.size(), "truncated (no trailing newline)");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(lines.back()).at("manifest");
  } catch (const std::exception&) {
    throw corrupt(lines.size(), "last line is not a valid manifest");
  }
  HybridBuffer b;
  std::string body;
  for (std::size_t i = 0; i + 1 < lines.size(); ++i) {
    try {
      auto t = labeled_task_from_json(nlohmann::json::parse(lines[i]));
      (t.spec.source == Source::Real ? b.real_items : b.gen_items).push_back(std::move(t));
    } catch (const std::exception& e) {
      throw corrupt(i + 1, e.what());
    }
    body += lines[i];
    body += '\n';
  }
  const std::size_t mline = lines.size();
  try {
    if (manifest.at("format_version").get<int>() != kBufferFormatVersion)
      throw corrupt(mline, "format version mismatch");
    if (manifest.at("checksum").get<std::string>() != io::hex64(fnv1a(body)))
      throw corrupt(mline, "checksum mismatch");
    if (manifest.at("counts").at("real").get<std::size_t>() != b.real_items.size() ||
        manifest.at("counts").at("generated").get<std::size_t>() != b.gen_items.size())
      throw corrupt(mline, "record counts disagree with manifest");
    b.iteration = manifest.at("iteration").get<int>();
    for (const auto& p : manifest.at("provenance")) b.provenance.push_back(provenance_from_json(p));
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(mline, std::string("bad manifest: ") + e.what());
  }
  if (b.provenance.size() != b.size()) throw corrupt(mline, "provenance count mismatch");
  return b;
}

inline void persist(const HybridBuffer& b, const std::filesystem::path& path) {
  io::write_atomic(path, serialize(b));
}

inline HybridBuffer load_buffer(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CorruptionError("missing buffer file " + path.string());
  return parse_buffer(io::read_file(path), path.string());
}

// Loading for training: an empty buffer is a loop error.
inline HybridBuffer load_training_buffer(const std::filesystem::path& path) {
  auto b = load_buffer(path);
  if (b.empty()) throw LoopError("buffer " + path.string() + " is empty; nothing to train on");
  return b;
}

}  // namespace d2evo
