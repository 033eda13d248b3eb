#pragma once

// Plot-ready CSVs and a text summary from a run directory. Reads only;
// writes only under <run>/report/.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "d2evo/errors.hpp"
#include "d2evo/io.hpp"
#include "d2evo/orchestrator.hpp"

namespace d2evo {

struct ReportFiles {
  std::vector<std::filesystem::path> written;
  std::string summary;
};

inline ReportFiles report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  const auto metrics_path = run_dir / "metrics.jsonl";
  if (!fs::exists(metrics_path))
    throw LoopError("no metrics in " + run_dir.string() + " (expected metrics.jsonl)");
  const auto metrics = read_metrics(metrics_path);
  std::optional<Json> baseline;
  if (fs::exists(run_dir / "baseline.json"))
    baseline = Json::parse(io::read_file(run_dir / "baseline.json"));

  const fs::path dir = run_dir / "report";
  ReportFiles out;
  auto emit = [&](const std::string& name, const std::string& text) {
    io::write_atomic(dir / name, text);
    out.written.push_back(dir / name);
  };

  std::ostringstream bands, rewards, accept;
  bands << "t,easy,mid,hard\n";
  rewards << "t,mean_q_reward,mean_s_reward\n";
  accept << "t,acceptance_rate,eval_pass_rate,anchors,buffer_real,buffer_gen\n";
  for (const auto& m : metrics) {
    const auto& h = m.difficulty_histogram;
    bands << m.t << ',' << h.easy << ',' << h.mid << ',' << h.hard << '\n';
    rewards << m.t << ',' << m.mean_q_reward << ',' << m.mean_s_reward << '\n';
    accept << m.t << ',' << m.acceptance_rate << ',' << m.eval_pass_rate << ',' << m.anchors << ','
           << m.buffer_real << ',' << m.buffer_gen << '\n';
    std::ostringstream hist;
    hist << "bin_low,bin_high,count\n";
    for (int b = 0; b < 10; ++b)
      hist << b * 10 << ',' << (b + 1) * 10 << ',' << h.histogram[static_cast<std::size_t>(b)] << '\n';
    emit("histogram_iter" + std::to_string(m.t) + ".csv", hist.str());
  }
  emit("band_counts.csv", bands.str());
  emit("rewards.csv", rewards.str());
  emit("acceptance.csv", accept.str());

  std::ostringstream s;
  s << "run: " << run_dir.string() << "\n";
  s << "iterations recorded: " << metrics.size() << "\n\n";
  s << "difficulty bands over the real pool (easy / mid / hard):\n";
  if (baseline) {
    const auto h = distribution_from_json(baseline->at("difficulty_histogram"));
    s << "  base   " << h.easy << " / " << h.mid << " / " << h.hard
      << "   eval pass rate " << baseline->at("eval_pass_rate").get<double>() << "\n";
  }
  for (const auto& m : metrics) {
    const auto& h = m.difficulty_histogram;
    s << "  iter " << m.t << " " << h.easy << " / " << h.mid << " / " << h.hard
      << "   eval pass rate " << m.eval_pass_rate << "   acceptance " << m.acceptance_rate
      << "   anchors " << m.anchors << "\n";
  }
  if (baseline && !metrics.empty()) {
    const auto b = distribution_from_json(baseline->at("difficulty_histogram"));
    const auto& e = metrics.back().difficulty_histogram;
    s << "\nband shift base -> iter " << metrics.back().t << ": easy " << (e.easy - b.easy)
      << ", mid " << (e.mid - b.mid) << ", hard " << (e.hard - b.hard) << "\n";
  }
  out.summary = s.str();
  emit("summary.txt", out.summary);
  return out;
}

}  // namespace d2evo
