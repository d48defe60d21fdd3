#pragma once

// Run directory layout:
//   config.txt          resolved key=value config (re-runnable)
//   config.json         the same snapshot as JSON
//   rounds.csv          one RoundRecord per line, no header:
//                       round,phase,accuracy,clean_accuracy,asr,threshold,
//                       aggregate_norm,fallback,fallback_reason,
//                       cos_0..cos_{n-1},accepted_0..accepted_{n-1}
//   aggregation.csv     round,client_id,score,threshold,accepted (header)
//   attack_trace.jsonl  one JSON object per crafted round
//   model.bin           final parameters (see write_params)
// plotdata adds fig4_data.csv and fig5_data.csv.

#include "fedpoison/common.hpp"
#include "fedpoison/config.hpp"
#include "fedpoison/data.hpp"
#include "fedpoison/model.hpp"
#include "fedpoison/sim.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fedpoison {

inline constexpr std::size_t kRoundsFixedColumns = 9;

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::ofstream open_out(const std::filesystem::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

}  // namespace detail

inline std::string to_string(Phase p) { return p == Phase::kStealth ? "stealth" : "exploit"; }

inline std::string rounds_csv_line(const RoundRecord& r) {
  using detail::format_double;
  std::string line = std::to_string(r.round) + "," + to_string(r.phase) + "," + format_double(r.accuracy) + "," +
                     format_double(r.clean_accuracy) + "," + format_double(r.asr) + "," +
                     (r.threshold ? format_double(*r.threshold) : std::string()) + "," +
                     format_double(r.aggregate_norm) + "," + (r.fallback ? "1" : "0") + "," +
                     detail::csv_escape(r.fallback_reason);
  for (double c : r.per_client_cosine) line += "," + format_double(c);
  for (bool a : r.accepted) line += a ? ",1" : ",0";
  return line;
}

inline nlohmann::ordered_json trace_to_json(const AttackTrace& t) {
  nlohmann::ordered_json j;
  j["round"] = t.round;
  j["recon_bce_initial"] = t.recon_bce_initial;
  j["recon_bce_final"] = t.recon_bce_final;
  j["lambda_dual"] = t.lambda_dual;
  j["stealth_cosine"] = t.stealth_cosine;
  j["edges_flipped"] = t.edges_flipped;
  j["stealth_floor"] = t.stealth_floor;
  j["estimated"] = t.estimated;
  j["biased"] = t.biased;
  j["naive_cosine"] = t.naive_cosine;
  return j;
}

inline void write_run_dir(const std::filesystem::path& dir, const ExperimentConfig& cfg, const ExperimentResult& res) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create run directory " + dir.string() + ": " + ec.message());

  detail::open_out(dir / "config.txt") << config_to_text(cfg);
  detail::open_out(dir / "config.json") << config_to_json(cfg).dump(2) << "\n";

  auto rounds = detail::open_out(dir / "rounds.csv");
  for (const auto& r : res.records) rounds << rounds_csv_line(r) << "\n";

  auto agg = detail::open_out(dir / "aggregation.csv");
  agg << "round,client_id,score,threshold,accepted\n";
  for (const auto& r : res.records)
    for (std::size_t i = 0; i < r.scores.size(); ++i)
      agg << r.round << "," << i << "," << detail::format_double(r.scores[i]) << ","
          << (r.threshold ? detail::format_double(*r.threshold) : std::string()) << "," << (r.accepted[i] ? 1 : 0)
          << "\n";

  auto trace = detail::open_out(dir / "attack_trace.jsonl");
  for (const auto& r : res.records)
    if (r.trace) trace << trace_to_json(*r.trace).dump() << "\n";

  auto model = detail::open_out(dir / "model.bin", std::ios::out | std::ios::binary);
  write_params(model, res.final_params.values);
}

struct RoundsRow {
  int round = 0;
  std::string phase;
  double accuracy = 0.0;
  double asr = 0.0;
  std::optional<double> threshold;
  std::vector<double> cosine;
  std::vector<bool> accepted;
};

inline std::vector<RoundsRow> read_rounds_csv(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("missing " + path.string());
  detail::CsvReader reader(detail::read_file(path));
  std::vector<RoundsRow> rows;
  std::vector<std::string> f;
  std::size_t line = 0;
  auto num = [&](const std::string& s) {
    try {
      return detail::parse_double("rounds.csv", s);
    } catch (const ConfigError&) {
      throw Error(detail::concat(path.string(), " line ", line, ": bad number '", s, "'"));
    }
  };
  while (reader.next(f)) {
    ++line;
    if (f.size() == 1 && f[0].empty()) continue;
    if (f.size() < kRoundsFixedColumns || (f.size() - kRoundsFixedColumns) % 2 != 0)
      throw Error(detail::concat(path.string(), " line ", line, ": unexpected column count ", f.size()));
    RoundsRow r;
    r.round = static_cast<int>(num(f[0]));
    r.phase = f[1];
    r.accuracy = num(f[2]);
    r.asr = num(f[4]);
    if (!f[5].empty()) r.threshold = num(f[5]);
    const std::size_t n = (f.size() - kRoundsFixedColumns) / 2;
    for (std::size_t i = 0; i < n; ++i) {
      r.cosine.push_back(num(f[kRoundsFixedColumns + i]));
      r.accepted.push_back(f[kRoundsFixedColumns + n + i] == "1");
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw Error(path.string() + " has no rows");
  return rows;
}

// fig4_data.csv: round,accuracy,asr. fig5_data.csv: round,client_0..,threshold
// (threshold empty for defenses without one).
inline void emit_plotdata(const std::filesystem::path& run_dir) {
  const auto rows = read_rounds_csv(run_dir / "rounds.csv");
  auto fig4 = detail::open_out(run_dir / "fig4_data.csv");
  fig4 << "round,accuracy,asr\n";
  for (const auto& r : rows)
    fig4 << r.round << "," << detail::format_double(r.accuracy) << "," << detail::format_double(r.asr) << "\n";

  auto fig5 = detail::open_out(run_dir / "fig5_data.csv");
  fig5 << "round";
  for (std::size_t i = 0; i < rows.front().cosine.size(); ++i) fig5 << ",client_" << i;
  fig5 << ",threshold\n";
  for (const auto& r : rows) {
    fig5 << r.round;
    for (double c : r.cosine) fig5 << "," << detail::format_double(c);
    fig5 << "," << (r.threshold ? detail::format_double(*r.threshold) : std::string()) << "\n";
  }
}

}  // namespace fedpoison
