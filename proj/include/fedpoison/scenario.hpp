#pragma once

// Named experiment presets. Every scenario starts from the desk-scale base
// below and applies its own overrides; sweeps produce one run per point, each
// in its own subdirectory.

#include "fedpoison/config.hpp"
#include "fedpoison/defense.hpp"
#include "fedpoison/run_io.hpp"
#include "fedpoison/sim.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace fedpoison {

// Synthetic-corpus setup the acceptance experiments use: mildly non-IID
// clients and a sparse, multi-token trigger so that the backdoor is learnable
// by a linear model without wrecking the untriggered business examples.
inline ConfigOverrides desk_scale_overrides() {
  return {
      {"data.alpha", "5"},
      {"data.synth.trigger_rate", "0.15"},
      {"data.synth.trigger_tokens_min", "2"},
      {"data.synth.trigger_tokens_max", "3"},
      {"grmp.gamma_blend", "2.2"},
  };
}

inline ExperimentConfig desk_scale_config() {
  ExperimentConfig cfg;
  apply_overrides(cfg, desk_scale_overrides());
  return cfg;
}

struct ScenarioRun {
  std::string subdir;  // empty: the run writes straight into out_dir
  ConfigOverrides overrides;
};

struct Scenario {
  std::string name;
  std::vector<ScenarioRun> runs;
};

inline std::vector<std::string> scenario_names() {
  return {"baseline_clean", "naive_vs_each_defense", "grmp_vs_cosine", "grmp_vs_krum", "sweep_lambda", "sweep_alpha"};
}

inline std::optional<Scenario> find_scenario(const std::string& name) {
  if (name == "baseline_clean") return Scenario{name, {{"", {{"attack", "none"}}}}};
  if (name == "grmp_vs_cosine") return Scenario{name, {{"", {{"attack", "grmp"}, {"defense", "cosine_filter"}}}}};
  if (name == "grmp_vs_krum") return Scenario{name, {{"", {{"attack", "grmp"}, {"defense", "krum"}}}}};
  if (name == "naive_vs_each_defense") {
    Scenario s{name, {}};
    for (const auto& [kind, d] : defense_names()) s.runs.push_back({d, {{"attack", "naive_flip"}, {"defense", d}}});
    return s;
  }
  if (name == "sweep_lambda") {
    Scenario s{name, {}};
    for (const char* l : {"0.5", "1.0", "1.5", "2.0"})
      s.runs.push_back({std::string("lambda_") + l, {{"attack", "grmp"}, {"defense", "cosine_filter"}, {"defense.lambda", l}}});
    return s;
  }
  if (name == "sweep_alpha") {
    Scenario s{name, {}};
    for (const char* a : {"0.1", "0.5", "1.0", "5.0"})
      s.runs.push_back({std::string("alpha_") + a, {{"attack", "grmp"}, {"defense", "cosine_filter"}, {"data.alpha", a}}});
    return s;
  }
  return std::nullopt;
}

inline ExperimentConfig scenario_config(const ScenarioRun& run) {
  ExperimentConfig cfg = desk_scale_config();
  apply_overrides(cfg, run.overrides);
  validate(cfg);
  return cfg;
}

inline std::string summary_line(const std::string& label, const ExperimentResult& res) {
  const auto& last = res.records.back();
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: final accuracy %.4f, ASR %.4f", label.c_str(), last.accuracy, last.asr);
  return buf;
}

// Runs every configuration of the scenario and writes its run directories.
inline void run_scenario(const Scenario& s, const std::filesystem::path& out_dir, std::ostream& log) {
  for (const auto& run : s.runs) {
    const ExperimentConfig cfg = scenario_config(run);
    const auto dir = run.subdir.empty() ? out_dir : out_dir / run.subdir;
    const ExperimentResult res = run_experiment(cfg);
    write_run_dir(dir, cfg, res);
    log << summary_line(run.subdir.empty() ? s.name : s.name + "/" + run.subdir, res) << "\n";
  }
}

}  // namespace fedpoison
