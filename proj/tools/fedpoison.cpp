#include "fedpoison/fedpoison.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace fedpoison;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

int cmd_run(const std::string& config_path, const std::string& out, const std::optional<std::uint64_t>& seed) {
  ExperimentConfig cfg = load_config(config_path);
  if (seed) {
    cfg.seed = *seed;
    validate(cfg);
  }
  const fs::path dir = out.empty() ? fs::path("runs") / fs::path(config_path).stem() : fs::path(out);
  const ExperimentResult res = run_experiment(cfg);
  write_run_dir(dir, cfg, res);
  std::cout << summary_line(dir.string(), res) << "\n";
  return kOk;
}

int cmd_scenario(const std::string& name, const std::string& out) {
  const auto s = find_scenario(name);
  if (!s) {
    std::string known;
    for (const auto& n : scenario_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown scenario '" + name + "' (known: " + known + ")");
  }
  run_scenario(*s, out.empty() ? fs::path("runs") / name : fs::path(out), std::cout);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedpoison: federated poisoning lab"};
  app.require_subcommand(1);

  std::string config_path, run_out, scenario_name, scenario_out, plot_dir;
  std::optional<std::uint64_t> seed;

  auto* run = app.add_subcommand("run", "run one experiment from a key=value config file");
  run->add_option("--config", config_path, "config file")->required();
  run->add_option("--out", run_out, "run directory (default runs/<config stem>)");
  run->add_option("--seed", seed, "override the config seed");

  auto* scen = app.add_subcommand("scenario", "run a named preset");
  scen->add_option("name", scenario_name, "scenario name")->required();
  scen->add_option("--out", scenario_out, "output directory (default runs/<name>)");

  auto* plot = app.add_subcommand("plotdata", "write fig4_data.csv and fig5_data.csv for a run directory");
  plot->add_option("run_dir", plot_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config_path, run_out, seed);
    if (*scen) return cmd_scenario(scenario_name, scenario_out);
    emit_plotdata(plot_dir);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "fedpoison: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "fedpoison: " << e.what() << "\n";
    return kRuntimeError;
  }
}
