// qubitcli: simulate | analyze | fit | diffuse | report | all

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <thread>

#include "qubit/cli/commands.hpp"

using namespace qubit;
using namespace qubit::cli;

namespace {

std::pair<double, double> parse_band(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw ValidationError("--band expects fmin,fmax (Hz), got '" + s + "'");
  const double lo = parse_double(qubit::cli::detail::trim(s.substr(0, comma)), "--band");
  const double hi = parse_double(qubit::cli::detail::trim(s.substr(comma + 1)), "--band");
  if (!(lo > 0.0) || !(hi > lo)) throw ValidationError("--band needs 0 < fmin < fmax");
  return {lo, hi};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Qubit T1-fluctuation pipeline: synthetic series, spectra, fits, diffusion, reports"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, band;
  uint64_t seed = 0;
  int parallel = 1;
  app.add_option("--config", config_path, "Run configuration (JSON, comments allowed)")->required();
  app.add_option("--out", out_dir, "Run directory (default: config output_dir)");
  auto* seed_opt = app.add_option("--seed", seed, "Override the master seed");
  app.add_option("--parallel", parallel, "Worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);
  app.add_option("--band", band, "Fit and variance band in Hz, 'fmin,fmax'");

  const char* verbs[][2] = {{"simulate", "Generate Gamma_1 series per (qubit, temperature)"},
                            {"analyze", "Spectra, 1/f + white fits and band variances"},
                            {"fit", "Mean and variance fits -> device parameter table"},
                            {"diffuse", "QP diffusion maps and geometry ratio"},
                            {"report", "Plot-ready files and manifest"},
                            {"all", "simulate, analyze, fit, diffuse, report"}};
  for (auto& v : verbs) app.add_subcommand(v[0], v[1])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  try {
    ConfigOverrides ov;
    if (*seed_opt) ov.seed = seed;
    if (!band.empty()) ov.band = parse_band(band);
    if (!out_dir.empty()) ov.output_dir = out_dir;
    RunContext c;
    c.cfg = load_config(config_path, ov);
    c.out = c.cfg.output_dir;
    c.parallel = parallel > 0 ? parallel : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));

    if (verb == "simulate") {
      cmd_simulate(c);
    } else if (verb == "analyze") {
      return cmd_analyze(c).exit_code;
    } else if (verb == "fit") {
      cmd_fit(c);
    } else if (verb == "diffuse") {
      cmd_diffuse(c);
    } else if (verb == "report") {
      cmd_report(c);
    } else {
      return cmd_all(c);
    }
    return kExitOk;
  } catch (...) {
    const auto e = std::current_exception();
    std::cerr << "qubitcli " << verb << ": error: " << message_of(e) << "\n";
    return exit_code_for(e);
  }
}
