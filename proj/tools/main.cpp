#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <optional>

#include "batchreuse/errors.hpp"
#include "batchreuse/experiment.hpp"
#include "batchreuse/version.hpp"

using namespace batchreuse;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',' && cur.rfind("custom:", 0) != 0) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct Overrides {
  std::optional<int> d, p, T, runs;
  std::optional<double> alpha, eta, lambda;
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> engines, out, schedule, directions;
  bool full_scale = false;

  void apply(experiment::ExperimentConfig& c) const {
    if (full_scale) experiment::apply_full_scale(c);
    if (d) c.d = *d;
    if (p) c.p = *p;
    if (T) c.T = *T;
    if (runs) c.runs = *runs;
    if (alpha) c.alpha = *alpha;
    if (eta) c.eta = *eta;
    if (lambda) c.lambda = *lambda;
    if (samples) c.samples = *samples;
    if (seed) c.seed = *seed;
    if (threads) c.threads = *threads;
    if (engines) c.engines = split_list(*engines);
    if (out) c.output = *out;
    if (schedule) c.schedules = split_list(*schedule);
    if (directions) c.directions = split_list(*directions);
  }
};

int report_config_error(const ConfigError& e) {
  std::cerr << "config error";
  if (!e.field().empty()) std::cerr << " in field '" << e.field() << "'";
  if (e.line() > 0) std::cerr << " (line " << e.line() << ")";
  std::cerr << ": " << e.what() << '\n';
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch-reuse gradient descent: simulation, DMFT theory and direction hardness"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run a preset or config file and write CSVs plus a manifest");
  std::string preset_name, config_path;
  Overrides ov;
  run->add_option("--preset", preset_name, "Preset name (see `presets`)");
  run->add_option("--config", config_path, "YAML/JSON config file or a previous manifest.json");
  run->add_option("--d", ov.d, "Input dimension");
  run->add_option("--alpha", ov.alpha, "Samples per dimension n/d");
  run->add_option("--eta", ov.eta, "Learning rate");
  run->add_option("--lambda", ov.lambda, "Weight decay");
  run->add_option("--p", ov.p, "Hidden units");
  run->add_option("--T", ov.T, "Gradient steps");
  run->add_option("--runs", ov.runs, "Simulation runs");
  run->add_option("--samples", ov.samples, "DMFT Monte-Carlo replicas");
  run->add_option("--seed", ov.seed, "Base seed");
  run->add_option("--threads", ov.threads, "Worker threads (0: all cores)");
  run->add_option("--engines", ov.engines, "Comma list of sim,dmft,one_pass_theory,hardness");
  run->add_option("--out", ov.out, "Output directory");
  run->add_option("--schedule", ov.schedule, "Comma list of batch schedules");
  run->add_option("--directions", ov.directions, "Comma list of overlap directions");
  run->add_flag("--full-scale", ov.full_scale, "Full-scale d (5000 or 10000), 32 runs and 10^6 DMFT samples");
  run->get_option("--preset")->excludes(run->get_option("--config"));
  bool quiet = false;
  run->add_flag("-q,--quiet", quiet, "Do not print progress");

  auto* presets = app.add_subcommand("presets", "List presets and the figure each reproduces");

  auto* hard = app.add_subcommand("hardness", "Classify teacher-basis and custom directions");
  std::string target;
  int k_max = 8;
  std::vector<std::string> customs;
  std::size_t mc = 100000;
  hard->add_option("target", target, "Target spec, e.g. product:1,2,3")->required();
  hard->add_option("--k-max", k_max, "Largest moment order");
  hard->add_option("--custom", customs, "Extra direction coefficients, e.g. 1,1,1 (repeatable)");
  hard->add_option("--mc", mc, "Monte-Carlo samples for moments above order 5");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*presets) {
      for (const auto& p : experiment::list_presets())
        std::cout << std::left << std::setw(18) << p.name << std::setw(15) << p.figure << p.description << '\n';
      return 0;
    }
    if (*hard) {
      std::cout << experiment::hardness_report(target, k_max, customs, mc).dump(2) << '\n';
      return 0;
    }
    experiment::ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = experiment::load_config(config_path);
    } else if (!preset_name.empty()) {
      cfg = experiment::preset(preset_name);
    } else {
      throw ConfigError("run needs --preset or --config", "preset");
    }
    ov.apply(cfg);
    auto summary = experiment::run(cfg, quiet ? nullptr : &std::cerr);
    for (const auto& f : summary.files) std::cout << f.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    return report_config_error(e);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const DimensionError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
