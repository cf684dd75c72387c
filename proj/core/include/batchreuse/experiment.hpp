#pragma once

#include <filesystem>
#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "batchreuse/dmft.hpp"
#include "batchreuse/gdsim.hpp"

namespace batchreuse::experiment {

// Everything one run needs. Text form (YAML, JSON accepted):
//
//   preset: fig1_center          # optional base, applied first
//   full_scale: false           # optional, applied to the base
//   target: single:he3
//   activation: relu
//   residual: auto               # auto | network | teacher_only
//   second_layer: plus_minus     # plus_minus | gaussian
//   alpha: 3
//   eta: 0.1
//   lambda: 0
//   p: 1
//   T: 6
//   seed: 1
//   engines: [sim, dmft, one_pass_theory, hardness]
//   directions: [teacher]
//   output: out/fig1_center
//   train:   {d, runs, schedules, record_every, epochs, normalization, threads}
//   dmft:    {samples, kernel_mode, formulation, fd_eps, fd_eps_nonsmooth,
//             tp_ceiling, memory_limit_gb}
//   hardness: {k_max, directions, mc_samples}
struct ExperimentConfig {
  std::string preset;
  bool full_scale = false;
  std::string target = "single:he3";
  std::string activation = "relu";
  std::string residual = "auto";
  std::string second_layer = "plus_minus";
  double alpha = 3.0;
  double eta = 0.1;
  double lambda = 0.0;
  int p = 1;
  int T = 6;
  std::uint64_t seed = 1;
  std::vector<std::string> engines{"sim", "dmft", "one_pass_theory"};
  std::vector<std::string> directions{"teacher"};
  std::string output = "out";

  int d = 2000;
  int runs = 16;
  std::vector<std::string> schedules{"full", "fresh"};
  int record_every = 1;
  // > 0: each simulated schedule runs this many passes over the dataset
  // instead of T steps.
  int epochs = 0;
  std::string normalization = "sum";
  unsigned threads = 0;

  std::size_t samples = 100000;
  std::string kernel_mode = "auto";
  std::string formulation = "two_process";
  double fd_eps = 1e-4;
  double fd_eps_nonsmooth = 2e-2;
  int tp_ceiling = 512;
  double memory_limit_gb = 3.0;

  int k_max = 8;
  std::vector<std::string> hardness_directions;
  std::size_t hardness_mc_samples = 100000;

  nlohmann::json to_json() const;
  void validate() const;
  Readout readout() const;
  gdsim::TrainConfig train_config(const std::string& schedule) const;
  dmft::DmftConfig dmft_config() const;
};

// Parses config text. Errors are ConfigError with field and 1-based line.
ExperimentConfig parse_config(const std::string& text);
// Reads a config file; a manifest (with a "config" object) is accepted too.
ExperimentConfig load_config(const std::filesystem::path& path);

struct PresetInfo {
  std::string name;
  std::string figure;
  std::string description;
};
const std::vector<PresetInfo>& list_presets();
ExperimentConfig preset(const std::string& name);
// d = 5000 (Figs. 1-2) or 10000 (Figs. 3-5), 32 runs, 10^6 DMFT samples.
void apply_full_scale(ExperimentConfig& cfg);

struct RunSummary {
  std::vector<std::filesystem::path> files;
  nlohmann::json manifest;
};
// Writes one CSV per engine plus manifest.json into cfg.output.
RunSummary run(const ExperimentConfig& cfg, std::ostream* log = nullptr);

// Verdicts for the teacher axes e1..ek plus the given custom directions.
nlohmann::json hardness_report(const std::string& target, int k_max,
                               const std::vector<std::string>& customs,
                               std::size_t mc_samples = 100000, std::uint64_t seed = 1);

}  // namespace batchreuse::experiment
