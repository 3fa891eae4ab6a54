// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a YAML document with four blocks (task, optimizer,
// study, sweep) plus seed and output directory. Every key is optional;
// unknown keys are rejected with their line number.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "seqlora/optimizer.hpp"
#include "seqlora/rng.hpp"
#include "seqlora/task.hpp"

namespace seqlora {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskBlock {
  TaskKind kind = TaskKind::linear_population;
  std::size_t m = 32;
  std::size_t n = 32;
  std::size_t concepts = 8;  // T
  std::size_t layers = 1;
  Activation activation = Activation::identity;
  double noise = 0.1;
  std::size_t p = 256;  // batch columns for sampled and deep kinds
  double mixing = 0.0;
  /// Linear kinds: one spectrum shared by all concepts or one per concept.
  /// Deep kind: one shared by all layers or one per layer.
  std::vector<SpectrumSpec> spectra{SpectrumSpec::flat()};

  bool operator==(const TaskBlock&) const = default;
};

struct StudyBlock {
  bool forgetting = true;  // linear-population streams only
  bool basis = true;
  bool hw = true;
  bool e2e = true;  // deep streams only
  std::size_t basis_trials = 1000;
  std::size_t hw_samples = 20000;
  std::size_t hw_tokens = 1;  // Ψ = I_p with this p
  EntrySampler sampler = EntrySampler::gaussian;
  std::vector<double> xi{0.1, 0.05, 0.01};
  std::vector<double> c1_grid{0.1, 0.5, 1.0, 2.0, 5.0, 10.0};
  double e2e_xi = 0.05;
  std::size_t lipschitz_trials = 500;
  double lipschitz_radius = 1.0;
  bool parallel = false;  // Monte Carlo loops through OpenMP

  bool operator==(const StudyBlock&) const = default;
};

struct SweepBlock {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<OptimizerKind> optimizers{OptimizerKind::seqlora, OptimizerKind::alternating,
                                        OptimizerKind::frozen};

  bool operator==(const SweepBlock&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output = "runs/default";
  TaskBlock task;
  OptimizerKind optimizer = OptimizerKind::seqlora;
  BilevelConfig bilevel;
  StudyBlock study;
  SweepBlock sweep;

  /// Throws ConfigError on inconsistent dimensions (including T·r > m).
  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

RunConfig parse_config_string(const std::string& text, const std::string& source = "<string>");
/// Throws ConfigError for a missing file, syntax errors (with line), unknown
/// keys, bad values and capacity violations.
RunConfig parse_config(const std::filesystem::path& path);

/// YAML text that parses back to an equal config.
std::string serialize_config(const RunConfig& cfg);

std::string to_string(EntrySampler s);
EntrySampler parse_sampler(const std::string& s);

}  // namespace seqlora
