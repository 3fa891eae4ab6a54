// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration. A run directory holds
//   manifest.json   config, per-concept losses and invariant results
//   metrics.csv     one row per (concept, bilevel iteration)
//   factors/        concept_{j}_layer_{l}.bin
//   studies/        one JSON report per study
// Everything except the wall_ms column is a pure function of the config.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "seqlora/config.hpp"
#include "seqlora/optimizer.hpp"
#include "seqlora/task.hpp"

namespace seqlora {

/// Tasks and base weights regenerated from (config, seed).
struct Experiment {
  RunConfig config;
  std::vector<Matrix> base_weights;
  std::vector<ConceptTask> stream;
};

/// W₀ with N(0, 1/m) entries per layer, then the concept stream.
Experiment build_experiment(const RunConfig& cfg);

/// Loss of concept j's task at explicit weights (population, sampled or
/// network loss on the training batch).
double task_loss(const ConceptTask& task, const std::vector<Matrix>& weights);

struct MetricsRow {
  std::string run_id;
  std::size_t concept_index = 0;
  std::size_t iteration = 0;
  double objective = 0.0;
  double grad_a_norm = 0.0;
  double reduced_grad_b_norm = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double feasibility_defect = 0.0;
  double wall_ms = 0.0;
};

std::string csv_quote(const std::string& field);
std::string format_double(double v);  // 17 significant digits
std::string metrics_header();
std::string metrics_row(const MetricsRow& row);
std::string metrics_csv(const std::string& run_id, const std::vector<DescentTrace>& traces);
/// Parses a metrics file written by metrics_csv.
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);

struct InvariantResult {
  std::string name;
  bool passed = false;
  /// Monte Carlo checks at a 3-standard-error level; reported but not
  /// counted in the exit status since they fail at a small known rate.
  bool statistical = false;
  std::string detail;
};

nlohmann::json to_json(const InvariantResult& r);
bool enforced_ok(const std::vector<InvariantResult>& results);

struct RunArtifacts {
  FitResult fit;
  std::vector<InvariantResult> invariants;
  nlohmann::json manifest;
};

std::string run_id(const RunConfig& cfg);

/// Fits the configured stream, runs the selected studies and writes the run
/// directory `out` (created if missing).
RunArtifacts execute_run(const RunConfig& cfg, const std::filesystem::path& out);

/// Same as execute_run, restricted to one study ("basis" or "hw").
RunArtifacts execute_study(const RunConfig& cfg, const std::filesystem::path& out, const std::string& study);

/// Model reassembled from persisted factors; throws when files are missing.
ComposedModel load_model(const std::filesystem::path& run_dir, const Experiment& exp);

/// Replays every invariant from the artifacts in run_dir without writing.
std::vector<InvariantResult> verify_run(const std::filesystem::path& run_dir);

struct ConceptSummary {
  std::size_t j = 0;
  double initial = 0.0;  // loss right after concept j was fitted
  double final_loss = 0.0;
  double forgetting = 0.0;
};

struct RunReport {
  std::string run_id;
  std::vector<ConceptSummary> concepts;
  double mean_forgetting = 0.0;
  double max_forgetting = 0.0;
  nlohmann::json studies;  // study summaries keyed by file stem
  std::size_t invariants_passed = 0;
  std::size_t invariants_total = 0;
};

/// Throws std::runtime_error listing missing artifacts when incomplete.
RunReport make_report(const std::filesystem::path& run_dir);
std::string report_text(const RunReport& r);
nlohmann::json to_json(const RunReport& r);

struct SweepCell {
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::seqlora;
  std::filesystem::path dir;
  bool ok = false;
  std::string error;
  double mean_forgetting = 0.0;
  double mean_residual_energy = 0.0;
};

/// Cartesian product of sweep seeds and optimizers, `jobs` cells at a time.
std::vector<SweepCell> run_sweep(const RunConfig& cfg, const std::filesystem::path& out, std::size_t jobs);
std::string sweep_csv(const std::vector<SweepCell>& cells);

/// Names of artifacts a complete run directory must contain.
std::vector<std::filesystem::path> expected_artifacts(const RunConfig& cfg);

}  // namespace seqlora
