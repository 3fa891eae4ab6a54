// SPDX-License-Identifier: Apache-2.0
//
// seqlora run|verify|report|basis-study|hw-study|sweep

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "seqlora/config.hpp"
#include "seqlora/harness.hpp"

namespace fs = std::filesystem;
using namespace seqlora;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
};

void add_common(CLI::App* app, Common& c, bool with_config) {
  if (with_config) {
    app->add_option("--config", c.config, "YAML run configuration (defaults when omitted)");
    app->add_option("--seed", c.seed, "Override the configured seed");
  }
  app->add_option("--out", c.out, "Output (or run) directory");
  app->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

RunConfig load(const Common& c) {
  RunConfig cfg = c.config.empty() ? parse_config_string("", "<defaults>") : parse_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.output = c.out;
  if (c.jobs > 1) cfg.study.parallel = true;
  return cfg;
}

int print_invariants(const std::vector<InvariantResult>& inv) {
  for (const InvariantResult& r : inv) {
    fmt::print("{} {}{}: {}\n", r.passed ? "PASS" : "FAIL", r.name, r.statistical ? " (statistical)" : "", r.detail);
  }
  const bool ok = enforced_ok(inv);
  if (!ok) {
    std::cerr << "violations:";
    for (const InvariantResult& r : inv)
      if (!r.passed && !r.statistical) std::cerr << " " << r.name;
    std::cerr << "\n";
  }
  return ok ? 0 : 1;
}

fs::path run_dir_of(const Common& c, const std::string& positional) {
  if (!positional.empty()) return positional;
  if (!c.out.empty()) return c.out;
  throw CLI::ValidationError("run directory", "pass a run directory or --out");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential orthogonal LoRA fitting on synthetic concept streams"};
  app.require_subcommand(1);

  Common run_c, verify_c, report_c, basis_c, hw_c, sweep_c;
  std::string verify_dir, report_dir;
  bool report_json = false;

  auto* run = app.add_subcommand("run", "Fit a stream, run studies and write a run directory");
  add_common(run, run_c, true);
  auto* verify = app.add_subcommand("verify", "Replay every invariant from a finished run directory");
  add_common(verify, verify_c, false);
  verify->add_option("run_dir", verify_dir, "Run directory");
  auto* report = app.add_subcommand("report", "Summarize per-concept forgetting and studies");
  add_common(report, report_c, false);
  report->add_option("run_dir", report_dir, "Run directory");
  report->add_flag("--json", report_json, "Emit JSON instead of text");
  auto* basis = app.add_subcommand("basis-study", "Optimal versus random feasible bases");
  add_common(basis, basis_c, true);
  auto* hw = app.add_subcommand("hw-study", "Hanson-Wright statistics of crosstalk");
  add_common(hw, hw_c, true);
  auto* sweep = app.add_subcommand("sweep", "Run every (seed, optimizer) cell of the sweep block");
  add_common(sweep, sweep_c, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const RunConfig cfg = load(run_c);
      const RunArtifacts art = execute_run(cfg, cfg.output);
      fmt::print("wrote {}\n", cfg.output);
      return print_invariants(art.invariants);
    }
    if (*verify) return print_invariants(verify_run(run_dir_of(verify_c, verify_dir)));
    if (*report) {
      const RunReport r = make_report(run_dir_of(report_c, report_dir));
      if (report_json) {
        std::cout << to_json(r).dump(2) << "\n";
      } else {
        std::cout << report_text(r);
      }
      return 0;
    }
    if (*basis || *hw) {
      const Common& c = *basis ? basis_c : hw_c;
      const RunConfig cfg = load(c);
      const std::string study = *basis ? "basis" : "hw";
      const RunArtifacts art = execute_study(cfg, cfg.output, study);
      fmt::print("wrote {}/studies/{}.json\n", cfg.output, study);
      return print_invariants(art.invariants);
    }
    if (*sweep) {
      const RunConfig cfg = load(sweep_c);
      const auto cells = run_sweep(cfg, cfg.output, sweep_c.jobs);
      bool ok = true;
      for (const SweepCell& c : cells) {
        fmt::print("{} {} seed {}: mean forgetting {:.17g}, mean residual energy {:.17g}{}\n", c.ok ? "PASS" : "FAIL",
                   to_string(c.optimizer), c.seed, c.mean_forgetting, c.mean_residual_energy,
                   c.error.empty() ? "" : " (" + c.error + ")");
        ok = ok && c.ok;
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
