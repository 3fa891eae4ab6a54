// SPDX-License-Identifier: Apache-2.0

#include "seqlora/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "seqlora/linalg.hpp"
#include "seqlora/persistence.hpp"
#include "seqlora/theory.hpp"

namespace seqlora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Root seed splits; fixed so every artifact is reproducible from the seed.
constexpr std::uint64_t kBaseSplit = 0;
constexpr std::uint64_t kStreamSplit = 1;
constexpr std::uint64_t kFitSplit = 2;
constexpr std::uint64_t kStudySplit = 3;
constexpr std::uint64_t kBatchSplit = 4;

constexpr double kAnnihilationTolerance = 1e-8;
constexpr double kIdentityTolerance = 1e-8;

}  // namespace

Experiment build_experiment(const RunConfig& cfg) {
  cfg.validate();
  const TaskBlock& t = cfg.task;
  Experiment exp;
  exp.config = cfg;
  const Rng root(cfg.seed);
  Rng base_rng = root.split(kBaseSplit);
  Rng stream_rng = root.split(kStreamSplit);
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.m));
  for (std::size_t l = 0; l < t.layers; ++l) {
    const std::size_t rows = l + 1 == t.layers ? t.n : t.m;
    exp.base_weights.push_back(gaussian_matrix(rows, t.m, base_rng, scale));
  }

  if (t.kind == TaskKind::deep) {
    std::vector<SpectrumSpec> spectra = t.spectra;
    if (spectra.size() == 1) spectra.assign(t.layers, t.spectra.front());
    for (std::size_t j = 0; j < t.concepts; ++j) {
      Rng cr = stream_rng.split(j);
      exp.stream.push_back(make_deep_task(exp.base_weights, t.activation, spectra, t.noise, t.p, cr));
    }
    return exp;
  }

  exp.stream = make_linear_stream(t.concepts, t.m, t.n, t.spectra, t.noise, t.mixing, stream_rng);
  if (t.kind == TaskKind::linear_sampled) {
    const Rng batch_root = root.split(kBatchSplit);
    for (std::size_t j = 0; j < exp.stream.size(); ++j) {
      Rng br = batch_root.split(j);
      exp.stream[j] = attach_batch(std::move(exp.stream[j]), t.p, br);
    }
  }
  return exp;
}

double task_loss(const ConceptTask& task, const std::vector<Matrix>& weights) {
  switch (task.kind) {
    case TaskKind::linear_population: return population_loss(task, weights.front());
    case TaskKind::linear_sampled: return sampled_loss(weights.front(), task.x, task.y);
    case TaskKind::deep: return deep_loss(weights, task.activation, task.x, task.y);
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Metrics CSV

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string format_double(double v) { return fmt::format("{:.17g}", v); }

std::string metrics_header() {
  return "run_id,concept,iteration,objective,grad_a_norm,reduced_grad_b_norm,alpha,beta,feasibility_defect,wall_ms";
}

std::string metrics_row(const MetricsRow& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{}", csv_quote(r.run_id), r.concept_index, r.iteration,
                     format_double(r.objective), format_double(r.grad_a_norm),
                     format_double(r.reduced_grad_b_norm), format_double(r.alpha), format_double(r.beta),
                     format_double(r.feasibility_defect), format_double(r.wall_ms));
}

std::string metrics_csv(const std::string& id, const std::vector<DescentTrace>& traces) {
  std::string out = metrics_header() + "\r\n";
  for (const DescentTrace& t : traces) {
    for (const TraceRecord& rec : t.records) {
      MetricsRow row{id,       t.concept_index,         rec.iteration, rec.objective,
                     rec.grad_a_norm, rec.reduced_grad_b_norm, rec.alpha,     rec.beta,
                     rec.feasibility_defect, rec.wall_ms};
      out += metrics_row(row) + "\r\n";
    }
  }
  return out;
}

namespace {

// RFC-4180 record splitter (quoted fields may hold commas, quotes, newlines).
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      field.clear();
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw std::runtime_error("metrics csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error(fmt::format("metrics csv: bad number '{}'", s));
  }
  return v;
}

std::size_t to_size(const std::string& s) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error(fmt::format("metrics csv: bad integer '{}'", s));
  }
  return v;
}

}  // namespace

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  if (rows.empty()) throw std::runtime_error("metrics csv is empty");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != metrics_header()) throw std::runtime_error(fmt::format("metrics csv: unexpected header '{}'", header));
  std::vector<MetricsRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != 10) throw std::runtime_error(fmt::format("metrics csv: row {} has {} fields", i, f.size()));
    out.push_back({f[0], to_size(f[1]), to_size(f[2]), to_double(f[3]), to_double(f[4]), to_double(f[5]),
                   to_double(f[6]), to_double(f[7]), to_double(f[8]), to_double(f[9])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Studies

json to_json(const InvariantResult& r) {
  return {{"name", r.name}, {"passed", r.passed}, {"statistical", r.statistical}, {"detail", r.detail}};
}

bool enforced_ok(const std::vector<InvariantResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const InvariantResult& r) { return r.passed || r.statistical; });
}

std::string run_id(const RunConfig& cfg) { return fmt::format("{}-seed{}", to_string(cfg.optimizer), cfg.seed); }

namespace {

struct StudyOutput {
  std::vector<InvariantResult> invariants;
  std::map<std::string, json> files;  // stem -> report
};

void add(StudyOutput& out, std::string name, bool passed, std::string detail, bool statistical = false) {
  out.invariants.push_back({std::move(name), passed, statistical, std::move(detail)});
}

std::vector<DescentTrace> traces_from_metrics(const std::vector<MetricsRow>& rows) {
  std::vector<DescentTrace> traces;
  for (const MetricsRow& r : rows) {
    if (traces.empty() || traces.back().concept_index != r.concept_index) {
      traces.emplace_back();
      traces.back().concept_index = r.concept_index;
    }
    TraceRecord rec;
    rec.iteration = r.iteration;
    rec.objective = r.objective;
    rec.grad_a_norm = r.grad_a_norm;
    rec.reduced_grad_b_norm = r.reduced_grad_b_norm;
    rec.alpha = r.alpha;
    rec.beta = r.beta;
    rec.feasibility_defect = r.feasibility_defect;
    traces.back().records.push_back(rec);
  }
  return traces;
}

bool theoretical_steps(const BilevelConfig& c) {
  return c.alpha_mode == StepMode::theoretical && c.beta_mode == StepMode::theoretical;
}

void trace_studies(const Experiment& exp, const std::vector<DescentTrace>& traces, StudyOutput& out) {
  const BilevelConfig& c = exp.config.bilevel;
  const double feas_tol = std::max(1e-8, 2.0 * c.epsilon);
  double worst_defect = 0.0;
  json descent = json::array();
  std::size_t violations = 0;
  for (const DescentTrace& t : traces) {
    for (const TraceRecord& r : t.records) worst_defect = std::max(worst_defect, r.feasibility_defect);
    const auto bad = audit_descent(t);
    violations += bad.size();
    descent.push_back({{"concept", t.concept_index}, {"violations", bad}});
  }
  add(out, "feasibility", worst_defect <= feas_tol,
      fmt::format("max defect {} (tolerance {})", format_double(worst_defect), format_double(feas_tol)));
  if (theoretical_steps(c)) {
    add(out, "monotone_descent", violations == 0, fmt::format("{} violation(s)", violations));
  }
  out.files["descent"] = {{"theoretical_steps", theoretical_steps(c)}, {"concepts", descent}};
}

void fit_events(const std::vector<DescentTrace>& traces, json& descent) {
  json events = json::array();
  for (const DescentTrace& t : traces)
    for (const std::string& e : t.events) events.push_back({{"concept", t.concept_index}, {"event", e}});
  descent["events"] = events;
}

void model_studies(const Experiment& exp, const ComposedModel& model, const std::string& only, StudyOutput& out) {
  const RunConfig& cfg = exp.config;
  const StudyBlock& s = cfg.study;
  const std::size_t t = model.concept_count();
  const std::size_t layers = model.layer_count();
  const kernels::Exec exec = s.parallel ? kernels::Exec::parallel : kernels::Exec::serial;
  const Rng study_root = Rng(cfg.seed).split(kStudySplit);
  const bool all = only.empty();

  if (all) {
    double worst = 0.0;
    json rows = json::array();
    for (std::size_t j = 0; j < t; ++j) {
      for (std::size_t l = 0; l < layers; ++l) {
        const double a = annihilation_ratio(model, j, l);
        worst = std::max(worst, a);
        rows.push_back({{"j", j}, {"layer", l}, {"ratio", a}});
      }
    }
    add(out, "crosstalk_annihilation", worst <= kAnnihilationTolerance,
        fmt::format("max ratio {}", format_double(worst)));
    out.files["annihilation"] = {{"max_ratio", worst}, {"entries", rows}};
  }

  if (all && s.forgetting && cfg.task.kind == TaskKind::linear_population) {
    json rows = json::array();
    double worst = 0.0, worst_bound = -INFINITY;
    for (std::size_t j = 0; j < t; ++j) {
      const ForgettingReport r = forgetting_decomposition(model, exp.stream[j], j);
      worst = std::max(worst, r.identity_residual);
      worst_bound = std::max(worst_bound, r.lhs - r.upper_bound);
      rows.push_back(to_json(r));
    }
    add(out, "forgetting_identity", worst <= kIdentityTolerance,
        fmt::format("max relative residual {}", format_double(worst)));
    add(out, "forgetting_upper_bound", worst_bound <= 1e-8,
        fmt::format("max lhs - bound {}", format_double(worst_bound)));
    out.files["forgetting"] = rows;
  }

  if ((all || only == "basis") && s.basis) {
    json rows = json::array();
    bool closed = true, dominated = true, mean_ok = true, learned_ok = true;
    BasisRegistry reg(0, cfg.task.m, cfg.bilevel.epsilon);
    for (std::size_t j = 0; j < t; ++j) {
      Rng rng = study_root.split(100 + j);
      const BasisStudy b = optimal_basis_study(exp.stream[j].sigma, reg, cfg.bilevel.rank, s.basis_trials, rng, exec);
      const double learned = residual_energy(exp.stream[j].sigma, model.factors(j, 0).b);
      json row = to_json(b);
      row["j"] = j;
      row["learned_residual"] = learned;
      rows.push_back(std::move(row));
      const double tol = 1e-8 * (1.0 + std::abs(b.optimal_residual));
      closed = closed && std::abs(b.optimal_residual - b.optimal_residual_direct) <= tol;
      dominated = dominated && b.dominated;
      mean_ok = mean_ok && b.mean_within_3se;
      learned_ok = learned_ok && learned >= b.optimal_residual - tol;
      reg.append(model.factors(j, 0).b);
    }
    add(out, "basis_closed_form", closed, "closed-form residual equals the eigenprojector's");
    add(out, "basis_domination", dominated, "eigenprojector beats every sampled Haar projector");
    add(out, "learned_residual_above_optimal", learned_ok, "no feasible basis beats the optimum");
    add(out, "haar_mean", mean_ok, "Monte Carlo captured energy within 3 SE", true);
    out.files["basis"] = rows;
  }

  if ((all || only == "hw") && s.hw) {
    // Crosstalk seen by the first concept, the one exposed to every later update.
    const Matrix& sigma = exp.stream[0].sigma;
    const Matrix b0 = orthonormalize(model.factors(0, 0).b);
    const Matrix p_perp = Matrix::identity(sigma.rows()) - projector_from_orthonormal(b0);
    const Matrix sigma_perp = symmetrize(matmul(matmul(p_perp, sigma), p_perp));
    Rng rng = study_root.split(200);
    const HWReport r = hw_crosstalk_study(sigma_perp, Matrix::identity(s.hw_tokens),
                                          model.crosstalk_operator(0, 0), s.hw_samples, s.xi, s.c1_grid, rng,
                                          s.sampler, exec);
    const double xi_min = *std::min_element(s.xi.begin(), s.xi.end());
    const double lhs = (r.psi_op > 0 ? r.psi_fro / r.psi_op : 0.0) *
                       (r.q_op > 0 ? r.qtq_fro / (r.q_op * r.q_op) : 0.0);
    const double rhs = std::sqrt(r.calibrated_c1.value_or(1.0) * std::log(2.0 / xi_min));
    add(out, "hw_regime_arithmetic", classify_regime(lhs, rhs) == r.regime,
        fmt::format("label {} from {} vs {}", r.regime, format_double(lhs), format_double(rhs)));
    add(out, "hw_mean", r.mean_within_3se, "empirical mean within 3 SE of the analytic mean", true);
    out.files["hw"] = to_json(r);
  }

  if (all && s.e2e && cfg.task.kind == TaskKind::deep) {
    json rows = json::array();
    bool holds = true;
    for (std::size_t j = 0; j < t; ++j) {
      ConceptTask task = exp.stream[j];
      Rng rng = study_root.split(300 + j);
      estimate_output_lipschitz(task, model.compose_all(j + 1), s.lipschitz_radius, s.lipschitz_trials, rng);
      const E2EReport r = e2e_forgetting_bound(model, task, j, s.e2e_xi, s.c1_grid.front());
      holds = holds && r.holds;
      rows.push_back(to_json(r));
    }
    add(out, "e2e_bound", holds, "held-out forgetting within the propagated bound");
    out.files["e2e"] = rows;
  }
}

json concept_losses(const Experiment& exp, const ComposedModel& model) {
  json rows = json::array();
  const std::size_t t = model.concept_count();
  const auto w_t = model.compose_all(t);
  for (std::size_t j = 0; j < t; ++j) {
    const double initial = task_loss(exp.stream[j], model.compose_all(j + 1));
    const double final_loss = task_loss(exp.stream[j], w_t);
    rows.push_back({{"j", j},
                    {"initial", initial},
                    {"final", final_loss},
                    {"forgetting", final_loss - initial},
                    {"residual_energy", residual_energy(exp.stream[j].sigma, model.factors(j, 0).b)}});
  }
  return rows;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void write_run(const fs::path& out, const Experiment& exp, const FitResult& fit, const StudyOutput& studies,
               RunArtifacts& art) {
  const RunConfig& cfg = exp.config;
  const std::size_t layers = fit.model.layer_count();
  for (std::size_t j = 0; j < fit.model.concept_count(); ++j)
    for (std::size_t l = 0; l < layers; ++l) save_factors(out / factor_file_name(j, l), fit.model.factors(j, l));
  write_text_file(out / "metrics.csv", metrics_csv(run_id(cfg), fit.traces));
  fs::create_directories(out / "studies");
  for (const auto& [stem, j] : studies.files) write_text_file(out / "studies" / (stem + ".json"), dump(j));

  json inv = json::array();
  for (const InvariantResult& r : studies.invariants) inv.push_back(to_json(r));
  const json losses = concept_losses(exp, fit.model);
  double mean_f = 0.0, mean_r = 0.0;
  for (const json& row : losses) {
    mean_f += row["forgetting"].get<double>();
    mean_r += row["residual_energy"].get<double>();
  }
  const double nt = static_cast<double>(losses.size());
  art.manifest = {{"run_id", run_id(cfg)},
                  {"seed", cfg.seed},
                  {"optimizer", to_string(cfg.optimizer)},
                  {"config", serialize_config(cfg)},
                  {"concepts", losses},
                  {"mean_forgetting", mean_f / nt},
                  {"mean_residual_energy", mean_r / nt},
                  {"invariants", inv},
                  {"ok", enforced_ok(studies.invariants)}};
  std::vector<std::string> files;
  for (const fs::path& p : expected_artifacts(cfg)) files.push_back(p.generic_string());
  art.manifest["artifacts"] = files;
  write_text_file(out / "manifest.json", dump(art.manifest));
}

RunArtifacts execute(const RunConfig& cfg, const fs::path& out, const std::string& only) {
  const Experiment exp = build_experiment(cfg);
  Rng fit_rng = Rng(cfg.seed).split(kFitSplit);
  RunArtifacts art;
  art.fit = fit_stream(cfg.optimizer, exp.stream, exp.base_weights, cfg.bilevel, fit_rng);
  StudyOutput studies;
  if (only.empty()) {
    trace_studies(exp, art.fit.traces, studies);
    fit_events(art.fit.traces, studies.files["descent"]);
  }
  model_studies(exp, art.fit.model, only, studies);
  art.invariants = studies.invariants;
  fs::create_directories(out);
  if (only.empty()) {
    write_run(out, exp, art.fit, studies, art);
  } else {
    fs::create_directories(out / "studies");
    for (const auto& [stem, j] : studies.files) write_text_file(out / "studies" / (stem + ".json"), dump(j));
  }
  return art;
}

}  // namespace

std::vector<fs::path> expected_artifacts(const RunConfig& cfg) {
  std::vector<fs::path> files{"manifest.json", "metrics.csv"};
  for (std::size_t j = 0; j < cfg.task.concepts; ++j)
    for (std::size_t l = 0; l < cfg.task.layers; ++l) files.push_back(factor_file_name(j, l));
  files.emplace_back("studies/descent.json");
  files.emplace_back("studies/annihilation.json");
  if (cfg.study.forgetting && cfg.task.kind == TaskKind::linear_population) files.emplace_back("studies/forgetting.json");
  if (cfg.study.basis) files.emplace_back("studies/basis.json");
  if (cfg.study.hw) files.emplace_back("studies/hw.json");
  if (cfg.study.e2e && cfg.task.kind == TaskKind::deep) files.emplace_back("studies/e2e.json");
  return files;
}

RunArtifacts execute_run(const RunConfig& cfg, const fs::path& out) { return execute(cfg, out, ""); }

RunArtifacts execute_study(const RunConfig& cfg, const fs::path& out, const std::string& study) {
  if (study != "basis" && study != "hw") throw std::invalid_argument(fmt::format("unknown study '{}'", study));
  RunConfig c = cfg;
  (study == "basis" ? c.study.basis : c.study.hw) = true;
  return execute(c, out, study);
}

ComposedModel load_model(const fs::path& run_dir, const Experiment& exp) {
  ComposedModel model(exp.base_weights);
  for (std::size_t j = 0; j < exp.config.task.concepts; ++j) {
    std::vector<LoRAFactorPair> pairs;
    for (std::size_t l = 0; l < exp.config.task.layers; ++l) pairs.push_back(load_factors(run_dir / factor_file_name(j, l), l));
    model.add_concept(std::move(pairs));
  }
  return model;
}

namespace {

struct LoadedRun {
  json manifest;
  Experiment exp;
  ComposedModel model;
};

void require_complete(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "manifest.json")) {
    throw std::runtime_error(fmt::format("incomplete run '{}': missing manifest.json", run_dir.string()));
  }
  const json manifest = json::parse(read_text_file(run_dir / "manifest.json"));
  const RunConfig cfg = parse_config_string(manifest.at("config").get<std::string>(), "manifest.json");
  std::vector<std::string> missing;
  for (const fs::path& p : expected_artifacts(cfg))
    if (!fs::exists(run_dir / p)) missing.push_back(p.generic_string());
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw std::runtime_error(fmt::format("incomplete run '{}': missing artifacts:{}", run_dir.string(), list));
  }
}

LoadedRun load_run(const fs::path& run_dir) {
  require_complete(run_dir);
  LoadedRun r;
  r.manifest = json::parse(read_text_file(run_dir / "manifest.json"));
  const RunConfig cfg = parse_config_string(r.manifest.at("config").get<std::string>(), "manifest.json");
  r.exp = build_experiment(cfg);
  r.model = load_model(run_dir, r.exp);
  return r;
}

}  // namespace

std::vector<InvariantResult> verify_run(const fs::path& run_dir) {
  const LoadedRun run = load_run(run_dir);
  StudyOutput replay;
  const auto rows = parse_metrics_csv(read_text_file(run_dir / "metrics.csv"));
  const auto traces = traces_from_metrics(rows);
  trace_studies(run.exp, traces, replay);
  model_studies(run.exp, run.model, "", replay);

  std::vector<InvariantResult> out = replay.invariants;
  // Replayed reports must reproduce the persisted ones exactly (the descent
  // report also carries fit events, which are not recoverable from metrics).
  for (const auto& [stem, report] : replay.files) {
    if (stem == "descent") continue;
    const std::string persisted = read_text_file(run_dir / "studies" / (stem + ".json"));
    out.push_back({"replay_" + stem, persisted == dump(report), false,
                   fmt::format("studies/{}.json reproduced from factors", stem)});
  }
  const json losses = concept_losses(run.exp, run.model);
  double worst = 0.0;
  const json& stored = run.manifest.at("concepts");
  bool shape_ok = stored.size() == losses.size();
  for (std::size_t j = 0; shape_ok && j < losses.size(); ++j) {
    for (const char* key : {"initial", "final", "forgetting"})
      worst = std::max(worst, std::abs(stored[j].at(key).get<double>() - losses[j].at(key).get<double>()));
  }
  out.push_back({"replay_losses", shape_ok && worst <= 1e-10, false,
                 fmt::format("max loss discrepancy {}", format_double(worst))});
  const bool ids = std::all_of(rows.begin(), rows.end(),
                               [&](const MetricsRow& r) { return r.run_id == run.manifest.at("run_id").get<std::string>(); });
  out.push_back({"metrics_schema", ids && !rows.empty(), false, fmt::format("{} metrics rows", rows.size())});
  return out;
}

RunReport make_report(const fs::path& run_dir) {
  const LoadedRun run = load_run(run_dir);
  RunReport rep;
  rep.run_id = run.manifest.at("run_id").get<std::string>();
  const json losses = concept_losses(run.exp, run.model);
  for (const json& row : losses) {
    ConceptSummary c;
    c.j = row["j"].get<std::size_t>();
    c.initial = row["initial"].get<double>();
    c.final_loss = row["final"].get<double>();
    c.forgetting = row["forgetting"].get<double>();
    rep.mean_forgetting += c.forgetting;
    rep.max_forgetting = rep.concepts.empty() ? c.forgetting : std::max(rep.max_forgetting, c.forgetting);
    rep.concepts.push_back(c);
  }
  if (!rep.concepts.empty()) rep.mean_forgetting /= static_cast<double>(rep.concepts.size());
  for (const json& inv : run.manifest.at("invariants")) {
    ++rep.invariants_total;
    if (inv.at("passed").get<bool>()) ++rep.invariants_passed;
  }

  rep.studies = json::object();
  const fs::path sdir = run_dir / "studies";
  auto load = [&](const char* stem) { return json::parse(read_text_file(sdir / (std::string(stem) + ".json"))); };
  if (fs::exists(sdir / "annihilation.json")) rep.studies["annihilation"] = {{"max_ratio", load("annihilation")["max_ratio"]}};
  if (fs::exists(sdir / "forgetting.json")) {
    double worst = 0.0;
    for (const json& r : load("forgetting")) worst = std::max(worst, r["identity_residual"].get<double>());
    rep.studies["forgetting"] = {{"max_identity_residual", worst}};
  }
  if (fs::exists(sdir / "basis.json")) {
    double gap = 0.0, excess = 0.0;
    const json b = load("basis");
    for (const json& r : b) {
      gap += r["gap"].get<double>();
      excess += r["learned_residual"].get<double>() - r["optimal_residual"].get<double>();
    }
    const double n = static_cast<double>(std::max<std::size_t>(b.size(), 1));
    rep.studies["basis"] = {{"mean_haar_gap", gap / n}, {"mean_learned_excess", excess / n}};
  }
  if (fs::exists(sdir / "hw.json")) {
    const json h = load("hw");
    rep.studies["hw"] = {{"mu_z", h["mu_z"]}, {"empirical_mean", h["empirical_mean"]},
                         {"calibrated_c1", h["calibrated_c1"]}, {"regime", h["regime"]}};
  }
  if (fs::exists(sdir / "e2e.json")) {
    double worst = 0.0;
    for (const json& r : load("e2e")) worst = std::max(worst, r["looseness"].get<double>());
    rep.studies["e2e"] = {{"max_looseness", worst}};
  }
  return rep;
}

namespace {

std::string scalar_text(const json& v) {
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

std::string report_text(const RunReport& r) {
  std::string out = fmt::format("run {} ({} concepts)\n", r.run_id, r.concepts.size());
  out += "concept,initial,final,forgetting\n";
  for (const ConceptSummary& c : r.concepts) {
    out += fmt::format("{},{},{},{}\n", c.j, format_double(c.initial), format_double(c.final_loss),
                       format_double(c.forgetting));
  }
  out += fmt::format("mean_forgetting {}\nmax_forgetting {}\n", format_double(r.mean_forgetting),
                     format_double(r.max_forgetting));
  out += fmt::format("invariants {}/{} passed\n", r.invariants_passed, r.invariants_total);
  for (const auto& [name, fields] : r.studies.items()) {
    out += "study " + name;
    for (const auto& [k, v] : fields.items()) out += " " + k + "=" + scalar_text(v);
    out += "\n";
  }
  return out;
}

json to_json(const RunReport& r) {
  json concepts = json::array();
  for (const ConceptSummary& c : r.concepts)
    concepts.push_back({{"j", c.j}, {"initial", c.initial}, {"final", c.final_loss}, {"forgetting", c.forgetting}});
  return {{"run_id", r.run_id},
          {"concepts", concepts},
          {"mean_forgetting", r.mean_forgetting},
          {"max_forgetting", r.max_forgetting},
          {"invariants_passed", r.invariants_passed},
          {"invariants_total", r.invariants_total},
          {"studies", r.studies}};
}

std::vector<SweepCell> run_sweep(const RunConfig& cfg, const fs::path& out, std::size_t jobs) {
  std::vector<SweepCell> cells;
  for (std::uint64_t seed : cfg.sweep.seeds) {
    for (OptimizerKind k : cfg.sweep.optimizers) {
      SweepCell c;
      c.seed = seed;
      c.optimizer = k;
      c.dir = out / fmt::format("{}_seed{}", to_string(k), seed);
      cells.push_back(c);
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      SweepCell& c = cells[i];
      RunConfig cc = cfg;
      cc.seed = c.seed;
      cc.optimizer = c.optimizer;
      cc.output = c.dir.generic_string();
      try {
        const RunArtifacts art = execute_run(cc, c.dir);
        c.ok = enforced_ok(art.invariants);
        c.mean_forgetting = art.manifest["mean_forgetting"].get<double>();
        c.mean_residual_energy = art.manifest["mean_residual_energy"].get<double>();
      } catch (const std::exception& e) {
        c.ok = false;
        c.error = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  write_text_file(out / "sweep.csv", sweep_csv(cells));
  return cells;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
  std::string out = "optimizer,seed,ok,mean_forgetting,mean_residual_energy,error\r\n";
  for (const SweepCell& c : cells) {
    out += fmt::format("{},{},{},{},{},{}\r\n", to_string(c.optimizer), c.seed, c.ok ? 1 : 0,
                       format_double(c.mean_forgetting), format_double(c.mean_residual_energy), csv_quote(c.error));
  }
  return out;
}

}  // namespace seqlora
