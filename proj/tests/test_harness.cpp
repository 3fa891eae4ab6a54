// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <map>

#include <fmt/format.h>
#include <gtest/gtest.h>
#include <unistd.h>

#include "seqlora/harness.hpp"
#include "seqlora/persistence.hpp"

using namespace seqlora;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.seed = 3;
  c.task.m = 12;
  c.task.n = 10;
  c.task.concepts = 3;
  c.bilevel.rank = 2;
  c.bilevel.K = 2;
  c.bilevel.constants.pairs = 30;
  c.bilevel.constants.rho_pairs = 10;
  c.study.basis_trials = 200;
  c.study.hw_samples = 2000;
  return c;
}

class RunDir : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("seqlora_harness_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
};

std::map<std::string, fs::file_time_type> mtimes(const fs::path& dir) {
  std::map<std::string, fs::file_time_type> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[e.path().string()] = e.last_write_time();
  return out;
}

}  // namespace

TEST(Metrics, GoldenHeaderAndRow) {
  EXPECT_EQ(metrics_header(),
            "run_id,concept,iteration,objective,grad_a_norm,reduced_grad_b_norm,alpha,beta,feasibility_defect,wall_ms");
  const MetricsRow row{"seqlora-seed0", 1, 2, 0.5, 0.25, 1e-7, 0.125, 0.0625, 3e-9, 1.5};
  EXPECT_EQ(metrics_row(row), "seqlora-seed0,1,2,0.5,0.25,9.9999999999999995e-08,0.125,0.0625,3e-09,1.5");
}

TEST(Metrics, QuotingAndRoundTrip) {
  EXPECT_EQ(csv_quote("plain"), "plain");
  EXPECT_EQ(csv_quote("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_quote("say \"hi\""), "\"say \"\"hi\"\"\"");
  DescentTrace t;
  t.concept_index = 4;
  for (int i = 0; i < 3; ++i) {
    TraceRecord r;
    r.iteration = static_cast<std::size_t>(i);
    r.objective = 1.0 / (i + 3.0);
    r.alpha = std::sqrt(2.0);
    t.records.push_back(r);
  }
  const std::string csv = metrics_csv("odd,\"id\"", {t});
  const auto rows = parse_metrics_csv(csv);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].run_id, "odd,\"id\"");
  EXPECT_EQ(rows[2].objective, 1.0 / 5.0);
  EXPECT_EQ(rows[1].alpha, std::sqrt(2.0));
  EXPECT_EQ(rows[2].concept_index, 4u);
  EXPECT_THROW(parse_metrics_csv("wrong,header\r\n"), std::runtime_error);
  EXPECT_THROW(parse_metrics_csv(metrics_header() + "\r\n1,2\r\n"), std::runtime_error);
}

TEST_F(RunDir, ExecuteWritesCompleteDirectoryAndVerifies) {
  const RunConfig cfg = small_config();
  const RunArtifacts art = execute_run(cfg, root_);
  for (const fs::path& p : expected_artifacts(cfg)) EXPECT_TRUE(fs::exists(root_ / p)) << p;
  EXPECT_TRUE(enforced_ok(art.invariants));
  EXPECT_TRUE(art.manifest["ok"].get<bool>());

  const auto before = mtimes(root_);
  const auto results = verify_run(root_);
  EXPECT_EQ(mtimes(root_), before) << "verify must not write";
  for (const InvariantResult& r : results) EXPECT_TRUE(r.passed || r.statistical) << r.name << ": " << r.detail;
  bool saw_replay = false;
  for (const InvariantResult& r : results) saw_replay = saw_replay || r.name == "replay_basis";
  EXPECT_TRUE(saw_replay);
}

TEST_F(RunDir, VerifyDetectsTamperedFactors) {
  const RunConfig cfg = small_config();
  execute_run(cfg, root_);
  LoRAFactorPair p = load_factors(root_ / factor_file_name(1, 0));
  p.a(0, 0) += 1e-3;  // B stays feasible so the model still loads
  save_factors(root_ / factor_file_name(1, 0), p);
  const auto results = verify_run(root_);
  bool any_failed = false;
  for (const InvariantResult& r : results) any_failed = any_failed || (!r.passed && !r.statistical);
  EXPECT_TRUE(any_failed);
}

TEST_F(RunDir, MissingArtifactsAreListed) {
  const RunConfig cfg = small_config();
  execute_run(cfg, root_);
  fs::remove(root_ / factor_file_name(2, 0));
  fs::remove(root_ / "studies/hw.json");
  try {
    make_report(root_);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("concept_2_layer_0.bin"), std::string::npos) << msg;
    EXPECT_NE(msg.find("studies/hw.json"), std::string::npos) << msg;
  }
  EXPECT_THROW(verify_run(root_ / "nope"), std::runtime_error);
}

TEST_F(RunDir, ReportMatchesRecomputation) {
  const RunConfig cfg = small_config();
  const RunArtifacts art = execute_run(cfg, root_);
  const RunReport rep = make_report(root_);
  const Experiment exp = build_experiment(cfg);
  const ComposedModel& model = art.fit.model;
  ASSERT_EQ(rep.concepts.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    const double initial = task_loss(exp.stream[j], model.compose_all(j + 1));
    const double final_loss = task_loss(exp.stream[j], model.compose_all(3));
    EXPECT_NEAR(rep.concepts[j].forgetting, final_loss - initial, 1e-10);
  }
  EXPECT_EQ(rep.concepts[2].forgetting, 0.0);

  // Text and JSON carry the same numbers.
  const nlohmann::json js = to_json(rep);
  const std::string text = report_text(rep);
  for (const nlohmann::json& c : js["concepts"]) {
    const std::string line = fmt::format("{},{},{},{}", c["j"].get<std::size_t>(), format_double(c["initial"]),
                                         format_double(c["final"]), format_double(c["forgetting"]));
    EXPECT_NE(text.find(line), std::string::npos) << line;
  }
  EXPECT_NE(text.find("mean_forgetting " + format_double(js["mean_forgetting"])), std::string::npos);
  EXPECT_EQ(js["invariants_passed"].get<std::size_t>(), rep.invariants_passed);
}

TEST_F(RunDir, SingleConceptHasZeroForgetting) {
  RunConfig cfg = small_config();
  cfg.task.concepts = 1;
  execute_run(cfg, root_);
  const RunReport rep = make_report(root_);
  ASSERT_EQ(rep.concepts.size(), 1u);
  EXPECT_EQ(rep.concepts[0].forgetting, 0.0);
  EXPECT_EQ(rep.mean_forgetting, 0.0);
}

TEST_F(RunDir, RerunIsByteIdenticalApartFromTiming) {
  const RunConfig cfg = small_config();
  execute_run(cfg, root_ / "a");
  execute_run(cfg, root_ / "b");
  for (const fs::path& p : expected_artifacts(cfg)) {
    if (p == "metrics.csv") continue;
    EXPECT_EQ(read_file_bytes(root_ / "a" / p), read_file_bytes(root_ / "b" / p)) << p;
  }
  auto ra = parse_metrics_csv(read_text_file(root_ / "a/metrics.csv"));
  auto rb = parse_metrics_csv(read_text_file(root_ / "b/metrics.csv"));
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].objective, rb[i].objective);
    EXPECT_EQ(ra[i].reduced_grad_b_norm, rb[i].reduced_grad_b_norm);
  }
}

TEST_F(RunDir, StudySubcommandWritesOnlyItsReport) {
  RunConfig cfg = small_config();
  cfg.study.basis = false;
  execute_study(cfg, root_, "basis");
  EXPECT_TRUE(fs::exists(root_ / "studies/basis.json"));
  EXPECT_FALSE(fs::exists(root_ / "studies/hw.json"));
  EXPECT_FALSE(fs::exists(root_ / "manifest.json"));
  EXPECT_THROW(execute_study(cfg, root_, "tarot"), std::invalid_argument);
}

TEST_F(RunDir, SweepCoversGridAndMatchesSerial) {
  RunConfig cfg = small_config();
  cfg.study.basis = false;
  cfg.study.hw = false;
  cfg.sweep.seeds = {1, 2};
  cfg.sweep.optimizers = {OptimizerKind::seqlora, OptimizerKind::frozen};
  const auto par = run_sweep(cfg, root_ / "par", 3);
  const auto ser = run_sweep(cfg, root_ / "ser", 1);
  ASSERT_EQ(par.size(), 4u);
  for (std::size_t i = 0; i < par.size(); ++i) {
    EXPECT_TRUE(par[i].ok) << par[i].error;
    EXPECT_EQ(par[i].mean_forgetting, ser[i].mean_forgetting);
    // Manifests embed each cell's output path, so compare factors instead.
    EXPECT_EQ(read_file_bytes(par[i].dir / factor_file_name(2, 0)), read_file_bytes(ser[i].dir / factor_file_name(2, 0)));
  }
  EXPECT_EQ(sweep_csv(par), read_text_file(root_ / "par/sweep.csv"));
  EXPECT_EQ(read_text_file(root_ / "par/sweep.csv"), read_text_file(root_ / "ser/sweep.csv"));
}

TEST(Experiment, BuildIsDeterministic) {
  const RunConfig cfg = small_config();
  const Experiment a = build_experiment(cfg), b = build_experiment(cfg);
  EXPECT_EQ(a.base_weights, b.base_weights);
  EXPECT_EQ(a.stream[2].target, b.stream[2].target);
  RunConfig bad = cfg;
  bad.task.concepts = 7;
  EXPECT_THROW(build_experiment(bad), ConfigError);
}
