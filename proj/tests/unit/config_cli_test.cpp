#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>

#include "mocomsi/pipeline/config.hpp"
#include "mocomsi/pipeline/workflow.hpp"
#include "test_support.hpp"

namespace mocomsi {
namespace {

namespace fs = std::filesystem;

const fs::path kSmoke = fs::path(MOCOMSI_SOURCE_DIR) / "configs" / "smoke.ini";

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const std::string& value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    setenv(name, value.c_str(), 1);
  }
  ~ScopedEnv() {
    if (old_) setenv(name_, old_->c_str(), 1);
    else unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

TEST(RunConfig, ParsesIniAndOverrides) {
  testing::TempDir dir;
  testing::write_file(dir / "c.ini", "[encoder]\noutput_dim = 16\n[grouping]\ngroup_size = 3\n[run]\nseeds = 4,5,6\n");
  const auto c = load_run_config(dir / "c.ini", {{"stage1.epochs", "2"}});
  EXPECT_EQ(c.encoder.output_dim, 16);
  EXPECT_EQ(c.head.input_dim, 48);
  EXPECT_EQ(c.stage1.epochs, 2);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5, 6}));
}

TEST(RunConfig, DefaultsMatchReferenceShape) {
  const auto c = load_run_config({});
  EXPECT_EQ(c.encoder.output_dim, 512);
  EXPECT_EQ(c.grouping.group_size, 4);
  EXPECT_EQ(c.head.input_dim, 2048);
  EXPECT_EQ(c.eval.threshold, 0.5);
}

TEST(RunConfig, InputDimMismatchIsConfigError) {
  testing::TempDir dir;
  testing::write_file(dir / "c.ini", "[head]\ninput_dim = 1000\n");
  EXPECT_THROW(load_run_config(dir / "c.ini"), ConfigError);
}

TEST(RunConfig, BadValuesAreRejected) {
  EXPECT_THROW(load_run_config({}, {{"no.such_key", "1"}}), ConfigError);
  EXPECT_THROW(load_run_config({}, {{"stage1.epochs", "many"}}), ConfigError);
  EXPECT_THROW(load_run_config({}, {{"eval.threshold", "1.5"}}), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/c.ini"), IngestError);
}

TEST(RunConfig, OutputRootFromEnvironment) {
  ScopedEnv env("MOCOMSI_OUTPUT_ROOT", "/tmp/elsewhere");
  EXPECT_EQ(load_run_config({}).output_dir, "/tmp/elsewhere");
  EXPECT_EQ(load_run_config({}, {{"run.output_dir", "mine"}}).output_dir, "mine");
}

TEST(RunConfig, StageHashesFollowUpstream) {
  const auto a = load_run_config(kSmoke);
  const auto b = load_run_config(kSmoke, {{"head.epochs", "6"}});
  const auto c = load_run_config(kSmoke, {{"dataset.seed", "99"}});
  EXPECT_EQ(stage_hashes(a).stage1, stage_hashes(b).stage1);
  EXPECT_NE(stage_hashes(a).head, stage_hashes(b).head);
  EXPECT_EQ(stage_hashes(a).baseline, stage_hashes(b).baseline);
  EXPECT_NE(stage_hashes(a).stage1, stage_hashes(c).stage1);
  EXPECT_NE(stage_hashes(a).baseline, stage_hashes(c).baseline);
  // The run seed picks a subdirectory, not a new stage directory.
  EXPECT_EQ(stage_hashes(a).head, stage_hashes(load_run_config(kSmoke, {{"run.seeds", "9"}})).head);
}

int cli(const std::string& args, const fs::path& out) {
  const std::string cmd = std::string(MOCOMSI_CLI_PATH) + " " + args + " -o " + out.string() + " > " +
                          (out.parent_path() / "cli.log").string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

TEST(Cli, InvalidConfigExitsNonzeroBeforeWork) {
  testing::TempDir dir;
  testing::write_file(dir / "bad.ini", "[head]\ninput_dim = 7\n");
  EXPECT_EQ(cli("synth -c " + (dir / "bad.ini").string(), dir / "out"), 1);
  EXPECT_FALSE(fs::exists(dir / "out"));
  EXPECT_EQ(cli("synth --set bogus.key=1", dir / "out"), 1);
  EXPECT_EQ(cli("no-such-command", dir / "out"), 1);
}

TEST(Cli, MissingUpstreamArtifactExitsOne) {
  testing::TempDir dir;
  EXPECT_EQ(cli("extract -c " + kSmoke.string(), dir / "out"), 1);
  EXPECT_EQ(cli("train-head -c " + kSmoke.string(), dir / "out"), 1);
  EXPECT_EQ(cli("eval -c " + kSmoke.string(), dir / "out"), 1);
}

TEST(Cli, SeedFlagChangesSyntheticData) {
  testing::TempDir dir;
  ASSERT_EQ(cli("synth -c " + kSmoke.string() + " --seed 1", dir / "out"), 0);
  ASSERT_EQ(cli("synth -c " + kSmoke.string() + " --seed 2", dir / "out"), 0);
  int data_dirs = 0;
  for (const auto& e : fs::directory_iterator(dir / "out")) data_dirs += e.path().filename().string().rfind("data-", 0) == 0;
  EXPECT_EQ(data_dirs, 2);
}

TEST(Cli, PlotWritesSvg) {
  testing::TempDir dir;
  testing::write_file(dir / "a.tsv", "#fpr tpr\n0 0\n0.5 0.8\n1 1\n");
  EXPECT_EQ(cli("plot " + (dir / "a.tsv").string() + " --diagonal --title roc", dir / "p.svg"), 0);
  ASSERT_TRUE(fs::exists(dir / "p.svg"));
  EXPECT_GT(fs::file_size(dir / "p.svg"), 200u);
  EXPECT_EQ(cli("plot " + (dir / "missing.tsv").string(), dir / "q.svg"), 1);
}

// Whole smoke pipeline through the library entry points, with the encoder
// checkpoint hashed before and after stage two.
TEST(Pipeline, SmokeRunProducesComparisonAndLeavesEncoderFrozen) {
  testing::TempDir dir;
  auto cfg = load_run_config(kSmoke, {{"run.output_dir", (dir / "runs").string()}});
  Workspace ws(cfg);
  const Logger quiet = [](const std::string&) {};
  run_synth(ws, quiet);
  run_stage1(ws, quiet);
  run_extract(ws, quiet);
  const auto before = sha256_file(ws.encoder_path());
  for (auto seed : cfg.seeds) {
    run_train_head(ws, seed, quiet);
    run_train_baseline(ws, seed, quiet);
    run_eval(ws, seed, Method::kGrouped, false, quiet);
    run_eval(ws, seed, Method::kBaseline, false, quiet);
  }
  EXPECT_EQ(sha256_file(ws.encoder_path()), before);
  const auto out = run_compare(ws, false);
  EXPECT_EQ(out.summary.runs, 2u);
  EXPECT_TRUE(fs::exists(ws.compare_dir(false) / "summary.json"));
  EXPECT_TRUE(fs::exists(ws.compare_dir(false) / "roc_patient.svg"));
  const auto rep = read_report(ws.eval_dir(0, Method::kGrouped, false) / "report.json");
  EXPECT_EQ(rep.n_patients, 6u);
  EXPECT_FALSE(std::isnan(rep.a_group));
}

TEST(Pipeline, CompareWithSingleRunWarns) {
  testing::TempDir dir;
  auto cfg = load_run_config(kSmoke, {{"run.output_dir", (dir / "runs").string()}, {"run.seeds", "3"}});
  Workspace ws(cfg);
  const Logger quiet = [](const std::string&) {};
  run_synth(ws, quiet);
  run_stage1(ws, quiet);
  run_extract(ws, quiet);
  run_train_head(ws, 3, quiet);
  run_train_baseline(ws, 3, quiet);
  run_eval(ws, 3, Method::kGrouped, false, quiet);
  run_eval(ws, 3, Method::kBaseline, false, quiet);
  const auto out = run_compare(ws, false);
  ASSERT_FALSE(out.summary.warnings.empty());
  EXPECT_NE(out.summary.warnings.front().find("single run"), std::string::npos);
}

}  // namespace
}  // namespace mocomsi
