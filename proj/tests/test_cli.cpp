#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "metta/analysis.hpp"
#include "metta/config.hpp"
#include "metta/errors.hpp"
#include "metta/pipeline.hpp"
#include "test_util.hpp"

namespace metta {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

struct Outcome {
  int status = -1;
  std::string output;  // stdout and stderr
};

Outcome run_cli(const std::string& args) {
  const std::string cmd = std::string(METTA_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) o.output.append(buf.data(), n);
  const int raw = pclose(pipe);
  o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return o;
}

fs::path tiny_config() { return fs::path(METTA_SOURCE_DIR) / "tests/data/tiny.json"; }

nlohmann::json tiny_json() {
  nlohmann::json j;
  std::ifstream(tiny_config()) >> j;
  return j;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

TEST(Cli, SelftestAndGradCheckPass) {
  TempDir dir("cli_suites");
  const Outcome s = run_cli("selftest --out " + q(dir.path()));
  EXPECT_EQ(s.status, 0) << s.output;
  EXPECT_TRUE(fs::exists(dir / "selftest.csv"));
  const Outcome g = run_cli("grad-check --out " + q(dir.path()));
  EXPECT_EQ(g.status, 0) << g.output;
  const CsvTable t = read_csv(dir / "grad_check.csv");
  EXPECT_GE(t.rows.size(), 10u);
  for (const auto& row : t.rows) EXPECT_EQ(row[t.column("passed")], "1") << row[0];
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(run_cli("").status, 0);
  EXPECT_NE(run_cli("frobnicate").status, 0);
  const Outcome o = run_cli("eval");
  EXPECT_NE(o.status, 0);
  EXPECT_NE(o.output.find("--config"), std::string::npos) << o.output;
}

TEST(Cli, MissingConfigKeysAreNamed) {
  TempDir dir("cli_keys");
  nlohmann::json j = tiny_json();
  j["training"].erase("lr");
  j["dataset"].erase("classes");
  std::ofstream(dir / "bad.json") << j.dump();
  const Outcome o = run_cli("gen-data --config " + q(dir / "bad.json"));
  EXPECT_NE(o.status, 0);
  EXPECT_NE(o.output.find("training.lr"), std::string::npos) << o.output;
  EXPECT_NE(o.output.find("dataset.classes"), std::string::npos) << o.output;
}

TEST(Cli, MissingArtifactsAreReported) {
  TempDir dir("cli_missing");
  const Outcome o = run_cli("train-backbone --config " + q(tiny_config()) + " --out " + q(dir.path()));
  EXPECT_NE(o.status, 0);
  EXPECT_NE(o.output.find("gen-data"), std::string::npos) << o.output;
}

TEST(Cli, PipelineEndToEnd) {
  TempDir dir("cli_pipeline");
  const std::string common = " --config " + q(tiny_config()) + " --out " + q(dir.path());
  ASSERT_EQ(run_cli("gen-data" + common).status, 0);
  ASSERT_EQ(run_cli("train-backbone" + common).status, 0);

  // Copy the head-less backbone checkpoint over the linear one: eval must refuse it.
  fs::copy_file(dir / "backbone.mtck", dir / "linear.mtck");
  const Outcome headless = run_cli("eval" + common);
  EXPECT_NE(headless.status, 0);
  EXPECT_NE(headless.output.find("linear.mtck"), std::string::npos) << headless.output;
  fs::remove(dir / "linear.mtck");

  for (const char* stage : {"train-linear", "eval", "interp", "jitter", "retrieve"}) {
    const Outcome o = run_cli(std::string(stage) + common);
    ASSERT_EQ(o.status, 0) << stage << ": " << o.output;
  }
  const CsvTable eval = read_csv(dir / "eval_report.csv");
  EXPECT_EQ(eval.header, (std::vector<std::string>{"method", "S", "top1", "nll", "seed"}));
  EXPECT_EQ(eval.rows.size(), 5u);
  for (const auto& row : eval.rows) {
    const double top1 = std::stod(row[2]), nll = std::stod(row[3]);
    EXPECT_GE(top1, 0.0);
    EXPECT_LE(top1, 1.0);
    EXPECT_GE(nll, 0.0);
  }
  EXPECT_EQ(read_csv(dir / "interp_curve.csv").rows.size(), 22u);
  EXPECT_EQ(read_csv(dir / "jitter.csv").rows.size(), 32u);
  const CsvTable ret = read_csv(dir / "retrieval_report.csv");
  EXPECT_EQ(ret.rows.size(), 2u);
  for (const auto& row : ret.rows) EXPECT_EQ(std::stod(row[ret.column("self_retrieval_at_1")]), 1.0);
  for (const char* name : {"eval_report.json", "interp_curve.json", "jitter_samples.csv", "embeddings.csv",
                           "backbone_loss.csv", "linear_loss.csv", "train.mtds", "test.mtds"}) {
    EXPECT_TRUE(fs::exists(dir / name)) << name;
  }
}

TEST(Config, TinyParses) {
  const ExperimentConfig cfg = load_config(tiny_config());
  EXPECT_EQ(cfg.dataset.count, 160u);
  EXPECT_EQ(cfg.stages.size(), 2u);
  EXPECT_EQ(cfg.training.policy.kind, PolicyKind::kRandomResizedCropFlip);
  EXPECT_EQ(cfg.eval_policy(), cfg.training.policy);
  EXPECT_EQ(cfg.analysis.alphas.size(), 11u);
  EXPECT_EQ(cfg.analysis.retrieval_scales, AugmentationPolicy::multi_scale().scales);
}

TEST(Config, DefaultParses) {
  const ExperimentConfig cfg = load_config(fs::path(METTA_SOURCE_DIR) / "configs/default.json");
  EXPECT_EQ(cfg.dataset.image_size, 32u);
  EXPECT_EQ(cfg.eval.sample_counts, (std::vector<std::size_t>{10, 32}));
}

TEST(Config, SeedOverrideReplacesEverySeed) {
  ExperimentConfig cfg = load_config(tiny_config());
  cfg.override_seed(99);
  for (std::uint64_t s : {cfg.dataset.seed, cfg.init_seed, cfg.training.seed, cfg.training.linear.seed,
                          cfg.eval.seed, cfg.analysis.seed}) {
    EXPECT_EQ(s, 99u);
  }
}

TEST(Config, Rejections) {
  auto expect_config_error = [](nlohmann::json j, const std::string& needle) {
    try {
      parse_config(j);
      ADD_FAILURE() << "accepted config expecting '" << needle << "'";
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  nlohmann::json j = tiny_json();
  j["extra"] = 1;
  expect_config_error(j, "extra");
  j = tiny_json();
  j["eval"]["methods"] = {"median"};
  expect_config_error(j, "median");
  j = tiny_json();
  j["analysis"]["alphas"] = {0.0, 0.5};
  expect_config_error(j, "alphas");
  j = tiny_json();
  j["eval"]["S"] = {0};
  expect_config_error(j, "eval.S");
  j = tiny_json();
  j["training"]["policy"]["kind"] = "Shear";
  expect_config_error(j, "policy");
  j = tiny_json();
  j["training"]["policy"]["s_lo"] = 1.5;
  expect_config_error(j, "policy");
  j = tiny_json();
  j["dataset"]["count"] = -3;
  expect_config_error(j, "dataset.count");
  j = tiny_json();
  j["backbone"].erase("stages");
  expect_config_error(j, "backbone.stages");
  EXPECT_THROW(load_config("/nonexistent.json"), IoError);
}

}  // namespace
}  // namespace metta
