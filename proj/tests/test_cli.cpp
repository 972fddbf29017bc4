#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "sbreg/cli.hpp"

using namespace sbreg;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "sbreg");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* keep = std::cout.rdbuf(out.rdbuf());
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), err);
  std::cout.rdbuf(keep);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> v;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

class CliPipeline : public ::testing::Test {
 protected:
  static inline fs::path root;
  static inline std::string config;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "sbreg_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    config = (root / "config.json").string();
    std::ofstream(config) << R"({
  "model": {"num_layers": 2, "hidden_dim": 8, "num_heads": 2, "vocab_size": 16, "max_seq_len": 16, "ffn_dim": 16},
  "corpus": {"num_topics": 2, "topic_size": 6, "num_sequences": 80, "min_len": 4, "max_len": 10},
  "task": {"num_topics": 2, "topic_size": 6, "num_samples": 80, "min_len": 4, "max_len": 10},
  "pretrain": {"steps": 30, "batch_size": 4},
  "map": {"steps": 10, "batch_size": 4, "latent_dim": 2, "hidden1": 6, "hidden2": 4},
  "train": {"max_steps": 12, "eval_every": 4, "batch_size": 4},
  "fewshot": {"k": 4}
})";
    ASSERT_EQ(run({"--config", config, "--out", (root / "data").string(), "gen-data"}).code, 0);
    ASSERT_EQ(run({"--config", config, "--out", (root / "bb").string(), "pretrain", "--corpus",
                   (root / "data" / "corpus.jsonl").string()})
                  .code,
              0);
    ASSERT_EQ(run({"--config", config, "--out", (root / "map").string(), "fit-map", "--backbone", backbone(), "--corpus",
                   (root / "data" / "corpus.jsonl").string(), "--method", "pdf"})
                  .code,
              0);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static std::string backbone() { return (root / "bb" / "backbone.bin").string(); }
  static std::string task() { return (root / "data" / "task.jsonl").string(); }

  static CliResult train(const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"--config", config, "--seed", "3", "--out", (root / out).string(), "train-pet",
                                  "--backbone", backbone(), "--data", task(), "--pet", "lora"};
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  }
};

}  // namespace

TEST(Cli, SampleBridgeWritesPathRows) {
  const auto dir = fs::temp_directory_path() / "sbreg_cli_bridge";
  fs::remove_all(dir);
  auto r = run({"--seed", "5", "--out", dir.string(), "sample-bridge", "--beta", "1.5", "--steps", "100", "--paths", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(slurp(dir / "paths.csv"));
  ASSERT_EQ(rows.size(), 301u);
  EXPECT_EQ(rows[0], "path,t,value");
  EXPECT_EQ(rows[100].rfind("0,1,1.5", 0), 0u);
  EXPECT_EQ(rows[300].rfind("2,1,1.5", 0), 0u);
  fs::remove_all(dir);
}

TEST(Cli, SampleBridgeToStdoutIsSeeded) {
  auto a = run({"--seed", "5", "sample-bridge", "--bridge", "ou", "--beta", "1,-1", "--steps", "10", "--paths", "2"});
  auto b = run({"--seed", "5", "sample-bridge", "--bridge", "ou", "--beta", "1,-1", "--steps", "10", "--paths", "2"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(lines(a.out)[0], "path,t,value_0,value_1");
  EXPECT_EQ(lines(a.out).size(), 21u);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run({"no-such-command"}).code, 1);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"sample-bridge", "--beta", "1", "--steps", "-3"}).code, 1);
  EXPECT_EQ(run({"sample-bridge", "--beta", "1", "--sigma", "abc"}).code, 1);
}

TEST(Cli, DataErrorsExitTwo) {
  auto r = run({"eval", "--backbone", "/nonexistent/backbone.bin", "--data", "/nonexistent/task.jsonl"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("data error"), std::string::npos);
  const auto bad = fs::temp_directory_path() / "sbreg_bad_config.json";
  std::ofstream(bad) << "{not json";
  EXPECT_EQ(run({"--config", bad.string(), "sample-bridge", "--beta", "1"}).code, 2);
  fs::remove(bad);
}

TEST_F(CliPipeline, PretrainAndFitWriteSnapshots) {
  EXPECT_TRUE(fs::exists(root / "bb" / "pretrain.json"));
  EXPECT_TRUE(fs::exists(root / "map" / "map.bin"));
  EXPECT_TRUE(fs::exists(root / "map" / "endpoints.bin"));
  EXPECT_EQ(lines(slurp(root / "map" / "fit_log.csv")).size(), 11u);
}

TEST_F(CliPipeline, ZeroAlphaMatchesNoRegularizer) {
  auto a = train("zero", {"--method", "pdf", "--alpha", "0"});
  auto b = train("none", {"--method", "none"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(root / "zero" / "metrics.csv"), slurp(root / "none" / "metrics.csv"));
  EXPECT_EQ(slurp(root / "zero" / "pet.bin"), slurp(root / "none" / "pet.bin"));
}

TEST_F(CliPipeline, RerunIsByteIdentical) {
  const std::vector<std::string> reg{"--method", "pdf", "--alpha", "0.5", "--map", (root / "map" / "map.bin").string(),
                                     "--endpoints", (root / "map" / "endpoints.bin").string()};
  ASSERT_EQ(train("r1", reg).code, 0);
  ASSERT_EQ(train("r2", reg).code, 0);
  for (const char* f : {"metrics.csv", "pet.bin", "probe.json"}) EXPECT_EQ(slurp(root / "r1" / f), slurp(root / "r2" / f)) << f;
}

TEST_F(CliPipeline, RegularizerNeedsMap) {
  EXPECT_EQ(train("nomap", {"--method", "pdf", "--alpha", "1"}).code, 1);
}

TEST_F(CliPipeline, EvalScoresCheckpoint) {
  ASSERT_EQ(train("ev", {}).code, 0);
  auto r = run({"eval", "--backbone", backbone(), "--pet", (root / "ev" / "pet.bin").string(), "--data", task()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("accuracy,", 0), 0u);
  const double v = std::stod(r.out.substr(9));
  EXPECT_GE(v, 0.0);
  EXPECT_LE(v, 1.0);
}

TEST_F(CliPipeline, FewshotWritesSummary) {
  auto r = run({"--config", config, "--seed", "1", "--out", (root / "fs").string(), "fewshot", "--backbone", backbone(),
                "--data", task(), "--pet", "bitfit", "--seeds", "2", "--test", task()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto rows = lines(slurp(root / "fs" / "summary.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1].rfind("1,", 0), 0u);
  EXPECT_EQ(rows[2].rfind("2,", 0), 0u);
  EXPECT_TRUE(fs::exists(root / "fs" / "seed_2" / "pet.bin"));
}

TEST_F(CliPipeline, AnalyzeReportsCorrelations) {
  const std::string map = (root / "map" / "map.bin").string(), ends = (root / "map" / "endpoints.bin").string();
  std::vector<std::string> runs;
  for (const char* alpha : {"0", "0.5", "1"}) {
    const std::string name = std::string("an_") + alpha;
    ASSERT_EQ(train(name, {"--method", "pdf", "--alpha", alpha, "--map", map, "--endpoints", ends}).code, 0);
    runs.push_back((root / name).string());
  }
  std::vector<std::string> args{"--out", (root / "analysis").string(), "analyze", "--map", map, "--endpoints", ends, "--runs"};
  args.insert(args.end(), runs.begin(), runs.end());
  auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  auto table = lines(slurp(root / "analysis" / "analysis.csv"));
  ASSERT_EQ(table.size(), 4u);
  EXPECT_EQ(table[0], "run,alpha,dev_metric,centroid_distance,bridge_distance_sum,bridge_distance_mean");
  auto corr = lines(slurp(root / "analysis" / "correlations.csv"));
  ASSERT_EQ(corr.size(), 3u);
  EXPECT_EQ(corr[1].rfind("pearson,alpha,centroid_distance,", 0), 0u);
  EXPECT_EQ(corr[2].rfind("kendall_tau_b,bridge_distance_mean,dev_metric,", 0), 0u);
  EXPECT_TRUE(fs::exists(root / "analysis" / "alpha_centroid.svg"));
  EXPECT_EQ(run({"analyze", "--runs", runs[0], "--map", map}).code, 1);
}
