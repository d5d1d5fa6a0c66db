#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cbt/config.hpp"

namespace fs = std::filesystem;
using namespace cbt;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(CBT_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cbt_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    write("cfg.json", R"({"corpus":{"num_sequences":60,"seq_len":16,"min_length":10},
      "model":{"encoder":{"hidden":16,"output_dim":16},"visual":{"hidden":16,"ff_width":32,"heads":2},
               "text":{"hidden":16,"ff_width":32,"heads":2},
               "cross":{"hidden":16,"ff_width":32,"heads":2,"head_hidden":16}},
      "train":{"steps":6,"batch_size":4},
      "probe":[{"epochs":2}]})");
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  void write(const std::string& name, const std::string& text) const { io::write_file(path(name), text); }
  std::string read(const std::string& name) const { return io::read_file(path(name)); }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenDataDefaultsAndChecksums) {
  const auto a = run("gen-data --out " + path("a.jsonl"));
  ASSERT_EQ(a.code, 0);
  const json j = json::parse(a.out);
  EXPECT_EQ(j.at("sequences"), 5000);
  const Corpus c = read_corpus(path("a.jsonl"));
  EXPECT_EQ(c.spec.seq_len, 48u);
  EXPECT_EQ(c.spec.feature_dim, 16u);
  const auto b = run("gen-data --out " + path("b.jsonl"));
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(read("a.jsonl"), read("b.jsonl"));
  EXPECT_EQ(j.at("checksum"), io::hex64(io::fnv1a(read("a.jsonl"))));
}

TEST_F(Cli, GenDataRejectsSingleClass) {
  write("bad.json", R"({"num_classes":1})");
  const auto r = run("gen-data --spec " + path("bad.json") + " --out " + path("x.jsonl"));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());
  EXPECT_FALSE(fs::exists(path("x.jsonl")));
}

TEST_F(Cli, SeedFlagChangesTheCorpus) {
  const auto a = run("gen-data --spec " + path("cfg.json") + " --out " + path("a.jsonl"));
  const auto b = run("gen-data --spec " + path("cfg.json") + " --seed 9 --out " + path("b.jsonl"));
  ASSERT_EQ(a.code, 0);
  ASSERT_EQ(b.code, 0);
  EXPECT_NE(a.out, b.out);
}

TEST_F(Cli, UnknownConfigKeysAndBadFlagsAreConfigErrors) {
  write("bad.json", R"({"train":{"stepz":3}})");
  EXPECT_EQ(run("pretrain --config " + path("bad.json") + " --out " + path("r")).code, 2);
  EXPECT_EQ(run("pretrain --no-such-flag").code, 2);
  EXPECT_EQ(run("").code, 2);
  write("badjson.json", "{not json");
  EXPECT_EQ(run("pretrain --config " + path("badjson.json")).code, 2);
}

TEST_F(Cli, DryRunPrintsConfigAndStepZeroLossesOnly) {
  ASSERT_EQ(run("gen-data --spec " + path("cfg.json") + " --out " + path("c.jsonl")).code, 0);
  const auto r = run("pretrain --dry-run --config " + path("cfg.json") + " --corpus " + path("c.jsonl") + " --out " +
                     path("run"));
  ASSERT_EQ(r.code, 0);
  std::istringstream lines(r.out);
  std::string echo, losses;
  std::getline(lines, echo);
  std::getline(lines, losses);
  EXPECT_EQ(json::parse(echo).at("artifact_version"), kArtifactVersion);
  EXPECT_EQ(json::parse(echo).at("train").at("steps"), 6);
  EXPECT_EQ(json::parse(losses).at("step"), 0);
  EXPECT_EQ(json::parse(losses).at("l_cross"), 0.0);
  EXPECT_FALSE(fs::exists(path("run")));
}

TEST_F(Cli, PretrainThenProbe) {
  ASSERT_EQ(run("gen-data --spec " + path("cfg.json") + " --out " + path("c.jsonl")).code, 0);
  const auto p = run("pretrain --config " + path("cfg.json") + " --corpus " + path("c.jsonl") + " --out " + path("run"));
  ASSERT_EQ(p.code, 0);
  EXPECT_EQ(json::parse(p.out).at("steps"), 6);
  // Metrics: one record per step, cross term off.
  std::istringstream log(read("run/metrics.jsonl"));
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    const json rec = json::parse(line);
    EXPECT_EQ(rec.at("l_cross"), 0.0);
    EXPECT_EQ(rec.at("step"), ++n);
  }
  EXPECT_EQ(n, 6);
  const json echo = json::parse(read("run/config.json"));
  EXPECT_EQ(echo.at("command"), "pretrain");
  EXPECT_EQ(echo.at("corpus").at("num_sequences"), 60);

  const auto q = run("probe --checkpoint " + path("run/checkpoint.ckpt") + " --corpus " + path("c.jsonl") +
                     " --probe-config " + path("cfg.json") + " --seed 4");
  ASSERT_EQ(q.code, 0);
  const json report = json::parse(q.out);
  EXPECT_TRUE(report.contains("accuracy"));
  EXPECT_EQ(report.at("seed"), 4);
  EXPECT_EQ(json::parse(read("run/probe_report.json")), report);

  const auto w = run("probe --checkpoint " + path("run/checkpoint.ckpt") + " --corpus " + path("c.jsonl") +
                     " --probe-config " + path("cfg.json") + " --task anticipation --windows 4,8,16");
  ASSERT_EQ(w.code, 0);
  EXPECT_EQ(std::count(w.out.begin(), w.out.end(), '\n'), 4);
  EXPECT_EQ(w.out.substr(0, w.out.find('\n')), "method,window,accuracy,seed");
}

TEST_F(Cli, IdenticalRunsAreBitIdentical) {
  ASSERT_EQ(run("gen-data --spec " + path("cfg.json") + " --out " + path("c.jsonl")).code, 0);
  for (const char* out : {"r1", "r2"})
    ASSERT_EQ(run("pretrain --config " + path("cfg.json") + " --corpus " + path("c.jsonl") + " --out " + path(out)).code,
              0);
  EXPECT_EQ(read("r1/config.json"), read("r2/config.json"));
  EXPECT_EQ(read("r1/checkpoint.ckpt"), read("r2/checkpoint.ckpt"));
}

TEST_F(Cli, ProbeRejectsBadCheckpoints) {
  write("junk.ckpt", "not a checkpoint");
  EXPECT_EQ(run("probe --checkpoint " + path("junk.ckpt")).code, 3);
  EXPECT_EQ(run("probe --checkpoint " + path("missing.ckpt")).code, 3);
  // A checkpoint whose tensors disagree with the recorded model.
  TrainState<double> st{init_params(ModelConfig{}, 1), {}, 0};
  RunConfig small = run_config_from_json(json::parse(read("cfg.json")));
  save_checkpoint(path("mismatch.ckpt"), st, json{{"config", json(small)}});
  EXPECT_EQ(run("probe --checkpoint " + path("mismatch.ckpt")).code, 3);
}

TEST_F(Cli, NonFiniteLossExitsWithNumericCodeAndDiagnosticCheckpoint) {
  write("nan.json", R"({"corpus":{"num_sequences":60,"seq_len":16,"min_length":10},
      "model":{"encoder":{"hidden":16,"output_dim":16},"visual":{"hidden":16,"ff_width":32,"heads":2},
               "text":{"hidden":16,"ff_width":32,"heads":2},
               "cross":{"hidden":16,"ff_width":32,"heads":2,"head_hidden":16}},
      "train":{"steps":30,"batch_size":4,"learning_rate":1e300}})");
  const auto r = run("pretrain --config " + path("nan.json") + " --out " + path("run"));
  EXPECT_EQ(r.code, 4);
  EXPECT_TRUE(fs::exists(path("run/diagnostic.ckpt")));
}

TEST_F(Cli, RunDirEnvironmentVariableRootsRelativeOutputs) {
  const auto r = run("gen-data --spec " + path("cfg.json") + " --out rel.jsonl", "CBT_RUN_DIR=" + dir_.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_TRUE(fs::exists(path("rel.jsonl")));
}

TEST_F(Cli, AblateEmitsOneRowPerCellAndMarksInvalidCells) {
  ASSERT_EQ(run("gen-data --spec " + path("cfg.json") + " --out " + path("c.jsonl")).code, 0);
  const auto r = run("ablate --grid \"layers=1,2;heads=2,3\" --config " + path("cfg.json") + " --corpus " +
                     path("c.jsonl") + " --out " + path("ab"));
  ASSERT_EQ(r.code, 0);
  std::istringstream lines(r.out);
  std::vector<std::string> rows;
  for (std::string l; std::getline(lines, l);) rows.push_back(l);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "layers,heads,task,accuracy");
  EXPECT_EQ(rows[2], "1,3,seq-class,error");
  EXPECT_NE(rows[1].find("1,2,seq-class,"), std::string::npos);
  EXPECT_EQ(rows[1].find("error"), std::string::npos);
  EXPECT_EQ(read("ab/ablation.csv"), r.out);
  EXPECT_EQ(run("ablate --grid \"depth=1\" --config " + path("cfg.json")).code, 2);
}
