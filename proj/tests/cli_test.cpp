#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "scm/latent.hpp"
#include "scm/model.hpp"
#include "scm/tasks.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t line_count(const fs::path& p) {
  const auto text = slurp(p);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("scm_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    std::ofstream(root_ / "small.cfg") << "seed = 5\n"
                                          "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\n"
                                          "[data]\npretrain_count = 40\nheldout_count = 8\n"
                                          "[pretrain]\nepochs = 2\n"
                                          "[rl]\ngroup_size = 2\nprompts_per_batch = 2\nsteps = 3\n"
                                          "[decode]\nmax_new_tokens = 24\n";
    ASSERT_EQ(run("pretrain --config small.cfg --out base").code, 0);
    ASSERT_EQ(run("make-data --tier 1-digit --count 6 --eval-count 5 --seed 3 --out data").code, 0);
  }

  static void TearDownTestSuite() { fs::remove_all(root_); }

  static RunResult run(const std::string& args) {
    const auto log = root_ / "last_output.txt";
    const std::string cmd =
        "cd '" + root_.string() + "' && '" + std::string(SCM_CLI_PATH) + "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.output = slurp(log);
    return r;
  }

  static fs::path root_;
};

fs::path CliTest::root_;

}  // namespace

TEST_F(CliTest, MakeDataWritesCountsAndIsSeedDeterministic) {
  ASSERT_EQ(run("make-data --tier 2-digit --count 7 --eval-count 4 --seed 9 --out d1").code, 0);
  ASSERT_EQ(run("make-data --tier 2-digit --count 7 --eval-count 4 --seed 9 --out d2").code, 0);
  EXPECT_EQ(line_count(root_ / "d1/train.tsv"), 7u);
  EXPECT_EQ(line_count(root_ / "d1/eval.tsv"), 4u);
  EXPECT_EQ(slurp(root_ / "d1/train.tsv"), slurp(root_ / "d2/train.tsv"));
  EXPECT_EQ(slurp(root_ / "d1/eval.tsv"), slurp(root_ / "d2/eval.tsv"));
  EXPECT_EQ(scm::read_dataset((root_ / "d1/train.tsv").string()).size(), 7u);
}

TEST_F(CliTest, PretrainProducesLoadableCheckpointAndMetrics) {
  const auto params = scm::load_checkpoint((root_ / "base/model.ckpt").string());
  EXPECT_EQ(params.config.d_model, 16);
  EXPECT_EQ(line_count(root_ / "base/pretrain_metrics.jsonl"), 3u);
  std::ifstream in(root_ / "base/pretrain_metrics.jsonl");
  std::string line, last;
  while (std::getline(in, line)) last = line;
  const auto summary = json::parse(last);
  EXPECT_TRUE(summary.contains("heldout_format"));
  EXPECT_TRUE(summary.contains("reached_threshold"));
}

TEST_F(CliTest, TrainRlIsByteReproducible) {
  const std::string args = "train-rl --config small.cfg --checkpoint base/model.ckpt --data data/train.tsv ";
  ASSERT_EQ(run(args + "--out r1 --dump-rollouts").code, 0);
  ASSERT_EQ(run(args + "--out r2 --dump-rollouts").code, 0);
  EXPECT_EQ(line_count(root_ / "r1/metrics.jsonl"), 3u);
  EXPECT_EQ(slurp(root_ / "r1/metrics.jsonl"), slurp(root_ / "r2/metrics.jsonl"));
  EXPECT_EQ(slurp(root_ / "r1/model.ckpt"), slurp(root_ / "r2/model.ckpt"));
  EXPECT_EQ(slurp(root_ / "r1/rollouts.jsonl"), slurp(root_ / "r2/rollouts.jsonl"));
  // 3 steps x 2 prompts x 2 rollouts
  EXPECT_EQ(line_count(root_ / "r1/rollouts.jsonl"), 12u);
  const auto first = json::parse(slurp(root_ / "r1/metrics.jsonl").substr(0, slurp(root_ / "r1/metrics.jsonl").find('\n')));
  for (const char* key : {"step", "mean_reward", "mean_acc", "mean_fmt", "loss", "clip_fraction", "entropy"}) {
    EXPECT_TRUE(first.contains(key)) << key;
  }
}

TEST_F(CliTest, GrpoAndNoMixNamesAreTheSameMode) {
  const std::string args = "train-rl --config small.cfg --checkpoint base/model.ckpt --data data/train.tsv --steps 1 ";
  ASSERT_EQ(run(args + "--mode grpo --out g").code, 0);
  ASSERT_EQ(run(args + "--mode no-mix --out n").code, 0);
  EXPECT_EQ(slurp(root_ / "g/model.ckpt"), slurp(root_ / "n/model.ckpt"));
}

TEST_F(CliTest, EvalReportsAccuracyInRange) {
  const auto r = run("eval --checkpoint base/model.ckpt --data data/eval.tsv --out eval.json");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto report = json::parse(slurp(root_ / "eval.json"));
  EXPECT_EQ(report["count"], 5);
  EXPECT_GE(report["pass_at_1"].get<double>(), 0.0);
  EXPECT_LE(report["pass_at_1"].get<double>(), 1.0);
  EXPECT_EQ(report["mode"], "scm");
}

TEST_F(CliTest, EmptyDataIsAnIoError) {
  std::ofstream(root_ / "empty.tsv").close();
  const auto r = run("eval --checkpoint base/model.ckpt --data empty.tsv");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("error: io:"), std::string::npos) << r.output;
}

TEST_F(CliTest, MissingCheckpointIsAnIoError) {
  const auto r = run("generate --checkpoint nowhere.ckpt --prompt 2+3=");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("error: io:"), std::string::npos) << r.output;
}

TEST_F(CliTest, BadPromptIsATokenizeError) {
  const auto r = run("generate --checkpoint base/model.ckpt --prompt 2?3=");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("error:"), std::string::npos) << r.output;
}

TEST_F(CliTest, PcaShiftOfACheckpointWithItselfIsZero) {
  const auto r = run("pca-shift --checkpoint-a base/model.ckpt --checkpoint-b base/model.ckpt --data data/eval.tsv "
                     "--out pca");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto report = scm::report_from_jsonl(slurp(root_ / "pca/pca_report.jsonl"));
  EXPECT_EQ(report.aggregate, 0.0);
  EXPECT_EQ(report.layers.size(), 2u);
  EXPECT_GT(line_count(root_ / "pca/pca_scatter.jsonl"), 0u);
}

TEST_F(CliTest, GenerateIsDeterministic) {
  const auto a = run("generate --checkpoint base/model.ckpt --prompt 4+5= --seed 2");
  const auto b = run("generate --checkpoint base/model.ckpt --prompt 4+5= --seed 2");
  ASSERT_EQ(a.code, 0) << a.output;
  EXPECT_EQ(a.output, b.output);
  EXPECT_NE(a.output.find("\"gold\":9"), std::string::npos) << a.output;
}

TEST_F(CliTest, ConfigErrorNamesKeyAndLine) {
  std::ofstream(root_ / "bad.cfg") << "seed = 1\n[rl]\nlearning_rate = 0.1\n";
  const auto r = run("train-rl --config bad.cfg --checkpoint base/model.ckpt --out bad");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.output.find("error: config:"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("bad.cfg:3"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("rl.learning_rate"), std::string::npos) << r.output;
}

TEST_F(CliTest, UnknownFlagIsAUsageError) {
  const auto r = run("eval --checkpoint base/model.ckpt --data data/eval.tsv --frobnicate");
  EXPECT_EQ(r.code, 64);
  EXPECT_NE(r.output.find("error: usage:"), std::string::npos) << r.output;
}

TEST_F(CliTest, DefaultConfigParses) {
  const auto r = run("default-config");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("[rl]"), std::string::npos);
}
