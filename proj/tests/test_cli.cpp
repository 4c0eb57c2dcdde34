#include <gtest/gtest.h>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

#include "xpool.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct CliResult {
  int code;
  std::string err;
};

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("xpool_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    ASSERT_EQ(run("synth --out " + (root_ / "data").string() + " --seed 3").code, 0);
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static CliResult run(const std::string& args) {
    const fs::path err = root_ / "stderr.txt";
    const std::string cmd = std::string(XPOOL_CLI_PATH) + " " + args + " > " + (root_ / "stdout.txt").string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    return {WEXITSTATUS(status), slurp(err)};
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
  }

  static std::string data_args() {
    const fs::path d = root_ / "data";
    return " --texts " + (d / "texts.xpe").string() + " --videos " + (d / "videos.xpe").string() + " --manifest " +
           (d / "manifest.txt").string();
  }

  static json first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    return json::parse(line);
  }

  static fs::path out(const std::string& name) { return root_ / name; }

  static inline fs::path root_;
};

}  // namespace

TEST_F(CliTest, ValidateEmbeddingsAcceptsFixture) {
  EXPECT_EQ(run("validate-embeddings --file " + (root_ / "data/texts.xpe").string() + " --file " + (root_ / "data/videos.xpe").string() +
                " --expect-dim 32")
                .code,
            0);
  EXPECT_EQ(run("validate-embeddings --file " + (root_ / "data/texts.xpe").string() + " --expect-dim 512").code, 2);
}

TEST_F(CliTest, ZeroEpochsWritesIdentityCheckpointAndZeroShotReport) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 0 --out " + out("zero").string()).code, 0);
  const auto ck = xpool::load_checkpoint(out("zero/checkpoint.xpc"));
  EXPECT_EQ(xpool::encode_checkpoint(ck.head, ck.scale),
            xpool::encode_checkpoint(xpool::init_identity<float>(32, 32, 0.3), xpool::LogitScale<float>{}));
  const auto report = first_line(out("zero/report.jsonl"));
  EXPECT_EQ(report["epochs"], 0);
  EXPECT_TRUE(report.contains("r1"));
}

TEST_F(CliTest, TrainOnPlantedFixtureReachesHighRecall) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 1 --out " + out("trained").string()).code, 0);
  EXPECT_GE(first_line(out("trained/report.jsonl"))["r1"].get<double>(), 0.95);
}

TEST_F(CliTest, MissingManifestIsDataExitNamingPath) {
  const auto r = run("eval --texts " + (root_ / "data/texts.xpe").string() + " --videos " + (root_ / "data/videos.xpe").string() +
                     " --manifest /no/such/manifest.txt --out " + out("missing").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("/no/such/manifest.txt"), std::string::npos);
  EXPECT_FALSE(fs::exists(out("missing")));
}

TEST_F(CliTest, CorruptEmbeddingFileIsDataExit) {
  const fs::path bad = root_ / "bad.xpe";
  std::ofstream(bad, std::ios::binary) << "XPE1junk";
  EXPECT_EQ(run("validate-embeddings --file " + bad.string()).code, 2);
}

TEST_F(CliTest, UsageAndParameterErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("eval" + data_args() + " --method topk:99 --out " + out("bigk").string()).code, 1);
  EXPECT_EQ(run("eval" + data_args() + " --method xpool --out " + out("nock").string()).code, 1);
  EXPECT_EQ(run("train" + data_args() + " --batch-size 1 --out " + out("b1").string()).code, 1);
}

TEST_F(CliTest, MeanEqualsTopKAtAllFrames) {
  ASSERT_EQ(run("eval" + data_args() + " --method mean --out " + out("mean").string()).code, 0);
  ASSERT_EQ(run("eval" + data_args() + " --method topk:10 --out " + out("topall").string()).code, 0);
  const auto a = first_line(out("mean/eval.jsonl"));
  const auto b = first_line(out("topall/eval.jsonl"));
  for (const char* key : {"r1", "r5", "r10", "median_rank", "mean_rank"}) EXPECT_NEAR(a[key].get<double>(), b[key].get<double>(), 1e-6) << key;
}

TEST_F(CliTest, TwoStageFullCandidatesMatchesExhaustive) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 0 --out " + out("ck").string()).code, 0);
  const std::string ck = " --checkpoint " + out("ck/checkpoint.xpc").string();
  ASSERT_EQ(run("eval" + data_args() + ck + " --method xpool --out " + out("exh").string()).code, 0);
  ASSERT_EQ(run("eval" + data_args() + ck + " --method xpool --two-stage 64 --out " + out("two").string()).code, 0);
  EXPECT_EQ(slurp(out("exh/eval_queries.jsonl")), slurp(out("two/eval_queries.jsonl")));
}

TEST_F(CliTest, ThreadCountDoesNotChangeOutputs) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 0 --out " + out("ckt").string()).code, 0);
  const std::string ck = " --checkpoint " + out("ckt/checkpoint.xpc").string();
  ASSERT_EQ(run("eval" + data_args() + ck + " --method xpool --threads 1 --out " + out("t1").string()).code, 0);
  ASSERT_EQ(run("eval" + data_args() + ck + " --method xpool --threads 4 --out " + out("t4").string()).code, 0);
  for (const char* f : {"eval.jsonl", "eval_queries.jsonl", "summary.txt"}) EXPECT_EQ(slurp(out("t1") / f), slurp(out("t4") / f)) << f;
}

TEST_F(CliTest, RepeatedTrainingIsByteIdentical) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 1 --batch-size 16 --lr 1e-3 --seed 9 --out " + out("r1").string()).code, 0);
  ASSERT_EQ(run("train" + data_args() + " --epochs 1 --batch-size 16 --lr 1e-3 --seed 9 --threads 3 --out " + out("r2").string()).code, 0);
  for (const char* f : {"checkpoint.xpc", "checkpoint_last.xpc", "train_log.jsonl", "report.jsonl"})
    EXPECT_EQ(slurp(out("r1") / f), slurp(out("r2") / f)) << f;
}

TEST_F(CliTest, AugmentSweepBaselineRowsShareCorpus) {
  ASSERT_EQ(run("train" + data_args() + " --epochs 0 --out " + out("cka").string()).code, 0);
  ASSERT_EQ(run("augment-sweep" + data_args() + " --checkpoint " + out("cka/checkpoint.xpc").string() + " --max-transitions 2 --out " +
                out("aug").string())
                .code,
            0);
  std::ifstream in(out("aug/augment_sweep.jsonl"));
  std::vector<json> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(json::parse(line));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0]["transitions"], 0);
  EXPECT_EQ(rows[1]["transitions"], 0);
  EXPECT_EQ(rows[0]["method"], "mean");
  EXPECT_EQ(rows[1]["method"], "xpool");
  EXPECT_EQ(rows[0]["queries"], rows[1]["queries"]);
  EXPECT_EQ(rows[0]["index_size"], rows[1]["index_size"]);
  // At zero transitions the mean row equals a plain eval on the same corpus.
  ASSERT_EQ(run("eval" + data_args() + " --method mean --out " + out("aug_mean").string()).code, 0);
  EXPECT_EQ(rows[0]["r1"], first_line(out("aug_mean/eval.jsonl"))["r1"]);
}

TEST_F(CliTest, KHistModeAtPlantedCount) {
  ASSERT_EQ(run("synth --relevant-frames 3 --out " + out("k3data").string()).code, 0);
  const fs::path d = out("k3data");
  ASSERT_EQ(run("khist --texts " + (d / "texts.xpe").string() + " --videos " + (d / "videos.xpe").string() + " --manifest " +
                (d / "manifest.txt").string() + " --out " + out("khist").string())
                .code,
            0);
  std::ifstream in(out("khist/khist.jsonl"));
  std::size_t best_k = 0, best = 0;
  for (std::string line; std::getline(in, line);) {
    const auto j = json::parse(line);
    if (j["count"].get<std::size_t>() > best) {
      best = j["count"];
      best_k = j["k"];
    }
  }
  EXPECT_EQ(best_k, 3u);
}

TEST_F(CliTest, GradCheckDefaultPasses) { EXPECT_EQ(run("gradcheck").code, 0); }

TEST_F(CliTest, ConfigFileIsOverriddenByFlags) {
  const fs::path cfg = root_ / "run.cfg";
  std::ofstream(cfg) << "method = \"topk:3\"\ndirection = \"v2t\"\n";
  ASSERT_EQ(run("eval" + data_args() + " --config " + cfg.string() + " --out " + out("cfg1").string()).code, 0);
  EXPECT_EQ(first_line(out("cfg1/eval.jsonl"))["method"], "topk:3");
  EXPECT_EQ(first_line(out("cfg1/eval.jsonl"))["direction"], "v2t");
  ASSERT_EQ(run("eval" + data_args() + " --config " + cfg.string() + " --method mean --out " + out("cfg2").string()).code, 0);
  EXPECT_EQ(first_line(out("cfg2/eval.jsonl"))["method"], "mean");
  EXPECT_EQ(first_line(out("cfg2/eval.jsonl"))["direction"], "v2t");
}

TEST_F(CliTest, FramesSweepAndExportAttention) {
  ASSERT_EQ(run("frames-sweep" + data_args() + " --out " + out("fs").string()).code, 0);
  std::ifstream in(out("fs/frames_sweep.jsonl"));
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 4u);

  ASSERT_EQ(run("train" + data_args() + " --epochs 0 --out " + out("cke").string()).code, 0);
  ASSERT_EQ(run("export-attn" + data_args() + " --checkpoint " + out("cke/checkpoint.xpc").string() + " --out " + out("attn").string()).code, 0);
  const auto rec = first_line(out("attn/attention.jsonl"));
  EXPECT_TRUE(rec.contains("weight"));
  EXPECT_EQ(rec["frame"], 0);
}

TEST_F(CliTest, RankListsTopCandidates) {
  ASSERT_EQ(run("rank" + data_args() + " --query t0005 --top 3 --out " + out("rank").string()).code, 0);
  std::ifstream in(out("rank/rank.jsonl"));
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 3u);
  EXPECT_EQ(run("rank" + data_args() + " --query nope").code, 2);
}
