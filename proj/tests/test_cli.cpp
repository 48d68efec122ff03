#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "distrl/core.hpp"

namespace fs = std::filesystem;
using distrl::json;

namespace {

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("distrl_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  int run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" DISTRL_CLI "' " + args + " > out.txt 2> err.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string read(const std::string& name) const {
    std::ifstream in(dir_ / name);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  std::vector<json> jsonl(const std::string& name) const {
    std::vector<json> out;
    std::istringstream in(read(name));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) out.push_back(json::parse(line));
    return out;
  }

  fs::path dir_;
};

const std::string kMinimal = std::string(DISTRL_SOURCE_DIR) + "/configs/minimal.toml";

}  // namespace

TEST_F(Cli, MissingConfigExitsTwo) {
  EXPECT_EQ(run("train --config nope.toml --out o"), 2);
  EXPECT_NE(read("err.txt").find("config not found"), std::string::npos);
}

TEST_F(Cli, UnknownOptionExitsTwo) { EXPECT_EQ(run("train --bogus"), 2); }

TEST_F(Cli, BadConfigKeyExitsTwo) {
  write("bad.toml", "[learner]\nbatch_szie = 3\n");
  EXPECT_EQ(run("train --config bad.toml --out o --loopback-workers 1"), 2);
  EXPECT_NE(read("err.txt").find("batch_szie"), std::string::npos);
}

TEST_F(Cli, MinimalLoopbackTrainWritesArtifacts) {
  ASSERT_EQ(run("train --config '" + kMinimal + "' --out run --loopback-workers 1"), 0) << read("err.txt");
  for (const char* f : {"manifest.json", "metrics.jsonl", "params.json", "buffer.jsonl", "screenworld.json",
                        "summary.json"})
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  const auto lines = jsonl("run/metrics.jsonl");
  ASSERT_GE(lines.size(), 2u);
  EXPECT_TRUE(lines.front().contains("header"));
  const auto summary = json::parse(read("run/summary.json"));
  EXPECT_EQ(summary.at("updates"), 1);
  const auto manifest = json::parse(read("run/manifest.json"));
  EXPECT_EQ(manifest.at("config").at("learner").at("total_steps"), 1);
  EXPECT_TRUE(manifest.contains("started_at"));
}

TEST_F(Cli, GenEnvIsByteIdenticalPerSeed) {
  ASSERT_EQ(run("gen-env --seed 11 --out a.json --warmup-out wa.jsonl --warmup-count 16"), 0);
  ASSERT_EQ(run("gen-env --seed 11 --out b.json --warmup-out wb.jsonl --warmup-count 16"), 0);
  ASSERT_EQ(run("gen-env --seed 12 --out c.json"), 0);
  EXPECT_EQ(read("a.json"), read("b.json"));
  EXPECT_EQ(read("wa.jsonl"), read("wb.jsonl"));
  EXPECT_NE(read("a.json"), read("c.json"));
  EXPECT_EQ(jsonl("wa.jsonl").size(), 16u);
}

TEST_F(Cli, WarmupFillsBufferBeforeFirstStep) {
  ASSERT_EQ(run("gen-env --seed 5 --out world.json --warmup-out warm.jsonl --warmup-count 128"), 0);
  write("c.toml", "[env]\nfile = \"world.json\"\n[learner]\ntotal_steps = 2\nbatch_size = 8\n");
  ASSERT_EQ(run("train --config c.toml --out run --loopback-workers 1 --warmup warm.jsonl"), 0) << read("err.txt");
  const auto lines = jsonl("run/metrics.jsonl");
  ASSERT_GE(lines.size(), 2u);
  EXPECT_EQ(lines[1].at("buffer_count"), 128);
}

TEST_F(Cli, EvalTableAndShapeMismatch) {
  ASSERT_EQ(run("train --config '" + kMinimal + "' --out run --loopback-workers 1"), 0);
  ASSERT_EQ(run("eval --policy run/params.json --env run/screenworld.json --episodes 2 --greedy --csv e.csv"), 0);
  const std::string csv = read("e.csv");
  EXPECT_EQ(csv.rfind("task_id,episodes,successes,success_rate\n", 0), 0u);
  EXPECT_NE(csv.find("mean,"), std::string::npos);
  ASSERT_EQ(run("eval --policy run/params.json --env run/screenworld.json --episodes 0 --csv z.csv"), 0);
  EXPECT_EQ(read("z.csv"), "task_id,episodes,successes,success_rate\n");
  ASSERT_EQ(run("gen-env --seed 1 --out big.json"), 0);
  EXPECT_EQ(run("eval --policy run/params.json --env big.json --episodes 1"), 2);
  EXPECT_NE(read("err.txt").find("does not match"), std::string::npos);
}

TEST_F(Cli, InspectBufferReportsConsistentPriorities) {
  ASSERT_EQ(run("train --config '" + kMinimal + "' --out run --loopback-workers 1"), 0);
  ASSERT_EQ(run("inspect-buffer --dump run/buffer.jsonl"), 0) << read("err.txt");
  const std::string out = read("out.txt");
  EXPECT_NE(out.find("priority_mismatch  0"), std::string::npos) << out;
  EXPECT_NE(out.find("success_fraction"), std::string::npos);
  EXPECT_EQ(run("inspect-buffer --dump missing.jsonl"), 2);
}

TEST_F(Cli, BenchWritesCsv) {
  ASSERT_EQ(run("bench --workers 1,2,4 --minutes 5 --csv b.csv"), 0) << read("err.txt");
  std::istringstream in(read("b.csv"));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "workers,traj_per_min,ideal_upper_bound");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3);
  EXPECT_EQ(run("bench --workers 0 --minutes 1"), 2);
}
