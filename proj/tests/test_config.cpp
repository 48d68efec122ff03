#include <gtest/gtest.h>

#include <filesystem>

#include "distrl/config.hpp"

using namespace distrl;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyDocumentKeepsDefaults) {
  const auto c = parse_config("");
  EXPECT_EQ(c.env.screens, 8);
  EXPECT_EQ(c.env.tasks, 8);
  EXPECT_EQ(c.env.horizon, 15);
  EXPECT_DOUBLE_EQ(c.learner.gamma, 0.95);
  EXPECT_EQ(c.learner.batch_size, 32);
  EXPECT_EQ(c.transport.batch_flush, 1);
}

TEST(Config, ReadsEverySection) {
  const auto c = parse_config(R"(
[env]
screens = 5
actions = 4
tasks = 3
horizon = 9
seed = 11
c_inv = 0.25
latency_ms_min = 2
latency_ms_max = 7

[algo]
gamma = 0.9
lambda = 1.0
mc_propagation = false
advantage = "raw"
retrace = false
hidden = 16

[replay]
capacity = 100
alpha = 0.0
w1 = 2
w2 = 0.25
w3 = 0.5
filter_q = 1.0

[learner]
batch_size = 4
total_steps = 7
lr_policy = 0.003
seed = 99
eval_every = 5

[transport]
addr = "127.0.0.1:9000"
batch_flush = 3
workers = 2
)");
  EXPECT_EQ(c.env.screens, 5);
  EXPECT_EQ(c.env.runtime.seed, 11u);
  EXPECT_DOUBLE_EQ(c.env.runtime.c_inv, 0.25);
  EXPECT_EQ(c.env.runtime.latency_ms_max, 7);
  EXPECT_DOUBLE_EQ(c.learner.gamma, 0.9);
  EXPECT_DOUBLE_EQ(c.learner.lambda_retrace, 1.0);
  EXPECT_FALSE(c.learner.mc_propagation);
  EXPECT_EQ(c.learner.advantage, AdvantageMode::raw);
  EXPECT_FALSE(c.learner.use_retrace);
  EXPECT_EQ(c.learner.hidden, 16);
  EXPECT_EQ(c.learner.buffer_capacity, 100u);
  EXPECT_DOUBLE_EQ(c.learner.weights.w1, 2.0);
  EXPECT_DOUBLE_EQ(c.learner.filter_q, 1.0);
  EXPECT_EQ(c.learner.batch_size, 4);
  EXPECT_EQ(c.learner.total_steps, 7);
  EXPECT_DOUBLE_EQ(c.learner.lr_policy, 0.003);
  EXPECT_EQ(c.learner.seed, 99u);
  EXPECT_EQ(c.eval_every, 5);
  EXPECT_EQ(c.transport.addr, "127.0.0.1:9000");
  EXPECT_EQ(c.transport.batch_flush, 3);
  const auto sim = c.sim_config();
  EXPECT_EQ(sim.workers, 2);
  EXPECT_EQ(sim.batch_flush, 3);
  EXPECT_EQ(sim.env.latency_ms_min, 2);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
  const auto e = error_of("[algo]\ngamma = 0.9\ngamam = 0.8\n");
  EXPECT_NE(e.find("algo.gamam"), std::string::npos) << e;
  EXPECT_NE(e.find("line 3"), std::string::npos) << e;
}

TEST(Config, UnknownSectionRejected) {
  EXPECT_NE(error_of("[optimizer]\nlr = 1\n").find("unknown section"), std::string::npos);
}

TEST(Config, TypeMismatchRejected) {
  EXPECT_NE(error_of("[learner]\nbatch_size = \"32\"\n").find("expected an integer"), std::string::npos);
  EXPECT_NE(error_of("[algo]\nmc_propagation = 1\n").find("expected a boolean"), std::string::npos);
  EXPECT_NE(error_of("[learner]\nseed = -1\n").find("must be >= 0"), std::string::npos);
}

TEST(Config, IntegerAcceptedForFloat) { EXPECT_DOUBLE_EQ(parse_config("[algo]\ngamma = 1\n").learner.gamma, 1.0); }

TEST(Config, RangeViolationsRejected) {
  EXPECT_FALSE(error_of("[algo]\ngamma = 1.5\n").empty());
  EXPECT_FALSE(error_of("[env]\nactions = 3\n").empty());
  EXPECT_FALSE(error_of("[algo]\nadvantage = \"both\"\n").empty());
  EXPECT_FALSE(error_of("[env]\nlatency_ms_min = 5\nlatency_ms_max = 2\n").empty());
}

TEST(Config, SyntaxErrorReportsLine) {
  const auto e = error_of("[env]\nscreens = = 3\n");
  EXPECT_NE(e.find("line 2"), std::string::npos) << e;
}

TEST(Config, MissingFileIsConfigNotFound) {
  try {
    load_config("/nonexistent/distrl.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("config not found"), std::string::npos);
  }
}

TEST(Config, RelativeEnvFileResolvesAgainstConfigDir) {
  const auto c = parse_config("[env]\nfile = \"world.json\"\n", "/some/dir");
  EXPECT_EQ(c.env.file, "/some/dir/world.json");
}

TEST(Config, ShippedConfigsParse) {
  const std::filesystem::path dir = std::filesystem::path(DISTRL_SOURCE_DIR) / "configs";
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".toml") continue;
    EXPECT_NO_THROW(load_config(e.path())) << e.path();
    ++n;
  }
  EXPECT_GT(n, 0u);
}

TEST(Config, JsonSnapshotCarriesLearnerSettings) {
  const auto c = parse_config("[algo]\nbeta = 0.05\n");
  const json j = config_to_json(c);
  EXPECT_DOUBLE_EQ(j.at("learner").at("beta").get<double>(), 0.05);
  EXPECT_EQ(j.at("env").at("screens"), 8);
}
