#include <gtest/gtest.h>
#include <zlib.h>

#include <cstring>

#include "distrl/core.hpp"
#include "test_support.hpp"

using namespace distrl;

TEST(MonteCarloReturn, Examples) {
  const std::vector<double> r1{0, 0, 1};
  EXPECT_DOUBLE_EQ(monte_carlo_return(r1, 1.0, 0), 1.0);
  const std::vector<double> r2{1, 1};
  EXPECT_DOUBLE_EQ(monte_carlo_return(r2, 0.5, 0), 1.5);
  EXPECT_DOUBLE_EQ(monte_carlo_return(r1, 0.9, 1), 0.9);
}

TEST(MonteCarloReturn, IndexOutOfRangeThrows) {
  const std::vector<double> r{0, 1};
  EXPECT_THROW(monte_carlo_return(r, 0.9, 2), std::invalid_argument);
  EXPECT_THROW(monte_carlo_return(r, 0.0, 0), std::invalid_argument);
}

TEST(MonteCarloReturn, RecursionProperty) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> r(n);
    for (auto& x : r) x = rng.normal();
    const double gamma = 0.05 + 0.95 * rng.uniform();
    const auto all = monte_carlo_returns(r, gamma);
    for (std::size_t t = 0; t + 1 < n; ++t) {
      const double lhs = monte_carlo_return(r, gamma, t);
      EXPECT_NEAR(lhs, r[t] + gamma * monte_carlo_return(r, gamma, t + 1), 1e-12);
      EXPECT_NEAR(lhs, all[t], 1e-12);
    }
  }
}

TEST(ValidateTrajectory, WellFormedIsOk) {
  Rng rng(1);
  const auto t = testutil::random_trajectory(rng, 5, 4, 3);
  EXPECT_TRUE(validate_trajectory(t, 5, 4).empty());
}

TEST(ValidateTrajectory, EarlyDone) {
  Rng rng(2);
  auto t = testutil::random_trajectory(rng, 5, 4, 3);
  t.transitions[0].done = true;
  const auto v = validate_trajectory(t, 5, 4);
  ASSERT_FALSE(v.empty());
  EXPECT_NE(std::find(v.begin(), v.end(), "done before final step"), v.end());
}

TEST(ValidateTrajectory, ZeroMuProb) {
  Rng rng(3);
  auto t = testutil::random_trajectory(rng, 5, 4, 3);
  t.transitions[1].mu_prob = 0.0;
  const auto v = validate_trajectory(t, 5, 4);
  EXPECT_NE(std::find(v.begin(), v.end(), "mu_prob out of (0,1]"), v.end());
}

TEST(ValidateTrajectory, ReportsEveryViolation) {
  Rng rng(4);
  auto t = testutil::random_trajectory(rng, 5, 4, 4);
  t.transitions[3].done = false;
  t.transitions[2].action = 9;
  t.transitions[1].t = 7;
  t.terminal_reward = 0.5;
  const auto v = validate_trajectory(t, 5, 4);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(validate_trajectory(Trajectory{}, 5, 4), std::vector<std::string>{"transitions empty"});
}

TEST(Crc32, KnownValues) {
  EXPECT_EQ(crc32(std::string_view{}), 0x00000000u);
  EXPECT_EQ(crc32(std::string_view{"123456789"}), 0xCBF43926u);
  EXPECT_EQ(crc32(std::string_view{"123456789"}), crc32(std::string_view{"123456789"}));
}

TEST(Crc32, MatchesZlibReference) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::byte> buf(rng.below(300));
    for (auto& b : buf) b = static_cast<std::byte>(rng.below(256));
    const auto ref = ::crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size()));
    EXPECT_EQ(crc32(buf), static_cast<std::uint32_t>(ref));
  }
}

TEST(TrajectoryId, WorkerPrefix) {
  EXPECT_EQ(make_trajectory_id(3, 5), (std::uint64_t{3} << 40) | 5);
  EXPECT_NE(make_trajectory_id(1, 0), make_trajectory_id(2, 0));
}

namespace {

bool bit_equal(double a, double b) {
  std::uint64_t x, y;
  std::memcpy(&x, &a, 8);
  std::memcpy(&y, &b, 8);
  return x == y;
}

}  // namespace

TEST(CanonicalJson, TrajectoryRoundTripIsBitExact) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto t = testutil::random_trajectory(rng, 1 + rng.below(12), 6, 1 + rng.below(16), rng.next());
    t.priority = rng.uniform() * 3.0;
    const std::string text = json(t).dump();
    const auto back = json::parse(text).get<Trajectory>();
    ASSERT_EQ(back, t);
    for (std::size_t k = 0; k < t.size(); ++k) {
      ASSERT_TRUE(bit_equal(back.transitions[k].mu_prob, t.transitions[k].mu_prob));
      for (std::size_t i = 0; i < t.transitions[k].state.size(); ++i)
        ASSERT_TRUE(bit_equal(back.transitions[k].state.values[i], t.transitions[k].state.values[i]));
    }
    EXPECT_EQ(json(back).dump(), text);
  }
}

TEST(CanonicalJson, FieldNames) {
  Rng rng(7);
  const auto t = testutil::random_trajectory(rng, 3, 4, 2, 42);
  const json j = t;
  for (const char* k : {"id", "task_id", "transitions", "terminal_reward", "policy_version", "worker_id", "wall_ms", "priority"})
    EXPECT_TRUE(j.contains(k)) << k;
  for (const char* k : {"t", "state", "action", "reward", "mu_prob", "next_state", "done", "invalid", "repeat_count"})
    EXPECT_TRUE(j["transitions"][0].contains(k)) << k;
  EXPECT_TRUE(j["transitions"][0]["state"].contains("values"));
}

TEST(CanonicalJson, SnapshotChecksumValidatesOnDecode) {
  Rng rng(8);
  PolicySnapshot s;
  s.version = 4;
  s.shape_tag = "d=3,m=2,h=0,kind=policy";
  for (int i = 0; i < 8; ++i) s.params.push_back(rng.normal());
  s.checksum = params_checksum(s.params);
  const auto back = json::parse(json(s).dump()).get<PolicySnapshot>();
  EXPECT_EQ(back, s);

  json bad = s;
  bad["checksum"] = s.checksum ^ 1u;
  EXPECT_THROW(bad.get<PolicySnapshot>(), IntegrityError);
}

TEST(F32Packing, LittleEndianLayout) {
  const std::vector<double> v{1.0, -2.5};
  const auto bytes = pack_f32_le(v);
  ASSERT_EQ(bytes.size(), 8u);
  // 1.0f = 0x3F800000
  EXPECT_EQ(bytes[0], std::byte{0x00});
  EXPECT_EQ(bytes[3], std::byte{0x3F});
  EXPECT_EQ(unpack_f32_le(bytes), v);
  EXPECT_THROW(unpack_f32_le(std::span(bytes).first(5)), DecodeError);
}
