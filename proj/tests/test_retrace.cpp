#include <gtest/gtest.h>

#include "distrl/core.hpp"
#include "distrl/retrace.hpp"
#include "distrl/rng.hpp"
#include "test_oracles.hpp"

using namespace distrl;

using oracle::random_episode;

TEST(TraceCoefficient, Examples) {
  EXPECT_DOUBLE_EQ(trace_coefficient(2.0, 0.9), 0.9);
  EXPECT_DOUBLE_EQ(trace_coefficient(0.5, 0.9), 0.45);
  for (double rho : {0.0, 0.3, 1.0, 7.0}) EXPECT_EQ(trace_coefficient(rho, 0.0), 0.0);
  EXPECT_THROW(trace_coefficient(1.0, 1.5), std::invalid_argument);
  EXPECT_THROW(trace_coefficient(1.0, -0.1), std::invalid_argument);
}

TEST(TraceCoefficient, Bounds) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double lambda = rng.uniform(), rho = 5 * rng.uniform();
    const double c = trace_coefficient(rho, lambda);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, lambda);
  }
}

TEST(RetraceDeltas, MatchesBruteForceDoubleSum) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const auto e = random_episode(rng, 1 + rng.below(16));
    const double gamma = rng.uniform(), lambda = rng.uniform();
    const double v_after = trial % 2 ? 0.0 : rng.normal();
    const auto r = retrace_deltas(e.r, e.v, e.pi, e.mu, gamma, lambda, v_after);
    const auto ref = oracle::retrace_double_sum(e, gamma, lambda, v_after);
    for (std::size_t t = 0; t < ref.size(); ++t) EXPECT_NEAR(r.delta[t], ref[t], 1e-10);
  }
}

TEST(RetraceDeltas, OnPolicyLambdaOneTelescopes) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto e = random_episode(rng, 1 + rng.below(16));
    e.mu = e.pi;
    const double gamma = 0.5 + 0.5 * rng.uniform();
    const auto r = retrace_deltas(e.r, e.v, e.pi, e.mu, gamma, 1.0);
    const auto G = oracle::discounted_returns(e.r, gamma);
    for (std::size_t t = 0; t < G.size(); ++t) {
      EXPECT_NEAR(r.delta[t], G[t] - e.v[t], 1e-10);
      EXPECT_NEAR(corrected_values(r)[t], G[t], 1e-10);
    }
  }
}

TEST(RetraceDeltas, LambdaZeroIsOneStepTd) {
  Rng rng(4);
  const auto e = random_episode(rng, 10);
  const auto r = retrace_deltas(e.r, e.v, e.pi, e.mu, 0.9, 0.0);
  for (std::size_t t = 0; t < 10; ++t) {
    const double vn = t + 1 < 10 ? e.v[t + 1] : 0.0;
    EXPECT_NEAR(r.delta[t], e.r[t] + 0.9 * vn - e.v[t], 1e-15);
  }
}

TEST(CorrectedValues, ZeroDeltaIsRawValue) {
  // values chosen as their own one-step targets make every TD error vanish
  const std::vector<double> r{0.1, 0.2, 1.0};
  const double g = 0.9;
  const std::vector<double> v{0.1 + g * (0.2 + g * 1.0), 0.2 + g * 1.0, 1.0};
  const std::vector<double> p{0.3, 0.6, 0.2}, mu{0.5, 0.5, 0.5};
  const auto res = retrace_deltas(r, v, p, mu, g, 0.9);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_NEAR(res.delta[t], 0.0, 1e-15);
    EXPECT_NEAR(corrected_values(res)[t], v[t], 1e-15);
  }
  EXPECT_EQ(corrected_value_at(res, 3), 0.0);
}

TEST(RetraceDeltas, LengthMismatchThrows) {
  const std::vector<double> a{1, 2}, b{1};
  EXPECT_THROW(retrace_deltas(a, b, a, a, 0.9, 0.9), std::invalid_argument);
  const std::vector<double> zero{0.0, 0.5};
  EXPECT_THROW(retrace_deltas(a, a, a, zero, 0.9, 0.9), std::invalid_argument);
}
