#pragma once

// Shared generators for the unit tests.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"
#include "distrl/rng.hpp"
#include "distrl/screenworld.hpp"

namespace distrl::testutil {

inline StateFeatures random_features(Rng& rng, std::size_t d) {
  StateFeatures f;
  f.values.resize(d);
  for (auto& v : f.values) v = rng.uniform() * 2.0 - 1.0;
  if (d > 0) f.values.back() = rng.uniform();
  return f;
}

/// Well-formed trajectory with random contents (not tied to any environment).
inline Trajectory random_trajectory(Rng& rng, std::size_t d, int m, std::size_t len, std::uint64_t id = 1) {
  Trajectory t;
  t.id = id;
  t.task_id = static_cast<int>(rng.below(8));
  t.terminal_reward = rng.uniform() < 0.5 ? 1.0 : 0.0;
  t.policy_version = static_cast<std::int64_t>(rng.below(100));
  t.worker_id = "w" + std::to_string(rng.below(10));
  t.wall_ms = static_cast<std::int64_t>(rng.below(100000));
  StateFeatures s = random_features(rng, d);
  for (std::size_t k = 0; k < len; ++k) {
    Transition tr;
    tr.t = static_cast<int>(k);
    tr.state = s;
    tr.action = static_cast<ActionId>(rng.below(static_cast<std::uint64_t>(m)));
    tr.reward = -0.5 * static_cast<double>(rng.below(3)) * 0.1;
    tr.mu_prob = 0.05 + 0.95 * rng.uniform();
    tr.next_state = random_features(rng, d);
    tr.done = k + 1 == len;
    tr.invalid = rng.uniform() < 0.2;
    tr.repeat_count = static_cast<int>(rng.below(3));
    if (tr.done) tr.reward += t.terminal_reward;
    t.transitions.push_back(tr);
    s = tr.next_state;
  }
  return t;
}

inline PolicyParams random_policy(Rng& rng, int d, int m, double scale = 1.0) {
  auto p = PolicyParams::zeros(d, m);
  for (auto& v : p.theta) v = scale * rng.normal();
  return p;
}

inline ValueParams random_value(Rng& rng, int d, int h) {
  auto p = make_value_params(d, h, &rng);
  for (auto& v : p.theta) v += 0.3 * rng.normal();
  return p;
}

inline TrajValueParams random_vtraj(Rng& rng, int d, int m, int h) {
  auto p = make_vtraj_params(d, m, h, &rng);
  for (auto& v : p.theta) v += 0.3 * rng.normal();
  return p;
}

/// Hand-built 2-screen world: home(0) --TAP_0--> 1, BACK/HOME everywhere.
inline std::shared_ptr<World> tiny_world(int horizon = 15) {
  auto w = std::make_shared<World>();
  w->graph.n_screens = 2;
  w->graph.m = 4;
  w->graph.home_screen = 0;
  w->graph.edges.assign(8, -1);
  w->graph.action_names = default_action_names(4);
  w->graph.at(0, 0) = 1;
  w->graph.at(0, 2) = 0;
  w->graph.at(1, 2) = 0;
  w->graph.at(0, 3) = 0;
  w->graph.at(1, 3) = 0;
  w->tasks.push_back(Task{0, 0, 1, horizon});
  return w;
}

}  // namespace distrl::testutil
