#pragma once

#include <chrono>
#include <memory>
#include <thread>
#include <vector>

#include "distrl/host.hpp"
#include "distrl/sim.hpp"
#include "distrl/worker.hpp"

namespace distrl {

struct BenchRow {
  int workers = 0;
  double traj_per_min = 0.0;
  double ideal_upper_bound = 0.0;  // single-worker rate times workers
};

inline std::vector<BenchRow> with_ideal(std::vector<BenchRow> rows, double single_rate) {
  for (auto& r : rows) r.ideal_upper_bound = single_rate * r.workers;
  return rows;
}

/// Collection-only throughput on the virtual clock.
inline std::vector<BenchRow> bench_virtual(const std::shared_ptr<const World>& world, SimConfig base,
                                           const std::vector<int>& counts, double minutes) {
  auto rate = [&](int n) {
    SimConfig c = base;
    c.workers = n;
    return simulate_collection(world, c, minutes).traj_per_min();
  };
  std::vector<BenchRow> rows;
  for (int n : counts) rows.push_back({n, rate(n), 0.0});
  return with_ideal(std::move(rows), rate(1));
}

/// Trajectories per minute reaching the host queue with `n` threaded workers
/// over loopback sessions, measured on the wall clock.
inline double measure_real_clock(const std::shared_ptr<const World>& world, EnvConfig env, int n, int envs_per_worker,
                                 std::chrono::milliseconds window, std::uint64_t seed) {
  env.live = true;
  const auto d = world->feature_dim();
  const int m = world->graph.m;
  TrajectoryQueue queue(1u << 20);
  HostServer server(queue_sink(queue, d, m));
  server.publish(make_snapshot(0, PolicyParams::zeros(static_cast<int>(d), m)));
  std::vector<std::unique_ptr<WorkerRuntime>> workers;
  for (int i = 0; i < n; ++i) {
    auto [host_side, worker_side] = make_loopback_pair();
    server.attach(host_side);
    WorkerConfig wc;
    wc.worker_id = "bench-" + std::to_string(i);
    wc.envs = envs_per_worker;
    wc.seed = Rng::stream(seed, static_cast<std::uint64_t>(i)).next();
    wc.env = env;
    auto once = std::make_shared<std::shared_ptr<Connection>>(worker_side);
    workers.push_back(std::make_unique<WorkerRuntime>(wc, world, [once]() -> std::shared_ptr<Connection> {
      return std::exchange(*once, nullptr);
    }));
  }
  for (auto& w : workers) w->start();
  const auto begin_count = queue.accepted();
  std::this_thread::sleep_for(window);
  const auto got = queue.accepted() - begin_count;
  server.shutdown_workers(std::chrono::milliseconds(200));
  for (auto& w : workers) w->stop();
  server.stop();
  const double minutes = std::chrono::duration<double>(window).count() / 60.0;
  return static_cast<double>(got) / minutes;
}

inline std::vector<BenchRow> bench_real_clock(const std::shared_ptr<const World>& world, const EnvConfig& env,
                                              const std::vector<int>& counts, int envs_per_worker, double minutes,
                                              std::uint64_t seed) {
  const auto window = std::chrono::milliseconds(static_cast<std::int64_t>(minutes * 60000.0));
  std::vector<BenchRow> rows;
  double single = -1.0;
  for (int n : counts) {
    const double r = measure_real_clock(world, env, n, envs_per_worker, window, seed);
    if (n == 1) single = r;
    rows.push_back({n, r, 0.0});
  }
  if (single < 0.0) single = measure_real_clock(world, env, 1, envs_per_worker, window, seed);
  return with_ideal(std::move(rows), single);
}

}  // namespace distrl
