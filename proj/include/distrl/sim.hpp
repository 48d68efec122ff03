#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <queue>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "distrl/learner.hpp"
#include "distrl/queue.hpp"
#include "distrl/screenworld.hpp"
#include "distrl/transport.hpp"
#include "distrl/worker.hpp"

namespace distrl {

/// Discrete-event runs on a virtual clock. Workers and host exchange real
/// frames (encode_frame/decode_frame) through HostCore/WorkerCore, so the
/// only thing simulated is time.
struct SimConfig {
  int workers = 4;
  int envs_per_worker = 1;
  EnvConfig env;
  std::uint64_t seed = 0;
  int step_cost_ms = 20;  // virtual cost of one train_step
  int eval_every = 0;     // learner steps between greedy evals; 0 disables
  int eval_episodes = 1;  // per task
  std::uint64_t max_trajectories = 0;  // 0: unlimited
  std::int64_t max_virtual_ms = 0;     // 0: unlimited
  bool masked_sampling = false;
  int batch_flush = 1;
  int ingest_ms = 0;  // host service time per trajectory (single server)
  std::vector<int> loop_extra_ms;       // per-loop stall added to every env step
  std::vector<EnvConfig> loop_env;      // per-loop env override

  int loops() const noexcept { return workers * envs_per_worker; }
  void validate() const {
    if (workers < 1 || envs_per_worker < 1) throw std::invalid_argument("sim: workers and envs must be >= 1");
    if (step_cost_ms < 1) throw std::invalid_argument("sim: step_cost_ms must be >= 1");
    if (batch_flush < 1) throw std::invalid_argument("sim: batch_flush must be >= 1");
    if (eval_episodes < 1) throw std::invalid_argument("sim: eval_episodes must be >= 1");
    if (!loop_extra_ms.empty() && loop_extra_ms.size() != static_cast<std::size_t>(loops()))
      throw std::invalid_argument("sim: loop_extra_ms must have one entry per loop");
    if (!loop_env.empty() && loop_env.size() != static_cast<std::size_t>(loops()))
      throw std::invalid_argument("sim: loop_env must have one entry per loop");
  }
};

struct EvalPoint {
  std::int64_t step = 0;
  std::uint64_t trajectories = 0;
  std::int64_t virtual_ms = 0;
  double success = 0.0;
};

struct SimResult {
  std::uint64_t collected = 0;  // episodes finished by the loops
  std::uint64_t ingested = 0;   // trajectories accepted by the host
  std::int64_t virtual_ms = 0;
  std::vector<std::uint64_t> per_loop;
  std::vector<EvalPoint> evals;
  std::int64_t learner_steps = 0;
  std::int64_t final_version = 0;
  std::vector<TraceEvent> trace;
};

namespace detail {

/// Frame round trip through the wire codec.
inline Message over_wire(const Message& m) {
  const Bytes b = encode_frame(m);
  auto r = decode_frame(b);
  if (r.status != DecodeStatus::decoded || !r.message) throw ProtocolError("loopback frame failed to decode: " + r.error);
  return std::move(*r.message);
}

class SimFabric {
 public:
  SimFabric(const SimConfig& cfg, HostCore::TrajectorySink sink) : cfg_(cfg), host_(std::move(sink)) {
    host_.enable_trace(true);
    for (int w = 0; w < cfg.workers; ++w) {
      Peer p{host_.open_session(), WorkerCore("sim-" + std::to_string(w)), nullptr, {}};
      peers_.push_back(std::move(p));
    }
  }

  void handshake(const PolicySnapshot& initial) {
    host_.publish(initial);
    for (std::size_t w = 0; w < peers_.size(); ++w) to_host(w, peers_[w].core.on_connect());
  }

  void publish(const PolicySnapshot& snap) {
    const Message m = policy_message(snap);
    for (SessionId id : host_.publish(snap)) to_worker(index_of(id), m);
  }

  /// Adds one trajectory to worker w's pending batch; ships when full.
  void ship(std::size_t w, Trajectory t) {
    auto& p = peers_[w];
    p.pending.push_back(std::move(t));
    if (p.pending.size() >= static_cast<std::size_t>(cfg_.batch_flush)) flush(w);
  }

  void flush(std::size_t w) {
    auto& p = peers_[w];
    if (p.pending.empty()) return;
    TrajBatchMsg msg;
    msg.trajectories = std::move(p.pending);
    p.pending.clear();
    to_host(w, msg);
  }

  void shutdown() {
    for (std::size_t w = 0; w < peers_.size(); ++w) {
      flush(w);
      to_worker(w, ShutdownMsg{});
    }
  }

  std::shared_ptr<const LoadedPolicy> policy(std::size_t w) const { return peers_[w].policy; }
  const HostCore& host() const noexcept { return host_; }

 private:
  struct Peer {
    SessionId session;
    WorkerCore core;
    std::shared_ptr<const LoadedPolicy> policy;
    std::vector<Trajectory> pending;
  };

  std::size_t index_of(SessionId id) const {
    for (std::size_t w = 0; w < peers_.size(); ++w)
      if (peers_[w].session == id) return w;
    throw ProtocolError("unknown session");
  }

  void to_host(std::size_t w, const Message& m) {
    for (const auto& reply : host_.on_message(peers_[w].session, over_wire(m))) to_worker(w, reply);
  }

  void to_worker(std::size_t w, const Message& m) {
    auto& p = peers_[w];
    for (const auto& reply : p.core.on_message(over_wire(m))) to_host(w, reply);
    if (auto snap = p.core.take_pending_policy()) p.policy = std::make_shared<const LoadedPolicy>(LoadedPolicy::from(*snap));
  }

  const SimConfig& cfg_;
  HostCore host_;
  std::vector<Peer> peers_;
};

struct Loop {
  std::unique_ptr<ScreenWorld> env;
  Rng rng;
  std::size_t worker = 0;
  std::uint64_t count = 0;
  std::uint64_t counter = 0;
  std::optional<Trajectory> in_flight;
};

}  // namespace detail

/// Collection plus learning on the virtual clock. `on_metrics` sees every step.
inline SimResult run_training_sim(Learner& learner, const std::shared_ptr<const World>& world, const SimConfig& cfg,
                                  const std::function<void(const StepMetrics&)>& on_metrics = {}) {
  cfg.validate();
  TrajectoryQueue queue(learner.config().queue_capacity);
  const auto d = world->feature_dim();
  const int m = world->graph.m;
  SimResult res;
  detail::SimFabric fabric(cfg, [&](Trajectory&& t, const std::string&) {
    if (queue.push_validated(std::move(t), d, m).empty()) ++res.ingested;
  });
  fabric.handshake(learner.snapshot());

  const int n_loops = cfg.loops();
  std::vector<detail::Loop> loops(static_cast<std::size_t>(n_loops));
  for (int k = 0; k < n_loops; ++k) {
    EnvConfig e = cfg.loop_env.empty() ? cfg.env : cfg.loop_env[static_cast<std::size_t>(k)];
    e.live = false;
    e.seed = Rng::stream(cfg.seed, 0x10000 + static_cast<std::uint64_t>(k)).next();
    loops[k].env = std::make_unique<ScreenWorld>(world, e);
    loops[k].rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(k));
    loops[k].worker = static_cast<std::size_t>(k / cfg.envs_per_worker);
  }

  // (time, kind, index): trajectories landing at time t are ingested before the learner step at t
  using Event = std::tuple<std::int64_t, int, int>;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
  constexpr int kLoop = 0, kLearner = 1;

  bool collecting = true;
  auto start_episode = [&](int k, std::int64_t now) {
    auto& L = loops[static_cast<std::size_t>(k)];
    auto pol = fabric.policy(L.worker);
    if (!pol) throw StateError("worker has no policy after handshake");
    const int task = world->tasks[L.rng.below(world->tasks.size())].task_id;
    CollectOptions opt{cfg.masked_sampling, "sim-" + std::to_string(L.worker), make_trajectory_id(static_cast<std::uint64_t>(k), L.counter++)};
    Trajectory t = collect_trajectory(*pol, *L.env, task, L.rng, opt);
    std::int64_t dur = std::max<std::int64_t>(t.wall_ms, 1);
    if (!cfg.loop_extra_ms.empty()) dur += static_cast<std::int64_t>(cfg.loop_extra_ms[k]) * static_cast<std::int64_t>(t.size());
    L.in_flight = t.transitions.empty() ? std::nullopt : std::optional<Trajectory>(std::move(t));
    events.emplace(now + dur, kLoop, k);
  };

  for (int k = 0; k < n_loops; ++k) start_episode(k, 0);
  events.emplace(cfg.step_cost_ms, kLearner, 0);

  std::int64_t now = 0;
  const auto& lc = learner.config();
  while (!events.empty()) {
    const auto [t, kind, k] = events.top();
    events.pop();
    now = t;
    if (cfg.max_virtual_ms > 0 && now > cfg.max_virtual_ms) break;
    if (kind == kLoop) {
      auto& L = loops[static_cast<std::size_t>(k)];
      if (L.in_flight) {
        ++L.count;
        ++res.collected;
        fabric.ship(L.worker, std::move(*L.in_flight));
        L.in_flight.reset();
      }
      if (cfg.max_trajectories > 0 && res.collected >= cfg.max_trajectories) collecting = false;
      if (collecting) start_episode(k, now);
      continue;
    }
    // learner step
    if (learner.completed_steps() >= static_cast<std::uint64_t>(lc.total_steps)) break;
    for (auto& tr : queue.drain_all()) learner.ingest(std::move(tr));
    StepMetrics mtr = learner.train_step(now);
    if (mtr.trained && learner.updates() % static_cast<std::uint64_t>(lc.publish_every) == 0) {
      fabric.publish(learner.publish_policy());
      mtr.policy_version = learner.snapshot().version;
    }
    if (cfg.eval_every > 0 && learner.steps() % cfg.eval_every == 0) {
      const double s = greedy_success_rate(world, learner.policy(), cfg.env, cfg.eval_episodes);
      mtr.eval_success_rate = s;
      res.evals.push_back({mtr.step, learner.traj_total(), now, s});
    }
    if (on_metrics) on_metrics(mtr);
    if (!collecting && queue.depth() == 0 && learner.traj_total() >= res.ingested) break;
    events.emplace(now + cfg.step_cost_ms, kLearner, 0);
  }
  fabric.shutdown();
  for (auto& tr : queue.drain_all()) learner.ingest(std::move(tr));
  res.virtual_ms = now;
  res.learner_steps = learner.steps();
  res.final_version = learner.snapshot().version;
  for (const auto& L : loops) res.per_loop.push_back(L.count);
  res.trace = fabric.host().trace();
  return res;
}

struct CollectionResult {
  std::vector<std::uint64_t> per_loop;  // episodes finished per loop
  std::uint64_t ingested = 0;           // trajectories through host ingestion in the window
  double minutes = 0.0;
  double traj_per_min() const noexcept { return minutes > 0 ? static_cast<double>(ingested) / minutes : 0.0; }
};

/// Collection only (fixed uniform policy) for `minutes` of virtual time. Host
/// ingestion is a single FIFO server with `ingest_ms` service time per trajectory.
inline CollectionResult simulate_collection(const std::shared_ptr<const World>& world, const SimConfig& cfg, double minutes) {
  cfg.validate();
  const auto window = static_cast<std::int64_t>(minutes * 60000.0);
  const LoadedPolicy uniform{0, PolicyParams::zeros(static_cast<int>(world->feature_dim()), world->graph.m)};
  CollectionResult res;
  res.minutes = minutes;
  const int n_loops = cfg.loops();
  res.per_loop.assign(static_cast<std::size_t>(n_loops), 0);

  struct LoopState {
    std::unique_ptr<ScreenWorld> env;
    Rng rng;
  };
  std::vector<LoopState> loops(static_cast<std::size_t>(n_loops));
  for (int k = 0; k < n_loops; ++k) {
    EnvConfig e = cfg.loop_env.empty() ? cfg.env : cfg.loop_env[static_cast<std::size_t>(k)];
    e.live = false;
    e.seed = Rng::stream(cfg.seed, 0x10000 + static_cast<std::uint64_t>(k)).next();
    loops[k].env = std::make_unique<ScreenWorld>(world, e);
    loops[k].rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(k));
  }
  using Event = std::pair<std::int64_t, int>;  // (arrival at host, loop)
  std::priority_queue<Event, std::vector<Event>, std::greater<>> arrivals;
  for (int k = 0; k < n_loops; ++k) {
    auto& L = loops[static_cast<std::size_t>(k)];
    std::int64_t t = 0;
    while (true) {
      const int task = world->tasks[L.rng.below(world->tasks.size())].task_id;
      Trajectory tr = collect_trajectory(uniform, *L.env, task, L.rng);
      std::int64_t dur = std::max<std::int64_t>(tr.wall_ms, 1);
      if (!cfg.loop_extra_ms.empty()) dur += static_cast<std::int64_t>(cfg.loop_extra_ms[k]) * static_cast<std::int64_t>(tr.size());
      t += dur;
      if (t > window) break;
      ++res.per_loop[static_cast<std::size_t>(k)];
      if (!tr.transitions.empty()) arrivals.emplace(t, k);
    }
  }
  std::int64_t server_free = 0;
  while (!arrivals.empty()) {
    const auto [t, k] = arrivals.top();
    arrivals.pop();
    const std::int64_t done = std::max(t, server_free) + cfg.ingest_ms;
    server_free = done;
    if (done <= window) ++res.ingested;
  }
  return res;
}

}  // namespace distrl
