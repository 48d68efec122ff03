#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"
#include "distrl/rng.hpp"
#include "distrl/screenworld.hpp"
#include "distrl/transport.hpp"

namespace distrl {

/// Decoded snapshot ready for action selection.
struct LoadedPolicy {
  std::int64_t version = 0;
  PolicyParams params;

  static LoadedPolicy from(const PolicySnapshot& s) { return {s.version, snapshot_policy(s)}; }
};

struct CollectOptions {
  bool masked_sampling = false;
  std::string worker_id;
  TrajectoryId id = 0;
};

/// One episode under `policy` from a freshly reset env. Empty when the task
/// is already solved at reset (no decision was taken).
inline Trajectory collect_trajectory(const LoadedPolicy& policy, ScreenWorld& env, int task_id, Rng& rng,
                                     const CollectOptions& opt = {}) {
  Trajectory traj;
  traj.id = opt.id;
  traj.task_id = task_id;
  traj.policy_version = policy.version;
  traj.worker_id = opt.worker_id;
  const std::int64_t t0 = env.elapsed_ms();
  StateFeatures s = env.reset(task_id);
  if (env.done()) return traj;
  for (;;) {
    std::vector<bool> mask;
    if (opt.masked_sampling) mask = env.action_mask();
    const auto pick = sample_action(policy.params, s, opt.masked_sampling ? &mask : nullptr, rng);
    StepResult r = env.step(pick.action);
    Transition tr;
    tr.t = static_cast<int>(traj.transitions.size());
    tr.state = std::move(s);
    tr.action = pick.action;
    tr.reward = r.penalty;
    tr.mu_prob = pick.mu_prob;
    tr.next_state = r.next;
    tr.done = r.done;
    tr.invalid = r.invalid;
    tr.repeat_count = r.repeat_count;
    if (r.done) {
      traj.terminal_reward = r.verdict == 1 ? 1.0 : 0.0;
      tr.reward += traj.terminal_reward;
    }
    s = std::move(r.next);
    traj.transitions.push_back(std::move(tr));
    if (traj.transitions.back().done) break;
  }
  traj.wall_ms = env.elapsed_ms() - t0;
  return traj;
}

/// Greedy (argmax) episode; returns the evaluator verdict at the end.
inline bool greedy_episode(const PolicyParams& policy, ScreenWorld& env, int task_id) {
  StateFeatures s = env.reset(task_id);
  if (env.done()) return true;
  for (;;) {
    StepResult r = env.step(greedy_action(policy, s));
    if (r.done) return r.verdict == 1;
    s = std::move(r.next);
  }
}

struct EvalRow {
  int task_id = 0;
  int episodes = 0;
  int successes = 0;
  double rate() const noexcept { return episodes > 0 ? static_cast<double>(successes) / episodes : 0.0; }
};

/// E greedy episodes per task. Latency is virtual regardless of env.live.
inline std::vector<EvalRow> evaluate_policy(const std::shared_ptr<const World>& world, const PolicyParams& policy,
                                            EnvConfig env_cfg, const std::vector<int>& task_ids, int episodes) {
  if (policy.d != static_cast<int>(world->feature_dim()) || policy.m != world->graph.m)
    throw std::invalid_argument("policy shape " + policy.shape().str() + " does not match environment (d=" +
                                std::to_string(world->feature_dim()) + ", m=" + std::to_string(world->graph.m) + ")");
  env_cfg.live = false;
  ScreenWorld env(world, env_cfg);
  std::vector<EvalRow> rows;
  for (int id : task_ids) {
    EvalRow row{id, 0, 0};
    for (int e = 0; e < episodes; ++e) {
      ++row.episodes;
      if (greedy_episode(policy, env, id)) ++row.successes;
    }
    rows.push_back(row);
  }
  return rows;
}

inline double mean_success(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.rate();
  return s / static_cast<double>(rows.size());
}

inline std::vector<int> all_task_ids(const World& w) {
  std::vector<int> ids;
  for (const auto& t : w.tasks) ids.push_back(t.task_id);
  return ids;
}

/// Mean greedy success over every task, `episodes` episodes each.
inline double greedy_success_rate(const std::shared_ptr<const World>& world, const PolicyParams& policy,
                                  const EnvConfig& env_cfg, int episodes = 1) {
  return mean_success(evaluate_policy(world, policy, env_cfg, all_task_ids(*world), episodes));
}

/// Shared read-only policy for all collection loops; replaced atomically.
class SnapshotCell {
 public:
  std::shared_ptr<const LoadedPolicy> load() const {
    std::lock_guard lk(mu_);
    return current_;
  }
  void store(std::shared_ptr<const LoadedPolicy> p) {
    {
      std::lock_guard lk(mu_);
      current_ = std::move(p);
    }
    cv_.notify_all();
  }
  /// Blocks until a policy exists or `stop` is set.
  std::shared_ptr<const LoadedPolicy> wait(const std::atomic<bool>& stop) const {
    std::unique_lock lk(mu_);
    while (!current_ && !stop) cv_.wait_for(lk, std::chrono::milliseconds(20));
    return current_;
  }

 private:
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::shared_ptr<const LoadedPolicy> current_;
};

/// Local bounded buffer of trajectories waiting to ship; overflow drops the oldest.
class Outbox {
 public:
  explicit Outbox(std::size_t capacity = 64) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("Outbox: capacity must be >= 1");
  }

  void push(Trajectory t) {
    {
      std::lock_guard lk(mu_);
      if (items_.size() == capacity_) {
        items_.pop_front();
        ++drops_;
      }
      items_.push_back(std::move(t));
    }
    cv_.notify_all();
  }

  /// Puts unsent trajectories back at the front, oldest first.
  void restore(std::vector<Trajectory> batch) {
    std::lock_guard lk(mu_);
    for (auto it = batch.rbegin(); it != batch.rend(); ++it) items_.push_front(std::move(*it));
    while (items_.size() > capacity_) {
      items_.pop_front();
      ++drops_;
    }
  }

  std::vector<Trajectory> take(std::size_t max_items) {
    std::lock_guard lk(mu_);
    std::vector<Trajectory> out;
    while (!items_.empty() && out.size() < max_items) {
      out.push_back(std::move(items_.front()));
      items_.pop_front();
    }
    return out;
  }

  bool wait_nonempty(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, timeout, [&] { return !items_.empty(); });
  }

  std::size_t size() const {
    std::lock_guard lk(mu_);
    return items_.size();
  }
  std::uint64_t drops() const {
    std::lock_guard lk(mu_);
    return drops_;
  }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Trajectory> items_;
  std::uint64_t drops_ = 0;
};

struct WorkerConfig {
  std::string worker_id = "worker-0";
  int envs = 1;
  std::string host;  // "host:port"; empty falls back to DISTRL_ADDR
  std::uint64_t seed = 0;
  EnvConfig env;
  int batch_flush = 1;
  bool masked_sampling = false;
  std::size_t outbox_capacity = 64;

  void validate() const {
    if (envs < 1) throw std::invalid_argument("worker: envs must be >= 1");
    if (batch_flush < 1) throw std::invalid_argument("worker: batch_flush must be >= 1");
    if (worker_id.empty()) throw std::invalid_argument("worker: id must be non-empty");
  }
};

/// Stable numeric id for trajectory ids.
inline std::uint64_t worker_numeric_id(const std::string& name) {
  return crc32(std::string_view(name)) & 0xFFFFFF;
}

/// Env seed and sampling stream of collection loop `k`.
inline EnvConfig loop_env_config(const WorkerConfig& cfg, int k) {
  EnvConfig e = cfg.env;
  e.seed = Rng::stream(cfg.seed, 0x10000 + static_cast<std::uint64_t>(k)).next();
  return e;
}

/// A worker process: K collection loops sharing one snapshot cell and one
/// outbox, plus a network thread that owns the host session.
class WorkerRuntime {
 public:
  using Connector = std::function<std::shared_ptr<Connection>()>;

  WorkerRuntime(WorkerConfig cfg, std::shared_ptr<const World> world, Connector connect)
      : cfg_(std::move(cfg)), world_(std::move(world)), connect_(std::move(connect)), outbox_(cfg_.outbox_capacity),
        core_(cfg_.worker_id) {
    cfg_.validate();
    loop_counts_ = std::vector<std::atomic<std::uint64_t>>(static_cast<std::size_t>(cfg_.envs));
  }
  ~WorkerRuntime() { stop(); }
  WorkerRuntime(const WorkerRuntime&) = delete;
  WorkerRuntime& operator=(const WorkerRuntime&) = delete;

  void start() {
    for (int k = 0; k < cfg_.envs; ++k) loops_.emplace_back([this, k] { collect_loop(k); });
    net_ = std::thread([this] { network_loop(); });
  }

  /// Blocks until the host sends SHUTDOWN or stop() is called.
  void wait() {
    if (net_.joinable()) net_.join();
    stop_loops();
  }

  void stop() {
    stop_net_ = true;
    if (net_.joinable()) net_.join();
    stop_loops();
  }

  std::uint64_t collected() const noexcept { return collected_; }
  std::uint64_t loop_count(int k) const { return loop_counts_.at(static_cast<std::size_t>(k)); }
  std::uint64_t shipped() const noexcept { return shipped_; }
  std::uint64_t outbox_drops() const { return outbox_.drops(); }
  std::uint64_t env_faults() const noexcept { return env_faults_; }
  std::uint64_t reconnects() const noexcept { return reconnects_; }
  std::int64_t policy_version() const {
    auto p = cell_.load();
    return p ? p->version : -1;
  }
  bool shutdown_received() const noexcept { return shutdown_; }

 private:
  void stop_loops() {
    stop_loops_ = true;
    for (auto& t : loops_)
      if (t.joinable()) t.join();
  }

  void collect_loop(int k) {
    Rng rng = Rng::stream(cfg_.seed, static_cast<std::uint64_t>(k));
    const EnvConfig env_cfg = loop_env_config(cfg_, k);
    auto env = std::make_unique<ScreenWorld>(world_, env_cfg);
    const auto uid = worker_numeric_id(cfg_.worker_id);
    while (!stop_loops_) {
      auto policy = cell_.wait(stop_loops_);
      if (!policy) break;
      const int task = world_->tasks[rng.below(world_->tasks.size())].task_id;
      CollectOptions opt{cfg_.masked_sampling, cfg_.worker_id, make_trajectory_id(uid, counter_++)};
      try {
        Trajectory t = collect_trajectory(*policy, *env, task, rng, opt);
        if (t.transitions.empty()) continue;
        outbox_.push(std::move(t));
        ++collected_;
        ++loop_counts_[static_cast<std::size_t>(k)];
      } catch (const std::exception&) {
        ++env_faults_;
        env = std::make_unique<ScreenWorld>(world_, env_cfg);
      }
    }
  }

  void network_loop() {
    int attempt = 0;
    while (!stop_net_ && !shutdown_) {
      std::shared_ptr<Connection> conn;
      try {
        conn = connect_();
      } catch (const std::exception&) {
        conn = nullptr;
      }
      if (!conn) {
        sleep_interruptible(backoff_delay(attempt++));
        continue;
      }
      if (attempt > 0 || sessions_ > 0) ++reconnects_;
      attempt = 0;
      ++sessions_;
      run_session(conn);
      core_.on_disconnect();
    }
    // stop collecting, then flush what is left
    stop_loops();
  }

  void run_session(const std::shared_ptr<Connection>& conn) {
    FramedChannel ch(conn);
    if (!ch.send(core_.on_connect())) return;
    try {
      while (!stop_net_) {
        auto r = ch.receive(5);
        if (r.status == RecvStatus::closed) return;
        if (r.integrity_error && !ch.send(core_.on_integrity_error())) return;
        if (r.message) {
          for (auto& reply : core_.on_message(*r.message))
            if (!ch.send(reply)) return;
          if (auto p = core_.take_pending_policy())
            cell_.store(std::make_shared<const LoadedPolicy>(LoadedPolicy::from(*p)));
          if (core_.state() == WorkerCore::State::stopped) {
            shutdown_ = true;
            stop_loops();
            flush(ch, true);
            ch.close();
            return;
          }
        }
        if (core_.state() == WorkerCore::State::ready && !flush(ch, false)) return;
      }
      if (core_.state() == WorkerCore::State::ready) flush(ch, true);
    } catch (const ProtocolError&) {
      ch.close();
    }
  }

  /// Ships outbox contents in TRAJ_BATCH frames of batch_flush; `all` also
  /// sends a trailing partial batch. Unsent trajectories are restored.
  bool flush(FramedChannel& ch, bool all) {
    const auto n = static_cast<std::size_t>(cfg_.batch_flush);
    for (;;) {
      if (!all && outbox_.size() < n) return true;
      auto batch = outbox_.take(n);
      if (batch.empty()) return true;
      TrajBatchMsg msg;
      msg.trajectories = batch;
      if (!ch.send(msg)) {
        outbox_.restore(std::move(batch));
        return false;
      }
      shipped_ += batch.size();
    }
  }

  void sleep_interruptible(std::chrono::milliseconds d) {
    const auto until = std::chrono::steady_clock::now() + d;
    while (!stop_net_ && std::chrono::steady_clock::now() < until) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  WorkerConfig cfg_;
  std::shared_ptr<const World> world_;
  Connector connect_;
  SnapshotCell cell_;
  Outbox outbox_;
  WorkerCore core_;
  std::vector<std::thread> loops_;
  std::thread net_;
  std::vector<std::atomic<std::uint64_t>> loop_counts_;
  std::atomic<bool> stop_loops_{false};
  std::atomic<bool> stop_net_{false};
  std::atomic<bool> shutdown_{false};
  std::atomic<std::uint64_t> counter_{0};
  std::atomic<std::uint64_t> collected_{0};
  std::atomic<std::uint64_t> shipped_{0};
  std::atomic<std::uint64_t> env_faults_{0};
  std::atomic<std::uint64_t> reconnects_{0};
  std::uint64_t sessions_ = 0;
};

}  // namespace distrl
