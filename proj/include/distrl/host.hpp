#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <memory>

#include "distrl/learner.hpp"
#include "distrl/queue.hpp"
#include "distrl/transport.hpp"
#include "distrl/worker.hpp"

namespace distrl {

struct HostRunOptions {
  const std::atomic<bool>* stop = nullptr;  // external interrupt
  std::shared_ptr<const World> world;       // for periodic greedy eval
  EnvConfig env;
  int eval_every = 0;
  int eval_episodes = 1;
  std::chrono::milliseconds idle_wait{50};  // wait for data when a step had nothing to train on
  std::chrono::milliseconds shutdown_grace{500};
};

struct HostRunSummary {
  std::int64_t steps = 0;
  std::uint64_t updates = 0;
  std::int64_t final_version = 0;
  std::uint64_t traj_total = 0;
  bool interrupted = false;
};

/// Sink that validates incoming trajectories against (d, m) and enqueues them.
inline HostCore::TrajectorySink queue_sink(TrajectoryQueue& q, std::size_t d, int m) {
  return [&q, d, m](Trajectory&& t, const std::string&) { q.push_validated(std::move(t), d, m); };
}

/// Live training loop against a HostServer whose sink feeds the learner's
/// queue. Publication only posts to per-session outboxes, so no session can
/// stall a step. Sends SHUTDOWN to every worker on exit.
inline HostRunSummary run_host(Learner& learner, HostServer& server, const HostRunOptions& opt,
                               const std::function<void(const StepMetrics&)>& on_metrics = {},
                               TrajectoryQueue* queue = nullptr) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  const auto& cfg = learner.config();
  server.publish(learner.snapshot());
  HostRunSummary sum;
  while (learner.completed_steps() < static_cast<std::uint64_t>(cfg.total_steps)) {
    if (opt.stop && opt.stop->load()) {
      sum.interrupted = true;
      break;
    }
    const auto now_ms = std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
    StepMetrics mtr = learner.train_step(now_ms);
    if (mtr.trained && learner.updates() % static_cast<std::uint64_t>(cfg.publish_every) == 0) {
      server.publish(learner.publish_policy());
      mtr.policy_version = learner.snapshot().version;
    }
    if (opt.world && opt.eval_every > 0 && learner.steps() % opt.eval_every == 0)
      mtr.eval_success_rate = greedy_success_rate(opt.world, learner.policy(), opt.env, opt.eval_episodes);
    if (on_metrics) on_metrics(mtr);
    if (!mtr.trained && queue) queue->wait_nonempty(opt.idle_wait);
  }
  server.shutdown_workers(opt.shutdown_grace);
  sum.steps = learner.steps();
  sum.updates = learner.updates();
  sum.final_version = learner.snapshot().version;
  sum.traj_total = learner.traj_total();
  return sum;
}

}  // namespace distrl
