#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"
#include "distrl/losses.hpp"
#include "distrl/queue.hpp"
#include "distrl/replay.hpp"
#include "distrl/retrace.hpp"
#include "distrl/rng.hpp"

namespace distrl {

/// Which values enter A_t = r_t + gamma V(s_{t+1}) - V(s_t).
enum class AdvantageMode {
  retrace_next,  // corrected V at t+1, raw V at t
  retrace_both,  // corrected V at t and t+1
  raw,           // raw V at both
};

inline const char* to_string(AdvantageMode m) noexcept {
  switch (m) {
    case AdvantageMode::retrace_next: return "retrace_next";
    case AdvantageMode::retrace_both: return "retrace_both";
    case AdvantageMode::raw: return "raw";
  }
  return "?";
}

inline AdvantageMode parse_advantage_mode(const std::string& s) {
  if (s == "retrace_next") return AdvantageMode::retrace_next;
  if (s == "retrace_both") return AdvantageMode::retrace_both;
  if (s == "raw") return AdvantageMode::raw;
  throw std::invalid_argument("unknown advantage mode '" + s + "' (expected retrace_next, retrace_both or raw)");
}

struct LearnerConfig {
  double gamma = 0.95;
  double lambda_retrace = 0.9;
  double beta = 0.01;
  double lambda_pen = 0.1;
  double rho_max = 10.0;
  double alpha = 0.5;
  PriorityWeights weights;
  bool mc_propagation = true;
  bool use_retrace = true;
  bool prioritized = true;
  AdvantageMode advantage = AdvantageMode::retrace_next;
  int batch_size = 32;
  int publish_every = 1;
  int refresh_every = 10;
  std::int64_t total_steps = 1000;
  double lr_policy = 3e-4;
  double lr_value = 1e-3;
  double lr_vtraj = 1e-3;
  double filter_q = 0.95;
  double value_target_weight = 0.0;
  std::size_t buffer_capacity = 4096;
  std::size_t queue_capacity = 1024;
  int hidden = 32;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the first out-of-range field.
  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw std::invalid_argument(std::string("config: ") + what);
    };
    need(gamma > 0.0 && gamma <= 1.0, "gamma must be in (0,1]");
    need(lambda_retrace >= 0.0 && lambda_retrace <= 1.0, "lambda must be in [0,1]");
    need(beta >= 0.0, "beta must be >= 0");
    need(lambda_pen >= 0.0, "lambda_pen must be >= 0");
    need(rho_max > 0.0, "rho_max must be > 0");
    need(alpha >= 0.0, "alpha must be >= 0");
    need(weights.w1 >= 0.0 && weights.w2 >= 0.0 && weights.w3 >= 0.0, "priority weights must be >= 0");
    need(batch_size >= 1, "batch_size must be >= 1");
    need(publish_every >= 1, "publish_every must be >= 1");
    need(refresh_every >= 1, "refresh_every must be >= 1");
    need(total_steps >= 0, "total_steps must be >= 0");
    need(lr_policy > 0.0 && lr_value > 0.0 && lr_vtraj > 0.0, "learning rates must be > 0");
    need(filter_q > 0.0 && filter_q <= 1.0, "filter_q must be in (0,1]");
    need(value_target_weight >= 0.0, "value_target_weight must be >= 0");
    need(buffer_capacity >= 1, "buffer capacity must be >= 1");
    need(queue_capacity >= 1, "queue capacity must be >= 1");
    need(hidden >= 1, "hidden must be >= 1");
  }
};

inline void to_json(json& j, const LearnerConfig& c) {
  j = json{{"gamma", c.gamma},
           {"lambda", c.lambda_retrace},
           {"beta", c.beta},
           {"lambda_pen", c.lambda_pen},
           {"rho_max", c.rho_max},
           {"alpha", c.alpha},
           {"weights", c.weights},
           {"mc_propagation", c.mc_propagation},
           {"retrace", c.use_retrace},
           {"prioritized", c.prioritized},
           {"advantage", to_string(c.advantage)},
           {"batch_size", c.batch_size},
           {"publish_every", c.publish_every},
           {"refresh_every", c.refresh_every},
           {"total_steps", c.total_steps},
           {"lr_policy", c.lr_policy},
           {"lr_value", c.lr_value},
           {"lr_vtraj", c.lr_vtraj},
           {"filter_q", c.filter_q},
           {"value_target_weight", c.value_target_weight},
           {"buffer_capacity", c.buffer_capacity},
           {"queue_capacity", c.queue_capacity},
           {"hidden", c.hidden},
           {"seed", c.seed}};
}

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t wall_ms = 0;
  std::size_t queue_depth = 0;
  std::uint64_t queue_drops = 0;
  std::size_t buffer_count = 0;
  double mean_priority = 0.0;
  bool trained = false;
  std::string note;  // why no update happened
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double vtraj_loss = 0.0;
  double mean_entropy = 0.0;
  double mean_rho = 0.0;
  double invalid_rate = 0.0;
  double mean_abs_advantage = 0.0;
  std::optional<double> eval_success_rate;
  std::int64_t policy_version = 0;
  std::uint64_t traj_total = 0;
};

inline void to_json(json& j, const StepMetrics& m) {
  j = json{{"step", m.step},
           {"wall_ms", m.wall_ms},
           {"queue_depth", m.queue_depth},
           {"queue_drops", m.queue_drops},
           {"buffer_count", m.buffer_count},
           {"mean_priority", m.mean_priority},
           {"policy_version", m.policy_version},
           {"traj_total", m.traj_total}};
  if (m.trained) {
    j["policy_loss"] = m.policy_loss;
    j["value_loss"] = m.value_loss;
    j["vtraj_loss"] = m.vtraj_loss;
    j["mean_entropy"] = m.mean_entropy;
    j["mean_rho"] = m.mean_rho;
    j["invalid_rate"] = m.invalid_rate;
  } else {
    j["policy_loss"] = nullptr;
    j["value_loss"] = nullptr;
    j["vtraj_loss"] = nullptr;
    j["mean_entropy"] = nullptr;
    j["mean_rho"] = nullptr;
    j["invalid_rate"] = nullptr;
    j["note"] = m.note;
  }
  j["eval_success_rate"] = m.eval_success_rate ? json(*m.eval_success_rate) : json(nullptr);
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Per-step advantages for one trajectory.
struct TrajectoryTargets {
  std::vector<double> rewards;     // augmented
  std::vector<double> values;      // V(s_t)
  std::vector<double> advantages;  // A_t
  std::vector<double> returns;     // G_t over the stored rewards
  RetraceResult retrace;
};

inline TrajectoryTargets trajectory_targets(const Trajectory& traj, const PolicyParams& policy, const ValueParams& value,
                                            const LearnerConfig& cfg) {
  TrajectoryTargets out;
  const std::size_t n = traj.size();
  out.rewards = augment_rewards(traj, cfg.gamma, cfg.mc_propagation);
  out.values.resize(n);
  std::vector<double> pi(n), mu(n);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& tr = traj.transitions[t];
    out.values[t] = value_forward(value, tr.state);
    pi[t] = policy_probs(policy, tr.state)[static_cast<std::size_t>(tr.action)];
    mu[t] = tr.mu_prob;
  }
  const bool ended = traj.transitions.back().done;
  const double v_after = ended ? 0.0 : value_forward(value, traj.transitions.back().next_state);
  if (!all_finite(out.values) || !all_finite(pi) || !std::isfinite(v_after)) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.advantages.assign(n, nan);
    out.retrace.corrected_v.assign(n, nan);
    out.returns = monte_carlo_returns(raw_rewards(traj), cfg.gamma);
    return out;
  }
  out.retrace = retrace_deltas(out.rewards, out.values, pi, mu, cfg.gamma, cfg.lambda_retrace, v_after);
  const AdvantageMode mode = cfg.use_retrace ? cfg.advantage : AdvantageMode::raw;
  out.advantages.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    double v_next, v_now;
    switch (mode) {
      case AdvantageMode::retrace_both:
        v_next = t + 1 < n ? out.retrace.corrected_v[t + 1] : v_after;
        v_now = out.retrace.corrected_v[t];
        break;
      case AdvantageMode::retrace_next:
        v_next = t + 1 < n ? out.retrace.corrected_v[t + 1] : v_after;
        v_now = out.values[t];
        break;
      case AdvantageMode::raw:
      default:
        v_next = t + 1 < n ? out.values[t + 1] : v_after;
        v_now = out.values[t];
        break;
    }
    out.advantages[t] = one_step_advantage(out.rewards[t], cfg.gamma, v_next, v_now);
  }
  const auto raw = raw_rewards(traj);
  out.returns = monte_carlo_returns(raw, cfg.gamma);
  return out;
}

/// Host-side training state: replay buffer, the three networks and their optimizers.
/// Single-threaded; only the queue is shared with transport.
class Learner {
 public:
  Learner(LearnerConfig cfg, int d, int m, TrajectoryQueue* queue = nullptr)
      : cfg_(std::move(cfg)),
        d_(d),
        m_(m),
        queue_(queue),
        rng_(cfg_.seed),
        policy_(PolicyParams::zeros(d, m, cfg_.hidden)),
        buffer_(cfg_.buffer_capacity) {
    cfg_.validate();
    Rng init = Rng::stream(cfg_.seed, 0x5eed);
    value_ = make_value_params(d, cfg_.hidden, &init);
    vtraj_ = make_vtraj_params(d, m, cfg_.hidden, &init);
    snapshot_ = make_snapshot(0, policy_);
  }

  const LearnerConfig& config() const noexcept { return cfg_; }
  int feature_dim() const noexcept { return d_; }
  int action_count() const noexcept { return m_; }

  PriorityContext priority_context() const {
    PriorityContext c;
    c.gamma = cfg_.gamma;
    c.mc_propagation = cfg_.mc_propagation;
    c.weights = cfg_.weights;
    return c;
  }

  /// Inserts straight into the replay buffer (warmup, or single-threaded drivers).
  void ingest(Trajectory t) {
    buffer_.push(std::move(t), policy_, value_, priority_context());
    ++traj_total_;
  }

  std::size_t load_warmup(const std::string& path) {
    const auto n = buffer_.load_warmup(path, policy_, value_, priority_context(), static_cast<std::size_t>(d_), m_);
    traj_total_ += n;
    return n;
  }

  StepMetrics train_step(std::int64_t wall_ms = 0) {
    StepMetrics mtr;
    mtr.step = step_;
    mtr.wall_ms = wall_ms;
    if (queue_)
      for (auto& t : queue_->drain_all()) ingest(std::move(t));

    if (step_ > 0 && step_ % cfg_.refresh_every == 0 && !buffer_.empty()) {
      buffer_.refresh_priorities(policy_, value_, priority_context());
      if (cfg_.filter_q < 1.0) filtered_ += buffer_.filter_low_value(vtraj_, cfg_.filter_q).size();
    }
    ++step_;

    fill_common(mtr);
    if (buffer_.count() < static_cast<std::size_t>(cfg_.batch_size) || buffer_.empty()) {
      mtr.note = "insufficient data";
      return mtr;
    }

    const double alpha = cfg_.prioritized ? cfg_.alpha : 0.0;
    const auto slots = buffer_.sample(static_cast<std::size_t>(cfg_.batch_size), alpha, rng_);

    std::vector<VtrajSample> vt_batch;
    std::vector<ValueSample> v_batch;
    std::vector<ValueTargetSample> vr_batch;
    std::vector<PolicySample> p_batch;
    std::vector<TrajectoryTargets> targets;
    targets.reserve(slots.size());
    for (std::size_t s : slots) targets.push_back(trajectory_targets(buffer_.at_slot(s).traj, policy_, value_, cfg_));
    for (const auto& tt : targets) {
      if (!all_finite(tt.advantages)) return skip(mtr);
    }
    double abs_adv = 0.0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const Trajectory& traj = buffer_.at_slot(slots[i]).traj;
      const auto& last = traj.transitions.back();
      vt_batch.push_back({last.state.values, last.action, traj.terminal_reward});
      for (std::size_t t = 0; t < traj.size(); ++t) {
        const auto& tr = traj.transitions[t];
        v_batch.push_back({tr.state.values, targets[i].returns[t]});
        if (cfg_.value_target_weight > 0.0) vr_batch.push_back({tr.state.values, targets[i].retrace.corrected_v[t]});
        p_batch.push_back({tr.state.values, tr.action, targets[i].advantages[t], tr.mu_prob, tr.invalid});
        abs_adv += std::abs(targets[i].advantages[t]);
      }
    }

    const auto vt = vtraj_loss(vtraj_, vt_batch);
    auto vl = value_loss(value_, v_batch);
    const auto vr = value_regression_loss(value_, vr_batch, cfg_.value_target_weight);
    vl.loss += vr.loss;
    for (std::size_t i = 0; i < vl.grad.size(); ++i) vl.grad[i] += vr.grad[i];
    const auto pl = policy_loss(policy_, p_batch, cfg_.beta, cfg_.lambda_pen, cfg_.rho_max);
    if (!all_finite(vt.grad) || !all_finite(vl.grad) || !all_finite(pl.grad) || !std::isfinite(pl.loss)) {
      return skip(mtr);
    }
    adam_update(vtraj_.theta, vt.grad, adam_vtraj_, cfg_.lr_vtraj);
    adam_update(value_.theta, vl.grad, adam_value_, cfg_.lr_value);
    adam_update(policy_.theta, pl.grad, adam_policy_, cfg_.lr_policy);
    ++updates_;

    mtr.trained = true;
    mtr.policy_loss = pl.loss;
    mtr.value_loss = vl.loss;
    mtr.vtraj_loss = vt.loss;
    mtr.mean_entropy = pl.aux.at("mean_entropy");
    mtr.mean_rho = pl.aux.at("mean_rho");
    mtr.invalid_rate = pl.aux.at("penalty_rate");
    mtr.mean_abs_advantage = abs_adv / static_cast<double>(p_batch.size());
    return mtr;
  }

  /// New immutable snapshot with version + 1.
  const PolicySnapshot& publish_policy() {
    snapshot_ = make_snapshot(snapshot_.version + 1, policy_);
    return snapshot_;
  }

  const PolicySnapshot& snapshot() const noexcept { return snapshot_; }
  const PolicyParams& policy() const noexcept { return policy_; }
  const ValueParams& value() const noexcept { return value_; }
  const TrajValueParams& vtraj() const noexcept { return vtraj_; }
  PolicyParams& mutable_policy() noexcept { return policy_; }
  ValueParams& mutable_value() noexcept { return value_; }
  const ReplayBuffer& buffer() const noexcept { return buffer_; }
  ReplayBuffer& buffer() noexcept { return buffer_; }
  std::int64_t steps() const noexcept { return step_; }
  std::uint64_t updates() const noexcept { return updates_; }
  /// Steps that count toward total_steps: updates plus skipped non-finite steps.
  std::uint64_t completed_steps() const noexcept { return updates_ + skipped_; }
  std::uint64_t skipped_steps() const noexcept { return skipped_; }
  std::uint64_t filtered() const noexcept { return filtered_; }
  std::uint64_t traj_total() const noexcept { return traj_total_; }

  /// All three parameter sets, each as {shape_tag, params}.
  json params_json() const {
    auto one = [](const FlatParams& f) { return json{{"shape_tag", f.shape_tag}, {"params", f.values}}; };
    return json{{"policy_version", snapshot_.version},
                {"policy", one(serialize_params(policy_))},
                {"value", one(serialize_params(value_))},
                {"vtraj", one(serialize_params(vtraj_))}};
  }

 private:
  StepMetrics& skip(StepMetrics& m) {
    ++skipped_;
    m.note = "non-finite gradient; step skipped";
    return m;
  }

  void fill_common(StepMetrics& m) const {
    m.queue_depth = queue_ ? queue_->depth() : 0;
    m.queue_drops = queue_ ? queue_->drops() : 0;
    m.buffer_count = buffer_.count();
    double sum = 0.0;
    for (const auto* e : buffer_.entries()) sum += e->breakdown.p;
    m.mean_priority = buffer_.empty() ? 0.0 : sum / static_cast<double>(buffer_.count());
    m.policy_version = snapshot_.version;
    m.traj_total = traj_total_;
  }

  LearnerConfig cfg_;
  int d_, m_;
  TrajectoryQueue* queue_;
  Rng rng_;
  PolicyParams policy_;
  ValueParams value_;
  TrajValueParams vtraj_;
  AdamState adam_policy_, adam_value_, adam_vtraj_;
  ReplayBuffer buffer_;
  PolicySnapshot snapshot_;
  std::int64_t step_ = 0;
  std::uint64_t updates_ = 0;
  std::uint64_t skipped_ = 0;
  std::uint64_t filtered_ = 0;
  std::uint64_t traj_total_ = 0;
};

/// Params file written by `train` and read by `eval`.
inline PolicyParams policy_from_params_json(const json& j) {
  const json& p = j.contains("policy") ? j.at("policy") : j;
  return deserialize_as<PolicyParams>(p.at("params").get<std::vector<double>>(), p.at("shape_tag").get<std::string>());
}

/// JSON-lines metrics: a header line with the configuration, then one line per step.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const json& header) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open metrics file " + path);
    out_ << json{{"header", header}}.dump() << '\n';
    out_.flush();
  }

  void write(const StepMetrics& m) {
    out_ << json(m).dump() << '\n';
    out_.flush();
    ++lines_;
  }

  std::size_t lines() const noexcept { return lines_; }

 private:
  std::ofstream out_;
  std::size_t lines_ = 0;
};

}  // namespace distrl
