#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "distrl/approx.hpp"
#include "distrl/core.hpp"
#include "distrl/errors.hpp"
#include "distrl/losses.hpp"
#include "distrl/rng.hpp"

namespace distrl {

struct PriorityWeights {
  double w1 = 1.0;  // TD error
  double w2 = 0.5;  // truncated importance ratio
  double w3 = 0.3;  // sampled entropy
  bool operator==(const PriorityWeights&) const = default;
};

struct PriorityBreakdown {
  double mean_abs_td = 0.0;
  double mean_trunc_rho = 0.0;
  double mean_entropy = 0.0;
  double n_td = 0.0;
  double n_rho = 0.0;
  double n_entropy = 0.0;
  double p = 0.0;
  PriorityWeights weights;
  bool operator==(const PriorityBreakdown&) const = default;
};

struct PriorityContext {
  double gamma = 0.95;
  bool mc_propagation = true;
  PriorityWeights weights;
};

/// Largest per-step |TD| and -log pi seen so far in the run; never reset.
struct RunningMaxima {
  double abs_td = 0.0;
  double entropy = 0.0;
};

inline constexpr double kNormalizerEps = 1e-12;
inline constexpr double kPriorityFloor = 1e-6;

/// p(tau) = w1 n_td + w2 n_rho + w3 n_H over one trajectory, with the TD and
/// entropy means divided by the running maxima (updated first), and the
/// ratio truncated to min(1, pi/mu).
inline PriorityBreakdown compute_priority(const Trajectory& traj, const PolicyParams& policy, const ValueParams& value,
                                          const PriorityContext& ctx, RunningMaxima& maxima) {
  PriorityBreakdown b;
  b.weights = ctx.weights;
  const std::size_t n = traj.size();
  if (n == 0) return b;
  const auto rewards = augment_rewards(traj, ctx.gamma, ctx.mc_propagation);
  std::vector<double> v(n);
  for (std::size_t t = 0; t < n; ++t) v[t] = value_forward(value, traj.transitions[t].state);
  double sum_td = 0.0, sum_rho = 0.0, sum_h = 0.0, max_td = 0.0, max_h = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const Transition& tr = traj.transitions[t];
    const double v_next = tr.done ? 0.0 : (t + 1 < n ? v[t + 1] : value_forward(value, tr.next_state));
    const double td = std::abs(rewards[t] + ctx.gamma * v_next - v[t]);
    const auto probs = policy_probs(policy, tr.state);
    const double pi = std::max(probs[static_cast<std::size_t>(tr.action)], std::numeric_limits<double>::min());
    const double ent = -std::log(pi);
    sum_td += td;
    sum_rho += std::min(1.0, pi / tr.mu_prob);
    sum_h += ent;
    max_td = std::max(max_td, td);
    max_h = std::max(max_h, ent);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  b.mean_abs_td = sum_td * inv_n;
  b.mean_trunc_rho = sum_rho * inv_n;
  b.mean_entropy = sum_h * inv_n;
  maxima.abs_td = std::max(maxima.abs_td, max_td);
  maxima.entropy = std::max(maxima.entropy, max_h);
  b.n_td = b.mean_abs_td / std::max(maxima.abs_td, kNormalizerEps);
  b.n_rho = b.mean_trunc_rho;
  b.n_entropy = b.mean_entropy / std::max(maxima.entropy, kNormalizerEps);
  b.p = ctx.weights.w1 * b.n_td + ctx.weights.w2 * b.n_rho + ctx.weights.w3 * b.n_entropy;
  return b;
}

inline void to_json(json& j, const PriorityWeights& w) { j = json{{"w1", w.w1}, {"w2", w.w2}, {"w3", w.w3}}; }
inline void from_json(const json& j, PriorityWeights& w) {
  j.at("w1").get_to(w.w1);
  j.at("w2").get_to(w.w2);
  j.at("w3").get_to(w.w3);
}

inline void to_json(json& j, const PriorityBreakdown& b) {
  j = json{{"mean_abs_td", b.mean_abs_td}, {"mean_trunc_rho", b.mean_trunc_rho}, {"mean_entropy", b.mean_entropy},
           {"n_td", b.n_td}, {"n_rho", b.n_rho}, {"n_entropy", b.n_entropy}, {"p", b.p}, {"weights", b.weights}};
}
inline void from_json(const json& j, PriorityBreakdown& b) {
  j.at("mean_abs_td").get_to(b.mean_abs_td);
  j.at("mean_trunc_rho").get_to(b.mean_trunc_rho);
  j.at("mean_entropy").get_to(b.mean_entropy);
  j.at("n_td").get_to(b.n_td);
  j.at("n_rho").get_to(b.n_rho);
  j.at("n_entropy").get_to(b.n_entropy);
  j.at("p").get_to(b.p);
  j.at("weights").get_to(b.weights);
}

/// Fixed-capacity circular store of trajectories with DPER priorities.
/// Single writer: only the training loop touches it.
class ReplayBuffer {
 public:
  struct Entry {
    Trajectory traj;
    PriorityBreakdown breakdown;
  };

  explicit ReplayBuffer(std::size_t capacity) : slots_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
  }

  std::size_t capacity() const noexcept { return slots_.size(); }
  std::size_t count() const noexcept { return count_; }
  std::size_t write_index() const noexcept { return write_; }
  bool empty() const noexcept { return count_ == 0; }
  const RunningMaxima& maxima() const noexcept { return maxima_; }
  RunningMaxima& maxima() noexcept { return maxima_; }

  /// Stores at the write index, then i <- (i + 1) mod N. Returns the id of the
  /// overwritten trajectory, if any.
  std::optional<TrajectoryId> push(Trajectory traj, PriorityBreakdown breakdown = {}) {
    std::optional<TrajectoryId> evicted;
    auto& slot = slots_[write_];
    if (slot) {
      evicted = slot->traj.id;
    } else {
      ++count_;
    }
    traj.priority = breakdown.p;
    slot = Entry{std::move(traj), breakdown};
    write_ = (write_ + 1) % slots_.size();
    return evicted;
  }

  /// Push with the priority computed under the given networks.
  std::optional<TrajectoryId> push(Trajectory traj, const PolicyParams& policy, const ValueParams& value,
                                   const PriorityContext& ctx) {
    auto b = compute_priority(traj, policy, value, ctx, maxima_);
    return push(std::move(traj), b);
  }

  /// Live entries from oldest to newest.
  std::vector<const Entry*> entries() const {
    std::vector<const Entry*> out;
    out.reserve(count_);
    const std::size_t n = slots_.size();
    for (std::size_t k = 0; k < n; ++k) {
      const auto& s = slots_[(write_ + k) % n];
      if (s) out.push_back(&*s);
    }
    return out;
  }

  const Entry& at_slot(std::size_t slot) const {
    if (slot >= slots_.size() || !slots_[slot]) throw std::out_of_range("ReplayBuffer: empty slot");
    return *slots_[slot];
  }
  bool occupied(std::size_t slot) const noexcept { return slot < slots_.size() && slots_[slot].has_value(); }

  /// Exact sampling distribution P(slot) = p^alpha / sum p^alpha (p floored at 1e-6).
  std::vector<double> sampling_probabilities(double alpha) const {
    std::vector<double> w(slots_.size(), 0.0);
    double total = 0.0;
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (!slots_[s]) continue;
      w[s] = std::pow(std::max(slots_[s]->breakdown.p, kPriorityFloor), alpha);
      total += w[s];
    }
    if (total > 0.0)
      for (double& x : w) x /= total;
    return w;
  }

  /// k slot indices drawn i.i.d. (with replacement) from sampling_probabilities(alpha).
  std::vector<std::size_t> sample(std::size_t k, double alpha, Rng& rng) const {
    if (count_ == 0) throw StateError("ReplayBuffer::sample on empty buffer");
    std::vector<double> cum(slots_.size(), 0.0);
    double acc = 0.0;
    std::size_t last_live = 0;
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (slots_[s]) {
        acc += std::pow(std::max(slots_[s]->breakdown.p, kPriorityFloor), alpha);
        last_live = s;
      }
      cum[s] = acc;
    }
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      const double u = rng.uniform() * acc;
      auto it = std::upper_bound(cum.begin(), cum.end(), u);
      // cum only rises at live slots, so upper_bound always lands on one
      out.push_back(it == cum.end() ? last_live : static_cast<std::size_t>(it - cum.begin()));
    }
    return out;
  }

  /// Recomputes every stored priority under the current networks.
  std::size_t refresh_priorities(const PolicyParams& policy, const ValueParams& value, const PriorityContext& ctx) {
    std::size_t updated = 0;
    for (auto& s : slots_) {
      if (!s) continue;
      s->breakdown = compute_priority(s->traj, policy, value, ctx, maxima_);
      s->traj.priority = s->breakdown.p;
      ++updated;
    }
    return updated;
  }

  /// Removes the lowest-V_traj (1 - q) fraction of failed trajectories.
  /// Successful trajectories are never removed. Survivors are compacted in age order.
  std::vector<TrajectoryId> filter_low_value(const TrajValueParams& vtraj, double keep_fraction) {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw std::invalid_argument("filter_low_value: q must be in (0,1]");
    struct Scored {
      double v;
      std::size_t slot;
    };
    std::vector<Scored> failures;
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (!slots_[s] || slots_[s]->traj.success()) continue;
      const auto& last = slots_[s]->traj.transitions.back();
      failures.push_back({vtraj_forward(vtraj, last.state, last.action), s});
    }
    const auto n_evict =
        static_cast<std::size_t>(std::floor((1.0 - keep_fraction) * static_cast<double>(failures.size()) + 1e-9));
    std::vector<TrajectoryId> evicted;
    if (n_evict == 0) return evicted;
    std::stable_sort(failures.begin(), failures.end(), [](const Scored& a, const Scored& b) { return a.v < b.v; });
    for (std::size_t i = 0; i < n_evict; ++i) {
      auto& slot = slots_[failures[i].slot];
      evicted.push_back(slot->traj.id);
      slot.reset();
    }
    compact();
    return evicted;
  }

  /// JSON-lines of canonical trajectories; returns the number loaded.
  /// When d/m are given every line is also validated.
  std::size_t load_warmup(const std::string& path, const PolicyParams& policy, const ValueParams& value,
                          const PriorityContext& ctx, std::size_t d = 0, int m = 0) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open warmup file " + path);
    std::string line;
    std::size_t line_no = 0, loaded = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      Trajectory t;
      try {
        t = json::parse(line).get<Trajectory>();
      } catch (const std::exception& e) {
        throw FormatError(std::string("malformed trajectory: ") + e.what(), line_no);
      }
      if (d > 0) {
        const auto problems = validate_trajectory(t, d, m);
        if (!problems.empty()) throw FormatError("invalid trajectory: " + problems.front(), line_no);
      }
      push(std::move(t), policy, value, ctx);
      ++loaded;
    }
    return loaded;
  }

  /// Dump in the warmup format with the priority breakdown attached.
  void dump(std::ostream& out) const {
    for (const Entry* e : entries()) {
      json j = e->traj;
      j["breakdown"] = e->breakdown;
      out << j.dump() << '\n';
    }
  }

 private:
  void compact() {
    std::vector<std::optional<Entry>> fresh(slots_.size());
    std::size_t k = 0;
    const std::size_t n = slots_.size();
    for (std::size_t i = 0; i < n; ++i) {
      auto& s = slots_[(write_ + i) % n];
      if (s) fresh[k++] = std::move(s);
    }
    slots_ = std::move(fresh);
    count_ = k;
    write_ = k % n;
  }

  std::vector<std::optional<Entry>> slots_;
  std::size_t write_ = 0;
  std::size_t count_ = 0;
  RunningMaxima maxima_;
};

}  // namespace distrl
