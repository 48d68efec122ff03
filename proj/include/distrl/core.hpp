#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/crc.hpp>
#include <json.hpp>

#include "distrl/errors.hpp"

namespace distrl {

using json = nlohmann::json;

using ActionId = int;
using TrajectoryId = std::uint64_t;

/// one-hot screen id | one-hot task id | step fraction t/H
struct StateFeatures {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  bool operator==(const StateFeatures&) const = default;
};

struct Transition {
  int t = 0;
  StateFeatures state;
  ActionId action = 0;
  // Raw environment reward: step penalty, plus the evaluator verdict on the
  // final transition. Augmented rewards are derived from it by the losses module.
  double reward = 0.0;
  double mu_prob = 1.0;
  StateFeatures next_state;
  bool done = false;
  bool invalid = false;
  int repeat_count = 0;

  bool operator==(const Transition&) const = default;
};

struct Trajectory {
  TrajectoryId id = 0;
  int task_id = 0;
  std::vector<Transition> transitions;
  double terminal_reward = 0.0;
  std::int64_t policy_version = 0;
  std::string worker_id;
  std::int64_t wall_ms = 0;
  double priority = 0.0;

  std::size_t size() const noexcept { return transitions.size(); }
  bool success() const noexcept { return terminal_reward == 1.0; }
  bool operator==(const Trajectory&) const = default;
};

struct PolicySnapshot {
  std::int64_t version = 0;
  std::vector<double> params;
  std::string shape_tag;
  std::uint32_t checksum = 0;

  bool operator==(const PolicySnapshot&) const = default;
};

/// Trajectory ids: (worker numeric id << 40) | per-worker counter.
constexpr TrajectoryId make_trajectory_id(std::uint64_t worker_numeric_id, std::uint64_t counter) noexcept {
  return (worker_numeric_id << 40) | (counter & ((std::uint64_t{1} << 40) - 1));
}

inline std::uint32_t crc32(std::span<const std::byte> bytes) noexcept {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

inline std::uint32_t crc32(std::string_view s) noexcept {
  return crc32(std::as_bytes(std::span(s.data(), s.size())));
}

/// Little-endian IEEE-754 binary32 image of a parameter vector (the wire form).
inline std::vector<std::byte> pack_f32_le(std::span<const double> values) {
  std::vector<std::byte> out(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float f = static_cast<float>(values[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<std::byte>((bits >> (8 * b)) & 0xFFu);
  }
  return out;
}

inline std::vector<double> unpack_f32_le(std::span<const std::byte> bytes) {
  if (bytes.size() % 4 != 0) throw DecodeError("f32 block length not a multiple of 4");
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    out[i] = f;
  }
  return out;
}

/// Snapshot checksum: CRC-32 over the f32 wire image of the params.
inline std::uint32_t params_checksum(std::span<const double> params) {
  const auto bytes = pack_f32_le(params);
  return crc32(bytes);
}

/// G_t = sum_{k=t}^{H} gamma^{k-t} r_k
inline double monte_carlo_return(std::span<const double> rewards, double gamma, std::size_t t) {
  if (t >= rewards.size()) throw std::invalid_argument("monte_carlo_return: index out of range");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("monte_carlo_return: gamma must be in (0,1]");
  double g = 0.0;
  double discount = 1.0;
  for (std::size_t k = t; k < rewards.size(); ++k) {
    g += discount * rewards[k];
    discount *= gamma;
  }
  return g;
}

/// All returns G_0..G_H in one backward pass.
inline std::vector<double> monte_carlo_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> g(rewards.size(), 0.0);
  double acc = 0.0;
  for (std::size_t k = rewards.size(); k-- > 0;) {
    acc = rewards[k] + gamma * acc;
    g[k] = acc;
  }
  return g;
}

inline std::vector<double> raw_rewards(const Trajectory& traj) {
  std::vector<double> r;
  r.reserve(traj.size());
  for (const auto& tr : traj.transitions) r.push_back(tr.reward);
  return r;
}

namespace detail {

inline bool finite_all(const StateFeatures& f) {
  for (double v : f.values)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace detail

/// Every violated Trajectory invariant, empty when the trajectory is well formed.
inline std::vector<std::string> validate_trajectory(const Trajectory& traj, std::size_t d, int m) {
  std::vector<std::string> out;
  if (traj.transitions.empty()) {
    out.emplace_back("transitions empty");
    return out;
  }
  if (traj.terminal_reward != 0.0 && traj.terminal_reward != 1.0) out.emplace_back("terminal_reward not in {0,1}");
  if (!(traj.priority >= 0.0) || !std::isfinite(traj.priority)) out.emplace_back("priority negative or non-finite");

  const std::size_t last = traj.transitions.size() - 1;
  bool early_done = false, bad_t = false, bad_mu = false, bad_action = false, bad_dim = false, bad_value = false;
  bool bad_reward = false, bad_repeat = false;
  for (std::size_t k = 0; k <= last; ++k) {
    const Transition& tr = traj.transitions[k];
    if (tr.done && k != last) early_done = true;
    if (tr.t != static_cast<int>(k)) bad_t = true;
    if (!(tr.mu_prob > 0.0 && tr.mu_prob <= 1.0)) bad_mu = true;
    if (tr.action < 0 || tr.action >= m) bad_action = true;
    if (tr.state.size() != d || tr.next_state.size() != d) bad_dim = true;
    if (!detail::finite_all(tr.state) || !detail::finite_all(tr.next_state)) bad_value = true;
    if (!std::isfinite(tr.reward)) bad_reward = true;
    if (tr.repeat_count < 0) bad_repeat = true;
    if (tr.state.size() == d && d > 0) {
      const double frac = tr.state.values.back();
      if (!(frac >= 0.0 && frac <= 1.0)) bad_value = true;
    }
  }
  if (early_done) out.emplace_back("done before final step");
  if (!traj.transitions[last].done) out.emplace_back("final transition not done");
  if (bad_t) out.emplace_back("step index mismatch");
  if (bad_mu) out.emplace_back("mu_prob out of (0,1]");
  if (bad_action) out.emplace_back("action out of range");
  if (bad_dim) out.emplace_back("state dimension mismatch");
  if (bad_value) out.emplace_back("state features not finite or step fraction outside [0,1]");
  if (bad_reward) out.emplace_back("reward not finite");
  if (bad_repeat) out.emplace_back("repeat_count negative");
  return out;
}

// Canonical JSON. Field names follow the data model exactly.

inline void to_json(json& j, const StateFeatures& f) { j = json{{"values", f.values}}; }
inline void from_json(const json& j, StateFeatures& f) { j.at("values").get_to(f.values); }

inline void to_json(json& j, const Transition& tr) {
  j = json{{"t", tr.t},
           {"state", tr.state},
           {"action", tr.action},
           {"reward", tr.reward},
           {"mu_prob", tr.mu_prob},
           {"next_state", tr.next_state},
           {"done", tr.done},
           {"invalid", tr.invalid},
           {"repeat_count", tr.repeat_count}};
}

inline void from_json(const json& j, Transition& tr) {
  j.at("t").get_to(tr.t);
  j.at("state").get_to(tr.state);
  j.at("action").get_to(tr.action);
  j.at("reward").get_to(tr.reward);
  j.at("mu_prob").get_to(tr.mu_prob);
  j.at("next_state").get_to(tr.next_state);
  j.at("done").get_to(tr.done);
  j.at("invalid").get_to(tr.invalid);
  j.at("repeat_count").get_to(tr.repeat_count);
}

inline void to_json(json& j, const Trajectory& t) {
  j = json{{"id", t.id},
           {"task_id", t.task_id},
           {"transitions", t.transitions},
           {"terminal_reward", t.terminal_reward},
           {"policy_version", t.policy_version},
           {"worker_id", t.worker_id},
           {"wall_ms", t.wall_ms},
           {"priority", t.priority}};
}

inline void from_json(const json& j, Trajectory& t) {
  j.at("id").get_to(t.id);
  j.at("task_id").get_to(t.task_id);
  j.at("transitions").get_to(t.transitions);
  j.at("terminal_reward").get_to(t.terminal_reward);
  j.at("policy_version").get_to(t.policy_version);
  j.at("worker_id").get_to(t.worker_id);
  j.at("wall_ms").get_to(t.wall_ms);
  t.priority = j.value("priority", 0.0);
}

inline void to_json(json& j, const PolicySnapshot& s) {
  j = json{{"version", s.version}, {"params", s.params}, {"shape_tag", s.shape_tag}, {"checksum", s.checksum}};
}

inline void from_json(const json& j, PolicySnapshot& s) {
  j.at("version").get_to(s.version);
  j.at("params").get_to(s.params);
  j.at("shape_tag").get_to(s.shape_tag);
  j.at("checksum").get_to(s.checksum);
  if (params_checksum(s.params) != s.checksum) throw IntegrityError("policy snapshot checksum mismatch");
}

}  // namespace distrl
