#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>

#include <toml.hpp>

#include "distrl/core.hpp"
#include "distrl/learner.hpp"
#include "distrl/screenworld.hpp"
#include "distrl/sim.hpp"

namespace distrl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvSection {
  int screens = 8;
  int actions = 6;
  int tasks = 8;
  int horizon = 15;
  std::uint64_t seed = 1;
  int min_distance = 3;
  std::string file;  // screenworld.json; overrides generation when set
  EnvConfig runtime;
};

struct TransportSection {
  std::string addr;  // host listen address; empty uses DISTRL_ADDR or the default
  int batch_flush = 1;
  int ingest_ms = 0;
  int workers = 4;  // loopback workers for single-command runs
  int envs_per_worker = 1;
};

struct RunConfig {
  EnvSection env;
  LearnerConfig learner;
  TransportSection transport;
  bool masked_sampling = false;
  int eval_every = 50;
  int eval_episodes = 1;
  int step_cost_ms = 50;
  std::uint64_t max_trajectories = 0;
  std::int64_t max_virtual_ms = 0;

  void validate() const {
    learner.validate();
    auto need = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string("config: ") + what);
    };
    need(env.screens >= 2, "env.screens must be >= 2");
    need(env.actions >= 4, "env.actions must be >= 4");
    need(env.tasks >= 1, "env.tasks must be >= 1");
    need(env.horizon >= 1, "env.horizon must be >= 1");
    need(env.min_distance >= 1, "env.min_distance must be >= 1");
    need(env.runtime.latency_ms_min >= 0 && env.runtime.latency_ms_max >= env.runtime.latency_ms_min,
         "env latency range is invalid");
    need(env.runtime.evaluator_noise >= 0.0 && env.runtime.evaluator_noise <= 1.0,
         "env.evaluator_noise must be in [0,1]");
    need(transport.batch_flush >= 1, "transport.batch_flush must be >= 1");
    need(transport.workers >= 1 && transport.envs_per_worker >= 1, "transport.workers and envs_per_worker must be >= 1");
    need(transport.ingest_ms >= 0, "transport.ingest_ms must be >= 0");
    need(eval_every >= 0, "learner.eval_every must be >= 0");
    need(eval_episodes >= 1, "learner.eval_episodes must be >= 1");
    need(step_cost_ms >= 1, "learner.step_cost_ms must be >= 1");
  }

  SimConfig sim_config() const {
    SimConfig s;
    s.workers = transport.workers;
    s.envs_per_worker = transport.envs_per_worker;
    s.env = env.runtime;
    s.seed = learner.seed;
    s.step_cost_ms = step_cost_ms;
    s.eval_every = eval_every;
    s.eval_episodes = eval_episodes;
    s.max_trajectories = max_trajectories;
    s.max_virtual_ms = max_virtual_ms;
    s.masked_sampling = masked_sampling;
    s.batch_flush = transport.batch_flush;
    s.ingest_ms = transport.ingest_ms;
    return s;
  }
};

namespace detail {

class TableReader {
 public:
  TableReader(const toml::table* t, std::string name) : t_(t), name_(std::move(name)) {}

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!t_) return;
    const toml::node* n = t_->get(key);
    if (!n) return;
    const std::string where = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = n->value<bool>();
      if (!n->is_boolean() || !v) fail(where, "expected a boolean", n);
      out = *v;
    } else if constexpr (std::is_integral_v<T>) {
      if (!n->is_integer()) fail(where, "expected an integer", n);
      const std::int64_t v = *n->value<std::int64_t>();
      if constexpr (std::is_unsigned_v<T>)
        if (v < 0) fail(where, "must be >= 0", n);
      out = static_cast<T>(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!n->is_number()) fail(where, "expected a number", n);
      out = static_cast<T>(*n->value<double>());
    } else {
      if (!n->is_string()) fail(where, "expected a string", n);
      out = *n->value<std::string>();
    }
  }

  void reject_unknown() const {
    if (!t_) return;
    for (const auto& [k, v] : *t_)
      if (!seen_.count(std::string(k.str())))
        fail(name_ + "." + std::string(k.str()), "unknown key", &v);
  }

 private:
  [[noreturn]] static void fail(const std::string& where, const char* what, const toml::node* n) {
    std::string msg = "config: " + where + ": " + what;
    if (n) msg += " (line " + std::to_string(n->source().begin.line) + ")";
    throw ConfigError(msg);
  }

  const toml::table* t_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses a TOML document. Unknown sections or keys are errors; missing keys keep defaults.
inline RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {}) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    throw ConfigError("config: " + std::string(e.description()) + " (line " +
                      std::to_string(e.source().begin.line) + ")");
  }
  static const std::set<std::string> sections{"env", "algo", "replay", "learner", "transport"};
  for (const auto& [k, v] : root) {
    if (!sections.count(std::string(k.str())))
      throw ConfigError("config: unknown section [" + std::string(k.str()) + "]");
    if (!v.is_table()) throw ConfigError("config: [" + std::string(k.str()) + "] must be a table");
  }

  RunConfig c;
  {
    detail::TableReader r(root["env"].as_table(), "env");
    r.get("screens", c.env.screens);
    r.get("actions", c.env.actions);
    r.get("tasks", c.env.tasks);
    r.get("horizon", c.env.horizon);
    r.get("seed", c.env.seed);
    r.get("min_distance", c.env.min_distance);
    r.get("file", c.env.file);
    r.get("latency_ms_min", c.env.runtime.latency_ms_min);
    r.get("latency_ms_max", c.env.runtime.latency_ms_max);
    r.get("c_rep", c.env.runtime.c_rep);
    r.get("c_inv", c.env.runtime.c_inv);
    r.get("evaluator_noise", c.env.runtime.evaluator_noise);
    r.get("live", c.env.runtime.live);
    r.reject_unknown();
    c.env.runtime.seed = c.env.seed;
    if (!c.env.file.empty() && !base_dir.empty() && std::filesystem::path(c.env.file).is_relative())
      c.env.file = (base_dir / c.env.file).string();
  }
  {
    detail::TableReader r(root["algo"].as_table(), "algo");
    r.get("gamma", c.learner.gamma);
    r.get("lambda", c.learner.lambda_retrace);
    r.get("beta", c.learner.beta);
    r.get("lambda_pen", c.learner.lambda_pen);
    r.get("rho_max", c.learner.rho_max);
    r.get("mc_propagation", c.learner.mc_propagation);
    r.get("retrace", c.learner.use_retrace);
    std::string adv = to_string(c.learner.advantage);
    r.get("advantage", adv);
    r.get("hidden", c.learner.hidden);
    r.get("value_target_weight", c.learner.value_target_weight);
    r.get("masked_sampling", c.masked_sampling);
    r.reject_unknown();
    try {
      c.learner.advantage = parse_advantage_mode(adv);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: algo.advantage: ") + e.what());
    }
  }
  {
    detail::TableReader r(root["replay"].as_table(), "replay");
    r.get("capacity", c.learner.buffer_capacity);
    r.get("alpha", c.learner.alpha);
    r.get("w1", c.learner.weights.w1);
    r.get("w2", c.learner.weights.w2);
    r.get("w3", c.learner.weights.w3);
    r.get("prioritized", c.learner.prioritized);
    r.get("refresh_every", c.learner.refresh_every);
    r.get("filter_q", c.learner.filter_q);
    r.reject_unknown();
  }
  {
    detail::TableReader r(root["learner"].as_table(), "learner");
    r.get("batch_size", c.learner.batch_size);
    r.get("publish_every", c.learner.publish_every);
    r.get("total_steps", c.learner.total_steps);
    r.get("lr_policy", c.learner.lr_policy);
    r.get("lr_value", c.learner.lr_value);
    r.get("lr_vtraj", c.learner.lr_vtraj);
    r.get("seed", c.learner.seed);
    r.get("queue_capacity", c.learner.queue_capacity);
    r.get("eval_every", c.eval_every);
    r.get("eval_episodes", c.eval_episodes);
    r.get("step_cost_ms", c.step_cost_ms);
    r.get("max_trajectories", c.max_trajectories);
    r.get("max_virtual_ms", c.max_virtual_ms);
    r.reject_unknown();
  }
  {
    detail::TableReader r(root["transport"].as_table(), "transport");
    r.get("addr", c.transport.addr);
    r.get("batch_flush", c.transport.batch_flush);
    r.get("ingest_ms", c.transport.ingest_ms);
    r.get("workers", c.transport.workers);
    r.get("envs_per_worker", c.transport.envs_per_worker);
    r.reject_unknown();
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config not found: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text, path.parent_path());
}

/// Generates or loads the ScreenWorld described by the [env] section.
inline World build_world(const EnvSection& e) {
  if (!e.file.empty()) return load_world(e.file);
  return make_world(e.screens, e.actions, e.tasks, e.horizon, e.seed, e.min_distance);
}

inline json config_to_json(const RunConfig& c) {
  json env{{"screens", c.env.screens},
           {"actions", c.env.actions},
           {"tasks", c.env.tasks},
           {"horizon", c.env.horizon},
           {"seed", c.env.seed},
           {"min_distance", c.env.min_distance},
           {"file", c.env.file},
           {"latency_ms_min", c.env.runtime.latency_ms_min},
           {"latency_ms_max", c.env.runtime.latency_ms_max},
           {"c_rep", c.env.runtime.c_rep},
           {"c_inv", c.env.runtime.c_inv},
           {"evaluator_noise", c.env.runtime.evaluator_noise},
           {"live", c.env.runtime.live}};
  json transport{{"addr", c.transport.addr},
                 {"batch_flush", c.transport.batch_flush},
                 {"ingest_ms", c.transport.ingest_ms},
                 {"workers", c.transport.workers},
                 {"envs_per_worker", c.transport.envs_per_worker}};
  return json{{"env", env},
              {"learner", c.learner},
              {"transport", transport},
              {"masked_sampling", c.masked_sampling},
              {"eval_every", c.eval_every},
              {"eval_episodes", c.eval_episodes},
              {"step_cost_ms", c.step_cost_ms},
              {"max_trajectories", c.max_trajectories},
              {"max_virtual_ms", c.max_virtual_ms}};
}

}  // namespace distrl
