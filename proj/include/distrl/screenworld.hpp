#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <queue>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "distrl/core.hpp"
#include "distrl/errors.hpp"
#include "distrl/rng.hpp"

namespace distrl {

/// Directed screen graph. Actions 0..m-3 are tap slots, m-2 is BACK, m-1 is HOME.
struct ScreenGraph {
  int n_screens = 0;
  int m = 0;
  int home_screen = 0;
  std::vector<int> edges;  // n_screens * m, -1 where the action has no effect
  std::vector<std::string> action_names;

  int back_action() const noexcept { return m - 2; }
  int home_action() const noexcept { return m - 1; }
  int tap_slots() const noexcept { return m - 2; }

  int dest(int screen, ActionId a) const { return edges[static_cast<std::size_t>(screen) * m + a]; }
  bool has_edge(int screen, ActionId a) const { return dest(screen, a) >= 0; }
  int& at(int screen, ActionId a) { return edges[static_cast<std::size_t>(screen) * m + a]; }

  bool operator==(const ScreenGraph& o) const {
    return n_screens == o.n_screens && m == o.m && home_screen == o.home_screen && edges == o.edges;
  }
};

struct Task {
  int task_id = 0;
  int start_screen = 0;
  int goal_screen = 0;
  int horizon = 15;

  bool operator==(const Task&) const = default;
};

struct EnvConfig {
  std::uint64_t seed = 0;
  int latency_ms_min = 1;
  int latency_ms_max = 100;
  double c_rep = 0.1;
  double c_inv = 0.5;
  bool live = false;             // real sleeps instead of a virtual clock
  double evaluator_noise = 0.0;  // probability of flipping the verdict
};

/// Graph plus task set; the content of screenworld.json.
struct World {
  ScreenGraph graph;
  std::vector<Task> tasks;

  std::size_t feature_dim() const noexcept {
    return static_cast<std::size_t>(graph.n_screens) + tasks.size() + 1;
  }
  int task_index(int task_id) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].task_id == task_id) return static_cast<int>(i);
    throw std::invalid_argument("unknown task_id " + std::to_string(task_id));
  }
  const Task& task(int task_id) const { return tasks[static_cast<std::size_t>(task_index(task_id))]; }

  bool operator==(const World&) const = default;
};

inline std::vector<std::string> default_action_names(int m) {
  std::vector<std::string> names;
  for (int a = 0; a < m - 2; ++a) names.push_back("TAP_" + std::to_string(a));
  names.emplace_back("BACK");
  names.emplace_back("HOME");
  return names;
}

/// Random recursive tree rooted at home (tap edges), BACK to the tree parent,
/// HOME everywhere, plus n/2 extra random tap edges.
inline ScreenGraph generate_graph(int n_screens, int m, std::uint64_t seed) {
  if (n_screens < 2) throw std::invalid_argument("generate_graph: n_screens must be >= 2");
  if (m < 4) throw std::invalid_argument("generate_graph: m must be >= 4");
  Rng rng(seed);
  ScreenGraph g;
  g.n_screens = n_screens;
  g.m = m;
  g.home_screen = 0;
  g.edges.assign(static_cast<std::size_t>(n_screens) * m, -1);
  g.action_names = default_action_names(m);

  auto free_slots = [&](int s) {
    std::vector<int> out;
    for (int a = 0; a < g.tap_slots(); ++a)
      if (!g.has_edge(s, a)) out.push_back(a);
    return out;
  };

  std::vector<int> parent(n_screens, 0);
  for (int s = 1; s < n_screens; ++s) {
    int p = static_cast<int>(rng.below(static_cast<std::uint64_t>(s)));
    auto slots = free_slots(p);
    for (int probe = 1; slots.empty() && probe <= s; ++probe) {
      p = (p + 1) % s;
      slots = free_slots(p);
    }
    const int slot = slots[rng.below(slots.size())];
    g.at(p, slot) = s;
    parent[s] = p;
  }
  for (int s = 0; s < n_screens; ++s) {
    g.at(s, g.back_action()) = parent[s];
    g.at(s, g.home_action()) = g.home_screen;
  }
  const int extra = n_screens / 2;
  for (int i = 0; i < extra; ++i) {
    const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_screens)));
    auto slots = free_slots(s);
    if (slots.empty()) continue;
    const int slot = slots[rng.below(slots.size())];
    int dst = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_screens - 1)));
    if (dst >= s) ++dst;
    g.at(s, slot) = dst;
  }
  return g;
}

/// BFS distances from `from`; -1 marks unreachable screens.
inline std::vector<int> shortest_distances(const ScreenGraph& g, int from) {
  std::vector<int> dist(g.n_screens, -1);
  std::queue<int> q;
  dist[from] = 0;
  q.push(from);
  while (!q.empty()) {
    const int s = q.front();
    q.pop();
    for (int a = 0; a < g.m; ++a) {
      const int d = g.dest(s, a);
      if (d >= 0 && dist[d] < 0) {
        dist[d] = dist[s] + 1;
        q.push(d);
      }
    }
  }
  return dist;
}

inline void check_graph(const ScreenGraph& g) {
  if (g.n_screens < 1 || g.m < 4) throw std::invalid_argument("graph dimensions too small");
  if (g.edges.size() != static_cast<std::size_t>(g.n_screens) * g.m) throw std::invalid_argument("edge table size mismatch");
  if (g.home_screen < 0 || g.home_screen >= g.n_screens) throw std::invalid_argument("home_screen out of range");
  for (int s = 0; s < g.n_screens; ++s) {
    for (int a = 0; a < g.m; ++a)
      if (g.dest(s, a) >= g.n_screens || g.dest(s, a) < -1) throw std::invalid_argument("edge endpoint out of range");
    if (!g.has_edge(s, g.back_action())) throw std::invalid_argument("BACK undefined on screen " + std::to_string(s));
    if (g.dest(s, g.home_action()) != g.home_screen) throw std::invalid_argument("HOME must map to home_screen");
  }
}

inline void check_task(const ScreenGraph& g, const Task& t) {
  if (t.start_screen < 0 || t.start_screen >= g.n_screens || t.goal_screen < 0 || t.goal_screen >= g.n_screens)
    throw std::invalid_argument("task screens out of range");
  const int d = shortest_distances(g, t.start_screen)[t.goal_screen];
  if (d < 0) throw std::invalid_argument("task goal unreachable from start");
  if (t.horizon < d) throw std::invalid_argument("task horizon shorter than shortest path");
}

/// Tasks with goals at least `min_distance` taps away when the graph allows it.
inline std::vector<Task> generate_tasks(const ScreenGraph& g, int n_tasks, int horizon, std::uint64_t seed,
                                        int min_distance = 3) {
  if (n_tasks < 1) throw std::invalid_argument("generate_tasks: need at least one task");
  Rng rng = Rng::stream(seed, 0x7A5C);
  std::vector<Task> tasks;
  for (int i = 0; i < n_tasks; ++i) {
    Task t;
    t.task_id = i;
    t.horizon = horizon;
    for (int want = min_distance; want >= 1; --want) {
      bool found = false;
      for (int attempt = 0; attempt < 64 && !found; ++attempt) {
        const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(g.n_screens)));
        const auto dist = shortest_distances(g, start);
        std::vector<int> goals;
        for (int s = 0; s < g.n_screens; ++s)
          if (dist[s] >= want && dist[s] <= horizon) goals.push_back(s);
        if (goals.empty()) continue;
        t.start_screen = start;
        t.goal_screen = goals[rng.below(goals.size())];
        found = true;
      }
      if (found) break;
    }
    check_task(g, t);
    tasks.push_back(t);
  }
  return tasks;
}

/// Rule-based success verdict: 1 iff the current screen is the goal.
inline int evaluate(int screen, const Task& task) noexcept { return screen == task.goal_screen ? 1 : 0; }

class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual int evaluate(int screen, const Task& task) = 0;
};

class RuleEvaluator final : public Evaluator {
 public:
  int evaluate(int screen, const Task& task) override { return distrl::evaluate(screen, task); }
};

/// Flips the rule verdict with probability p; models an imperfect judge.
class NoisyEvaluator final : public Evaluator {
 public:
  NoisyEvaluator(double p, std::uint64_t seed) : p_(p), rng_(seed) {}
  int evaluate(int screen, const Task& task) override {
    const int v = distrl::evaluate(screen, task);
    return rng_.uniform() < p_ ? 1 - v : v;
  }

 private:
  double p_;
  Rng rng_;
};

inline StateFeatures encode_features(const World& w, int screen, int task_index, int t, int horizon) {
  StateFeatures f;
  f.values.assign(w.feature_dim(), 0.0);
  f.values[static_cast<std::size_t>(screen)] = 1.0;
  f.values[static_cast<std::size_t>(w.graph.n_screens + task_index)] = 1.0;
  const int clamped = std::min(t, horizon);
  f.values.back() = horizon > 0 ? static_cast<double>(clamped) / horizon : 0.0;
  return f;
}

struct StepResult {
  StateFeatures next;
  double penalty = 0.0;
  bool done = false;
  bool invalid = false;
  int repeat_count = 0;
  int verdict = 0;  // evaluator output on the new screen
  int latency_ms = 0;
};

/// One environment instance; single-user.
class ScreenWorld {
 public:
  ScreenWorld(std::shared_ptr<const World> world, EnvConfig cfg, std::unique_ptr<Evaluator> evaluator = nullptr)
      : world_(std::move(world)), cfg_(cfg), rng_(Rng::stream(cfg.seed, 0xE4A)), evaluator_(std::move(evaluator)) {
    if (!world_) throw std::invalid_argument("ScreenWorld: null world");
    if (cfg_.latency_ms_min > cfg_.latency_ms_max || cfg_.latency_ms_min < 0)
      throw std::invalid_argument("ScreenWorld: latency_ms_min must be <= latency_ms_max");
    if (!evaluator_) {
      if (cfg_.evaluator_noise > 0.0)
        evaluator_ = std::make_unique<NoisyEvaluator>(cfg_.evaluator_noise, cfg_.seed ^ 0xE7A1);
      else
        evaluator_ = std::make_unique<RuleEvaluator>();
    }
  }

  const World& world() const noexcept { return *world_; }
  const EnvConfig& config() const noexcept { return cfg_; }
  std::size_t feature_dim() const noexcept { return world_->feature_dim(); }
  int action_count() const noexcept { return world_->graph.m; }

  /// Snapshot restore: start screen, step 0, repetition history cleared.
  StateFeatures reset(int task_id) {
    task_index_ = world_->task_index(task_id);
    const Task& task = current_task();
    screen_ = task.start_screen;
    t_ = 0;
    prev_action_ = -1;
    repeat_ = 0;
    done_ = evaluator_->evaluate(screen_, task) == 1;
    active_ = true;
    return features();
  }

  StepResult step(ActionId action) {
    if (!active_) throw StateError("step before reset");
    if (done_) throw StateError("step after done");
    const ScreenGraph& g = world_->graph;
    if (action < 0 || action >= g.m) throw std::invalid_argument("action out of range");
    const Task& task = current_task();

    StepResult r;
    const int dst = g.dest(screen_, action);
    r.invalid = dst < 0;
    if (!r.invalid) screen_ = dst;
    repeat_ = (action == prev_action_) ? repeat_ + 1 : 0;
    prev_action_ = action;
    r.repeat_count = repeat_;
    r.penalty = -(r.invalid ? cfg_.c_inv : 0.0) - cfg_.c_rep * repeat_;
    r.verdict = evaluator_->evaluate(screen_, task);
    r.done = r.verdict == 1 || t_ == task.horizon;
    ++t_;
    done_ = r.done;
    r.latency_ms = static_cast<int>(rng_.between(cfg_.latency_ms_min, cfg_.latency_ms_max));
    elapsed_ms_ += r.latency_ms;
    if (cfg_.live && r.latency_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(r.latency_ms));
    r.next = features();
    return r;
  }

  int evaluate() { return evaluator_->evaluate(screen_, current_task()); }

  std::vector<bool> action_mask(int screen) const {
    const ScreenGraph& g = world_->graph;
    if (screen < 0 || screen >= g.n_screens) throw std::invalid_argument("screen out of range");
    std::vector<bool> mask(g.m);
    for (int a = 0; a < g.m; ++a) mask[a] = g.has_edge(screen, a);
    return mask;
  }
  std::vector<bool> action_mask() const { return action_mask(screen_); }

  StateFeatures features() const { return encode_features(*world_, screen_, task_index_, t_, current_task().horizon); }

  int screen() const noexcept { return screen_; }
  int step_index() const noexcept { return t_; }
  bool done() const noexcept { return done_; }
  const Task& current_task() const { return world_->tasks[static_cast<std::size_t>(task_index_)]; }
  int task_index() const noexcept { return task_index_; }
  /// Total simulated latency so far (virtual or slept).
  std::int64_t elapsed_ms() const noexcept { return elapsed_ms_; }

 private:
  std::shared_ptr<const World> world_;
  EnvConfig cfg_;
  Rng rng_;
  std::unique_ptr<Evaluator> evaluator_;
  int task_index_ = 0;
  int screen_ = 0;
  int t_ = 0;
  int prev_action_ = -1;
  int repeat_ = 0;
  bool done_ = false;
  bool active_ = false;
  std::int64_t elapsed_ms_ = 0;
};

/// Per-screen action distribution (n_screens rows of m probabilities).
using PolicyTable = std::vector<std::vector<double>>;

inline void check_policy_table(const ScreenGraph& g, const PolicyTable& pi) {
  if (static_cast<int>(pi.size()) != g.n_screens) throw std::invalid_argument("policy table needs one row per screen");
  for (const auto& row : pi) {
    if (static_cast<int>(row.size()) != g.m) throw std::invalid_argument("policy row length != m");
    double sum = 0.0;
    for (double p : row) {
      if (!(p >= 0.0)) throw std::invalid_argument("policy row has negative entry");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("policy row does not sum to 1");
  }
}

/// Exact V^pi over screens for the goal-absorbing MDP:
///   V(s) = sum_a pi(a|s) [ -c_inv*[invalid] + gamma * (s' == goal ? 1 : V(s')) ],  V(goal) = 0.
/// The repetition penalty depends on action history, not on the screen, so it
/// is not part of this screen-level model.
inline std::vector<double> oracle_values(const World& w, const Task& task, double gamma, const PolicyTable& pi,
                                         double c_inv = 0.0) {
  const ScreenGraph& g = w.graph;
  check_policy_table(g, pi);
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in [0,1]");
  std::vector<double> v(g.n_screens, 0.0), next(g.n_screens, 0.0);
  for (int iter = 0; iter < 1'000'000; ++iter) {
    double residual = 0.0;
    for (int s = 0; s < g.n_screens; ++s) {
      if (s == task.goal_screen) {
        next[s] = 0.0;
        continue;
      }
      double acc = 0.0;
      for (int a = 0; a < g.m; ++a) {
        const double p = pi[s][a];
        if (p == 0.0) continue;
        const int d = g.dest(s, a);
        const int s2 = d < 0 ? s : d;
        const double pen = d < 0 ? -c_inv : 0.0;
        acc += p * (pen + gamma * (s2 == task.goal_screen ? 1.0 : v[s2]));
      }
      next[s] = acc;
      residual = std::max(residual, std::abs(acc - v[s]));
    }
    v.swap(next);
    if (residual < 1e-10) return v;
  }
  throw std::runtime_error("oracle_values: policy evaluation did not converge");
}

/// Action distribution as a function of (screen, step index).
using StepPolicy = std::function<std::vector<double>(int screen, int t)>;

/// Exact probability that `task` succeeds within its horizon (t = 0..H) under
/// `policy`, by backward iteration of the absorbing chain.
inline double success_probability(const World& w, const Task& task, const StepPolicy& policy) {
  const ScreenGraph& g = w.graph;
  if (task.start_screen == task.goal_screen) return 1.0;
  std::vector<double> p_next(g.n_screens, 0.0), p_cur(g.n_screens, 0.0);
  for (int t = task.horizon; t >= 0; --t) {
    for (int s = 0; s < g.n_screens; ++s) {
      if (s == task.goal_screen) {
        p_cur[s] = 1.0;
        continue;
      }
      const auto probs = policy(s, t);
      double acc = 0.0;
      for (int a = 0; a < g.m; ++a) {
        const int d = g.dest(s, a);
        const int s2 = d < 0 ? s : d;
        acc += probs[a] * (s2 == task.goal_screen ? 1.0 : p_next[s2]);
      }
      p_cur[s] = acc;
    }
    p_next.swap(p_cur);
  }
  return p_next[task.start_screen];
}

inline void to_json(json& j, const Task& t) {
  j = json{{"task_id", t.task_id}, {"start_screen", t.start_screen}, {"goal_screen", t.goal_screen}, {"horizon", t.horizon}};
}

inline void from_json(const json& j, Task& t) {
  j.at("task_id").get_to(t.task_id);
  j.at("start_screen").get_to(t.start_screen);
  j.at("goal_screen").get_to(t.goal_screen);
  j.at("horizon").get_to(t.horizon);
}

inline json world_to_json(const World& w) {
  json edges = json::array();
  const ScreenGraph& g = w.graph;
  for (int s = 0; s < g.n_screens; ++s)
    for (int a = 0; a < g.m; ++a)
      if (g.has_edge(s, a)) edges.push_back(json::array({s, a, g.dest(s, a)}));
  return json{{"n_screens", g.n_screens}, {"m", g.m}, {"home_screen", g.home_screen}, {"edges", edges}, {"tasks", w.tasks}};
}

/// Parses and validates a screenworld.json document.
inline World world_from_json(const json& j) {
  try {
    World w;
    ScreenGraph& g = w.graph;
    j.at("n_screens").get_to(g.n_screens);
    j.at("m").get_to(g.m);
    g.home_screen = j.value("home_screen", 0);
    if (g.n_screens < 1 || g.m < 4) throw FormatError("n_screens/m out of range");
    g.edges.assign(static_cast<std::size_t>(g.n_screens) * g.m, -1);
    g.action_names = default_action_names(g.m);
    for (const auto& e : j.at("edges")) {
      const int s = e.at(0).get<int>(), a = e.at(1).get<int>(), d = e.at(2).get<int>();
      if (s < 0 || s >= g.n_screens || a < 0 || a >= g.m || d < 0 || d >= g.n_screens)
        throw FormatError("edge out of range");
      g.at(s, a) = d;
    }
    check_graph(g);
    j.at("tasks").get_to(w.tasks);
    for (const auto& t : w.tasks) check_task(g, t);
    return w;
  } catch (const json::exception& e) {
    throw FormatError(std::string("screenworld: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("screenworld: ") + e.what());
  }
}

inline World make_world(int n_screens, int m, int n_tasks, int horizon, std::uint64_t seed, int min_distance = 3) {
  World w;
  w.graph = generate_graph(n_screens, m, seed);
  w.tasks = generate_tasks(w.graph, n_tasks, horizon, seed, min_distance);
  return w;
}

inline World load_world(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("screenworld: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(std::string("screenworld: ") + e.what());
  }
  return world_from_json(j);
}

inline void save_world(const std::string& path, const World& w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << world_to_json(w).dump(2) << '\n';
}

}  // namespace distrl
