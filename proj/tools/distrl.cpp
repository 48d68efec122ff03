#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "distrl/bench.hpp"
#include "distrl/config.hpp"
#include "distrl/host.hpp"
#include "distrl/inspect.hpp"
#include "distrl/learner.hpp"
#include "distrl/sim.hpp"
#include "distrl/worker.hpp"

#ifndef DISTRL_BUILD_TAG
#define DISTRL_BUILD_TAG "unknown"
#endif

namespace fs = std::filesystem;
using namespace distrl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

/// Errors the operator can fix by changing arguments or files.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(p.string() + ": " + e.what());
  }
}

std::vector<int> parse_task_list(const std::string& text, const World& w) {
  if (text == "all") return all_task_ids(w);
  std::vector<int> ids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int id = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      w.task_index(id);
      ids.push_back(id);
    } catch (const std::exception&) {
      throw UsageError("invalid task id '" + item + "'");
    }
  }
  return ids;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::string out;
  std::string warmup;
  int loopback_workers = 0;
  bool loopback = false;
  std::string listen;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  try {
    cfg = load_config(a.config);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const int loopback_workers = a.loopback_workers > 0 ? a.loopback_workers : a.loopback ? cfg.transport.workers : 0;
  World world_value;
  try {
    world_value = build_world(cfg.env);
  } catch (const std::exception& e) {
    throw UsageError(std::string("env: ") + e.what());
  }
  auto world = std::make_shared<const World>(std::move(world_value));
  const int d = static_cast<int>(world->feature_dim());
  const int m = world->graph.m;

  const fs::path out(a.out);
  fs::create_directories(out);
  const fs::path metrics_path = out / "metrics.jsonl", params_path = out / "params.json",
                 buffer_path = out / "buffer.jsonl", world_path = out / "screenworld.json",
                 summary_path = out / "summary.json";
  save_world(world_path.string(), *world);

  const json config_json = config_to_json(cfg);
  const std::string started = utc_now();
  write_json_file(out / "manifest.json",
                  json{{"config", config_json},
                       {"config_path", fs::absolute(a.config).string()},
                       {"build", DISTRL_BUILD_TAG},
                       {"started_at", started},
                       {"mode", loopback_workers > 0 ? "loopback" : "tcp"},
                       {"loopback_workers", loopback_workers},
                       {"warmup", a.warmup},
                       {"outputs",
                        {{"metrics", metrics_path.string()},
                         {"params", params_path.string()},
                         {"buffer", buffer_path.string()},
                         {"env", world_path.string()},
                         {"summary", summary_path.string()}}}});

  TrajectoryQueue queue(cfg.learner.queue_capacity);
  Learner learner(cfg.learner, d, m, &queue);
  if (!a.warmup.empty()) {
    try {
      const auto n = learner.load_warmup(a.warmup);
      std::cout << "warmup: loaded " << n << " trajectories\n";
    } catch (const FormatError& e) {
      throw UsageError(std::string("warmup: ") + e.what());
    }
  }

  MetricsWriter metrics(metrics_path.string(), json{{"config", config_json}, {"build", DISTRL_BUILD_TAG}});
  double last_eval = -1.0;
  auto on_metrics = [&](const StepMetrics& s) {
    metrics.write(s);
    if (s.eval_success_rate) last_eval = *s.eval_success_rate;
  };

  json summary;
  const auto t0 = std::chrono::steady_clock::now();
  if (loopback_workers > 0) {
    SimConfig sc = cfg.sim_config();
    sc.workers = loopback_workers;
    const auto r = run_training_sim(learner, world, sc, on_metrics);
    summary = json{{"mode", "loopback"},
                   {"collected", r.collected},
                   {"ingested", r.ingested},
                   {"virtual_ms", r.virtual_ms}};
  } else {
    install_signal_handlers();
    HostServer server(queue_sink(queue, static_cast<std::size_t>(d), m));
    const Address addr = parse_address(a.listen.empty() ? cfg.transport.addr : a.listen);
    server.listen(addr);
    std::cout << "listening on " << addr.host << ":" << server.port() << '\n';
    HostRunOptions opt;
    opt.stop = &g_stop;
    opt.world = world;
    opt.env = cfg.env.runtime;
    opt.eval_every = cfg.eval_every;
    opt.eval_episodes = cfg.eval_episodes;
    const auto r = run_host(learner, server, opt, on_metrics, &queue);
    server.stop();
    summary = json{{"mode", "tcp"}, {"interrupted", r.interrupted}};
  }
  const double wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double final_eval = greedy_success_rate(world, learner.policy(), cfg.env.runtime, cfg.eval_episodes);

  write_json_file(params_path, learner.params_json());
  {
    std::ofstream buf(buffer_path, std::ios::trunc);
    learner.buffer().dump(buf);
  }
  summary.update(json{{"steps", learner.steps()},
                      {"updates", learner.updates()},
                      {"skipped_steps", learner.skipped_steps()},
                      {"policy_version", learner.snapshot().version},
                      {"traj_total", learner.traj_total()},
                      {"buffer_count", learner.buffer().count()},
                      {"filtered", learner.filtered()},
                      {"queue_drops", queue.drops()},
                      {"last_periodic_eval", last_eval < 0 ? json(nullptr) : json(last_eval)},
                      {"final_greedy_success", final_eval},
                      {"wall_seconds", wall_s},
                      {"started_at", started},
                      {"finished_at", utc_now()}});
  write_json_file(summary_path, summary);

  std::cout << "steps            " << learner.steps() << '\n'
            << "updates          " << learner.updates() << '\n'
            << "policy_version   " << learner.snapshot().version << '\n'
            << "trajectories     " << learner.traj_total() << '\n'
            << "greedy_success   " << std::fixed << std::setprecision(3) << final_eval << '\n'
            << "outputs          " << out.string() << '\n';
  return kExitOk;
}

// ---- worker ----

struct WorkerArgs {
  std::string host;
  int envs = 1;
  std::uint64_t seed = 0;
  std::string id = "worker-0";
  std::string env_file;
  std::string config;
  int batch_flush = 1;
  bool masked = false;
};

int cmd_worker(const WorkerArgs& a) {
  EnvConfig env;
  std::shared_ptr<const World> world;
  int batch_flush = a.batch_flush;
  if (!a.config.empty()) {
    RunConfig cfg;
    try {
      cfg = load_config(a.config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    env = cfg.env.runtime;
    if (a.env_file.empty()) world = std::make_shared<const World>(build_world(cfg.env));
    if (batch_flush == 1) batch_flush = cfg.transport.batch_flush;
  }
  if (!a.env_file.empty()) {
    try {
      world = std::make_shared<const World>(load_world(a.env_file));
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  if (!world) throw UsageError("worker needs --env FILE or --config FILE to know the environment");
  env.live = true;

  WorkerConfig wc;
  wc.worker_id = a.id;
  wc.envs = a.envs;
  wc.host = a.host;
  wc.seed = a.seed;
  wc.env = env;
  wc.batch_flush = batch_flush;
  wc.masked_sampling = a.masked;
  try {
    wc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const Address addr = parse_address(a.host);
  install_signal_handlers();
  WorkerRuntime rt(wc, world, [addr]() -> std::shared_ptr<Connection> {
    try {
      return tcp_connect(addr);
    } catch (const std::exception&) {
      return nullptr;
    }
  });
  std::cout << "worker " << a.id << " connecting to " << addr.host << ":" << addr.port << " with " << a.envs
            << " env(s)\n";
  rt.start();
  std::thread watcher([&] {
    while (!g_stop && !rt.shutdown_received()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    if (g_stop) rt.stop();
  });
  rt.wait();
  g_stop = true;
  watcher.join();
  std::cout << "collected " << rt.collected() << " shipped " << rt.shipped() << " dropped " << rt.outbox_drops()
            << " env_faults " << rt.env_faults() << " reconnects " << rt.reconnects() << " policy_version "
            << rt.policy_version() << '\n';
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  std::string policy;
  std::string env;
  std::string tasks = "all";
  int episodes = 10;
  bool greedy = false;
  std::string csv;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  if (a.episodes < 0) throw UsageError("--episodes must be >= 0");
  World w;
  try {
    w = load_world(a.env);
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
  auto world = std::make_shared<const World>(std::move(w));
  PolicyParams policy;
  try {
    policy = policy_from_params_json(read_json_file(a.policy));
  } catch (const UsageError&) {
    throw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("policy: ") + e.what());
  }
  if (policy.d != static_cast<int>(world->feature_dim()) || policy.m != world->graph.m)
    throw UsageError("policy shape " + policy.shape().str() + " does not match environment (d=" +
                     std::to_string(world->feature_dim()) + ", m=" + std::to_string(world->graph.m) + ")");
  const auto ids = parse_task_list(a.tasks, *world);
  EnvConfig ec;
  ec.seed = a.seed;

  std::vector<EvalRow> rows;
  if (a.episodes > 0) {
    if (a.greedy) {
      rows = evaluate_policy(world, policy, ec, ids, a.episodes);
    } else {
      ScreenWorld env(world, ec);
      Rng rng(a.seed);
      const LoadedPolicy lp{0, policy};
      for (int id : ids) {
        EvalRow row{id, 0, 0};
        for (int e = 0; e < a.episodes; ++e) {
          ++row.episodes;
          const auto t = collect_trajectory(lp, env, id, rng);
          if (t.transitions.empty() || t.terminal_reward > 0.0) ++row.successes;
        }
        rows.push_back(row);
      }
    }
  }

  const std::string csv_path = a.csv.empty() ? "eval.csv" : a.csv;
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  csv << "task_id,episodes,successes,success_rate\n";
  std::cout << std::left << std::setw(8) << "task" << std::setw(10) << "episodes" << std::setw(10) << "successes"
            << "rate\n";
  for (const auto& r : rows) {
    csv << r.task_id << ',' << r.episodes << ',' << r.successes << ',' << r.rate() << '\n';
    csv.flush();
    std::cout << std::left << std::setw(8) << r.task_id << std::setw(10) << r.episodes << std::setw(10) << r.successes
              << std::fixed << std::setprecision(3) << r.rate() << '\n';
  }
  if (!rows.empty()) {
    csv << "mean,,," << mean_success(rows) << '\n';
    std::cout << "mean success rate " << std::fixed << std::setprecision(3) << mean_success(rows) << '\n';
  }
  return kExitOk;
}

// ---- bench ----

struct BenchArgs {
  std::vector<int> workers{1, 2, 4, 8};
  double minutes = 10.0;
  std::string config;
  std::string csv;
  bool real_clock = false;
  int ingest_ms = 5;
  int envs_per_worker = 1;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& a) {
  if (a.minutes <= 0.0) throw UsageError("--minutes must be > 0");
  for (int n : a.workers)
    if (n < 1) throw UsageError("worker counts must be >= 1");
  RunConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = load_config(a.config);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  auto world = std::make_shared<const World>(build_world(cfg.env));
  std::vector<BenchRow> rows;
  if (a.real_clock) {
    rows = bench_real_clock(world, cfg.env.runtime, a.workers, a.envs_per_worker, a.minutes, a.seed);
  } else {
    SimConfig sc = cfg.sim_config();
    sc.envs_per_worker = a.envs_per_worker;
    sc.ingest_ms = a.ingest_ms;
    sc.seed = a.seed;
    rows = bench_virtual(world, sc, a.workers, a.minutes);
  }
  std::ofstream csv;
  if (!a.csv.empty()) {
    csv.open(a.csv, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + a.csv);
  }
  std::ostream& os = a.csv.empty() ? std::cout : csv;
  os << "workers,traj_per_min,ideal_upper_bound\n";
  for (const auto& r : rows) {
    os << r.workers << ',' << std::fixed << std::setprecision(3) << r.traj_per_min << ',' << r.ideal_upper_bound
       << '\n';
    os.flush();
  }
  if (!a.csv.empty()) {
    for (const auto& r : rows)
      std::cout << "workers " << r.workers << "  traj/min " << std::fixed << std::setprecision(1) << r.traj_per_min
                << "  ideal " << r.ideal_upper_bound << "  ratio " << std::setprecision(3)
                << (r.ideal_upper_bound > 0 ? r.traj_per_min / r.ideal_upper_bound : 0.0) << '\n';
  }
  return kExitOk;
}

// ---- gen-env ----

struct GenEnvArgs {
  int screens = 8;
  int actions = 6;
  int tasks = 8;
  int horizon = 15;
  int min_distance = 3;
  std::uint64_t seed = 0;
  std::string out;
  std::string warmup_out;
  int warmup_count = 128;
};

int cmd_gen_env(const GenEnvArgs& a) {
  World w;
  try {
    w = make_world(a.screens, a.actions, a.tasks, a.horizon, a.seed, a.min_distance);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  save_world(a.out, w);
  std::cout << "wrote " << a.out << " (" << a.screens << " screens, " << a.actions << " actions, " << w.tasks.size()
            << " tasks)\n";
  if (!a.warmup_out.empty()) {
    auto world = std::make_shared<const World>(w);
    const LoadedPolicy uniform{0, PolicyParams::zeros(static_cast<int>(w.feature_dim()), w.graph.m)};
    EnvConfig ec;
    ec.seed = a.seed;
    ScreenWorld env(world, ec);
    Rng rng = Rng::stream(a.seed, 0xa11);
    std::ofstream out(a.warmup_out, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + a.warmup_out);
    std::uint64_t id = 0;
    int written = 0;
    while (written < a.warmup_count) {
      const int task = w.tasks[rng.below(w.tasks.size())].task_id;
      auto t = collect_trajectory(uniform, env, task, rng, {false, "warmup", make_trajectory_id(0, id++)});
      if (t.transitions.empty()) continue;
      out << json(t).dump() << '\n';
      ++written;
    }
    std::cout << "wrote " << written << " warmup trajectories to " << a.warmup_out << '\n';
  }
  return kExitOk;
}

// ---- inspect-buffer ----

int cmd_inspect(const std::string& dump, int bins) {
  std::ifstream in(dump);
  if (!in) throw UsageError("cannot open " + dump);
  BufferSummary s;
  try {
    s = summarize_dump(in, static_cast<std::size_t>(std::max(bins, 1)));
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
  std::cout << "count              " << s.count << '\n'
            << "successes          " << s.successes << '\n'
            << "success_fraction   " << std::fixed << std::setprecision(4) << s.success_fraction() << '\n'
            << "newest_version     " << s.newest_version << '\n'
            << "priority_checked   " << s.with_breakdown << '\n'
            << "priority_mismatch  " << s.priority_mismatches << '\n';
  if (!s.priority_hist.empty()) {
    std::cout << "priority histogram [" << s.p_min << ", " << s.p_max << "]\n";
    const double width = (s.p_max - s.p_min) / static_cast<double>(s.priority_hist.size());
    for (std::size_t k = 0; k < s.priority_hist.size(); ++k)
      std::cout << "  " << std::setw(8) << s.p_min + width * static_cast<double>(k) << "  " << s.priority_hist[k]
                << '\n';
  }
  std::cout << "version staleness\n";
  for (const auto& [lag, n] : s.staleness) std::cout << "  " << std::setw(4) << lag << "  " << n << '\n';
  return s.priority_mismatches == 0 ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed off-policy trainer for ScreenWorld agents"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run the host learner");
  t->add_option("--config", train.config, "TOML config file")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--warmup", train.warmup, "Warmup trajectories (JSON lines)");
  t->add_option("--loopback-workers", train.loopback_workers,
                "Run K in-process workers over the loopback transport on the virtual clock")
      ->check(CLI::NonNegativeNumber);
  t->add_flag("--loopback", train.loopback, "Like --loopback-workers with transport.workers from the config");
  t->add_option("--listen", train.listen, "TCP listen address host:port (default from config or DISTRL_ADDR)");

  WorkerArgs worker;
  auto* w = app.add_subcommand("worker", "Run a rollout worker against a host");
  w->add_option("--host", worker.host, "Host address host:port (default DISTRL_ADDR or 127.0.0.1:7421)");
  w->add_option("--envs", worker.envs, "Concurrent collection loops")->check(CLI::PositiveNumber);
  w->add_option("--seed", worker.seed, "Seed for task sampling and environments");
  w->add_option("--id", worker.id, "Worker id (unique per host)");
  w->add_option("--env", worker.env_file, "screenworld.json written by train or gen-env");
  w->add_option("--config", worker.config, "TOML config; its [env] section describes the environment");
  w->add_option("--batch-flush", worker.batch_flush, "Trajectories per TRAJ_BATCH")->check(CLI::PositiveNumber);
  w->add_flag("--masked", worker.masked, "Sample only valid actions");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a policy on an environment");
  e->add_option("--policy", eval.policy, "params.json written by train")->required();
  e->add_option("--env", eval.env, "screenworld.json")->required();
  e->add_option("--tasks", eval.tasks, "'all' or comma-separated task ids");
  e->add_option("--episodes", eval.episodes, "Episodes per task");
  e->add_flag("--greedy", eval.greedy, "Argmax actions instead of sampling");
  e->add_option("--csv", eval.csv, "CSV output path (default eval.csv)");
  e->add_option("--seed", eval.seed, "Environment and sampling seed");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Collection throughput versus worker count");
  b->add_option("--workers", bench.workers, "Worker counts, e.g. 1,2,4,8")->delimiter(',');
  b->add_option("--minutes", bench.minutes, "Measurement window per worker count");
  b->add_option("--config", bench.config, "TOML config for the environment");
  b->add_option("--csv", bench.csv, "CSV output path (default stdout)");
  b->add_flag("--real-clock", bench.real_clock, "Threaded workers with real sleeps instead of the virtual clock");
  b->add_option("--ingest-ms", bench.ingest_ms, "Virtual host service time per trajectory")
      ->check(CLI::NonNegativeNumber);
  b->add_option("--envs", bench.envs_per_worker, "Collection loops per worker")->check(CLI::PositiveNumber);
  b->add_option("--seed", bench.seed, "Seed");

  GenEnvArgs gen;
  auto* g = app.add_subcommand("gen-env", "Generate a ScreenWorld file");
  g->add_option("--screens", gen.screens, "Number of screens");
  g->add_option("--actions", gen.actions, "Actions per screen, including BACK and HOME");
  g->add_option("--tasks", gen.tasks, "Number of tasks");
  g->add_option("--horizon", gen.horizon, "Episode horizon");
  g->add_option("--min-distance", gen.min_distance, "Minimum shortest-path distance from start to goal");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output screenworld.json")->required();
  g->add_option("--warmup-out", gen.warmup_out, "Also write uniform-policy warmup trajectories here");
  g->add_option("--warmup-count", gen.warmup_count, "Number of warmup trajectories")->check(CLI::PositiveNumber);

  std::string dump;
  int bins = 10;
  auto* ib = app.add_subcommand("inspect-buffer", "Summarize a replay buffer dump");
  ib->add_option("--dump", dump, "buffer.jsonl written by train")->required();
  ib->add_option("--bins", bins, "Priority histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*t) return cmd_train(train);
    if (*w) return cmd_worker(worker);
    if (*e) return cmd_eval(eval);
    if (*b) return cmd_bench(bench);
    if (*g) return cmd_gen_env(gen);
    if (*ib) return cmd_inspect(dump, bins);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
