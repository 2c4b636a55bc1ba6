#pragma once

// Experiment orchestration: configs, seeded runs, the three-arm ablation,
// counterfactual reports, the repeated-sampling probe and theory checks.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "coso/checkpoint.hpp"
#include "coso/coso_rl.hpp"
#include "coso/counterfactual.hpp"
#include "coso/tabular_theory.hpp"
#include "coso/textmdp.hpp"

namespace coso {

using json = nlohmann::json;

inline constexpr int kMetricsSchemaVersion = 1;

struct WarmStartConfig {
  std::size_t steps = 0;
  std::size_t batch = 64;
  double lr = 0.05;
};

struct RunConfig {
  std::string env = "numberline";
  Arm arm = Arm::coso;
  std::vector<Arm> arms{Arm::rl, Arm::rl_h, Arm::coso};
  Hyperparams hyper;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::uint64_t total_env_steps = 200000;
  std::uint64_t eval_every = 5000;
  std::size_t eval_episodes = 100;
  std::uint64_t eval_seed = 1000003;
  double success_threshold = 0.9;
  double smoothing = 0.9;
  WarmStartConfig warm_start;
  std::string output_dir = "runs/default";
  bool save_checkpoint = true;
  bool write_artifacts = true;

  void validate() const {
    make_env(env);
    hyper.validate();
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
    if (eval_every == 0 || eval_episodes == 0) throw std::invalid_argument("config: eval cadence");
    if (!(success_threshold > 0.0 && success_threshold <= 1.0))
      throw std::invalid_argument("config: success_threshold in (0,1]");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("config: smoothing");
  }
};

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline WeightMode weight_mode_from(const std::string& s) {
  if (s == "raw") return WeightMode::raw;
  if (s == "maxnorm") return WeightMode::maxnorm;
  throw std::invalid_argument("unknown weight_mode: " + s);
}
inline std::string to_string(WeightMode m) { return m == WeightMode::raw ? "raw" : "maxnorm"; }

inline EntropyPlacement placement_from(const std::string& s) {
  if (s == "loss_bonus") return EntropyPlacement::loss_bonus;
  if (s == "reward_bonus") return EntropyPlacement::reward_bonus;
  throw std::invalid_argument("unknown placement: " + s);
}
inline std::string to_string(EntropyPlacement p) {
  return p == EntropyPlacement::loss_bonus ? "loss_bonus" : "reward_bonus";
}

inline OptimizerKind optimizer_from(const std::string& s) {
  if (s == "ppo") return OptimizerKind::ppo;
  if (s == "awr") return OptimizerKind::awr;
  throw std::invalid_argument("unknown optimizer: " + s);
}
inline std::string to_string(OptimizerKind o) { return o == OptimizerKind::ppo ? "ppo" : "awr"; }

inline AwrMode awr_mode_from(const std::string& s) {
  if (s == "exponential") return AwrMode::exponential;
  if (s == "filter") return AwrMode::filter;
  throw std::invalid_argument("unknown awr_mode: " + s);
}
inline std::string to_string(AwrMode m) { return m == AwrMode::exponential ? "exponential" : "filter"; }

}  // namespace detail

inline Hyperparams hyper_from_json(const json& j, Hyperparams h = {}) {
  using detail::read_opt;
  read_opt(j, "alpha", h.alpha);
  read_opt(j, "gamma", h.gamma);
  read_opt(j, "clip_eps", h.clip_eps);
  read_opt(j, "gae_lambda", h.gae_lambda);
  read_opt(j, "awr_beta", h.awr_beta);
  read_opt(j, "awr_threshold", h.awr_threshold);
  read_opt(j, "awr_clamp", h.awr_clamp);
  if (j.contains("awr_mode")) h.awr_mode = detail::awr_mode_from(j.at("awr_mode"));
  read_opt(j, "lr_policy", h.lr_policy);
  read_opt(j, "lr_value", h.lr_value);
  read_opt(j, "lr_scm", h.lr_scm);
  read_opt(j, "rollout_steps", h.rollout_steps);
  read_opt(j, "minibatch_size", h.minibatch_size);
  read_opt(j, "scm_steps", h.scm_steps);
  read_opt(j, "value_steps", h.value_steps);
  read_opt(j, "context", h.context);
  read_opt(j, "normalize_advantages", h.normalize_advantages);
  read_opt(j, "scm_persistent_buffer", h.scm_persistent_buffer);
  read_opt(j, "scm_buffer_capacity", h.scm_buffer_capacity);
  if (j.contains("weight_mode")) h.weight_mode = detail::weight_mode_from(j.at("weight_mode"));
  read_opt(j, "weight_floor", h.weight_floor);
  read_opt(j, "weight_eps", h.weight_eps);
  if (j.contains("placement")) h.placement = detail::placement_from(j.at("placement"));
  if (j.contains("optimizer")) h.optimizer = detail::optimizer_from(j.at("optimizer"));
  return h;
}

inline json to_json(const Hyperparams& h) {
  return json{{"alpha", h.alpha},
              {"gamma", h.gamma},
              {"clip_eps", h.clip_eps},
              {"gae_lambda", h.gae_lambda},
              {"awr_beta", h.awr_beta},
              {"awr_threshold", h.awr_threshold},
              {"awr_clamp", h.awr_clamp},
              {"awr_mode", detail::to_string(h.awr_mode)},
              {"lr_policy", h.lr_policy},
              {"lr_value", h.lr_value},
              {"lr_scm", h.lr_scm},
              {"rollout_steps", h.rollout_steps},
              {"minibatch_size", h.minibatch_size},
              {"scm_steps", h.scm_steps},
              {"value_steps", h.value_steps},
              {"context", h.context},
              {"normalize_advantages", h.normalize_advantages},
              {"scm_persistent_buffer", h.scm_persistent_buffer},
              {"scm_buffer_capacity", h.scm_buffer_capacity},
              {"weight_mode", detail::to_string(h.weight_mode)},
              {"weight_floor", h.weight_floor},
              {"weight_eps", h.weight_eps},
              {"placement", detail::to_string(h.placement)},
              {"optimizer", detail::to_string(h.optimizer)}};
}

/// Overlays the keys present in `j` onto `base`.
inline RunConfig config_from_json(const json& j, RunConfig c = {}) {
  using detail::read_opt;
  read_opt(j, "env", c.env);
  if (j.contains("arm")) c.arm = arm_from_string(j.at("arm").get<std::string>());
  if (j.contains("arms")) {
    c.arms.clear();
    for (const auto& a : j.at("arms")) c.arms.push_back(arm_from_string(a.get<std::string>()));
  }
  if (j.contains("hyper")) c.hyper = hyper_from_json(j.at("hyper"), c.hyper);
  read_opt(j, "seeds", c.seeds);
  read_opt(j, "total_env_steps", c.total_env_steps);
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "eval_episodes", c.eval_episodes);
  read_opt(j, "eval_seed", c.eval_seed);
  read_opt(j, "success_threshold", c.success_threshold);
  read_opt(j, "smoothing", c.smoothing);
  if (j.contains("warm_start")) {
    const auto& w = j.at("warm_start");
    read_opt(w, "steps", c.warm_start.steps);
    read_opt(w, "batch", c.warm_start.batch);
    read_opt(w, "lr", c.warm_start.lr);
  }
  read_opt(j, "output_dir", c.output_dir);
  read_opt(j, "save_checkpoint", c.save_checkpoint);
  read_opt(j, "write_artifacts", c.write_artifacts);
  return c;
}

inline json to_json(const RunConfig& c) {
  json arms = json::array();
  for (auto a : c.arms) arms.push_back(std::string(to_string(a)));
  return json{{"env", c.env},
              {"arm", std::string(to_string(c.arm))},
              {"arms", arms},
              {"hyper", to_json(c.hyper)},
              {"seeds", c.seeds},
              {"total_env_steps", c.total_env_steps},
              {"eval_every", c.eval_every},
              {"eval_episodes", c.eval_episodes},
              {"eval_seed", c.eval_seed},
              {"success_threshold", c.success_threshold},
              {"smoothing", c.smoothing},
              {"warm_start",
               {{"steps", c.warm_start.steps}, {"batch", c.warm_start.batch}, {"lr", c.warm_start.lr}}},
              {"output_dir", c.output_dir},
              {"save_checkpoint", c.save_checkpoint},
              {"write_artifacts", c.write_artifacts}};
}

namespace detail {

// A misspelled key would otherwise fall back to its default without notice.
inline void reject_unknown_keys(const json& given, const json& known, const std::string& where) {
  if (!given.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key)) throw std::invalid_argument(where + ": unknown key '" + key + "'");
    if (known.at(key).is_object()) reject_unknown_keys(value, known.at(key), where + "." + key);
  }
}

}  // namespace detail

/// Parses a config file (JSON with comments) and applies environment overrides:
/// COSO_OUTPUT_DIR replaces output_dir.
inline RunConfig load_config(const std::string& path) {
  const std::string text = read_text(path);
  json j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  detail::reject_unknown_keys(j, to_json(RunConfig{}), path);
  RunConfig c = config_from_json(j);
  if (const char* dir = std::getenv("COSO_OUTPUT_DIR"); dir && *dir) c.output_dir = dir;
  c.validate();
  return c;
}

/// COSO_JOBS, else hardware concurrency.
inline std::size_t parallelism() {
  if (const char* jobs = std::getenv("COSO_JOBS"); jobs && *jobs) {
    const long v = std::strtol(jobs, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(0..count-1) on up to `workers` threads.
inline void parallel_for(std::size_t count, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline json to_json(const UpdateReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"schema", kMetricsSchemaVersion},
              {"type", "update"},
              {"iteration", r.iteration},
              {"env_steps", r.env_steps},
              {"buffer_steps", r.buffer_steps},
              {"episodes", r.episodes},
              {"mean_return", num(r.mean_return)},
              {"rollout_success", num(r.rollout_success)},
              {"mean_weighted_entropy", num(r.mean_weighted_entropy)},
              {"mean_entropy", num(r.mean_entropy)},
              {"policy_loss", num(r.policy_loss)},
              {"scm_loss", num(r.scm_loss)},
              {"invalid_rate", num(r.invalid_rate)},
              {"grad_norm", num(r.grad_norm)},
              {"clip_fraction", num(r.clip_fraction)},
              {"skipped", r.skipped},
              {"events", r.events}};
}

struct EvalPoint {
  std::uint64_t env_steps = 0;
  double success_rate = 0.0;
  double mean_return = 0.0;
  double invalid_rate = 0.0;
  double mean_entropy = 0.0;
  double mean_weighted_entropy = std::numeric_limits<double>::quiet_NaN();
};

/// Greedy-decoding evaluation over a fixed seed set.
inline EvalPoint evaluate_greedy(const Agent& agent, const Environment& env, Arm arm,
                                 const Hyperparams& h, std::size_t episodes,
                                 std::uint64_t eval_seed) {
  EvalPoint p;
  std::size_t steps = 0, successes = 0, invalid = 0;
  double ret = 0.0, ent = 0.0, went = 0.0;
  const NormalizeOptions opt{h.weight_eps, h.weight_floor};
  for (std::size_t e = 0; e < episodes; ++e) {
    EnvState s = env.reset(Rng::mix(eval_seed, e));
    bool success = false;
    while (!s.done) {
      auto g = greedy_utterance(agent.policy, s.features);
      auto t = env.step_utterance(s, g.utterance);
      ent += g.entropy();
      if (arm == Arm::coso) {
        auto w = normalize_weights(
            causal_weights(agent.scm, g.utterance, env.action_class(parse(env.grammar(), g.utterance))),
            h.weight_mode, opt);
        went += weighted_entropy(g.per_token_entropy, w.effective());
      } else if (arm == Arm::rl_h) {
        went += g.entropy();
      }
      invalid += t.parse_ok ? 0 : 1;
      ret += t.reward;
      success = success || t.success;
      s = t.next_state;
      ++steps;
    }
    successes += success ? 1 : 0;
  }
  const double ne = static_cast<double>(episodes);
  const double ns = static_cast<double>(std::max<std::size_t>(1, steps));
  p.success_rate = static_cast<double>(successes) / ne;
  p.mean_return = ret / ne;
  p.invalid_rate = static_cast<double>(invalid) / ns;
  p.mean_entropy = ent / ns;
  if (arm != Arm::rl) p.mean_weighted_entropy = went / ns;
  return p;
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<EvalPoint> curve;
  std::optional<std::uint64_t> steps_to_threshold;
  double final_success = 0.0;
  std::optional<WeightHistogram> histogram;
  std::vector<UpdateReport> updates;
  AgentCheckpoint checkpoint;
};

struct RunSummary {
  RunConfig config;
  std::vector<SeedRun> seeds;
};

/// Test-only hooks forwarded to every train_iteration.
struct RunHooks {
  WeightOverride weights = WeightOverride::none;
};

inline Agent initial_agent(const RunConfig& cfg, const Environment& env, std::uint64_t seed) {
  Agent agent = Agent::create(env, cfg.hyper);
  if (cfg.warm_start.steps > 0) {
    Rng ws(Rng::mix(seed, 0xA11CE));
    format_warm_start(agent.policy, env, cfg.warm_start.steps, cfg.warm_start.batch,
                      cfg.warm_start.lr, ws);
  }
  return agent;
}

/// One seed of one arm: train to the step budget with scheduled greedy evaluation.
inline SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed, RunHooks hooks = {}) {
  auto env = make_env(cfg.env);
  Agent agent = initial_agent(cfg, *env, seed);
  Rng rng(Rng::mix(seed, 0));
  SeedRun run;
  run.seed = seed;
  std::uint64_t steps = 0, next_eval = 0, it = 0;
  RolloutBuffer last;
  auto eval_now = [&](std::uint64_t at) {
    EvalPoint p = evaluate_greedy(agent, *env, cfg.arm, cfg.hyper, cfg.eval_episodes, cfg.eval_seed);
    p.env_steps = at;
    run.curve.push_back(p);
    if (!run.steps_to_threshold && p.success_rate >= cfg.success_threshold)
      run.steps_to_threshold = at;
  };
  eval_now(0);
  next_eval = cfg.eval_every;
  while (steps < cfg.total_env_steps) {
    UpdateReport rep = train_iteration(agent, *env, cfg.hyper, cfg.arm, rng, hooks.weights, &last);
    steps += rep.buffer_steps;
    rep.iteration = it++;
    rep.env_steps = steps;
    run.updates.push_back(std::move(rep));
    while (next_eval <= std::min(steps, cfg.total_env_steps)) {
      eval_now(next_eval);
      next_eval += cfg.eval_every;
    }
  }
  run.final_success = run.curve.back().success_rate;
  if (cfg.arm == Arm::coso && !last.trajectories.empty()) {
    std::vector<CausalWeights> ws;
    for (const auto& t : last.trajectories)
      for (const auto& st : t.steps) ws.push_back(st.weights);
    run.histogram = weight_stats(ws);
  }
  run.checkpoint = AgentCheckpoint{cfg.env, std::string(to_string(cfg.arm)), agent.policy, agent.scm,
                                   agent.value.weights};
  return run;
}

namespace detail {

inline std::string csv_num(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

inline std::string curve_csv(const RunSummary& s) {
  std::ostringstream os;
  os << "seed,env_steps,success_rate,mean_return,invalid_rate,mean_entropy,mean_weighted_entropy\n";
  for (const auto& r : s.seeds)
    for (const auto& p : r.curve)
      os << r.seed << "," << p.env_steps << "," << csv_num(p.success_rate) << ","
         << csv_num(p.mean_return) << "," << csv_num(p.invalid_rate) << ","
         << csv_num(p.mean_entropy) << "," << csv_num(p.mean_weighted_entropy) << "\n";
  return os.str();
}

inline std::string seeds_csv(const RunSummary& s) {
  std::ostringstream os;
  os << "seed,steps_to_threshold,final_success,low_weight_fraction\n";
  for (const auto& r : s.seeds) {
    os << r.seed << ","
       << (r.steps_to_threshold ? std::to_string(*r.steps_to_threshold) : std::string()) << ","
       << csv_num(r.final_success) << ","
       << (r.histogram ? csv_num(r.histogram->low_fraction()) : std::string()) << "\n";
  }
  return os.str();
}

}  // namespace detail

/// Writes config copy, per-seed metrics and checkpoints, and summary CSVs.
inline void write_run_artifacts(const RunSummary& s) {
  namespace fs = std::filesystem;
  const fs::path out(s.config.output_dir);
  fs::create_directories(out);
  write_text_atomic((out / "config.json").string(), to_json(s.config).dump(2) + "\n");
  for (const auto& r : s.seeds) {
    const fs::path dir = out / ("seed_" + std::to_string(r.seed));
    fs::create_directories(dir);
    std::string lines;
    for (const auto& u : r.updates) lines += to_json(u).dump() + "\n";
    for (const auto& p : r.curve) {
      json e{{"schema", kMetricsSchemaVersion},
             {"type", "eval"},
             {"env_steps", p.env_steps},
             {"success_rate", p.success_rate},
             {"mean_return", p.mean_return},
             {"invalid_rate", p.invalid_rate},
             {"mean_entropy", p.mean_entropy},
             {"mean_weighted_entropy",
              std::isfinite(p.mean_weighted_entropy) ? json(p.mean_weighted_entropy) : json(nullptr)}};
      lines += e.dump() + "\n";
    }
    write_text_atomic((dir / "metrics.jsonl").string(), lines);
    if (s.config.save_checkpoint)
      save_checkpoint((dir / "checkpoint.txt").string(), r.checkpoint);
  }
  write_text_atomic((out / "summary.csv").string(), detail::curve_csv(s));
  write_text_atomic((out / "seeds.csv").string(), detail::seeds_csv(s));
}

inline RunSummary run_experiment(const RunConfig& cfg, RunHooks hooks = {}) {
  cfg.validate();
  RunSummary s;
  s.config = cfg;
  s.seeds.resize(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), parallelism(),
               [&](std::size_t i) { s.seeds[i] = run_seed(cfg, cfg.seeds[i], hooks); });
  if (cfg.write_artifacts) write_run_artifacts(s);
  return s;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ArmRow {
  Arm arm = Arm::rl;
  std::size_t runs = 0;
  /// Unreached thresholds count as +inf.
  double median_steps_to_threshold = 0.0;
  double min_steps_to_threshold = 0.0;
  double max_steps_to_threshold = 0.0;
  std::size_t reached = 0;
  double median_final_success = 0.0;
  double min_final_success = 0.0;
  double max_final_success = 0.0;
};

struct AblationResult {
  std::vector<ArmRow> rows;
  std::vector<RunSummary> runs;
  std::string table_csv;
  std::string curves_csv;

  const ArmRow& row(Arm a) const {
    for (const auto& r : rows)
      if (r.arm == a) return r;
    throw std::out_of_range("ablation: arm not present");
  }
  const RunSummary& run(Arm a) const {
    for (const auto& r : runs)
      if (r.config.arm == a) return r;
    throw std::out_of_range("ablation: arm not present");
  }
};

inline ArmRow summarize_arm(const RunSummary& s) {
  ArmRow row;
  row.arm = s.config.arm;
  row.runs = s.seeds.size();
  std::vector<double> steps, finals;
  for (const auto& r : s.seeds) {
    steps.push_back(r.steps_to_threshold ? static_cast<double>(*r.steps_to_threshold)
                                         : std::numeric_limits<double>::infinity());
    row.reached += r.steps_to_threshold ? 1 : 0;
    finals.push_back(r.final_success);
  }
  row.median_steps_to_threshold = median(steps);
  row.min_steps_to_threshold = *std::min_element(steps.begin(), steps.end());
  row.max_steps_to_threshold = *std::max_element(steps.begin(), steps.end());
  row.median_final_success = median(finals);
  row.min_final_success = *std::min_element(finals.begin(), finals.end());
  row.max_final_success = *std::max_element(finals.begin(), finals.end());
  return row;
}

/// Runs every arm of `cfg.arms` over `cfg.seeds`; per-arm output under output_dir/<arm>.
inline AblationResult ablation_matrix(const RunConfig& cfg, RunHooks hooks = {}) {
  cfg.validate();
  if (cfg.arms.size() < 2) throw std::invalid_argument("ablation: need at least two arms");
  if (cfg.seeds.size() < 3) throw std::invalid_argument("ablation: need at least three seeds per arm");
  AblationResult res;
  std::vector<RunConfig> cfgs;
  for (Arm a : cfg.arms) {
    RunConfig c = cfg;
    c.arm = a;
    c.output_dir = (std::filesystem::path(cfg.output_dir) / std::string(to_string(a))).string();
    cfgs.push_back(std::move(c));
  }
  const std::size_t seeds = cfg.seeds.size();
  for (const auto& c : cfgs) {
    RunSummary s;
    s.config = c;
    s.seeds.resize(seeds);
    res.runs.push_back(std::move(s));
  }
  parallel_for(cfgs.size() * seeds, parallelism(), [&](std::size_t job) {
    const std::size_t a = job / seeds, k = job % seeds;
    res.runs[a].seeds[k] = run_seed(cfgs[a], cfgs[a].seeds[k], hooks);
  });
  std::ostringstream table;
  table << "arm,runs,reached,median_steps_to_threshold,min_steps_to_threshold,max_steps_to_threshold,"
           "median_final_success,min_final_success,max_final_success\n";
  for (const auto& r : res.runs) {
    if (cfg.write_artifacts) write_run_artifacts(r);
    ArmRow row = summarize_arm(r);
    auto steps = [](double v) { return std::isfinite(v) ? detail::csv_num(v) : std::string("inf"); };
    table << to_string(row.arm) << "," << row.runs << "," << row.reached << ","
          << steps(row.median_steps_to_threshold) << "," << steps(row.min_steps_to_threshold) << ","
          << steps(row.max_steps_to_threshold) << "," << detail::csv_num(row.median_final_success)
          << "," << detail::csv_num(row.min_final_success) << ","
          << detail::csv_num(row.max_final_success) << "\n";
    res.rows.push_back(row);
  }
  res.table_csv = table.str();

  // Plot data: seed-mean success per arm at each eval step, raw and EMA-smoothed.
  std::ostringstream curves;
  curves << "# smoothing=" << detail::csv_num(cfg.smoothing) << "\n";
  curves << "env_steps";
  for (const auto& r : res.runs)
    curves << "," << to_string(r.config.arm) << "," << to_string(r.config.arm) << "_smoothed";
  curves << "\n";
  const std::size_t points = res.runs.front().seeds.front().curve.size();
  std::vector<double> ema(res.runs.size(), 0.0);
  for (std::size_t p = 0; p < points; ++p) {
    curves << res.runs.front().seeds.front().curve[p].env_steps;
    for (std::size_t a = 0; a < res.runs.size(); ++a) {
      double m = 0.0;
      for (const auto& sr : res.runs[a].seeds) m += sr.curve.at(p).success_rate;
      m /= static_cast<double>(res.runs[a].seeds.size());
      ema[a] = p == 0 ? m : cfg.smoothing * ema[a] + (1.0 - cfg.smoothing) * m;
      curves << "," << detail::csv_num(m) << "," << detail::csv_num(ema[a]);
    }
    curves << "\n";
  }
  res.curves_csv = curves.str();
  if (cfg.write_artifacts) {
    std::filesystem::create_directories(cfg.output_dir);
    write_text_atomic((std::filesystem::path(cfg.output_dir) / "ablation.csv").string(), res.table_csv);
    write_text_atomic((std::filesystem::path(cfg.output_dir) / "curves.csv").string(), res.curves_csv);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Counterfactual report

struct CfRecord {
  std::size_t episode = 0;
  std::size_t step = 0;
  Utterance tokens;
  CausalWeights weights;
  Action action;
  bool parse_ok = true;
};

struct CfReport {
  std::vector<CfRecord> records;
  WeightHistogram histogram;
  /// Share of steps whose ACTION_KIND slot holds the maximal normalized weight.
  double kind_max_fraction = 0.0;
  double action_raw_mean = 0.0;  // ACTION_KIND and ACTION_ARG slots
  double filler_raw_mean = 0.0;  // FILLER and FORMAT slots
};

enum class Decoding { sample, greedy };

inline CfReport cf_report(const AgentCheckpoint& ckpt, const Environment& env,
                          std::size_t episodes, std::uint64_t seed = 7,
                          Decoding decoding = Decoding::sample, NormalizeOptions opt = {}) {
  if (ckpt.env_id != env.id()) throw std::invalid_argument("cf_report: checkpoint/env mismatch");
  if (ckpt.policy.layout.vocab() != env.vocab().size() || ckpt.scm.length != env.utterance_length())
    throw std::invalid_argument("cf_report: checkpoint dimensions do not fit the env");
  CfReport rep;
  Rng rng(seed);
  const auto& g = env.grammar();
  const std::size_t ks = g.kind_slot();
  double act_sum = 0.0, fill_sum = 0.0;
  std::size_t act_n = 0, fill_n = 0, kind_max = 0;
  std::vector<CausalWeights> all;
  for (std::size_t e = 0; e < episodes; ++e) {
    EnvState s = env.reset(rng.next_u64());
    std::size_t step = 0;
    while (!s.done) {
      auto y = decoding == Decoding::greedy ? greedy_utterance(ckpt.policy, s.features)
                                            : sample_utterance(ckpt.policy, s.features, rng);
      auto t = env.step_utterance(s, y.utterance);
      const std::size_t cls = env.action_class(parse(g, y.utterance));
      CfRecord rec;
      rec.episode = e;
      rec.step = step++;
      rec.tokens = y.utterance;
      rec.weights = normalize_weights(causal_weights(ckpt.scm, y.utterance, cls),
                                      WeightMode::maxnorm, opt);
      rec.action = t.action;
      rec.parse_ok = t.parse_ok;
      const auto& nw = rec.weights.normalized;
      // An all-floor profile (every raw weight below eps) localizes nothing.
      if (rec.weights.raw[ks] >= opt.eps && nw[ks] >= *std::max_element(nw.begin(), nw.end()))
        ++kind_max;
      for (std::size_t i = 0; i < nw.size(); ++i) {
        const bool action_slot =
            g.roles[i] == SlotRole::action_kind || g.roles[i] == SlotRole::action_arg;
        (action_slot ? act_sum : fill_sum) += rec.weights.raw[i];
        ++(action_slot ? act_n : fill_n);
      }
      all.push_back(rec.weights);
      rep.records.push_back(std::move(rec));
      s = t.next_state;
    }
  }
  rep.histogram = weight_stats(all);
  const double steps = static_cast<double>(std::max<std::size_t>(1, rep.records.size()));
  rep.kind_max_fraction = static_cast<double>(kind_max) / steps;
  rep.action_raw_mean = act_n ? act_sum / static_cast<double>(act_n) : 0.0;
  rep.filler_raw_mean = fill_n ? fill_sum / static_cast<double>(fill_n) : 0.0;
  return rep;
}

inline std::string cf_report_jsonl(const CfReport& rep, const Environment& env) {
  std::string out;
  const auto& g = env.grammar();
  for (const auto& r : rep.records) {
    json tokens = json::array(), roles = json::array();
    for (auto t : r.tokens) tokens.push_back(env.vocab().name(t));
    for (auto role : g.roles) roles.push_back(std::string(to_string(role)));
    json j{{"type", "step"},
           {"episode", r.episode},
           {"step", r.step},
           {"tokens", tokens},
           {"roles", roles},
           {"raw", r.weights.raw},
           {"normalized", r.weights.normalized},
           {"action", to_string(r.action)},
           {"parse_ok", r.parse_ok}};
    out += j.dump() + "\n";
  }
  json h{{"type", "histogram"},
         {"edges", rep.histogram.edges},
         {"counts", rep.histogram.counts},
         {"fractions", rep.histogram.fractions},
         {"kind_max_fraction", rep.kind_max_fraction},
         {"action_raw_mean", rep.action_raw_mean},
         {"filler_raw_mean", rep.filler_raw_mean}};
  out += h.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Repeated sampling probe

struct ProbeResult {
  std::vector<std::string> actions;  // in sampling order; "INVALID" for parse errors
  std::map<std::string, std::size_t> counts;
  std::size_t invalid = 0;
  std::size_t distinct = 0;
  std::vector<Utterance> utterances;

  /// True when any of the first k samples parsed to one of `kinds`.
  bool produced_within(std::size_t k, std::initializer_list<ActionKind> kinds,
                       const Environment& env) const {
    for (std::size_t i = 0; i < std::min(k, utterances.size()); ++i) {
      auto r = parse(env.grammar(), utterances[i]);
      if (!parse_ok(r)) continue;
      for (auto kd : kinds)
        if (std::get<Action>(r).kind == kd) return true;
    }
    return false;
  }
};

inline ProbeResult repeated_sampling_probe(const PolicyParams& policy, const Environment& env,
                                           const EnvState& state, std::size_t k,
                                           std::uint64_t seed = 11) {
  if (k == 0) throw std::invalid_argument("probe: k must be >= 1");
  ProbeResult res;
  Rng rng(seed);
  std::set<std::string> distinct;
  for (std::size_t i = 0; i < k; ++i) {
    auto y = sample_utterance(policy, state.features, rng);
    auto r = parse(env.grammar(), y.utterance);
    std::string name = parse_ok(r) ? to_string(std::get<Action>(r)) : std::string("INVALID");
    if (!parse_ok(r)) ++res.invalid;
    else distinct.insert(name);
    ++res.counts[name];
    res.actions.push_back(name);
    res.utterances.push_back(std::move(y.utterance));
  }
  res.distinct = distinct.size();
  return res;
}

// ---------------------------------------------------------------------------
// Theory checks

struct TheorySpec {
  std::size_t instances = 50;
  std::size_t decomposition_instances = 100;
  std::size_t q_pairs = 100;
  std::uint64_t seed = 20240601;
  double decomposition_tol = 1e-10;
  double contraction_slack = 1e-9;
  double fixed_point_tol = 1e-8;
  double improvement_tol = 1e-8;
  double monotonicity_tol = 1e-7;
  double iteration_tol = 1e-9;
  std::size_t max_iterations = 1000;
  tabular::OperatorHooks hooks;
};

struct SuiteResult {
  std::string name;
  bool passed = true;
  double worst = 0.0;
  std::vector<std::uint64_t> failing_seeds;
  double seconds = 0.0;
  std::string detail;
};

struct TheoryReport {
  std::vector<SuiteResult> suites;
  bool passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.passed; });
  }
};

namespace detail {

struct TheoryInstance {
  tabular::TabularMdp mdp;
  std::vector<double> weights;
  double alpha = 0.0;
  tabular::TabularPolicy policy;
};

inline TheoryInstance theory_instance(std::uint64_t seed) {
  Rng rng(seed);
  TheoryInstance t;
  t.mdp = tabular::random_mdp(rng);
  t.weights = tabular::random_weights(rng, t.mdp.length);
  t.alpha = rng.uniform(0.0, 1.5);
  t.policy = tabular::TabularPolicy::random(t.mdp.states, t.mdp.tokens, t.mdp.length, rng);
  return t;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline SuiteResult theory_decomposition(const TheorySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "entropy_decomposition";
  for (std::size_t i = 0; i < spec.decomposition_instances; ++i) {
    const std::uint64_t seed = Rng::mix(spec.seed, 100000 + i);
    Rng rng(seed);
    const std::size_t m = 2 + rng.index(3);  // 2..4 non-NULL tokens
    const std::size_t n = 1 + rng.index(4);  // 1..4 positions
    const std::size_t states = 1 + rng.index(3);
    auto pi = tabular::TabularPolicy::random(states, m, n, rng, rng.uniform(0.1, 6.0));
    for (std::size_t s = 0; s < states; ++s) {
      const auto c = tabular::entropy_decomposition_check(pi, s);
      r.worst = std::max(r.worst, c.diff);
      if (!(c.diff <= spec.decomposition_tol)) {
        r.passed = false;
        r.failing_seeds.push_back(seed);
        break;
      }
    }
  }
  r.seconds = detail::seconds_since(t0);
  return r;
}

/// Empirical Lipschitz constant of T^B (vs gamma), fixed point vs direct solve, and Q bounds.
inline SuiteResult theory_contraction(const TheorySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "contraction";
  r.worst = -std::numeric_limits<double>::infinity();
  double worst_fp = 0.0;
  for (std::size_t i = 0; i < spec.instances; ++i) {
    const std::uint64_t seed = Rng::mix(spec.seed, i);
    auto inst = detail::theory_instance(seed);
    Rng rng(Rng::mix(seed, 1));
    const auto st = tabular::policy_stats(inst.mdp, inst.policy, inst.weights, inst.alpha);
    bool ok = true;
    for (std::size_t k = 0; k < spec.q_pairs; ++k) {
      tabular::QTable q1(inst.mdp.states, inst.mdp.actions), q2 = q1;
      const double scale = rng.uniform(0.1, 20.0);
      for (auto& v : q1.q) v = rng.uniform(-scale, scale);
      for (auto& v : q2.q) v = rng.uniform(-scale, scale);
      const double d = tabular::sup_distance(q1, q2);
      const double dt = tabular::sup_distance(tabular::bellman_backup(inst.mdp, q1, st, spec.hooks),
                                              tabular::bellman_backup(inst.mdp, q2, st, spec.hooks));
      const double ratio = dt / d;
      r.worst = std::max(r.worst, ratio - inst.mdp.gamma);
      if (!(ratio <= inst.mdp.gamma + spec.contraction_slack)) ok = false;
    }
    try {
      auto ev = tabular::policy_evaluation(inst.mdp, inst.policy, inst.weights, inst.alpha, 1e-12);
      auto direct = tabular::evaluate_linear_solve(inst.mdp, inst.policy, inst.weights, inst.alpha);
      const double fp = tabular::sup_distance(ev.q, direct);
      worst_fp = std::max(worst_fp, fp);
      if (!(fp <= spec.fixed_point_tol)) ok = false;
      const auto [lo, hi] = tabular::q_bounds(inst.mdp, inst.weights, inst.alpha);
      for (double v : direct.q)
        if (v < lo - 1e-9 || v > hi + 1e-9) ok = false;
    } catch (const tabular::IterationCapExceeded&) {
      ok = false;
    }
    if (!ok) {
      r.passed = false;
      r.failing_seeds.push_back(seed);
    }
  }
  r.detail = "max(Lipschitz - gamma)=" + format_double(r.worst) +
             " max|Q_iter - Q_direct|=" + format_double(worst_fp);
  r.seconds = detail::seconds_since(t0);
  return r;
}

inline SuiteResult theory_improvement(const TheorySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "improvement";
  r.worst = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < spec.instances; ++i) {
    const std::uint64_t seed = Rng::mix(spec.seed, i);
    auto inst = detail::theory_instance(seed);
    auto q = tabular::evaluate_linear_solve(inst.mdp, inst.policy, inst.weights, inst.alpha);
    auto better = tabular::soft_improve(inst.mdp, q, inst.policy, inst.weights, inst.alpha);
    auto q2 = tabular::evaluate_linear_solve(inst.mdp, better, inst.weights, inst.alpha);
    double worst = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < q.q.size(); ++k) worst = std::min(worst, q2.q[k] - q.q[k]);
    r.worst = std::min(r.worst, worst);
    if (!(worst >= -spec.improvement_tol)) {
      r.passed = false;
      r.failing_seeds.push_back(seed);
    }
  }
  r.detail = "min(Q_new - Q_old)=" + format_double(r.worst);
  r.seconds = detail::seconds_since(t0);
  return r;
}

inline SuiteResult theory_iteration(const TheorySpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r;
  r.name = "policy_iteration";
  r.worst = std::numeric_limits<double>::infinity();
  std::size_t most_iters = 0;
  for (std::size_t i = 0; i < spec.instances; ++i) {
    const std::uint64_t seed = Rng::mix(spec.seed, i);
    auto inst = detail::theory_instance(seed);
    bool ok = true;
    try {
      auto pi = tabular::policy_iteration(inst.mdp, inst.weights, inst.alpha, spec.iteration_tol,
                                          spec.max_iterations, inst.policy);
      for (double m : pi.monotonicity) r.worst = std::min(r.worst, m);
      most_iters = std::max(most_iters, pi.iterations);
      ok = pi.converged;
    } catch (const tabular::MonotonicityViolation&) {
      ok = false;
    }
    if (!ok) {
      r.passed = false;
      r.failing_seeds.push_back(seed);
    }
  }
  r.detail = "min monotonicity=" + format_double(r.worst) +
             " max iterations=" + std::to_string(most_iters);
  r.seconds = detail::seconds_since(t0);
  return r;
}

inline TheoryReport theory_check(const TheorySpec& spec = {}) {
  TheoryReport rep;
  rep.suites.push_back(theory_decomposition(spec));
  rep.suites.push_back(theory_contraction(spec));
  rep.suites.push_back(theory_improvement(spec));
  rep.suites.push_back(theory_iteration(spec));
  return rep;
}

inline std::string format_theory_report(const TheoryReport& rep) {
  std::ostringstream os;
  for (const auto& s : rep.suites) {
    os << (s.passed ? "PASS " : "FAIL ") << s.name << " worst=" << format_double(s.worst)
       << " time=" << format_double(std::round(s.seconds * 1000.0) / 1000.0) << "s";
    if (!s.detail.empty()) os << " " << s.detail;
    if (!s.failing_seeds.empty()) {
      os << " failing_seeds=";
      for (std::size_t i = 0; i < s.failing_seeds.size(); ++i)
        os << (i ? "," : "") << s.failing_seeds[i];
    }
    os << "\n";
  }
  os << (rep.passed() ? "theory-check: all suites passed\n" : "theory-check: FAILED\n");
  return os.str();
}

}  // namespace coso
