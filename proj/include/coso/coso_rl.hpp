#pragma once

// Causal-weighted entropy RL: rollout, counterfactual weighting, SCM fit and
// a PPO- or AWR-style policy step, executed in that order per iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coso/counterfactual.hpp"
#include "coso/optim.hpp"
#include "coso/policy.hpp"
#include "coso/rng.hpp"
#include "coso/scm.hpp"
#include "coso/textmdp.hpp"

namespace coso {

enum class Arm { rl, rl_h, coso };
enum class OptimizerKind { ppo, awr };
enum class EntropyPlacement { loss_bonus, reward_bonus };
enum class AwrMode { exponential, filter };

/// Test hooks that replace the SCM-derived weights in the coso arm.
enum class WeightOverride { none, ones, constant_scm };

inline std::string_view to_string(Arm a) {
  switch (a) {
    case Arm::rl: return "rl";
    case Arm::rl_h: return "rl_h";
    case Arm::coso: return "coso";
  }
  return "?";
}

inline Arm arm_from_string(std::string_view s) {
  if (s == "rl") return Arm::rl;
  if (s == "rl_h") return Arm::rl_h;
  if (s == "coso") return Arm::coso;
  throw std::invalid_argument("unknown arm: " + std::string(s));
}

struct Hyperparams {
  double alpha = 1.0;
  double gamma = 0.99;
  double clip_eps = 0.2;
  double gae_lambda = 0.95;
  double awr_beta = 1.0;
  double awr_threshold = 0.0;
  double awr_clamp = 20.0;
  AwrMode awr_mode = AwrMode::exponential;
  double lr_policy = 0.05;
  double lr_value = 0.05;
  double lr_scm = 1e-3;
  std::size_t rollout_steps = 256;
  std::size_t minibatch_size = 64;
  std::size_t scm_steps = 20;
  std::size_t value_steps = 20;
  std::size_t context = 3;
  bool normalize_advantages = false;
  bool scm_persistent_buffer = false;
  std::size_t scm_buffer_capacity = 4096;
  WeightMode weight_mode = WeightMode::maxnorm;
  double weight_floor = 0.01;
  double weight_eps = 1e-6;
  EntropyPlacement placement = EntropyPlacement::loss_bonus;
  OptimizerKind optimizer = OptimizerKind::ppo;

  void validate() const {
    if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0,1)");
    if (!(clip_eps > 0.0)) throw std::invalid_argument("clip epsilon must be > 0");
    if (!(awr_beta > 0.0)) throw std::invalid_argument("AWR temperature must be > 0");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("gae_lambda in [0,1]");
    if (rollout_steps == 0 || minibatch_size == 0) throw std::invalid_argument("empty batch sizes");
    if (!(lr_policy > 0.0 && lr_value > 0.0 && lr_scm > 0.0))
      throw std::invalid_argument("learning rates must be positive");
  }
};

/// sum_i B^i H_i.
inline double weighted_entropy(std::span<const double> entropies, std::span<const double> weights) {
  if (entropies.size() != weights.size())
    throw std::invalid_argument("weighted_entropy: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < entropies.size(); ++i) s += weights[i] * entropies[i];
  return s;
}

/// r + gamma * alpha * H^B(next); terminal steps keep r.
inline double augmented_reward(double r, double next_weighted_entropy, double alpha, double gamma,
                               bool terminal = false) {
  if (terminal) return r;
  return r + gamma * alpha * next_weighted_entropy;
}

/// Upper end of the augmented-reward interval with NULL excluded from the support.
inline double augmented_reward_upper(double r_max, double alpha, double max_weight, std::size_t n,
                                     std::size_t vocab) {
  return r_max + alpha * max_weight * static_cast<double>(n) *
                     std::log(static_cast<double>(vocab - 1));
}

struct StepRecord {
  Transition transition;
  SampledUtterance sample;
  std::size_t action_class = 0;
  CausalWeights weights;
  double weighted_entropy = std::numeric_limits<double>::quiet_NaN();
};

struct Trajectory {
  std::vector<StepRecord> steps;

  double total_reward() const {
    double s = 0.0;
    for (const auto& st : steps) s += st.transition.reward;
    return s;
  }
  bool success() const { return !steps.empty() && steps.back().transition.success; }
};

struct RolloutBuffer {
  std::uint64_t snapshot_version = 0;
  std::vector<Trajectory> trajectories;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& t : trajectories) n += t.steps.size();
    return n;
  }
};

/// Linear state-value over the policy's state one-hot rows.
struct ValueBaseline {
  std::vector<double> weights;
  Adam optimizer;

  ValueBaseline() = default;
  ValueBaseline(std::size_t rows, double lr) : weights(rows, 0.0), optimizer(rows, lr) {}

  double predict(const FeatureLayout& layout, std::span<const int> state) const {
    std::vector<std::size_t> rows;
    layout.state_rows(state, rows);
    double v = 0.0;
    for (auto r : rows) v += weights[r];
    return v;
  }

  /// Full-batch Adam steps on mean squared error. Returns the final MSE.
  double fit(const FeatureLayout& layout, std::span<const std::vector<int>> states,
             std::span<const double> targets, std::size_t steps) {
    std::vector<double> grad(weights.size());
    std::vector<std::size_t> rows;
    double mse = 0.0;
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(1, states.size()));
    for (std::size_t it = 0; it < steps; ++it) {
      std::fill(grad.begin(), grad.end(), 0.0);
      mse = 0.0;
      for (std::size_t k = 0; k < states.size(); ++k) {
        layout.state_rows(states[k], rows);
        double v = 0.0;
        for (auto r : rows) v += weights[r];
        const double e = v - targets[k];
        mse += e * e * inv;
        for (auto r : rows) grad[r] += 2.0 * e * inv;
      }
      optimizer.step(weights, grad);
    }
    return mse;
  }
};

struct Agent {
  PolicyParams policy;
  Adam policy_optimizer;
  ScmParams scm;
  ValueBaseline value;
  std::deque<ScmExample> scm_memory;

  static Agent create(const Environment& env, const Hyperparams& h) {
    Agent a;
    a.policy = PolicyParams::for_env(env, h.context);
    a.policy_optimizer = Adam(a.policy.weights.size(), h.lr_policy);
    a.scm = ScmParams::for_env(env, h.lr_scm);
    a.value = ValueBaseline(a.policy.layout.state_feature_count(), h.lr_value);
    return a;
  }
};

struct UpdateReport {
  std::uint64_t iteration = 0;
  std::uint64_t env_steps = 0;
  std::size_t buffer_steps = 0;
  std::size_t episodes = 0;
  double mean_return = 0.0;
  double rollout_success = 0.0;
  double mean_weighted_entropy = std::numeric_limits<double>::quiet_NaN();
  double mean_entropy = 0.0;
  double policy_loss = 0.0;
  double scm_loss = std::numeric_limits<double>::quiet_NaN();
  double invalid_rate = 0.0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  double first_ratio_deviation = 0.0;
  bool skipped = false;
  std::vector<std::string> events;
};

/// Rollout phase: whole episodes until at least min_steps transitions are stored.
inline RolloutBuffer collect_rollouts(const PolicyParams& policy, const Environment& env,
                                      std::size_t min_steps, Rng& rng) {
  RolloutBuffer buf;
  buf.snapshot_version = policy.version;
  std::size_t steps = 0;
  while (steps < min_steps) {
    Trajectory traj;
    EnvState s = env.reset(rng.next_u64());
    while (!s.done) {
      StepRecord rec;
      rec.sample = sample_utterance(policy, s.features, rng);
      rec.transition = env.step_utterance(s, rec.sample.utterance);
      rec.action_class = env.action_class(parse(env.grammar(), rec.sample.utterance));
      s = rec.transition.next_state;
      traj.steps.push_back(std::move(rec));
      ++steps;
    }
    buf.trajectories.push_back(std::move(traj));
  }
  return buf;
}

/// Counterfactual phase: fills weights and H^B for every stored step.
inline void assign_weights(RolloutBuffer& buf, const ScmParams& scm, Arm arm, const Hyperparams& h,
                           WeightOverride hook = WeightOverride::none,
                           std::size_t* eval_count = nullptr) {
  const NormalizeOptions opt{h.weight_eps, h.weight_floor};
  const ScmParams* source = &scm;
  ScmParams constant;
  if (arm == Arm::coso && hook == WeightOverride::constant_scm) {
    constant = ScmParams(scm.length, scm.vocab, scm.classes, scm.optimizer.lr);
    source = &constant;
  }
  for (auto& traj : buf.trajectories) {
    for (auto& st : traj.steps) {
      const std::size_t n = st.sample.utterance.size();
      if (arm == Arm::coso && hook != WeightOverride::ones) {
        st.weights = normalize_weights(
            causal_weights(*source, st.sample.utterance, st.action_class, eval_count),
            h.weight_mode, opt);
      } else {
        st.weights.raw.assign(n, 1.0);
        st.weights.normalized.assign(n, 1.0);
        st.weights.mode = WeightMode::raw;
      }
      st.weighted_entropy = weighted_entropy(st.sample.per_token_entropy, st.weights.effective());
    }
  }
}

struct AdvantageData {
  std::vector<const StepRecord*> steps;
  std::vector<std::vector<int>> states;
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// GAE over (optionally entropy-augmented) rewards with the linear baseline.
inline AdvantageData compute_advantages(const RolloutBuffer& buf, const PolicyParams& policy,
                                        const ValueBaseline& value, const Hyperparams& h) {
  AdvantageData out;
  const bool bonus = h.placement == EntropyPlacement::reward_bonus && h.alpha > 0.0;
  for (const auto& traj : buf.trajectories) {
    const std::size_t T = traj.steps.size();
    std::vector<double> v(T), adv(T);
    for (std::size_t t = 0; t < T; ++t)
      v[t] = value.predict(policy.layout, traj.steps[t].transition.state.features);
    double gae = 0.0;
    for (std::size_t k = T; k-- > 0;) {
      const auto& st = traj.steps[k];
      const bool terminal = st.transition.done || k + 1 == T;
      double r = st.transition.reward;
      if (bonus && !terminal)
        r = augmented_reward(r, traj.steps[k + 1].weighted_entropy, h.alpha, h.gamma);
      const double next_v = terminal ? 0.0 : v[k + 1];
      const double delta = r + h.gamma * next_v - v[k];
      gae = delta + (terminal ? 0.0 : h.gamma * h.gae_lambda * gae);
      adv[k] = gae;
    }
    for (std::size_t t = 0; t < T; ++t) {
      out.steps.push_back(&traj.steps[t]);
      out.states.push_back(traj.steps[t].transition.state.features);
      out.advantages.push_back(adv[t]);
      out.returns.push_back(adv[t] + v[t]);
    }
  }
  if (h.normalize_advantages && out.advantages.size() > 1) {
    const double n = static_cast<double>(out.advantages.size());
    const double mean = std::accumulate(out.advantages.begin(), out.advantages.end(), 0.0) / n;
    double var = 0.0;
    for (double a : out.advantages) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / n) + 1e-8;
    for (double& a : out.advantages) a = (a - mean) / sd;
  }
  return out;
}

class StaleTrajectoryError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void fill_rollout_stats(const RolloutBuffer& buf, UpdateReport& rep) {
  rep.buffer_steps = buf.size();
  rep.episodes = buf.trajectories.size();
  double ret = 0.0, succ = 0.0, ent = 0.0, went = 0.0, invalid = 0.0;
  bool have_weights = true;
  for (const auto& traj : buf.trajectories) {
    ret += traj.total_reward();
    succ += traj.success() ? 1.0 : 0.0;
    for (const auto& st : traj.steps) {
      ent += st.sample.entropy();
      invalid += st.transition.parse_ok ? 0.0 : 1.0;
      if (std::isnan(st.weighted_entropy)) have_weights = false;
      else went += st.weighted_entropy;
    }
  }
  const double ne = static_cast<double>(std::max<std::size_t>(1, rep.episodes));
  const double ns = static_cast<double>(std::max<std::size_t>(1, rep.buffer_steps));
  rep.mean_return = ret / ne;
  rep.rollout_success = succ / ne;
  rep.mean_entropy = ent / ns;
  rep.invalid_rate = invalid / ns;
  rep.mean_weighted_entropy =
      have_weights ? went / ns : std::numeric_limits<double>::quiet_NaN();
}

/// Shared minibatch loop: coef(k, ratio) returns the log-prob coefficient for item k.
template <class LogprobCoef>
void policy_epoch(Agent& agent, const AdvantageData& data, const Hyperparams& h, Rng& rng,
                  UpdateReport& rep, LogprobCoef&& coef_fn) {
  const bool entropy_in_loss = h.placement == EntropyPlacement::loss_bonus && h.alpha > 0.0;
  std::vector<std::size_t> order(data.steps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  std::vector<double> grad(agent.policy.weights.size());
  std::vector<double> ent_coef;
  double loss_sum = 0.0, norm_sum = 0.0;
  std::size_t batches = 0, clipped = 0;
  for (std::size_t start = 0; start < order.size(); start += h.minibatch_size) {
    const std::size_t end = std::min(order.size(), start + h.minibatch_size);
    const double inv = 1.0 / static_cast<double>(end - start);
    std::fill(grad.begin(), grad.end(), 0.0);
    double objective = 0.0;
    for (std::size_t j = start; j < end; ++j) {
      const std::size_t k = order[j];
      const StepRecord& st = *data.steps[k];
      const auto& y = st.sample.utterance;
      const auto fresh = logprob_and_entropy(agent.policy, data.states[k], y);
      const double ratio = std::exp(fresh.logprob() - st.sample.logprob());
      if (batches == 0)
        rep.first_ratio_deviation = std::max(rep.first_ratio_deviation, std::abs(ratio - 1.0));
      const auto [lp_coef, surrogate, was_clipped] = coef_fn(k, ratio);
      clipped += was_clipped ? 1 : 0;
      objective += surrogate * inv;
      ent_coef.clear();
      if (entropy_in_loss) {
        const auto w = st.weights.effective();
        for (std::size_t i = 0; i < y.size(); ++i) ent_coef.push_back(h.alpha * w[i] * inv);
        objective += h.alpha * weighted_entropy(fresh.per_token_entropy, w) * inv;
      }
      accumulate_gradient(agent.policy, data.states[k], y, lp_coef * inv, ent_coef, grad);
    }
    // Adam descends the loss, i.e. the negated objective.
    for (double& g : grad) g = -g;
    norm_sum += l2_norm(grad);
    loss_sum += -objective;
    agent.policy_optimizer.step(agent.policy.weights, grad);
    ++batches;
  }
  rep.policy_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  rep.grad_norm = batches ? norm_sum / static_cast<double>(batches) : 0.0;
  rep.clip_fraction =
      order.empty() ? 0.0 : static_cast<double>(clipped) / static_cast<double>(order.size());
}

struct CoefResult {
  double lp_coef;
  double surrogate;
  bool clipped;
};

}  // namespace detail

/// One epoch of clipped-surrogate minibatch updates; refits the baseline afterwards.
inline UpdateReport ppo_update(Agent& agent, const RolloutBuffer& buf, const Hyperparams& h,
                               Rng& rng) {
  if (buf.snapshot_version != agent.policy.version)
    throw StaleTrajectoryError("ppo_update: trajectories collected under another snapshot");
  UpdateReport rep;
  detail::fill_rollout_stats(buf, rep);
  auto data = compute_advantages(buf, agent.policy, agent.value, h);
  detail::policy_epoch(agent, data, h, rng, rep, [&](std::size_t k, double ratio) {
    const double a = data.advantages[k];
    const double lo = 1.0 - h.clip_eps, hi = 1.0 + h.clip_eps;
    const double clipped_ratio = std::clamp(ratio, lo, hi);
    const double surrogate = std::min(ratio * a, clipped_ratio * a);
    const bool inactive = (a >= 0.0 && ratio > hi) || (a < 0.0 && ratio < lo);
    return detail::CoefResult{inactive ? 0.0 : ratio * a, surrogate, inactive};
  });
  agent.value.fit(agent.policy.layout, data.states, data.returns, h.value_steps);
  ++agent.policy.version;
  return rep;
}

/// Advantage-weighted log-likelihood (exp weights clamped, or a hard filter).
inline UpdateReport awr_update(Agent& agent, const RolloutBuffer& buf, const Hyperparams& h,
                               Rng& rng) {
  if (buf.snapshot_version != agent.policy.version)
    throw StaleTrajectoryError("awr_update: trajectories collected under another snapshot");
  UpdateReport rep;
  detail::fill_rollout_stats(buf, rep);
  auto data = compute_advantages(buf, agent.policy, agent.value, h);
  std::vector<double> w(data.advantages.size());
  double wsum = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double a = data.advantages[k];
    if (h.awr_mode == AwrMode::filter) {
      w[k] = a > h.awr_threshold ? 1.0 : 0.0;
    } else {
      w[k] = std::clamp(std::exp(a / h.awr_beta), 0.0, h.awr_clamp);
    }
    wsum += w[k];
  }
  if (wsum == 0.0) {
    rep.skipped = true;
    agent.value.fit(agent.policy.layout, data.states, data.returns, h.value_steps);
    return rep;
  }
  detail::policy_epoch(agent, data, h, rng, rep, [&](std::size_t k, double) {
    const double lp = data.steps[k]->sample.logprob();
    return detail::CoefResult{w[k], w[k] * lp, false};
  });
  agent.value.fit(agent.policy.layout, data.states, data.returns, h.value_steps);
  ++agent.policy.version;
  return rep;
}

/// Fits the SCM on the iteration's (y, a) pairs, optionally mixed with a persistent memory.
inline double train_scm(Agent& agent, const RolloutBuffer& buf, const Hyperparams& h) {
  std::vector<ScmExample> batch;
  for (const auto& traj : buf.trajectories)
    for (const auto& st : traj.steps) batch.push_back({st.sample.utterance, st.action_class});
  if (h.scm_persistent_buffer) {
    for (auto& ex : batch) agent.scm_memory.push_back(ex);
    while (agent.scm_memory.size() > h.scm_buffer_capacity) agent.scm_memory.pop_front();
    batch.assign(agent.scm_memory.begin(), agent.scm_memory.end());
  }
  double loss = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t s = 0; s < h.scm_steps; ++s) loss = scm_update(agent.scm, batch);
  return loss;
}

/// One outer iteration: rollout, counterfactual weights, SCM update, policy update.
inline UpdateReport train_iteration(Agent& agent, const Environment& env, const Hyperparams& hyper,
                                    Arm arm, Rng& rng,
                                    WeightOverride hook = WeightOverride::none,
                                    RolloutBuffer* buffer_out = nullptr) {
  hyper.validate();
  Hyperparams h = hyper;
  if (arm == Arm::rl) h.alpha = 0.0;
  if (agent.policy.layout.vocab() != env.vocab().size() ||
      agent.policy.layout.length() != env.utterance_length() ||
      agent.scm.classes != env.action_space().size())
    throw std::invalid_argument("train_iteration: agent and environment dimensions disagree");

  std::vector<std::string> events;
  events.emplace_back("rollout");
  RolloutBuffer buf = collect_rollouts(agent.policy, env, h.rollout_steps, rng);

  events.emplace_back("counterfactual");
  if (arm != Arm::rl) assign_weights(buf, agent.scm, arm, h, hook);

  double scm_loss = std::numeric_limits<double>::quiet_NaN();
  if (arm == Arm::coso) {
    events.emplace_back("scm_update");
    scm_loss = train_scm(agent, buf, h);
    if (!std::isfinite(scm_loss))
      throw std::runtime_error("train_iteration: SCM update failed; policy update aborted");
  }

  events.emplace_back("policy_update");
  UpdateReport rep = h.optimizer == OptimizerKind::ppo ? ppo_update(agent, buf, h, rng)
                                                       : awr_update(agent, buf, h, rng);
  rep.scm_loss = scm_loss;
  rep.events = std::move(events);
  if (buffer_out) *buffer_out = std::move(buf);
  return rep;
}

/// Behavior cloning on rendered utterances of uniformly random legal actions.
/// Teaches the output format without task knowledge.
inline void format_warm_start(PolicyParams& policy, const Environment& env, std::size_t steps,
                              std::size_t batch_size, double lr, Rng& rng) {
  if (steps == 0) return;
  Adam opt(policy.weights.size(), lr);
  std::vector<double> grad(policy.weights.size());
  const auto acts = env.action_space();
  for (std::size_t it = 0; it < steps; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    const double inv = 1.0 / static_cast<double>(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      EnvState s = env.reset(rng.next_u64());
      const std::size_t walk = rng.index(static_cast<std::size_t>(env.horizon()) / 2 + 1);
      for (std::size_t k = 0; k < walk && !s.done; ++k) {
        auto out = env.step(s, acts[rng.index(acts.size())]);
        if (out.done) break;
        s = out.next_state;
      }
      const Utterance y = env.render(acts[rng.index(acts.size())], rng);
      accumulate_gradient(policy, s.features, y, -inv, {}, grad);
    }
    opt.step(policy.weights, grad);
  }
}

}  // namespace coso
